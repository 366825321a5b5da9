#pragma once

#include <Eigen/Dense>

#include <span>
#include <vector>

namespace cpd {

// Non-negative least squares against a fixed basis: for a target a (length C) finds
// u >= 0 minimizing ||a - B^T u||_2, where the rows of B (k x C) are the basis vectors.
// Lawson-Hanson active set on the k x k normal equations; the Gram matrix is
// factored once per basis.
class NnlsSolver {
 public:
  explicit NnlsSolver(const Eigen::MatrixXd& basis_rows);

  std::vector<double> solve(std::span<const double> target) const;
  int rank() const { return static_cast<int>(gram_.rows()); }
  int dimension() const { return static_cast<int>(basis_.cols()); }

 private:
  Eigen::MatrixXd basis_;
  Eigen::MatrixXd gram_;
};

inline std::vector<double> nnls(const Eigen::MatrixXd& basis_rows, std::span<const double> target) {
  return NnlsSolver(basis_rows).solve(target);
}

}  // namespace cpd
