#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <vector>

namespace cpd {

struct NmfConfig {
  int rank = 10;
  int max_iterations = 200;
  // Stop once the relative error improves by less than this fraction; 0 runs every iteration.
  double tolerance = 1e-5;
  std::uint64_t seed = 0;
};

struct NmfResult {
  Eigen::MatrixXd U;  // N x k, non-negative
  Eigen::MatrixXd W;  // k x C, non-negative, unit-norm rows
  // Relative Frobenius error ||A - UW|| / ||A||, starting with the initial guess.
  std::vector<double> history;
  int iterations = 0;
  double relative_error = 0.0;
};

// Lee-Seung multiplicative updates for A ~ U W under the Frobenius loss. Initial factors
// are seeded uniform-positive and scaled so that mean(UW) matches mean(A).
NmfResult nmf(const Eigen::MatrixXd& A, const NmfConfig& config);

double relative_reconstruction_error(const Eigen::MatrixXd& A, const Eigen::MatrixXd& U, const Eigen::MatrixXd& W);

}  // namespace cpd
