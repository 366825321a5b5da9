#include "cpdefense/nnls.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "cpdefense/errors.hpp"

namespace cpd {

NnlsSolver::NnlsSolver(const Eigen::MatrixXd& basis_rows) : basis_(basis_rows), gram_(basis_rows * basis_rows.transpose()) {
  if (basis_.rows() == 0) throw ConfigError("NNLS basis is empty");
}

std::vector<double> NnlsSolver::solve(std::span<const double> target) const {
  const Eigen::Index k = gram_.rows();
  if (static_cast<Eigen::Index>(target.size()) != basis_.cols()) {
    throw InputError("NNLS target length does not match basis dimension");
  }
  const Eigen::Map<const Eigen::VectorXd> a(target.data(), static_cast<Eigen::Index>(target.size()));
  const Eigen::VectorXd b = basis_ * a;
  Eigen::VectorXd x = Eigen::VectorXd::Zero(k);
  std::vector<bool> passive(static_cast<std::size_t>(k), false);
  const double tol = 1e-12 * std::max(1.0, gram_.cwiseAbs().maxCoeff()) * std::max(1.0, b.cwiseAbs().maxCoeff());

  auto solve_passive = [&](Eigen::VectorXd& s) {
    std::vector<Eigen::Index> idx;
    for (Eigen::Index i = 0; i < k; ++i) {
      if (passive[static_cast<std::size_t>(i)]) idx.push_back(i);
    }
    s.setZero(k);
    if (idx.empty()) return;
    const auto n = static_cast<Eigen::Index>(idx.size());
    Eigen::MatrixXd g(n, n);
    Eigen::VectorXd rhs(n);
    for (Eigen::Index r = 0; r < n; ++r) {
      rhs(r) = b(idx[static_cast<std::size_t>(r)]);
      for (Eigen::Index c = 0; c < n; ++c) g(r, c) = gram_(idx[static_cast<std::size_t>(r)], idx[static_cast<std::size_t>(c)]);
    }
    const Eigen::VectorXd sol = g.ldlt().solve(rhs);
    for (Eigen::Index r = 0; r < n; ++r) s(idx[static_cast<std::size_t>(r)]) = sol(r);
  };

  Eigen::VectorXd w = b - gram_ * x;
  Eigen::VectorXd s(k);
  const int max_outer = static_cast<int>(3 * k + 10);
  for (int outer = 0; outer < max_outer; ++outer) {
    Eigen::Index best = -1;
    double best_w = tol;
    for (Eigen::Index i = 0; i < k; ++i) {
      if (!passive[static_cast<std::size_t>(i)] && w(i) > best_w) {
        best_w = w(i);
        best = i;
      }
    }
    if (best < 0) break;
    passive[static_cast<std::size_t>(best)] = true;
    solve_passive(s);
    for (int inner = 0; inner < max_outer; ++inner) {
      double min_s = std::numeric_limits<double>::infinity();
      for (Eigen::Index i = 0; i < k; ++i) {
        if (passive[static_cast<std::size_t>(i)]) min_s = std::min(min_s, s(i));
      }
      if (min_s > 0.0) break;
      double alpha = std::numeric_limits<double>::infinity();
      for (Eigen::Index i = 0; i < k; ++i) {
        if (passive[static_cast<std::size_t>(i)] && s(i) <= 0.0) alpha = std::min(alpha, x(i) / (x(i) - s(i)));
      }
      x += alpha * (s - x);
      for (Eigen::Index i = 0; i < k; ++i) {
        if (passive[static_cast<std::size_t>(i)] && x(i) <= tol) {
          passive[static_cast<std::size_t>(i)] = false;
          x(i) = 0.0;
        }
      }
      solve_passive(s);
    }
    x = s;
    w = b - gram_ * x;
  }
  std::vector<double> out(static_cast<std::size_t>(k));
  for (Eigen::Index i = 0; i < k; ++i) out[static_cast<std::size_t>(i)] = std::max(0.0, x(i));
  return out;
}

}  // namespace cpd
