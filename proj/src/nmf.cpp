#include "cpdefense/nmf.hpp"

#include <cmath>
#include <random>

#include "cpdefense/errors.hpp"

namespace cpd {

double relative_reconstruction_error(const Eigen::MatrixXd& A, const Eigen::MatrixXd& U, const Eigen::MatrixXd& W) {
  return (A - U * W).norm() / A.norm();
}

NmfResult nmf(const Eigen::MatrixXd& A, const NmfConfig& config) {
  const Eigen::Index n = A.rows();
  const Eigen::Index c = A.cols();
  const int k = config.rank;
  if (k < 1 || k > std::min(n, c)) {
    throw ConfigError("NMF rank " + std::to_string(k) + " must lie in [1, min(rows, cols)] = [1, " +
                      std::to_string(std::min(n, c)) + "]");
  }
  if ((A.array() < 0.0).any() || !A.allFinite()) throw InputError("NMF input must be finite and non-negative");
  const double norm = A.norm();
  if (norm == 0.0) throw DegenerateInputError("NMF input matrix is all zero");

  std::mt19937_64 rng(config.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double scale = 2.0 * std::sqrt(A.mean() / k);
  NmfResult r;
  r.U.resize(n, k);
  r.W.resize(k, c);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int j = 0; j < k; ++j) r.U(i, j) = scale * (0.01 + 0.99 * unit(rng));
  }
  for (int j = 0; j < k; ++j) {
    for (Eigen::Index i = 0; i < c; ++i) r.W(j, i) = scale * (0.01 + 0.99 * unit(rng));
  }

  constexpr double kTiny = 1e-300;
  r.history.push_back(relative_reconstruction_error(A, r.U, r.W));
  for (int it = 0; it < config.max_iterations; ++it) {
    const Eigen::MatrixXd wn = r.U.transpose() * A;
    const Eigen::MatrixXd wd = (r.U.transpose() * r.U) * r.W;
    r.W.array() *= wn.array() / wd.array().max(kTiny);
    const Eigen::MatrixXd un = A * r.W.transpose();
    const Eigen::MatrixXd ud = r.U * (r.W * r.W.transpose());
    r.U.array() *= un.array() / ud.array().max(kTiny);
    ++r.iterations;
    const double err = relative_reconstruction_error(A, r.U, r.W);
    const double prev = r.history.back();
    r.history.push_back(err);
    if (config.tolerance > 0.0 && prev > 0.0 && (prev - err) / prev < config.tolerance) break;
  }

  for (int j = 0; j < k; ++j) {
    const double len = r.W.row(j).norm();
    if (len == 0.0) {
      throw DegenerateInputError("NMF component " + std::to_string(j) + " collapsed to zero; try another seed or a smaller rank");
    }
    r.W.row(j) /= len;
    r.U.col(j) *= len;
  }
  r.relative_error = relative_reconstruction_error(A, r.U, r.W);
  return r;
}

}  // namespace cpd
