#include "cpdefense/sobol.hpp"

#include <boost/random/sobol.hpp>

#include <cmath>
#include <random>

#include "cpdefense/errors.hpp"

namespace cpd {

SobolDesign make_sobol_design(int dimensions, int n_designs, std::uint64_t seed) {
  if (dimensions < 1) throw ConfigError("Sobol design needs at least one dimension");
  if (n_designs < 2 || (n_designs & (n_designs - 1)) != 0) {
    throw ConfigError("Sobol design size must be a power of two, got " + std::to_string(n_designs));
  }
  const int dim2 = 2 * dimensions;
  boost::random::sobol engine(static_cast<std::size_t>(dim2));
  // Skip the origin, which every unshifted Sobol sequence starts with.
  engine.discard(static_cast<std::uintmax_t>(dim2));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<double> shift(static_cast<std::size_t>(dim2));
  for (double& s : shift) s = unit(rng);

  const double denom = static_cast<double>(engine.max()) + 1.0;
  SobolDesign d;
  d.A.resize(n_designs, dimensions);
  d.B.resize(n_designs, dimensions);
  for (int i = 0; i < n_designs; ++i) {
    for (int j = 0; j < dim2; ++j) {
      double v = static_cast<double>(engine()) / denom + shift[static_cast<std::size_t>(j)];
      v -= std::floor(v);
      if (j < dimensions) {
        d.A(i, j) = v;
      } else {
        d.B(i, j - dimensions) = v;
      }
    }
  }
  return d;
}

SobolTotals sobol_total_indices(const ValueFunction& value_fn, const SobolDesign& design) {
  const Eigen::Index n = design.A.rows();
  const Eigen::Index k = design.A.cols();
  std::vector<double> fa(static_cast<std::size_t>(n));
  std::vector<double> fb(static_cast<std::size_t>(n));
  std::vector<double> row(static_cast<std::size_t>(k));
  auto eval_row = [&](const Eigen::MatrixXd& m, Eigen::Index i) {
    for (Eigen::Index j = 0; j < k; ++j) row[static_cast<std::size_t>(j)] = m(i, j);
    return value_fn(row);
  };
  for (Eigen::Index i = 0; i < n; ++i) {
    fa[static_cast<std::size_t>(i)] = eval_row(design.A, i);
    fb[static_cast<std::size_t>(i)] = eval_row(design.B, i);
  }

  SobolTotals out;
  out.evaluations = static_cast<std::size_t>(2 * n);
  double sum = 0.0;
  for (std::size_t i = 0; i < fa.size(); ++i) sum += fa[i] + fb[i];
  out.mean = sum / static_cast<double>(2 * n);
  double ss = 0.0;
  for (std::size_t i = 0; i < fa.size(); ++i) {
    ss += (fa[i] - out.mean) * (fa[i] - out.mean) + (fb[i] - out.mean) * (fb[i] - out.mean);
  }
  out.variance = ss / static_cast<double>(2 * n);
  out.totals.assign(static_cast<std::size_t>(k), 0.0);
  if (!(out.variance > 1e-14 * std::max(1.0, out.mean * out.mean))) {
    out.zero_variance = true;
    return out;
  }
  for (Eigen::Index j = 0; j < k; ++j) {
    double acc = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index c = 0; c < k; ++c) row[static_cast<std::size_t>(c)] = c == j ? design.B(i, c) : design.A(i, c);
      const double diff = fa[static_cast<std::size_t>(i)] - value_fn(row);
      acc += diff * diff;
    }
    out.totals[static_cast<std::size_t>(j)] = acc / (2.0 * static_cast<double>(n) * out.variance);
  }
  out.evaluations += static_cast<std::size_t>(n * k);
  return out;
}

SobolTotals sobol_total_indices(const ValueFunction& value_fn, int dimensions, int n_designs, std::uint64_t seed) {
  return sobol_total_indices(value_fn, make_sobol_design(dimensions, n_designs, seed));
}

}  // namespace cpd
