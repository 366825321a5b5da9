#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace cpd {

// Two-matrix design on [0,1]^k: rows of A and B come from one 2k-dimensional Sobol
// sequence (first k coordinates to A, last k to B) under a seeded Cranley-Patterson shift.
struct SobolDesign {
  Eigen::MatrixXd A;
  Eigen::MatrixXd B;
};

SobolDesign make_sobol_design(int dimensions, int n_designs, std::uint64_t seed);

struct SobolTotals {
  std::vector<double> totals;  // raw estimates, may be slightly negative or above 1
  double variance = 0.0;
  double mean = 0.0;
  bool zero_variance = false;  // totals are all zero when set
  std::size_t evaluations = 0;
};

using ValueFunction = std::function<double(std::span<const double>)>;

// Jansen total-effect estimator:
//   S_T(j) = mean_i (f(A_i) - f(AB^j_i))^2 / (2 Var[f]),
// where AB^j is A with column j taken from B and Var[f] is the variance of f over the
// rows of A and B. `n_designs` must be a power of two.
SobolTotals sobol_total_indices(const ValueFunction& value_fn, int dimensions, int n_designs, std::uint64_t seed);

// Same estimator on a precomputed design.
SobolTotals sobol_total_indices(const ValueFunction& value_fn, const SobolDesign& design);

}  // namespace cpd
