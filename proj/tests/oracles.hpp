#pragma once
// Independent reference computations used only by tests.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

namespace cpd::oracle {

// Projected gradient descent for min ||a - B^T u|| s.t. u >= 0, run to convergence.
inline std::vector<double> nnls_projected_gradient(const Eigen::MatrixXd& basis_rows, const std::vector<double>& a,
                                                   int max_iters = 500000) {
  const Eigen::MatrixXd G = basis_rows * basis_rows.transpose();
  const Eigen::VectorXd b = basis_rows * Eigen::Map<const Eigen::VectorXd>(a.data(), static_cast<Eigen::Index>(a.size()));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(G);
  const double step = 1.0 / es.eigenvalues().maxCoeff();
  Eigen::VectorXd u = Eigen::VectorXd::Zero(G.rows());
  for (int it = 0; it < max_iters; ++it) {
    Eigen::VectorXd next = (u - step * (G * u - b)).cwiseMax(0.0);
    const double change = (next - u).cwiseAbs().maxCoeff();
    u = next;
    if (change < 1e-15) break;
  }
  return {u.data(), u.data() + u.size()};
}

// Indices of the `count` largest values; ties resolved toward the lower index.
inline std::vector<std::size_t> top_indices_by_full_sort(const std::vector<double>& values, std::size_t count) {
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (values[a] != values[b]) return values[a] > values[b];
    return a < b;
  });
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  return idx;
}

// Bilinear sample of a (h x w) grid at output pixel (y, x) of an (H x W) image using
// half-pixel centers with edge clamping, written out directly from the definition.
inline double bilinear_at(const std::vector<double>& grid, int h, int w, int H, int W, int y, int x) {
  const double sy = std::clamp((y + 0.5) * h / H - 0.5, 0.0, static_cast<double>(h - 1));
  const double sx = std::clamp((x + 0.5) * w / W - 0.5, 0.0, static_cast<double>(w - 1));
  const int y0 = static_cast<int>(std::floor(sy));
  const int x0 = static_cast<int>(std::floor(sx));
  const int y1 = std::min(y0 + 1, h - 1);
  const int x1 = std::min(x0 + 1, w - 1);
  const double fy = sy - y0;
  const double fx = sx - x0;
  auto g = [&](int yy, int xx) { return grid[static_cast<std::size_t>(yy * w + xx)]; };
  return (1 - fy) * ((1 - fx) * g(y0, x0) + fx * g(y0, x1)) + fy * ((1 - fx) * g(y1, x0) + fx * g(y1, x1));
}

inline Eigen::MatrixXd random_nonneg(int rows, int cols, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Eigen::MatrixXd m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = u(rng);
  return m;
}

// Two-round double-masking rule evaluated from complete prediction tables: first[i] is the
// label with mask i, second[i][j] the label with masks i and j.
inline int double_masking_by_enumeration(const std::vector<int>& first, const std::vector<std::vector<int>>& second,
                                         int num_classes) {
  const std::size_t n = first.size();
  if (static_cast<std::size_t>(std::count(first.begin(), first.end(), first[0])) == n) return first[0];
  std::vector<int> votes(static_cast<std::size_t>(num_classes), 0);
  for (int c : first) ++votes[static_cast<std::size_t>(c)];
  int majority = 0;
  for (int c = 1; c < num_classes; ++c) {
    if (votes[static_cast<std::size_t>(c)] > votes[static_cast<std::size_t>(majority)]) majority = c;
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (first[i] == majority) continue;
    std::size_t agree = 0;
    for (std::size_t j = 0; j < n; ++j) agree += (j == i || second[i][j] == first[i]) ? 1 : 0;
    if (agree == n) return first[i];
  }
  return majority;
}

// Number of positions where two equally sized buffers differ.
template <typename T>
std::size_t count_differences(const std::vector<T>& a, const std::vector<T>& b) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.size(); ++i) n += a[i] != b[i] ? 1 : 0;
  return n;
}

}  // namespace cpd::oracle
