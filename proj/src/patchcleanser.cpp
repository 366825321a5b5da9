#include "cpdefense/patchcleanser.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "cpdefense/errors.hpp"

namespace cpd {

int masks_per_axis(int count, MaskCountMode mode) {
  if (count < 1) throw ConfigError("mask count must be positive");
  if (mode == MaskCountMode::kPerAxis) return count;
  int r = 1;
  while (r * r < count) ++r;
  return r;
}

namespace {

struct AxisLayout {
  int mask = 0;
  int stride = 0;
  std::vector<int> starts;
};

AxisLayout axis_layout(int length, int per_axis, int est) {
  AxisLayout a;
  if (per_axis == 1) {
    a.mask = length;
    a.starts = {0};
    return a;
  }
  a.stride = (length - est + per_axis - 1) / per_axis;
  a.mask = a.stride + est;
  if (a.mask >= length) {
    throw ConfigError("estimated patch side " + std::to_string(est) + " is too large for " + std::to_string(per_axis) +
                      " masks per axis on a " + std::to_string(length) + " px image");
  }
  for (int i = 0; i < per_axis; ++i) a.starts.push_back(std::min(i * a.stride, length - a.mask));
  return a;
}

}  // namespace

MaskSet build_mask_set(int height, int width, int per_axis, int est_patch_side, std::vector<double> fill) {
  if (per_axis < 1) throw ConfigError("masks per axis must be at least 1");
  if (est_patch_side < 1 || est_patch_side >= std::min(height, width)) {
    throw ConfigError("estimated patch side " + std::to_string(est_patch_side) + " must lie in [1, image side)");
  }
  const AxisLayout ys = axis_layout(height, per_axis, est_patch_side);
  const AxisLayout xs = axis_layout(width, per_axis, est_patch_side);
  MaskSet s;
  s.height = height;
  s.width = width;
  s.per_axis = per_axis;
  s.est_patch_side = est_patch_side;
  s.mask_height = ys.mask;
  s.mask_width = xs.mask;
  s.stride_y = ys.stride;
  s.stride_x = xs.stride;
  s.fill = std::move(fill);
  for (int top : ys.starts)
    for (int left : xs.starts) s.masks.push_back({top, left, ys.mask, xs.mask});
  return s;
}

Image apply_masks(const Image& image, const MaskSet& set, int first, int second) {
  if (image.height() != set.height || image.width() != set.width) throw InputError("mask set does not match image size");
  if (static_cast<int>(set.fill.size()) != image.pixels.channels) throw InputError("mask fill has wrong channel count");
  Image out = image;
  for (int idx : {first, second}) {
    if (idx < 0) continue;
    const MaskRect& r = set.masks.at(static_cast<std::size_t>(idx));
    for (int y = r.top; y < r.top + r.height; ++y)
      for (int x = r.left; x < r.left + r.width; ++x)
        for (int c = 0; c < out.pixels.channels; ++c) out.pixels.at(y, x, c) = set.fill[c];
  }
  return out;
}

ClassId double_masking_decision(int n, const std::function<ClassId(int)>& one,
                                const std::function<ClassId(int, int)>& two) {
  if (n < 1) throw ConfigError("double masking needs at least one mask");
  std::vector<ClassId> first(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) first[i] = one(i);
  if (std::all_of(first.begin(), first.end(), [&](ClassId c) { return c == first.front(); })) return first.front();

  std::map<ClassId, int> votes;
  for (ClassId c : first) ++votes[c];
  ClassId majority = votes.begin()->first;
  for (const auto& [label, count] : votes) {
    if (count > votes[majority]) majority = label;
  }
  for (int i = 0; i < n; ++i) {
    if (first[i] == majority) continue;
    bool unanimous = true;
    for (int j = 0; j < n && unanimous; ++j) {
      if (j != i && two(i, j) != first[i]) unanimous = false;
    }
    if (unanimous) return first[i];
  }
  return majority;
}

ClassId double_masked_predict(const Classifier& classifier, const Image& image, const MaskSet& set) {
  const int n = static_cast<int>(set.masks.size());
  return double_masking_decision(
      n, [&](int i) { return classifier.predict(apply_masks(image, set, i)).label; },
      [&](int i, int j) { return classifier.predict(apply_masks(image, set, i, j)).label; });
}

}  // namespace cpd
