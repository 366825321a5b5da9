#pragma once

#include <functional>
#include <vector>

#include "cpdefense/model_adapter.hpp"
#include "cpdefense/tensor.hpp"

namespace cpd {

struct MaskRect {
  int top = 0;
  int left = 0;
  int height = 0;
  int width = 0;

  bool contains(int y, int x) const { return y >= top && y < top + height && x >= left && x < left + width; }
};

// How a configured mask count is read: masks per axis (R x R grid) or total masks
// (rounded up to the next square grid).
enum class MaskCountMode { kPerAxis, kTotal };

int masks_per_axis(int count, MaskCountMode mode);

struct MaskSet {
  int height = 0;
  int width = 0;
  int per_axis = 0;
  int est_patch_side = 0;
  int mask_height = 0;
  int mask_width = 0;
  int stride_y = 0;
  int stride_x = 0;
  std::vector<double> fill;  // per channel
  std::vector<MaskRect> masks;
};

// R x R occluders of side stride + est, stride = ceil((side - est) / R); the last mask on
// each axis is shifted inside the image. Any est x est square then lies inside some mask.
MaskSet build_mask_set(int height, int width, int per_axis, int est_patch_side, std::vector<double> fill = {0.5, 0.5, 0.5});

Image apply_masks(const Image& image, const MaskSet& set, int first, int second = -1);

// Two-round agreement rule over n masks. `one(i)` is the label with mask i applied,
// `two(i, j)` the label with masks i and j applied.
ClassId double_masking_decision(int n, const std::function<ClassId(int)>& one,
                                const std::function<ClassId(int, int)>& two);

ClassId double_masked_predict(const Classifier& classifier, const Image& image, const MaskSet& set);

}  // namespace cpd
