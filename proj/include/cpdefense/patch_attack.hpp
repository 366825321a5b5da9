#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cpdefense/model_adapter.hpp"

namespace cpd {

enum class LocationPolicy { kRandom, kFixed };

struct PatchSpec {
  double area = 0.02;  // fraction of the image area
  LocationPolicy location = LocationPolicy::kRandom;
  int fixed_row = 0;
  int fixed_col = 0;
  std::optional<ClassId> target;  // unset: untargeted
  int steps = 250;                // iteration cap
  double step_size = 0.05;
  std::uint64_t seed = 0;
  // Stop once the clean class probability falls to 1 - c (untargeted) or the target's
  // reaches c (targeted); values >= 1 run every step.
  double stop_confidence = 0.9;

  // round(sqrt(area * H * W)).
  int side(int height, int width) const;
  void validate() const;
};

nlohmann::json to_json(const PatchSpec& spec);
PatchSpec patch_spec_from_json(const nlohmann::json& j);

struct PatchResult {
  std::string image_id;
  ClassId true_label = -1;
  ClassId clean_label = -1;  // f(x)
  ClassId patched_label = -1;
  Tensor3 patch;             // side x side x 3
  int row = 0;
  int col = 0;
  int side = 0;
  int steps_taken = 0;
  bool success = false;
};

// Replaces the rectangle at (row, col) with the patch pixels verbatim.
Image apply_patch(const Image& image, const Tensor3& patch, int row, int col);
Image patched_image(const Image& image, const PatchResult& result);

// Signed-gradient optimization of a per-image patch; only patch pixels change and they are
// kept in [0,1]. Placement and initialization are seeded by (spec.seed, image id).
PatchResult optimize_patch(const ClassifierAdapter& adapter, const Image& image, const PatchSpec& spec);

struct AttackedSet {
  PatchSpec spec;
  std::size_t attempted = 0;
  std::size_t skipped_misclassified = 0;  // images f already gets wrong are not attacked
  std::vector<PatchResult> results;       // successful attacks only
};

// Attacks every correctly classified image and keeps the successes. Throws
// DegenerateInputError when nothing succeeds.
AttackedSet build_attacked_set(const ClassifierAdapter& adapter, const std::vector<Image>& images,
                               const PatchSpec& spec);

// Records go to <dir>/attacks.json, patch pixels to <dir>/patches.h5 keyed by image id.
void save_attacked_set(const std::filesystem::path& dir, const AttackedSet& set);
AttackedSet load_attacked_set(const std::filesystem::path& dir);

}  // namespace cpd
