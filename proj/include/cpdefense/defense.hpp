#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cpdefense/concept_extraction.hpp"
#include "cpdefense/concept_importance.hpp"

namespace cpd {

enum class Upsampling { kBilinear, kNearest };
enum class MaskSelection { kPerMap, kFused };

Upsampling parse_upsampling(const std::string& name);
MaskSelection parse_selection(const std::string& name);
std::string to_string(Upsampling u);
std::string to_string(MaskSelection s);

struct DefenseConfig {
  int m = 2;
  double n_percent = 5.0;
  // Non-positive values scale 15 px / sigma 7 at 224 px to the image side.
  int blur_kernel = 0;
  double blur_sigma = 0.0;
  Upsampling upsampling = Upsampling::kBilinear;
  MaskSelection selection = MaskSelection::kPerMap;

  // Throws ConfigError unless 0 <= m <= k, 0 <= n_percent <= 100 and the kernel side is odd.
  void validate(int k) const;
  int kernel_for(int image_side) const;
  double sigma_for(int image_side) const;
};

// Single-channel map on the image grid.
struct Heatmap {
  int height = 0;
  int width = 0;
  std::vector<double> values;  // row-major
  int concept_index = -1;
  ClassId class_id = -1;
};

struct PixelMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> selected;  // row-major, 0/1

  PixelMask() = default;
  PixelMask(int h, int w) : height(h), width(w), selected(static_cast<std::size_t>(h) * w, 0) {}
  std::size_t count() const;
  bool operator==(const PixelMask&) const = default;
};

// Per-location NNLS coefficients of an activation tensor against all k concepts:
// k maps of size (H_a, W_a).
std::vector<Heatmap> coefficient_maps(const Tensor3& activation, const ConceptBank& bank);

Heatmap upsample(const Heatmap& map, int height, int width, Upsampling mode);

Heatmap concept_heatmap(const ClassifierAdapter& adapter, const Image& image, const ConceptBank& bank, int j,
                        Upsampling mode = Upsampling::kBilinear);

// Pixels selected for a given percentage: ceil(n/100 * H * W).
std::size_t top_n_count(int height, int width, double n_percent);

// The top_n_count highest values; ties are resolved toward the lower row-major index.
PixelMask top_n_mask(const Heatmap& heatmap, double n_percent);

PixelMask mask_union(const std::vector<PixelMask>& masks);

// Separable Gaussian blur with reflect-101 borders, applied per channel.
Tensor3 gaussian_blur(const Tensor3& image, int kernel, double sigma);

// Masked pixels take the blurred value; the rest are copied unchanged.
Tensor3 blend_masked(const Tensor3& image, const Tensor3& blurred, const PixelMask& mask);

struct DefenseResult {
  Image defended;
  ClassId label = -1;
  ClassId predicted_class = -1;  // f(x), whose concepts were used
  PixelMask mask;
  std::vector<int> concepts;
};

// Banks and scores are looked up by class id.
struct ConceptLibrary {
  std::vector<ConceptBank> banks;
  std::vector<ImportanceScores> scores;

  const ConceptBank& bank(ClassId c) const;
  const ImportanceScores& scores_for(ClassId c) const;
};

// Everything about one image that does not depend on m or n: f(x), the upsampled heatmaps
// of its predicted class's concepts and the fully blurred image. Sweeps over m and n reuse it.
struct PreparedImage {
  Image image;
  ClassId predicted_class = -1;
  std::vector<Heatmap> heatmaps;  // indexed by concept
  Tensor3 blurred;
};

PreparedImage prepare_defense(const ClassifierAdapter& adapter, const Image& image, const ConceptLibrary& library,
                              const DefenseConfig& config);
PixelMask prepared_mask(const PreparedImage& prepared, const ConceptLibrary& library, const DefenseConfig& config,
                        std::vector<int>* concepts = nullptr);
DefenseResult finish_defense(const ClassifierAdapter& adapter, const PreparedImage& prepared,
                             const ConceptLibrary& library, const DefenseConfig& config);

// Region mask used for an image whose prediction is `predicted`.
PixelMask defense_mask(const ClassifierAdapter& adapter, const Image& image, ClassId predicted,
                       const ConceptLibrary& library, const DefenseConfig& config, std::vector<int>* concepts = nullptr);

DefenseResult defend(const ClassifierAdapter& adapter, const Image& image, const ConceptLibrary& library,
                     const DefenseConfig& config);

}  // namespace cpd
