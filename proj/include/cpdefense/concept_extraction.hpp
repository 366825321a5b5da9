#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cpdefense/data_pipeline.hpp"
#include "cpdefense/model_adapter.hpp"

namespace cpd {

// Square crops on a regular grid. Zero fields take the defaults: crop side = half the
// image side, stride = half the crop side.
struct CropPolicy {
  int crop_size = 0;
  int stride = 0;

  CropPolicy resolved(int image_side) const;
};

struct CropBox {
  int top = 0;
  int left = 0;
  int size = 0;
};

struct Crop {
  std::string image_id;
  CropBox box;
  Image image;  // resized to the classifier input size
};

std::vector<CropBox> crop_grid(int height, int width, const CropPolicy& policy);
std::vector<Crop> make_crops(const ClassConditionedSet& set, const CropPolicy& policy, int output_size);

// Rows are spatially average-pooled split-layer activations of each crop.
struct CropActivationMatrix {
  Eigen::MatrixXd A;  // N_crops x C
  std::vector<std::string> image_ids;
  std::vector<CropBox> boxes;
};

CropActivationMatrix crop_activation_matrix(const ClassifierAdapter& adapter, const std::vector<Crop>& crops);

struct ConceptExtractionConfig {
  int k = 10;
  CropPolicy crops;
  int iterations = 200;
  double tolerance = 1e-5;
  std::uint64_t seed = 0;
  int recursion_depth = 1;  // 0 or 1
};

struct ConceptBankMetadata {
  std::string split_layer;
  CropPolicy crop_policy;
  std::uint64_t seed = 0;
  int iterations = 0;  // configured iteration cap
  double tolerance = 0.0;
  double final_error = 0.0;
  int recursion_depth = 0;
  int n_crops = 0;
};

// k unit-norm, non-negative concept activation vectors for one class.
struct ConceptBank {
  ClassId class_id = -1;
  Eigen::MatrixXd W;               // k x C, one concept per row
  std::vector<double> u_summary;   // total coefficient mass per concept over the crops
  ConceptBankMetadata metadata;

  int k() const { return static_cast<int>(W.rows()); }
  int channels() const { return static_cast<int>(W.cols()); }
};

// Factorizes a crop activation matrix. With recursion depth 1 the matrix is first
// factorized at rank k-1; the concept with the largest total coefficient mass is then
// re-factorized at rank 2 over the crops it dominates, and the two sub-concepts replace it.
ConceptBank factorize_concepts(const CropActivationMatrix& A, ClassId class_id, const std::string& split_layer,
                               const ConceptExtractionConfig& config);

ConceptBank extract_concept_bank(const ClassConditionedSet& set, const ClassifierAdapter& adapter,
                                 const ConceptExtractionConfig& config);

// Configuration that regenerates a bank from its recorded metadata.
ConceptExtractionConfig config_from_metadata(const ConceptBank& bank);

nlohmann::json metadata_json(const ConceptBank& bank);
void save_concept_bank(const std::filesystem::path& path, const ConceptBank& bank);
ConceptBank load_concept_bank(const std::filesystem::path& path);

// Largest pairwise cosine similarity between concept vectors (0 when k < 2).
double max_pairwise_cosine(const Eigen::MatrixXd& W);

}  // namespace cpd
