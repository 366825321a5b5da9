#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cpdefense/concept_extraction.hpp"
#include "cpdefense/sobol.hpp"

namespace cpd {

// Non-negative coefficients u minimizing ||a - u^T W|| for a pooled activation vector a.
std::vector<double> recover_coefficients(std::span<const double> pooled_activation, const ConceptBank& bank);

// Coefficients of the image's pooled split-layer activation. The bank must belong to the
// image's predicted class.
std::vector<double> concept_coefficients(const ClassifierAdapter& adapter, const Image& image,
                                         const ConceptBank& bank);

struct ScoringConfig {
  int designs = 2048;  // power of two
  std::uint64_t seed = 0;
  int sample_images = 8;
};

struct ImportanceScores {
  ClassId class_id = -1;
  std::vector<double> raw;      // mean total index per concept
  std::vector<double> clipped;  // raw clipped at zero
  std::vector<int> ranking;     // concept indices, descending by clipped score
  int designs = 0;
  std::uint64_t seed = 0;
  std::vector<std::string> images_used;
  int degenerate_images = 0;

  std::vector<int> top(int m) const;
};

// Descending order of `scores`; equal scores keep ascending concept index.
std::vector<int> rank_descending(const std::vector<double>& scores);

// Class-logit response to masked concept coefficients: the activation sum_j m_j u_j W_j is
// broadcast over the split-layer grid and passed through the head.
ValueFunction masked_concept_value(const ClassifierAdapter& adapter, const ConceptBank& bank,
                                   std::vector<double> coefficients, int activation_height, int activation_width);

ImportanceScores score_concepts(const ClassifierAdapter& adapter, const ConceptBank& bank,
                                const ClassConditionedSet& set, const ScoringConfig& config);

nlohmann::json to_json(const ImportanceScores& scores);
ImportanceScores scores_from_json(const nlohmann::json& j);
void save_scores(const std::filesystem::path& path, const ImportanceScores& scores);
ImportanceScores load_scores(const std::filesystem::path& path);

}  // namespace cpd
