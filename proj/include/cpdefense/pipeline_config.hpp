#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cpdefense/concept_extraction.hpp"
#include "cpdefense/concept_importance.hpp"
#include "cpdefense/data_pipeline.hpp"
#include "cpdefense/defense.hpp"
#include "cpdefense/desk_corpus.hpp"
#include "cpdefense/patch_attack.hpp"
#include "cpdefense/patchcleanser.hpp"
#include "cpdefense/training.hpp"

namespace cpd {

struct DataSection {
  std::string root;                  // relative paths resolve against the output directory
  bool generate = true;              // desk mode: synthesize the corpus when the root is missing
  DeskCorpusConfig corpus;
  IngestConfig ingest;
  std::size_t min_class_set = 32;
};

struct ModelSection {
  std::string backbone = "desk-cnn";  // desk-cnn | resnet50
  std::string weights;                // empty: train a desk model into the output directory
  std::string split_layer;            // empty: last spatial block
  std::vector<int> channels{16, 32, 32, 64, 64};
  int pooled_blocks = 2;
  std::string global_pool = "gmp";  // gmp | gap
  TrainConfig train;
  double sanity_floor = 0.9;
};

struct PatchCleanserSection {
  int masks = 3;
  MaskCountMode count_mode = MaskCountMode::kPerAxis;
  double clean_area = 0.02;  // patch size assumed for the clean column
};

struct SweepSection {
  std::vector<double> n_grid{10, 9, 8, 7, 6, 5, 4, 3, 2, 1};
  int n_sweep_m = 2;
  std::vector<int> m_grid{1, 2, 3, 4, 5};
  double m_sweep_n = 10.0;
};

struct PipelineConfig {
  std::string mode = "desk";  // desk | repro
  std::uint64_t seed = 0;
  DataSection data;
  ModelSection model;
  ConceptExtractionConfig concepts;
  ScoringConfig scoring;
  std::vector<double> areas{0.01, 0.02, 0.03};
  PatchSpec attack;  // area is taken from `areas`
  DefenseConfig defense;
  PatchCleanserSection patchcleanser;
  SweepSection sweep;
  int figure_examples = 3;
  bool strict = false;  // stale artifacts are an error instead of being rebuilt

  // Seeds of individual stages, derived from the global seed.
  std::uint64_t stage_seed(const std::string& stage) const;
};

PipelineConfig default_config(const std::string& mode);

// Missing keys keep the mode's defaults; unknown keys are a ConfigError.
PipelineConfig config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const PipelineConfig& config);
PipelineConfig load_config(const std::filesystem::path& path);

}  // namespace cpd
