#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cpdefense/model_adapter.hpp"
#include "cpdefense/tensor.hpp"

namespace cpd {

inline constexpr const char* kSplitConceptBuild = "concept-build";
inline constexpr const char* kSplitAttackEval = "attack-eval";
inline constexpr const char* kSplitCleanEval = "clean-eval";

struct PreprocessSpec {
  int image_size = 64;
  std::string resize = "shorter-side-bilinear+center-crop";
  std::vector<double> mean{0.5, 0.5, 0.5};
  std::vector<double> stddev{0.25, 0.25, 0.25};
};

struct SplitRatios {
  double concept_build = 0.6;
  double attack_eval = 0.2;
  double clean_eval = 0.2;
};

struct IngestConfig {
  PreprocessSpec preprocessing;
  SplitRatios ratios;
  std::uint64_t seed = 0;
  std::vector<std::string> classes;  // empty: every subdirectory of the root
  double max_skip_fraction = 0.01;
};

struct ManifestEntry {
  std::string id;
  std::string path;  // relative to the manifest root
  ClassId label = -1;
  std::string split;
};

struct DatasetManifest {
  int version = 1;
  std::string root;
  std::uint64_t seed = 0;
  std::vector<std::string> classes;
  PreprocessSpec preprocessing;
  std::vector<ManifestEntry> entries;

  std::vector<const ManifestEntry*> split(const std::string& name) const;
};

nlohmann::json to_json(const DatasetManifest& manifest);
DatasetManifest manifest_from_json(const nlohmann::json& j);
// Serialized bytes are a pure function of the manifest contents.
std::string serialize_manifest(const DatasetManifest& manifest);
void save_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);
DatasetManifest load_manifest(const std::filesystem::path& path);

DatasetManifest ingest_dataset(const std::filesystem::path& root, const IngestConfig& config);

Image load_entry(const DatasetManifest& manifest, const ManifestEntry& entry);
std::vector<Image> load_split(const DatasetManifest& manifest, const std::string& split);

struct ClassConditionedSet {
  ClassId class_id = -1;
  std::vector<Image> images;
  std::size_t size() const { return images.size(); }
};

// One set per class built from `images`: members are exactly the images the classifier
// assigns to that class. Throws ConfigError naming the first class below `min_size`.
std::vector<ClassConditionedSet> build_class_conditioned_sets(const std::vector<Image>& images,
                                                              const Classifier& classifier, int num_classes,
                                                              std::size_t min_size = 32);
std::vector<ClassConditionedSet> build_class_conditioned_sets(const DatasetManifest& manifest,
                                                              const Classifier& classifier,
                                                              std::size_t min_size = 32);

bool has_image_extension(const std::filesystem::path& p);

}  // namespace cpd
