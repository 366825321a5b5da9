#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "cpdefense/data_pipeline.hpp"
#include "cpdefense/defense.hpp"
#include "cpdefense/evaluation.hpp"
#include "cpdefense/model_adapter.hpp"
#include "cpdefense/patch_attack.hpp"
#include "cpdefense/pipeline_config.hpp"

namespace cpd {

// Runs the protocol stage by stage under one output directory. Every stage's artifacts are
// stamped with a fingerprint of their inputs (config section, seeds and upstream artifact
// hashes). A stamped artifact whose fingerprint still matches is reused; a stale one is
// rebuilt, or raises StaleArtifactError when the config is strict.
//
// Layout under `out`:
//   corpus/                   generated desk corpus (desk mode, relative data root)
//   manifest.json
//   model.h5                  trained desk classifier (when no weights are configured)
//   concepts/bank_<c>.h5, concepts/scores_<c>.json
//   attacks/area_<p>pct/      attacks.json + patches.h5
//   report.json, report.txt
//   sweeps/<axis>.json|.csv|.txt
//   figures/defense_grid.png
//   stamps/<stage>            recorded fingerprints
class Pipeline {
 public:
  Pipeline(PipelineConfig config, std::filesystem::path out);

  const PipelineConfig& config() const { return config_; }
  const std::filesystem::path& out() const { return out_; }

  const DatasetManifest& manifest();
  // Hash of the manifest records and image bytes; independent of where the corpus lives.
  const std::string& corpus_fingerprint();
  const std::vector<Image>& split(const std::string& name);
  const ClassifierAdapter& adapter();
  const std::vector<ClassConditionedSet>& class_sets();
  const std::vector<ConceptBank>& banks();
  const ConceptLibrary& library();
  const AttackedSet& attacked_set(std::size_t area_index);
  std::vector<AttackedExample> attacked(std::size_t area_index);
  std::filesystem::path attack_dir(std::size_t area_index) const;

  MaskSet patchcleanser_masks(double area);

  EvaluationReport evaluate();                   // also writes report.json and report.txt
  SweepReport sweep(const std::string& axis);    // "n_percent" or "m"
  std::filesystem::path figures();
  void run_all();

  std::string config_fingerprint() const;

 private:
  struct Stage {
    std::string name;
    std::string key;
    std::vector<std::filesystem::path> artifacts;
  };
  // True when the artifacts exist and carry `key`. Throws StaleArtifactError in strict mode
  // when they exist with another stamp.
  bool reusable(const Stage& stage) const;
  void stamp(const Stage& stage) const;

  std::filesystem::path data_root() const;
  std::string model_fingerprint();
  const std::vector<PreparedImage>& prepared_clean();
  const std::vector<PreparedImage>& prepared_attacked(std::size_t area_index);
  ReportRow ours_row(const DefenseConfig& config);
  nlohmann::json settings() const;

  PipelineConfig config_;
  std::filesystem::path out_;
  std::optional<DatasetManifest> manifest_;
  std::optional<std::string> corpus_fingerprint_;
  std::map<std::string, std::vector<Image>> splits_;
  std::unique_ptr<ClassifierAdapter> adapter_;
  std::optional<std::string> model_fingerprint_;
  std::optional<std::vector<ClassConditionedSet>> class_sets_;
  std::optional<std::vector<ConceptBank>> banks_;
  std::optional<ConceptLibrary> library_;
  std::map<std::size_t, AttackedSet> attacked_;
  std::optional<std::vector<PreparedImage>> prepared_clean_;
  std::map<std::size_t, std::vector<PreparedImage>> prepared_attacked_;
};

}  // namespace cpd
