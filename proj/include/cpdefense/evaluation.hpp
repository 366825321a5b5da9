#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cpdefense/defense.hpp"
#include "cpdefense/model_adapter.hpp"
#include "cpdefense/patch_attack.hpp"
#include "cpdefense/patchcleanser.hpp"

namespace cpd {

// A defended classifier: maps a (possibly patched) image to a label.
class DefenseMethod {
 public:
  virtual ~DefenseMethod() = default;
  virtual std::string name() const = 0;
  virtual ClassId defended_label(const Image& image) const = 0;
};

class UndefendedMethod final : public DefenseMethod {
 public:
  explicit UndefendedMethod(const Classifier& f) : f_(f) {}
  std::string name() const override { return "undefended"; }
  ClassId defended_label(const Image& image) const override { return f_.predict(image).label; }

 private:
  const Classifier& f_;
};

class ConceptBlurMethod final : public DefenseMethod {
 public:
  ConceptBlurMethod(const ClassifierAdapter& adapter, const ConceptLibrary& library, DefenseConfig config)
      : adapter_(adapter), library_(library), config_(config) {}
  std::string name() const override { return "ours"; }
  ClassId defended_label(const Image& image) const override { return defend(adapter_, image, library_, config_).label; }

 private:
  const ClassifierAdapter& adapter_;
  const ConceptLibrary& library_;
  DefenseConfig config_;
};

class PatchCleanserMethod final : public DefenseMethod {
 public:
  PatchCleanserMethod(const Classifier& f, MaskSet masks) : f_(f), masks_(std::move(masks)) {}
  std::string name() const override { return "patchcleanser"; }
  ClassId defended_label(const Image& image) const override { return double_masked_predict(f_, image, masks_); }
  const MaskSet& masks() const { return masks_; }

 private:
  const Classifier& f_;
  MaskSet masks_;
};

struct Ratio {
  std::size_t hits = 0;
  std::size_t total = 0;
  double value() const { return total ? static_cast<double>(hits) / static_cast<double>(total) : 0.0; }
};

struct AttackedExample {
  Image patched;
  ClassId true_label = -1;
};

// Fraction of clean images whose defended label equals f(x). Throws InputError when empty.
Ratio metric_clean(const DefenseMethod& defense, const Classifier& f, const std::vector<Image>& clean);
// Fraction of clean images whose defended label equals the true label.
Ratio metric_ground_truth(const DefenseMethod& defense, const std::vector<Image>& clean);
// Fraction of successfully attacked images whose defended label equals the true label.
Ratio metric_robust(const DefenseMethod& defense, const std::vector<AttackedExample>& attacked);

// Patched images of an attacked set, resolved against the source images by id.
std::vector<AttackedExample> attacked_examples(const AttackedSet& set, const std::vector<Image>& sources);

struct ReportCell {
  double value = 0.0;
  std::size_t hits = 0;
  std::size_t denominator = 0;

  static ReportCell from(const Ratio& r) { return {r.value(), r.hits, r.total}; }
};

struct ReportRow {
  std::string defense;
  ReportCell clean;
  ReportCell clean_ground_truth;
  std::vector<ReportCell> robust;  // aligned with EvaluationReport::areas
};

struct EvaluationReport {
  std::string mode;
  std::vector<double> areas;
  std::vector<ReportRow> rows;
  std::string config_fingerprint;
  std::string corpus_fingerprint;
  nlohmann::json settings;  // hyperparameters behind the rows
  nlohmann::json notes = nlohmann::json::array();

  const ReportRow& row(const std::string& defense) const;
  double mean_robust(const std::string& defense) const;
};

// Column label for an area, e.g. "robust@2%".
std::string area_label(double area);

nlohmann::json to_json(const EvaluationReport& report);
EvaluationReport report_from_json(const nlohmann::json& j);
// Aligned plain-text table.
std::string format_table(const EvaluationReport& report);

struct SweepPoint {
  double setting = 0.0;
  ReportRow row;
};

struct SweepReport {
  std::string axis;  // "n_percent" or "m"
  std::string fixed_name;
  double fixed_value = 0.0;
  std::vector<double> areas;
  std::vector<SweepPoint> points;
};

nlohmann::json to_json(const SweepReport& sweep);
// Columns: setting, clean, robust per area, then denominators.
std::string to_csv(const SweepReport& sweep);
std::string format_table(const SweepReport& sweep);

// Writes `text` to `path`, creating parent directories.
void write_text(const std::filesystem::path& path, const std::string& text);

// Grid figure: one row per example, one column per patch size; each cell shows the patched
// image with the blurred region applied and the selected pixels outlined. Missing cells stay
// blank with a warning. Throws DegenerateInputError when there are no examples.
struct FigureCell {
  Tensor3 defended;
  PixelMask mask;
};
Tensor3 compose_figure(const std::vector<std::vector<std::optional<FigureCell>>>& grid, int cell_size, int gap = 2);

}  // namespace cpd
