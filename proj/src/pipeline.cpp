#include "cpdefense/pipeline.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <fstream>
#include <set>

#include "cpdefense/concept_extraction.hpp"
#include "cpdefense/concept_importance.hpp"
#include "cpdefense/desk_corpus.hpp"
#include "cpdefense/errors.hpp"
#include "cpdefense/fingerprint.hpp"
#include "cpdefense/image_io.hpp"
#include "cpdefense/training.hpp"

namespace cpd {

namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

fs::path resolve(const fs::path& out, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : out / path;
}

std::string area_dir(double area) { return fmt::format("area_{}pct", std::lround(area * 100.0)); }

}  // namespace

Pipeline::Pipeline(PipelineConfig config, fs::path out) : config_(std::move(config)), out_(std::move(out)) {
  fs::create_directories(out_);
}

std::string Pipeline::config_fingerprint() const {
  nlohmann::json j = to_json(config_);
  j.erase("strict");
  return fingerprint_json(j);
}

bool Pipeline::reusable(const Stage& stage) const {
  const fs::path stamp_path = out_ / "stamps" / (stage.name + ".fp");
  const bool present = std::all_of(stage.artifacts.begin(), stage.artifacts.end(),
                                   [](const fs::path& p) { return fs::exists(p); });
  if (!present) return false;
  const std::string recorded = fs::exists(stamp_path) ? read_file(stamp_path) : std::string("<none>");
  if (recorded == stage.key) return true;
  if (config_.strict) {
    throw StaleArtifactError(fmt::format("stage '{}' is stale: recorded fingerprint {}, expected {}", stage.name,
                                         recorded, stage.key));
  }
  spdlog::info("stage '{}' is stale; rebuilding", stage.name);
  return false;
}

void Pipeline::stamp(const Stage& stage) const {
  write_text(out_ / "stamps" / (stage.name + ".fp"), stage.key);
}

fs::path Pipeline::data_root() const { return resolve(out_, config_.data.root); }

const DatasetManifest& Pipeline::manifest() {
  if (manifest_) return *manifest_;
  const fs::path root = data_root();
  const bool desk = config_.mode == "desk";
  if (desk && config_.data.generate) {
    nlohmann::json cj = {{"classes", config_.data.corpus.classes},
                         {"images_per_class", config_.data.corpus.images_per_class},
                         {"image_size", config_.data.corpus.image_size},
                         {"seed", config_.data.corpus.seed}};
    const Stage stage{"corpus", fingerprint_json(cj), {root}};
    const bool ours = fs::exists(out_ / "stamps" / "corpus.fp");
    if (fs::exists(root) && !ours) {
      spdlog::info("using existing corpus at {}", root.string());
    } else if (!reusable(stage)) {
      if (fs::exists(root)) fs::remove_all(root);
      const int n = generate_desk_corpus(root, config_.data.corpus);
      spdlog::info("generated desk corpus: {} images", n);
      stamp(stage);
    }
  }
  if (!fs::is_directory(root)) throw ConfigError("data root does not exist: " + root.string());
  IngestConfig ic = config_.data.ingest;
  ic.seed = config_.stage_seed("split");
  if (desk && ic.classes.empty()) ic.classes = config_.data.corpus.classes;
  manifest_ = ingest_dataset(root, ic);
  save_manifest(out_ / "manifest.json", *manifest_);
  spdlog::info("manifest: {} images, {} classes", manifest_->entries.size(), manifest_->classes.size());
  return *manifest_;
}

const std::string& Pipeline::corpus_fingerprint() {
  if (corpus_fingerprint_) return *corpus_fingerprint_;
  const DatasetManifest& m = manifest();
  nlohmann::json j = to_json(m);
  j.erase("root");
  for (auto& e : j["entries"]) e["bytes"] = fingerprint_file(fs::path(m.root) / e.at("path").get<std::string>());
  corpus_fingerprint_ = fingerprint_json(j);
  return *corpus_fingerprint_;
}

const std::vector<Image>& Pipeline::split(const std::string& name) {
  auto it = splits_.find(name);
  if (it == splits_.end()) it = splits_.emplace(name, load_split(manifest(), name)).first;
  return it->second;
}

const ClassifierAdapter& Pipeline::adapter() {
  if (adapter_) return *adapter_;
  fs::path weights;
  if (!config_.model.weights.empty()) {
    weights = resolve(out_, config_.model.weights);
    if (!fs::exists(weights)) throw ConfigError("model weights not found: " + weights.string());
  } else if (config_.model.backbone != "desk-cnn") {
    throw ConfigError("backbone '" + config_.model.backbone + "' needs model.weights; only desk-cnn can be trained here");
  } else {
    weights = out_ / "model.h5";
    nlohmann::json key = to_json(config_)["model"];
    key["corpus"] = corpus_fingerprint();
    key["init_seed"] = config_.stage_seed("init");
    key["train_seed"] = config_.stage_seed("train");
    const Stage stage{"model", fingerprint_json(key), {weights}};
    if (!reusable(stage)) {
      const DatasetManifest& m = manifest();
      nn::Network net = nn::make_desk_cnn(m.classes, config_.model.channels, config_.model.pooled_blocks,
                                          m.preprocessing.image_size, config_.model.global_pool);
      net.normalization = {m.preprocessing.mean, m.preprocessing.stddev};
      nn::initialize(net, static_cast<unsigned>(config_.stage_seed("init")));
      TrainConfig tc = config_.model.train;
      tc.seed = config_.stage_seed("train");
      spdlog::info("training desk classifier for {} epochs", tc.epochs);
      train_classifier(net, split(kSplitConceptBuild), tc);
      net.save(weights);
      stamp(stage);
    }
  }
  adapter_ = std::make_unique<ClassifierAdapter>(
      ClassifierAdapter::load({weights, config_.model.split_layer, config_.model.backbone}));
  const double acc = sanity_accuracy(*adapter_, split(kSplitCleanEval), config_.model.sanity_floor);
  spdlog::info("classifier accuracy on clean-eval: {:.3f} (split after '{}')", acc, adapter_->split_layer());
  return *adapter_;
}

std::string Pipeline::model_fingerprint() {
  if (!model_fingerprint_) {
    const ClassifierAdapter& a = adapter();
    const fs::path weights = config_.model.weights.empty() ? out_ / "model.h5" : resolve(out_, config_.model.weights);
    model_fingerprint_ = fingerprint(fingerprint_file(weights) + "|" + a.split_layer() + "|" + a.backbone());
  }
  return *model_fingerprint_;
}

const std::vector<ClassConditionedSet>& Pipeline::class_sets() {
  if (!class_sets_) {
    class_sets_ = build_class_conditioned_sets(split(kSplitConceptBuild), adapter(), adapter().num_classes(),
                                               config_.data.min_class_set);
  }
  return *class_sets_;
}

const std::vector<ConceptBank>& Pipeline::banks() {
  if (banks_) return *banks_;
  const ClassifierAdapter& a = adapter();
  const nlohmann::json concepts = to_json(config_)["concepts"];
  std::vector<ConceptBank> banks;
  for (int c = 0; c < a.num_classes(); ++c) {
    const fs::path path = out_ / "concepts" / fmt::format("bank_{}.h5", c);
    ConceptExtractionConfig cc = config_.concepts;
    cc.seed = config_.stage_seed(fmt::format("concepts/{}", c));
    const Stage stage{fmt::format("concepts_{}", c),
                      fingerprint_json({{"model", model_fingerprint()},
                                        {"corpus", corpus_fingerprint()},
                                        {"concepts", concepts},
                                        {"min_class_set", config_.data.min_class_set},
                                        {"seed", cc.seed}}),
                      {path}};
    if (!reusable(stage)) {
      const ConceptBank bank = extract_concept_bank(class_sets()[static_cast<std::size_t>(c)], a, cc);
      spdlog::info("class {}: {} concepts, reconstruction error {:.4f}", c, bank.k(), bank.metadata.final_error);
      save_concept_bank(path, bank);
      stamp(stage);
    }
    banks.push_back(load_concept_bank(path));
  }
  banks_ = std::move(banks);
  return *banks_;
}

const ConceptLibrary& Pipeline::library() {
  if (library_) return *library_;
  const ClassifierAdapter& a = adapter();
  const nlohmann::json scoring = to_json(config_)["scoring"];
  ConceptLibrary lib;
  lib.banks = banks();
  for (int c = 0; c < a.num_classes(); ++c) {
    const fs::path bank_path = out_ / "concepts" / fmt::format("bank_{}.h5", c);
    const fs::path path = out_ / "concepts" / fmt::format("scores_{}.json", c);
    ScoringConfig sc = config_.scoring;
    sc.seed = config_.stage_seed(fmt::format("scoring/{}", c));
    const Stage stage{fmt::format("scores_{}", c),
                      fingerprint_json({{"bank", fingerprint_file(bank_path)}, {"scoring", scoring}, {"seed", sc.seed}}),
                      {path}};
    if (!reusable(stage)) {
      save_scores(path, score_concepts(a, lib.banks[static_cast<std::size_t>(c)], class_sets()[static_cast<std::size_t>(c)], sc));
      stamp(stage);
    }
    lib.scores.push_back(load_scores(path));
  }
  library_ = std::move(lib);
  return *library_;
}

const AttackedSet& Pipeline::attacked_set(std::size_t i) {
  if (i >= config_.areas.size()) throw ConfigError("attack area index out of range");
  if (auto it = attacked_.find(i); it != attacked_.end()) return it->second;
  const ClassifierAdapter& a = adapter();
  const double area = config_.areas[i];
  PatchSpec spec = config_.attack;
  spec.area = area;
  spec.seed = config_.stage_seed("attack/" + area_dir(area));
  const fs::path dir = out_ / "attacks" / area_dir(area);
  const Stage stage{"attacks_" + area_dir(area),
                    fingerprint_json({{"model", model_fingerprint()}, {"corpus", corpus_fingerprint()}, {"spec", to_json(spec)}}),
                    {dir / "attacks.json", dir / "patches.h5"}};
  if (!reusable(stage)) {
    save_attacked_set(dir, build_attacked_set(a, split(kSplitAttackEval), spec));
    stamp(stage);
  }
  return attacked_.emplace(i, load_attacked_set(dir)).first->second;
}

std::vector<AttackedExample> Pipeline::attacked(std::size_t i) {
  return attacked_examples(attacked_set(i), split(kSplitAttackEval));
}

fs::path Pipeline::attack_dir(std::size_t i) const { return out_ / "attacks" / area_dir(config_.areas.at(i)); }

MaskSet Pipeline::patchcleanser_masks(double area) {
  const ClassifierAdapter& a = adapter();
  PatchSpec spec;
  spec.area = area;
  const int side = spec.side(a.input_size(), a.input_size());
  const int per_axis = masks_per_axis(config_.patchcleanser.masks, config_.patchcleanser.count_mode);
  return build_mask_set(a.input_size(), a.input_size(), per_axis, side, a.network().normalization.mean);
}

const std::vector<PreparedImage>& Pipeline::prepared_clean() {
  if (!prepared_clean_) {
    std::vector<PreparedImage> v;
    for (const Image& img : split(kSplitCleanEval)) v.push_back(prepare_defense(adapter(), img, library(), config_.defense));
    prepared_clean_ = std::move(v);
  }
  return *prepared_clean_;
}

const std::vector<PreparedImage>& Pipeline::prepared_attacked(std::size_t i) {
  auto it = prepared_attacked_.find(i);
  if (it == prepared_attacked_.end()) {
    std::vector<PreparedImage> v;
    for (const AttackedExample& ex : attacked(i)) {
      Image img = ex.patched;
      img.true_label = ex.true_label;
      v.push_back(prepare_defense(adapter(), img, library(), config_.defense));
    }
    it = prepared_attacked_.emplace(i, std::move(v)).first;
  }
  return it->second;
}

ReportRow Pipeline::ours_row(const DefenseConfig& dc) {
  ReportRow row;
  row.defense = "ours";
  Ratio clean, truth;
  for (const PreparedImage& p : prepared_clean()) {
    const ClassId label = finish_defense(adapter(), p, library(), dc).label;
    clean.hits += label == p.predicted_class;
    truth.hits += label == p.image.true_label;
    ++clean.total;
    ++truth.total;
  }
  row.clean = ReportCell::from(clean);
  row.clean_ground_truth = ReportCell::from(truth);
  for (std::size_t i = 0; i < config_.areas.size(); ++i) {
    Ratio r;
    for (const PreparedImage& p : prepared_attacked(i)) {
      r.hits += finish_defense(adapter(), p, library(), dc).label == p.image.true_label;
      ++r.total;
    }
    row.robust.push_back(ReportCell::from(r));
  }
  return row;
}

nlohmann::json Pipeline::settings() const {
  const nlohmann::json full = to_json(config_);
  const int side = config_.data.ingest.preprocessing.image_size;
  nlohmann::json defense = full["defense"];
  defense["blur_kernel"] = config_.defense.kernel_for(side);
  defense["blur_sigma"] = config_.defense.sigma_for(side);
  nlohmann::json pc = full["patchcleanser"];
  pc["masks_per_axis"] = masks_per_axis(config_.patchcleanser.masks, config_.patchcleanser.count_mode);
  nlohmann::json attack = full["attack"];
  attack["patch_sides"] = nlohmann::json::array();
  for (double area : config_.areas) {
    PatchSpec s;
    s.area = area;
    attack["patch_sides"].push_back(s.side(side, side));
  }
  return {{"defense", defense},
          {"patchcleanser", pc},
          {"attack", attack},
          {"concepts", full["concepts"]},
          {"scoring", full["scoring"]},
          {"model", {{"backbone", config_.model.backbone}, {"split_layer", config_.model.split_layer}}},
          {"image_size", side}};
}

EvaluationReport Pipeline::evaluate() {
  const ClassifierAdapter& f = adapter();
  const std::vector<Image>& clean = split(kSplitCleanEval);
  EvaluationReport report;
  report.mode = config_.mode;
  report.areas = config_.areas;
  report.config_fingerprint = config_fingerprint();
  report.corpus_fingerprint = corpus_fingerprint();
  report.settings = settings();

  std::vector<std::vector<AttackedExample>> attacked_sets;
  for (std::size_t i = 0; i < config_.areas.size(); ++i) attacked_sets.push_back(attacked(i));

  const UndefendedMethod undefended(f);
  ReportRow u;
  u.defense = undefended.name();
  u.clean = ReportCell::from(metric_clean(undefended, f, clean));
  u.clean_ground_truth = ReportCell::from(metric_ground_truth(undefended, clean));
  for (const auto& set : attacked_sets) u.robust.push_back(ReportCell::from(metric_robust(undefended, set)));
  report.rows.push_back(u);
  spdlog::info("evaluated undefended");

  const PatchCleanserMethod pc_clean(f, patchcleanser_masks(config_.patchcleanser.clean_area));
  ReportRow pc;
  pc.defense = pc_clean.name();
  pc.clean = ReportCell::from(metric_clean(pc_clean, f, clean));
  pc.clean_ground_truth = ReportCell::from(metric_ground_truth(pc_clean, clean));
  for (std::size_t i = 0; i < config_.areas.size(); ++i) {
    const PatchCleanserMethod method(f, patchcleanser_masks(config_.areas[i]));
    pc.robust.push_back(ReportCell::from(metric_robust(method, attacked_sets[i])));
  }
  report.rows.push_back(pc);
  spdlog::info("evaluated patchcleanser");

  report.rows.push_back(ours_row(config_.defense));
  spdlog::info("evaluated concept blur");

  for (const ReportRow& row : report.rows) {
    for (std::size_t i = 0; i < config_.areas.size(); ++i) {
      if (row.robust[i].denominator != attacked_set(i).results.size()) {
        throw InputError(fmt::format("{}: robust denominator {} disagrees with the attacked set size {}", row.defense,
                                     row.robust[i].denominator, attacked_set(i).results.size()));
      }
    }
  }
  for (std::size_t i = 0; i < config_.areas.size(); ++i) {
    const AttackedSet& s = attacked_set(i);
    report.notes.push_back(fmt::format("{}: {} of {} attacked images flipped ({} misclassified images not attacked)",
                                       area_label(config_.areas[i]), s.results.size(), s.attempted,
                                       s.skipped_misclassified));
  }
  write_text(out_ / "report.json", to_json(report).dump(2) + "\n");
  write_text(out_ / "report.txt", format_table(report));
  return report;
}

SweepReport Pipeline::sweep(const std::string& axis) {
  SweepReport s;
  s.axis = axis;
  s.areas = config_.areas;
  DefenseConfig dc = config_.defense;
  std::vector<double> grid;
  if (axis == "n_percent") {
    s.fixed_name = "m";
    s.fixed_value = config_.sweep.n_sweep_m;
    dc.m = config_.sweep.n_sweep_m;
    grid = config_.sweep.n_grid;
  } else if (axis == "m") {
    s.fixed_name = "n_percent";
    s.fixed_value = config_.sweep.m_sweep_n;
    dc.n_percent = config_.sweep.m_sweep_n;
    for (int m : config_.sweep.m_grid) grid.push_back(m);
  } else {
    throw ConfigError("unknown sweep axis '" + axis + "' (n_percent, m)");
  }
  if (grid.empty()) throw ConfigError("sweep grid for '" + axis + "' is empty");
  for (double v : grid) {
    if (axis == "m") {
      dc.m = static_cast<int>(v);
    } else {
      dc.n_percent = v;
    }
    s.points.push_back({v, ours_row(dc)});
    spdlog::info("sweep {} = {}: done", axis, v);
  }
  const fs::path dir = out_ / "sweeps";
  write_text(dir / (axis + ".json"), to_json(s).dump(2) + "\n");
  write_text(dir / (axis + ".csv"), to_csv(s));
  write_text(dir / (axis + ".txt"), format_table(s));
  return s;
}

fs::path Pipeline::figures() {
  const std::vector<Image>& sources = split(kSplitAttackEval);
  std::map<std::string, std::map<std::size_t, std::size_t>> where;  // id -> area -> position
  for (std::size_t i = 0; i < config_.areas.size(); ++i) {
    const auto& results = attacked_set(i).results;
    for (std::size_t k = 0; k < results.size(); ++k) where[results[k].image_id][i] = k;
  }
  std::vector<std::string> ids;
  for (const Image& img : sources) {
    if (where.count(img.id)) ids.push_back(img.id);
  }
  std::stable_sort(ids.begin(), ids.end(),
                   [&](const std::string& a, const std::string& b) { return where[a].size() > where[b].size(); });
  ids.resize(std::min<std::size_t>(ids.size(), static_cast<std::size_t>(std::max(0, config_.figure_examples))));
  if (ids.empty()) throw DegenerateInputError("no attacked examples to draw");

  std::vector<std::vector<std::optional<FigureCell>>> grid;
  for (const std::string& id : ids) {
    std::vector<std::optional<FigureCell>> row(config_.areas.size());
    for (const auto& [i, k] : where[id]) {
      const DefenseResult r = finish_defense(adapter(), prepared_attacked(i)[k], library(), config_.defense);
      row[i] = FigureCell{r.defended.pixels, r.mask};
    }
    grid.push_back(std::move(row));
  }
  const fs::path path = out_ / "figures" / "defense_grid.png";
  fs::create_directories(path.parent_path());
  write_png(path, compose_figure(grid, adapter().input_size()));
  return path;
}

void Pipeline::run_all() {
  const EvaluationReport report = evaluate();
  spdlog::info("\n{}", format_table(report));
  sweep("n_percent");
  sweep("m");
  figures();
}

}  // namespace cpd
