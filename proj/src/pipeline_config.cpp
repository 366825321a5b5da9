#include "cpdefense/pipeline_config.hpp"

#include <fstream>
#include <set>

#include "cpdefense/errors.hpp"
#include "cpdefense/fingerprint.hpp"

namespace cpd {

std::uint64_t PipelineConfig::stage_seed(const std::string& stage) const { return fnv1a(stage, seed + 1) >> 16; }

PipelineConfig default_config(const std::string& mode) {
  PipelineConfig c;
  if (mode == "desk") {
    c.data.root = "corpus";
    c.model.train.epochs = 24;
  } else if (mode == "repro") {
    c.mode = "repro";
    c.data.root = "imagenette2";
    c.data.generate = false;
    c.data.ingest.preprocessing.image_size = 224;
    c.data.ingest.preprocessing.mean = {0.485, 0.456, 0.406};
    c.data.ingest.preprocessing.stddev = {0.229, 0.224, 0.225};
    c.model.backbone = "resnet50";
    c.model.weights = "resnet50_imagenette.h5";
    c.model.split_layer = "layer4";
    c.model.sanity_floor = 0.99;
    c.patchcleanser.masks = 3;
  } else {
    throw ConfigError("unknown mode '" + mode + "' (desk, repro)");
  }
  return c;
}

namespace {

// Reads known keys from an object and rejects the rest.
class Reader {
 public:
  Reader(const nlohmann::json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + " must be an object");
  }
  ~Reader() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError("unknown config key '" + where_ + "." + key + "'");
    }
  }
  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config key '" + where_ + "." + key + "': " + e.what());
    }
  }
  const nlohmann::json* section(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

 private:
  const nlohmann::json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

}  // namespace

PipelineConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  if (j.contains("mode") && !j.at("mode").is_string()) throw ConfigError("config key 'mode' must be a string");
  const std::string mode = j.value("mode", "desk");
  PipelineConfig c = default_config(mode);
  Reader top(j, "config");
  top.get("mode", c.mode);
  top.get("seed", c.seed);
  top.get("areas", c.areas);
  top.get("figure_examples", c.figure_examples);
  top.get("strict", c.strict);
  if (const auto* s = top.section("data")) {
    Reader r(*s, "data");
    r.get("root", c.data.root);
    r.get("generate", c.data.generate);
    r.get("min_class_set", c.data.min_class_set);
    r.get("classes", c.data.corpus.classes);
    r.get("images_per_class", c.data.corpus.images_per_class);
    r.get("corpus_seed", c.data.corpus.seed);
    r.get("image_size", c.data.ingest.preprocessing.image_size);
    r.get("mean", c.data.ingest.preprocessing.mean);
    r.get("std", c.data.ingest.preprocessing.stddev);
    r.get("max_skip_fraction", c.data.ingest.max_skip_fraction);
    std::vector<double> ratios{c.data.ingest.ratios.concept_build, c.data.ingest.ratios.attack_eval,
                               c.data.ingest.ratios.clean_eval};
    r.get("split_ratios", ratios);
    if (ratios.size() != 3) throw ConfigError("data.split_ratios needs three values");
    c.data.ingest.ratios = {ratios[0], ratios[1], ratios[2]};
  }
  c.data.corpus.image_size = c.data.ingest.preprocessing.image_size;
  if (const auto* s = top.section("model")) {
    Reader r(*s, "model");
    r.get("backbone", c.model.backbone);
    r.get("weights", c.model.weights);
    r.get("split_layer", c.model.split_layer);
    r.get("channels", c.model.channels);
    r.get("pooled_blocks", c.model.pooled_blocks);
    r.get("global_pool", c.model.global_pool);
    r.get("sanity_floor", c.model.sanity_floor);
    if (const auto* t = r.section("train")) {
      Reader tr(*t, "model.train");
      tr.get("epochs", c.model.train.epochs);
      tr.get("batch_size", c.model.train.batch_size);
      tr.get("learning_rate", c.model.train.learning_rate);
      tr.get("weight_decay", c.model.train.weight_decay);
      tr.get("flips", c.model.train.flips);
      tr.get("noise_std", c.model.train.noise_std);
    }
  }
  if (const auto* s = top.section("concepts")) {
    Reader r(*s, "concepts");
    r.get("k", c.concepts.k);
    r.get("crop_size", c.concepts.crops.crop_size);
    r.get("stride", c.concepts.crops.stride);
    r.get("iterations", c.concepts.iterations);
    r.get("tolerance", c.concepts.tolerance);
    r.get("recursion_depth", c.concepts.recursion_depth);
  }
  if (const auto* s = top.section("scoring")) {
    Reader r(*s, "scoring");
    r.get("designs", c.scoring.designs);
    r.get("sample_images", c.scoring.sample_images);
  }
  if (const auto* s = top.section("attack")) {
    Reader r(*s, "attack");
    std::string location = c.attack.location == LocationPolicy::kRandom ? "random" : "fixed";
    r.get("location", location);
    if (location != "random" && location != "fixed") throw ConfigError("attack.location must be random or fixed");
    c.attack.location = location == "random" ? LocationPolicy::kRandom : LocationPolicy::kFixed;
    std::vector<int> loc{c.attack.fixed_row, c.attack.fixed_col};
    r.get("fixed_loc", loc);
    if (loc.size() != 2) throw ConfigError("attack.fixed_loc needs two values");
    c.attack.fixed_row = loc[0];
    c.attack.fixed_col = loc[1];
    r.get("steps", c.attack.steps);
    r.get("step_size", c.attack.step_size);
    r.get("stop_confidence", c.attack.stop_confidence);
    if (const auto* t = r.section("target"); t && !t->is_null()) c.attack.target = t->get<ClassId>();
  }
  if (const auto* s = top.section("defense")) {
    Reader r(*s, "defense");
    r.get("m", c.defense.m);
    r.get("n_percent", c.defense.n_percent);
    r.get("blur_kernel", c.defense.blur_kernel);
    r.get("blur_sigma", c.defense.blur_sigma);
    std::string up = to_string(c.defense.upsampling);
    std::string sel = to_string(c.defense.selection);
    r.get("upsampling", up);
    r.get("selection", sel);
    c.defense.upsampling = parse_upsampling(up);
    c.defense.selection = parse_selection(sel);
  }
  if (const auto* s = top.section("patchcleanser")) {
    Reader r(*s, "patchcleanser");
    r.get("masks", c.patchcleanser.masks);
    std::string mode_name = c.patchcleanser.count_mode == MaskCountMode::kPerAxis ? "per-axis" : "total";
    r.get("count_mode", mode_name);
    if (mode_name != "per-axis" && mode_name != "total") throw ConfigError("patchcleanser.count_mode must be per-axis or total");
    c.patchcleanser.count_mode = mode_name == "per-axis" ? MaskCountMode::kPerAxis : MaskCountMode::kTotal;
    r.get("clean_area", c.patchcleanser.clean_area);
  }
  if (const auto* s = top.section("sweep")) {
    Reader r(*s, "sweep");
    r.get("n_grid", c.sweep.n_grid);
    r.get("n_sweep_m", c.sweep.n_sweep_m);
    r.get("m_grid", c.sweep.m_grid);
    r.get("m_sweep_n", c.sweep.m_sweep_n);
  }
  if (c.mode != "desk" && c.mode != "repro") throw ConfigError("unknown mode '" + c.mode + "'");
  if (c.areas.empty()) throw ConfigError("at least one attack area is required");
  return c;
}

nlohmann::json to_json(const PipelineConfig& c) {
  const auto& p = c.data.ingest.preprocessing;
  const auto& r = c.data.ingest.ratios;
  return {
      {"mode", c.mode},
      {"seed", c.seed},
      {"areas", c.areas},
      {"figure_examples", c.figure_examples},
      {"strict", c.strict},
      {"data",
       {{"root", c.data.root},
        {"generate", c.data.generate},
        {"min_class_set", c.data.min_class_set},
        {"classes", c.data.corpus.classes},
        {"images_per_class", c.data.corpus.images_per_class},
        {"corpus_seed", c.data.corpus.seed},
        {"image_size", p.image_size},
        {"mean", p.mean},
        {"std", p.stddev},
        {"max_skip_fraction", c.data.ingest.max_skip_fraction},
        {"split_ratios", {r.concept_build, r.attack_eval, r.clean_eval}}}},
      {"model",
       {{"backbone", c.model.backbone},
        {"weights", c.model.weights},
        {"split_layer", c.model.split_layer},
        {"channels", c.model.channels},
        {"pooled_blocks", c.model.pooled_blocks},
        {"global_pool", c.model.global_pool},
        {"sanity_floor", c.model.sanity_floor},
        {"train",
         {{"epochs", c.model.train.epochs},
          {"batch_size", c.model.train.batch_size},
          {"learning_rate", c.model.train.learning_rate},
          {"weight_decay", c.model.train.weight_decay},
          {"flips", c.model.train.flips},
          {"noise_std", c.model.train.noise_std}}}}},
      {"concepts",
       {{"k", c.concepts.k},
        {"crop_size", c.concepts.crops.crop_size},
        {"stride", c.concepts.crops.stride},
        {"iterations", c.concepts.iterations},
        {"tolerance", c.concepts.tolerance},
        {"recursion_depth", c.concepts.recursion_depth}}},
      {"scoring", {{"designs", c.scoring.designs}, {"sample_images", c.scoring.sample_images}}},
      {"attack",
       {{"location", c.attack.location == LocationPolicy::kRandom ? "random" : "fixed"},
        {"fixed_loc", {c.attack.fixed_row, c.attack.fixed_col}},
        {"steps", c.attack.steps},
        {"step_size", c.attack.step_size},
        {"stop_confidence", c.attack.stop_confidence},
        {"target", c.attack.target ? nlohmann::json(*c.attack.target) : nlohmann::json(nullptr)}}},
      {"defense",
       {{"m", c.defense.m},
        {"n_percent", c.defense.n_percent},
        {"blur_kernel", c.defense.blur_kernel},
        {"blur_sigma", c.defense.blur_sigma},
        {"upsampling", to_string(c.defense.upsampling)},
        {"selection", to_string(c.defense.selection)}}},
      {"patchcleanser",
       {{"masks", c.patchcleanser.masks},
        {"count_mode", c.patchcleanser.count_mode == MaskCountMode::kPerAxis ? "per-axis" : "total"},
        {"clean_area", c.patchcleanser.clean_area}}},
      {"sweep",
       {{"n_grid", c.sweep.n_grid},
        {"n_sweep_m", c.sweep.n_sweep_m},
        {"m_grid", c.sweep.m_grid},
        {"m_sweep_n", c.sweep.m_sweep_n}}},
  };
}

PipelineConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

}  // namespace cpd
