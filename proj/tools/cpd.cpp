// cpd: command-line front end for the concept-blur patch defense.

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cstdlib>
#include <iostream>

#include "cpdefense/data_pipeline.hpp"
#include "cpdefense/defense.hpp"
#include "cpdefense/desk_corpus.hpp"
#include "cpdefense/errors.hpp"
#include "cpdefense/evaluation.hpp"
#include "cpdefense/image_io.hpp"
#include "cpdefense/patchcleanser.hpp"
#include "cpdefense/pipeline.hpp"

namespace fs = std::filesystem;
using namespace cpd;

namespace {

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string mode;
  std::string out = "cpd_out";
  bool strict = false;
  bool quiet = false;
};

struct Overrides {
  std::optional<int> k, designs, steps, m, masks_per_axis;
  std::optional<double> area, n_percent;
  std::string split_layer, weights, export_dir;
};

void apply(const Overrides& o, PipelineConfig& c) {
  if (o.k) c.concepts.k = *o.k;
  if (o.designs) c.scoring.designs = *o.designs;
  if (o.steps) c.attack.steps = *o.steps;
  if (o.area) c.areas = {*o.area};
  if (o.m) c.defense.m = *o.m;
  if (o.n_percent) c.defense.n_percent = *o.n_percent;
  if (o.masks_per_axis) {
    c.patchcleanser.masks = *o.masks_per_axis;
    c.patchcleanser.count_mode = MaskCountMode::kPerAxis;
  }
  if (!o.split_layer.empty()) c.model.split_layer = o.split_layer;
  if (!o.weights.empty()) c.model.weights = fs::absolute(o.weights).string();
}

void export_files(const std::vector<fs::path>& files, const fs::path& dir) {
  fs::create_directories(dir);
  for (const fs::path& f : files) {
    if (fs::is_directory(f)) {
      fs::copy(f, dir / f.filename(), fs::copy_options::recursive | fs::copy_options::overwrite_existing);
    } else {
      fs::copy_file(f, dir / f.filename(), fs::copy_options::overwrite_existing);
    }
  }
  fmt::print("exported {} artifacts to {}\n", files.size(), dir.string());
}

Tensor3 mask_image(const PixelMask& mask) {
  Tensor3 t(mask.height, mask.width, 3);
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x)
      for (int c = 0; c < 3; ++c) t.at(y, x, c) = mask.selected[static_cast<std::size_t>(y) * mask.width + x];
  return t;
}

std::vector<fs::path> image_files(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && has_image_extension(e.path())) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw InputError("no images in " + dir.string());
  return files;
}

PipelineConfig resolve_config(const Globals& g) {
  PipelineConfig c = g.config_path.empty() ? default_config(g.mode.empty() ? "desk" : g.mode) : load_config(g.config_path);
  if (!g.mode.empty() && g.mode != c.mode) {
    throw ConfigError("--mode " + g.mode + " disagrees with the config file's mode '" + c.mode + "'");
  }
  if (g.seed) c.seed = *g.seed;
  if (g.strict) c.strict = true;
  return c;
}

Image load_image(const fs::path& path, int size) {
  auto pixels = read_rgb(path);
  if (!pixels) throw InputError("cannot decode image " + path.string());
  Image img;
  img.id = path.stem().string();
  img.pixels = resize_and_center_crop(*pixels, size);
  return img;
}

int exit_code(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const InputError*>(&e)) return 3;
  if (dynamic_cast<const DegenerateInputError*>(&e)) return 4;
  if (dynamic_cast<const UnsupportedError*>(&e)) return 5;
  if (dynamic_cast<const StaleArtifactError*>(&e)) return 6;
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Concept-based adversarial patch defense: build concepts, attack, defend, evaluate"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "JSON config file")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Global seed (overrides the config)");
  app.add_option("--mode", g.mode, "desk or repro")->check(CLI::IsMember({"desk", "repro"}));
  app.add_option("--out", g.out, "Output directory for artifacts and reports");
  app.add_flag("--strict", g.strict, "Fail on stale cached artifacts instead of rebuilding them");
  app.add_flag("-q,--quiet", g.quiet, "Only log warnings and errors");

  std::string corpus_dir;
  auto* make_corpus = app.add_subcommand("make-desk-corpus", "Render the procedural desk corpus");
  make_corpus->add_option("--dir", corpus_dir, "Target directory (default: the configured data root)");

  std::string ingest_root, ingest_out = "manifest.json";
  std::optional<std::uint64_t> ingest_seed;
  std::optional<int> ingest_size;
  auto* ingest = app.add_subcommand("ingest", "Write a split manifest for an image-folder dataset");
  ingest->add_option("--root", ingest_root, "Dataset root with one directory per class")->required();
  ingest->add_option("--out", ingest_out, "Manifest path");
  ingest->add_option("--seed", ingest_seed, "Split seed");
  ingest->add_option("--image-size", ingest_size, "Square model input side");

  // Per-verb overrides of the config; --out on a verb exports that stage's artifacts.
  Overrides o;
  auto* train = app.add_subcommand("train-desk-model", "Train (or reuse) the desk classifier");
  auto* extract = app.add_subcommand("extract-concepts", "Build one concept bank per class");
  extract->add_option("--k", o.k, "Concepts per class");
  extract->add_option("--split-layer", o.split_layer, "Backbone block whose output is factorized");
  auto* score = app.add_subcommand("score-concepts", "Rank each bank's concepts by total Sobol index");
  score->add_option("--designs", o.designs, "Sobol designs per image");
  auto* attack = app.add_subcommand("attack", "Build the attacked sets for every configured area");
  attack->add_option("--area", o.area, "Attack only this area fraction");
  attack->add_option("--steps", o.steps, "Optimization steps per image");
  for (CLI::App* cmd : {extract, score, attack}) {
    cmd->add_option("--model", o.weights, "Classifier weights (default: the configured model)");
    cmd->add_option("--out", o.export_dir, "Also copy the stage's artifacts into this directory");
  }

  std::string image_path, output_path, in_dir, out_dir, report_path;
  bool emit_masks = false;
  double pc_area = 0.0;
  int pc_side = 0;
  auto* defend_cmd = app.add_subcommand("defend", "Apply the concept-blur defense to an image or a directory");
  defend_cmd->add_option("--m", o.m, "Concept heatmaps per image");
  defend_cmd->add_option("--n", o.n_percent, "Percent of pixels blurred per heatmap");
  auto* defend_image = defend_cmd->add_option("--image", image_path, "Input image")->check(CLI::ExistingFile);
  defend_cmd->add_option("--output", output_path, "Where to write the defended image");
  defend_cmd->add_option("--in", in_dir, "Directory of input images")->check(CLI::ExistingDirectory)->excludes(defend_image);
  defend_cmd->add_option("--out", out_dir, "Directory for defended images");
  defend_cmd->add_flag("--emit-masks", emit_masks, "Also write the blur masks next to the defended images");
  auto* pc_cmd = app.add_subcommand("baseline-pc", "Classify images with double-masking PatchCleanser");
  auto* pc_image = pc_cmd->add_option("--image", image_path, "Input image")->check(CLI::ExistingFile);
  pc_cmd->add_option("--in", in_dir, "Directory of input images")->check(CLI::ExistingDirectory)->excludes(pc_image);
  pc_cmd->add_option("--area", pc_area, "Assumed patch area fraction (default: the configured clean area)");
  auto* pc_side_opt = pc_cmd->add_option("--patch-side", pc_side, "Assumed patch side in pixels");
  pc_side_opt->check(CLI::PositiveNumber);
  pc_cmd->add_option("--masks-per-axis", o.masks_per_axis, "Mask positions per axis");
  pc_cmd->add_option("--report", report_path, "Write per-image predictions as JSON");
  for (CLI::App* cmd : {defend_cmd, pc_cmd}) cmd->add_option("--model", o.weights, "Classifier weights");

  auto* evaluate = app.add_subcommand("evaluate", "Compare undefended, PatchCleanser and ours");
  std::string axis = "both";
  auto* sweep = app.add_subcommand("sweep", "Sweep n (top-n%) or m (concept count)");
  sweep->add_option("--axis", axis, "n_percent, m or both")->check(CLI::IsMember({"n_percent", "m", "both"}));
  auto* figures = app.add_subcommand("figures", "Render the defense grid figure");
  auto* run = app.add_subcommand("run", "Every stage: evaluate, both sweeps and figures");
  auto* show = app.add_subcommand("show-config", "Print the resolved configuration");

  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(g.quiet ? spdlog::level::warn : spdlog::level::info);

  try {
    if (ingest->parsed()) {
      PipelineConfig c = resolve_config(g);
      IngestConfig ic = c.data.ingest;
      ic.seed = ingest_seed.value_or(c.stage_seed("split"));
      if (ingest_size) ic.preprocessing.image_size = *ingest_size;
      const DatasetManifest m = ingest_dataset(ingest_root, ic);
      save_manifest(ingest_out, m);
      fmt::print("{} images, {} classes -> {}\n", m.entries.size(), m.classes.size(), ingest_out);
      return 0;
    }
    PipelineConfig config = resolve_config(g);
    apply(o, config);
    if (show->parsed()) {
      fmt::print("{}\n", to_json(config).dump(2));
      return 0;
    }
    if (make_corpus->parsed()) {
      const fs::path dir = corpus_dir.empty() ? fs::path(g.out) / config.data.root : fs::path(corpus_dir);
      fmt::print("{} images -> {}\n", generate_desk_corpus(dir, config.data.corpus), dir.string());
      return 0;
    }
    Pipeline p(config, g.out);
    if (train->parsed()) {
      const auto& a = p.adapter();
      fmt::print("classifier ready: {} classes, split after '{}'\n", a.num_classes(), a.split_layer());
    } else if (extract->parsed()) {
      std::vector<fs::path> files;
      for (const auto& b : p.banks()) {
        fmt::print("class {}: k={} error={:.4f}\n", b.class_id, b.k(), b.metadata.final_error);
        files.push_back(p.out() / "concepts" / fmt::format("bank_{}.h5", b.class_id));
      }
      if (!o.export_dir.empty()) export_files(files, o.export_dir);
    } else if (score->parsed()) {
      std::vector<fs::path> files;
      for (const auto& s : p.library().scores) {
        fmt::print("class {}: ranking {}\n", s.class_id, fmt::join(s.ranking, " "));
        files.push_back(p.out() / "concepts" / fmt::format("scores_{}.json", s.class_id));
      }
      if (!o.export_dir.empty()) export_files(files, o.export_dir);
    } else if (attack->parsed()) {
      std::vector<fs::path> files;
      for (std::size_t i = 0; i < config.areas.size(); ++i) {
        const auto& s = p.attacked_set(i);
        fmt::print("{}: {}/{} flipped\n", area_label(config.areas[i]), s.results.size(), s.attempted);
        files.push_back(p.attack_dir(i));
      }
      if (!o.export_dir.empty()) export_files(files, o.export_dir);
    } else if (defend_cmd->parsed()) {
      const auto& a = p.adapter();
      if (image_path.empty() == in_dir.empty()) throw ConfigError("defend needs exactly one of --image or --in");
      const std::vector<fs::path> inputs = in_dir.empty() ? std::vector<fs::path>{image_path} : image_files(in_dir);
      if (!out_dir.empty()) fs::create_directories(out_dir);
      for (const fs::path& path : inputs) {
        const DefenseResult r = defend(a, load_image(path, a.input_size()), p.library(), config.defense);
        fmt::print("{}: prediction {} -> defended {} ({} pixels blurred, concepts {})\n", path.filename().string(),
                   r.predicted_class, r.label, r.mask.count(), fmt::join(r.concepts, " "));
        if (!output_path.empty() && inputs.size() == 1) write_png(output_path, r.defended.pixels);
        if (!out_dir.empty()) {
          write_png(fs::path(out_dir) / (path.stem().string() + ".png"), r.defended.pixels);
          if (emit_masks) write_png(fs::path(out_dir) / (path.stem().string() + "_mask.png"), mask_image(r.mask));
        }
      }
    } else if (pc_cmd->parsed()) {
      const auto& a = p.adapter();
      if (image_path.empty() == in_dir.empty()) throw ConfigError("baseline-pc needs exactly one of --image or --in");
      MaskSet masks;
      if (pc_side > 0) {
        masks = build_mask_set(a.input_size(), a.input_size(),
                               masks_per_axis(config.patchcleanser.masks, config.patchcleanser.count_mode), pc_side,
                               a.network().normalization.mean);
      } else {
        masks = p.patchcleanser_masks(pc_area > 0 ? pc_area : config.patchcleanser.clean_area);
      }
      const std::vector<fs::path> inputs = in_dir.empty() ? std::vector<fs::path>{image_path} : image_files(in_dir);
      nlohmann::json records = nlohmann::json::array();
      for (const fs::path& path : inputs) {
        const Image img = load_image(path, a.input_size());
        const ClassId plain = a.predict(img).label;
        const ClassId masked = double_masked_predict(a, img, masks);
        fmt::print("{}: prediction {} -> double-masked {}\n", path.filename().string(), plain, masked);
        records.push_back({{"image", path.filename().string()}, {"prediction", plain}, {"double_masked", masked}});
      }
      if (!report_path.empty()) {
        write_text(report_path, nlohmann::json{{"masks_per_axis", masks.per_axis},
                                               {"est_patch_side", masks.est_patch_side},
                                               {"images", records}}.dump(2));
      }
    } else if (evaluate->parsed()) {
      fmt::print("{}", format_table(p.evaluate()));
    } else if (sweep->parsed()) {
      for (const std::string ax : {"n_percent", "m"}) {
        if (axis == ax || axis == "both") fmt::print("{}\n", format_table(p.sweep(ax)));
      }
    } else if (figures->parsed()) {
      fmt::print("{}\n", p.figures().string());
    } else if (run->parsed()) {
      p.run_all();
      fmt::print("reports written to {}\n", p.out().string());
    }
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return exit_code(e);
  }
  return 0;
}
