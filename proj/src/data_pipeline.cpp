#include "cpdefense/data_pipeline.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "cpdefense/errors.hpp"
#include "cpdefense/image_io.hpp"

namespace cpd {

bool has_image_extension(const std::filesystem::path& p) {
  static const std::set<std::string> exts{".png", ".jpg", ".jpeg", ".ppm", ".bmp", ".JPEG", ".JPG", ".PNG"};
  return exts.count(p.extension().string()) > 0;
}

namespace {

// Fisher-Yates with a fixed engine so split assignment does not depend on the
// standard library's distribution implementations.
void seeded_shuffle(std::vector<std::size_t>& v, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace

std::vector<const ManifestEntry*> DatasetManifest::split(const std::string& name) const {
  std::vector<const ManifestEntry*> out;
  for (const auto& e : entries) {
    if (e.split == name) out.push_back(&e);
  }
  return out;
}

nlohmann::json to_json(const DatasetManifest& m) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : m.entries) {
    entries.push_back({{"id", e.id}, {"path", e.path}, {"label", e.label}, {"split", e.split}});
  }
  return {{"version", m.version},
          {"root", m.root},
          {"seed", m.seed},
          {"classes", m.classes},
          {"preprocessing",
           {{"image_size", m.preprocessing.image_size},
            {"resize", m.preprocessing.resize},
            {"mean", m.preprocessing.mean},
            {"std", m.preprocessing.stddev}}},
          {"entries", entries}};
}

DatasetManifest manifest_from_json(const nlohmann::json& j) {
  DatasetManifest m;
  m.version = j.at("version");
  m.root = j.at("root");
  m.seed = j.at("seed");
  m.classes = j.at("classes").get<std::vector<std::string>>();
  const auto& p = j.at("preprocessing");
  m.preprocessing.image_size = p.at("image_size");
  m.preprocessing.resize = p.at("resize");
  m.preprocessing.mean = p.at("mean").get<std::vector<double>>();
  m.preprocessing.stddev = p.at("std").get<std::vector<double>>();
  for (const auto& e : j.at("entries")) {
    m.entries.push_back({e.at("id"), e.at("path"), e.at("label"), e.at("split")});
  }
  return m;
}

std::string serialize_manifest(const DatasetManifest& manifest) { return to_json(manifest).dump(2) + "\n"; }

void save_manifest(const std::filesystem::path& path, const DatasetManifest& manifest) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write manifest " + path.string());
  out << serialize_manifest(manifest);
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read manifest " + path.string());
  return manifest_from_json(nlohmann::json::parse(in));
}

DatasetManifest ingest_dataset(const std::filesystem::path& root, const IngestConfig& config) {
  if (!std::filesystem::is_directory(root)) throw ConfigError("dataset root is not a directory: " + root.string());
  const SplitRatios& r = config.ratios;
  if (r.concept_build < 0 || r.attack_eval < 0 || r.clean_eval < 0 ||
      std::abs(r.concept_build + r.attack_eval + r.clean_eval - 1.0) > 1e-9) {
    throw ConfigError("split ratios must be non-negative and sum to 1");
  }

  std::vector<std::string> classes = config.classes;
  if (classes.empty()) {
    for (const auto& d : std::filesystem::directory_iterator(root)) {
      if (d.is_directory()) classes.push_back(d.path().filename().string());
    }
    std::sort(classes.begin(), classes.end());
  }
  if (classes.empty()) throw ConfigError("dataset root has no class directories: " + root.string());
  for (const auto& c : classes) {
    if (!std::filesystem::is_directory(root / c)) throw ConfigError("missing class directory: " + (root / c).string());
  }

  DatasetManifest m;
  m.root = root.string();
  m.seed = config.seed;
  m.classes = classes;
  m.preprocessing = config.preprocessing;

  std::size_t total = 0;
  std::size_t skipped = 0;
  for (std::size_t ci = 0; ci < classes.size(); ++ci) {
    std::vector<std::filesystem::path> files;
    for (const auto& f : std::filesystem::directory_iterator(root / classes[ci])) {
      if (f.is_regular_file() && has_image_extension(f.path())) files.push_back(f.path());
    }
    std::sort(files.begin(), files.end());
    std::vector<ManifestEntry> kept;
    for (const auto& f : files) {
      ++total;
      if (!read_rgb(f)) {
        spdlog::warn("skipping undecodable image {}", f.string());
        ++skipped;
        continue;
      }
      const std::string rel = std::filesystem::relative(f, root).generic_string();
      kept.push_back({classes[ci] + "/" + f.stem().string(), rel, static_cast<ClassId>(ci), ""});
    }
    std::vector<std::size_t> order(kept.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    seeded_shuffle(order, config.seed * 0x9E3779B97F4A7C15ULL + ci);
    const auto n = static_cast<double>(kept.size());
    const std::size_t n_build = static_cast<std::size_t>(std::llround(n * r.concept_build));
    const std::size_t n_attack =
        std::min(kept.size() - n_build, static_cast<std::size_t>(std::llround(n * r.attack_eval)));
    for (std::size_t rank = 0; rank < order.size(); ++rank) {
      ManifestEntry& e = kept[order[rank]];
      e.split = rank < n_build ? kSplitConceptBuild : rank < n_build + n_attack ? kSplitAttackEval : kSplitCleanEval;
    }
    for (auto& e : kept) m.entries.push_back(std::move(e));
  }
  if (total == 0) throw ConfigError("dataset root contains no images: " + root.string());
  if (static_cast<double>(skipped) > config.max_skip_fraction * static_cast<double>(total)) {
    std::ostringstream msg;
    msg << skipped << " of " << total << " images were undecodable (limit "
        << config.max_skip_fraction * 100.0 << "%)";
    throw InputError(msg.str());
  }
  return m;
}

Image load_entry(const DatasetManifest& manifest, const ManifestEntry& entry) {
  const auto path = std::filesystem::path(manifest.root) / entry.path;
  auto pixels = read_rgb(path);
  if (!pixels) throw InputError("cannot decode image " + path.string());
  Image img;
  img.pixels = resize_and_center_crop(*pixels, manifest.preprocessing.image_size);
  img.id = entry.id;
  img.true_label = entry.label;
  return img;
}

std::vector<Image> load_split(const DatasetManifest& manifest, const std::string& split) {
  std::vector<Image> images;
  for (const ManifestEntry* e : manifest.split(split)) images.push_back(load_entry(manifest, *e));
  return images;
}

std::vector<ClassConditionedSet> build_class_conditioned_sets(const std::vector<Image>& images,
                                                              const Classifier& classifier, int num_classes,
                                                              std::size_t min_size) {
  if (images.empty()) throw InputError("class-conditioned sets need a non-empty concept-build split");
  std::vector<ClassConditionedSet> sets(static_cast<std::size_t>(num_classes));
  for (int c = 0; c < num_classes; ++c) sets[static_cast<std::size_t>(c)].class_id = c;
  for (const Image& img : images) {
    const Prediction p = classifier.predict(img);
    // Misclassified images belong to no set.
    if (p.label == img.true_label && p.label >= 0 && p.label < num_classes) {
      sets[static_cast<std::size_t>(p.label)].images.push_back(img);
    }
  }
  for (const auto& s : sets) {
    if (s.size() < min_size) {
      throw ConfigError("class " + std::to_string(s.class_id) + " has only " + std::to_string(s.size()) +
                        " correctly predicted images; at least " + std::to_string(min_size) + " are required");
    }
  }
  return sets;
}

std::vector<ClassConditionedSet> build_class_conditioned_sets(const DatasetManifest& manifest,
                                                              const Classifier& classifier, std::size_t min_size) {
  return build_class_conditioned_sets(load_split(manifest, kSplitConceptBuild), classifier,
                                      static_cast<int>(manifest.classes.size()), min_size);
}

}  // namespace cpd
