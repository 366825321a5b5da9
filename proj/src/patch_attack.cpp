#include "cpdefense/patch_attack.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "cpdefense/array_store.hpp"
#include "cpdefense/errors.hpp"
#include "cpdefense/fingerprint.hpp"

namespace cpd {

int PatchSpec::side(int height, int width) const {
  return static_cast<int>(std::lround(std::sqrt(area * height * width)));
}

void PatchSpec::validate() const {
  if (!(area >= 0.0 && area < 1.0)) throw ConfigError("patch area must lie in [0, 1)");
  if (steps < 0) throw ConfigError("attack steps must be non-negative");
  if (!(step_size > 0.0)) throw ConfigError("attack step size must be positive");
}

nlohmann::json to_json(const PatchSpec& s) {
  nlohmann::json j{{"area", s.area},
                   {"location", s.location == LocationPolicy::kRandom ? "random" : "fixed"},
                   {"steps", s.steps},
                   {"step_size", s.step_size},
                   {"seed", s.seed},
                   {"stop_confidence", s.stop_confidence},
                   {"target", s.target ? nlohmann::json(*s.target) : nlohmann::json(nullptr)}};
  if (s.location == LocationPolicy::kFixed) j["fixed_loc"] = {s.fixed_row, s.fixed_col};
  return j;
}

PatchSpec patch_spec_from_json(const nlohmann::json& j) {
  PatchSpec s;
  s.area = j.at("area");
  const std::string loc = j.value("location", "random");
  if (loc != "random" && loc != "fixed") throw ConfigError("unknown location policy '" + loc + "'");
  s.location = loc == "random" ? LocationPolicy::kRandom : LocationPolicy::kFixed;
  if (s.location == LocationPolicy::kFixed) {
    s.fixed_row = j.at("fixed_loc").at(0);
    s.fixed_col = j.at("fixed_loc").at(1);
  }
  s.steps = j.value("steps", s.steps);
  s.step_size = j.value("step_size", s.step_size);
  s.seed = j.value("seed", s.seed);
  s.stop_confidence = j.value("stop_confidence", s.stop_confidence);
  if (j.contains("target") && !j.at("target").is_null()) s.target = j.at("target").get<ClassId>();
  return s;
}

Image apply_patch(const Image& image, const Tensor3& patch, int row, int col) {
  if (patch.height == 0 || patch.width == 0) return image;
  if (row < 0 || col < 0 || row + patch.height > image.height() || col + patch.width > image.width() ||
      patch.channels != image.pixels.channels) {
    throw InputError("patch of " + std::to_string(patch.height) + "x" + std::to_string(patch.width) + " at (" +
                     std::to_string(row) + "," + std::to_string(col) + ") does not fit image " + image.id);
  }
  Image out = image;
  for (int y = 0; y < patch.height; ++y)
    for (int x = 0; x < patch.width; ++x)
      for (int c = 0; c < patch.channels; ++c) out.pixels.at(row + y, col + x, c) = patch.at(y, x, c);
  return out;
}

Image patched_image(const Image& image, const PatchResult& result) {
  return apply_patch(image, result.patch, result.row, result.col);
}

PatchResult optimize_patch(const ClassifierAdapter& adapter, const Image& image, const PatchSpec& spec) {
  spec.validate();
  PatchResult r;
  r.image_id = image.id;
  r.true_label = image.true_label;
  r.clean_label = adapter.predict(image).label;
  r.side = spec.side(image.height(), image.width());
  if (r.side >= std::min(image.height(), image.width())) throw ConfigError("patch does not fit inside the image");

  std::mt19937_64 rng(spec.seed ^ fnv1a(image.id));
  if (spec.location == LocationPolicy::kRandom) {
    r.row = static_cast<int>(rng() % static_cast<std::uint64_t>(image.height() - r.side + 1));
    r.col = static_cast<int>(rng() % static_cast<std::uint64_t>(image.width() - r.side + 1));
  } else {
    r.row = spec.fixed_row;
    r.col = spec.fixed_col;
  }
  r.patch = Tensor3(r.side, r.side, 3);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  for (double& v : r.patch.data) v = uniform(rng);

  const bool targeted = spec.target.has_value();
  const LossSpec loss = targeted ? LossSpec::targeted(*spec.target) : LossSpec::untargeted(r.clean_label);
  const double sign = targeted ? -1.0 : 1.0;
  for (int step = 0; step < spec.steps && r.side > 0; ++step) {
    double ce = 0.0;
    const Tensor3 grad = adapter.input_gradient(apply_patch(image, r.patch, r.row, r.col), loss, &ce);
    const double p = std::exp(-ce);
    if (targeted ? p >= spec.stop_confidence : p <= 1.0 - spec.stop_confidence) break;
    for (int y = 0; y < r.side; ++y)
      for (int x = 0; x < r.side; ++x)
        for (int c = 0; c < 3; ++c) {
          const double g = grad.at(r.row + y, r.col + x, c);
          double& v = r.patch.at(y, x, c);
          if (g != 0.0) v = std::clamp(v + sign * spec.step_size * (g > 0 ? 1.0 : -1.0), 0.0, 1.0);
        }
    r.steps_taken = step + 1;
  }
  r.patched_label = adapter.predict(apply_patch(image, r.patch, r.row, r.col)).label;
  r.success = r.patched_label != r.clean_label;
  return r;
}

AttackedSet build_attacked_set(const ClassifierAdapter& adapter, const std::vector<Image>& images,
                               const PatchSpec& spec) {
  if (images.empty()) throw InputError("attack-eval split is empty");
  AttackedSet set;
  set.spec = spec;
  for (const Image& img : images) {
    if (adapter.predict(img).label != img.true_label) {
      ++set.skipped_misclassified;
      continue;
    }
    ++set.attempted;
    PatchResult r = optimize_patch(adapter, img, spec);
    if (r.success) set.results.push_back(std::move(r));
  }
  if (set.results.empty()) {
    throw DegenerateInputError("no attack succeeded at area " + std::to_string(spec.area) +
                               "; increase the steps, step size or patch area");
  }
  spdlog::info("attack area {:.3f}: {}/{} successful ({} misclassified images skipped)", spec.area,
               set.results.size(), set.attempted, set.skipped_misclassified);
  return set;
}

void save_attacked_set(const std::filesystem::path& dir, const AttackedSet& set) {
  std::filesystem::create_directories(dir);
  nlohmann::json records = nlohmann::json::array();
  ArrayStore store(dir / "patches.h5", ArrayStore::Mode::kCreate);
  for (const auto& r : set.results) {
    records.push_back({{"id", r.image_id},
                       {"loc", {r.row, r.col}},
                       {"side", r.side},
                       {"success", r.success},
                       {"true_label", r.true_label},
                       {"clean_label", r.clean_label},
                       {"patched_label", r.patched_label},
                       {"steps_taken", r.steps_taken}});
    store.write("patches/" + r.image_id, {{r.patch.height, r.patch.width, r.patch.channels}, r.patch.data});
  }
  const nlohmann::json doc{{"spec", to_json(set.spec)},
                           {"attempted", set.attempted},
                           {"skipped_misclassified", set.skipped_misclassified},
                           {"successes", set.results.size()},
                           {"records", records}};
  std::ofstream out(dir / "attacks.json", std::ios::binary);
  if (!out) throw InputError("cannot write " + (dir / "attacks.json").string());
  out << doc.dump(2) << "\n";
}

AttackedSet load_attacked_set(const std::filesystem::path& dir) {
  std::ifstream in(dir / "attacks.json", std::ios::binary);
  if (!in) throw InputError("cannot read " + (dir / "attacks.json").string());
  const auto doc = nlohmann::json::parse(in);
  AttackedSet set;
  set.spec = patch_spec_from_json(doc.at("spec"));
  set.attempted = doc.at("attempted");
  set.skipped_misclassified = doc.at("skipped_misclassified");
  const ArrayStore store(dir / "patches.h5", ArrayStore::Mode::kRead);
  for (const auto& rec : doc.at("records")) {
    PatchResult r;
    r.image_id = rec.at("id");
    r.row = rec.at("loc").at(0);
    r.col = rec.at("loc").at(1);
    r.side = rec.at("side");
    r.success = rec.at("success");
    r.true_label = rec.at("true_label");
    r.clean_label = rec.at("clean_label");
    r.patched_label = rec.at("patched_label");
    r.steps_taken = rec.at("steps_taken");
    NamedArray a = store.read("patches/" + r.image_id);
    r.patch = Tensor3(a.shape.at(0), a.shape.at(1), a.shape.at(2));
    r.patch.data = std::move(a.values);
    set.results.push_back(std::move(r));
  }
  return set;
}

}  // namespace cpd
