// Acceptance run: one PASS/FAIL line per criterion. Criteria 6-9 run the full pipeline
// under the work directory given as the first argument.
//
// The exit status is 0 once every criterion has been evaluated, whatever the verdicts;
// pass --require-all to exit 1 when any criterion fails, --only 1,2,5 to run a subset.

#include <spdlog/spdlog.h>

#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iostream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "cpdefense/defense.hpp"
#include "cpdefense/desk_corpus.hpp"
#include "cpdefense/nmf.hpp"
#include "cpdefense/patchcleanser.hpp"
#include "cpdefense/pipeline.hpp"
#include "cpdefense/sobol.hpp"
#include "cpdefense/training.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace cpd;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = true;
  std::vector<std::string> details;

  void require(bool ok, const std::string& what) {
    pass = pass && ok;
    details.push_back(fmt::format("{}{}", ok ? "" : "FAILED ", what));
  }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(read_file(p)); }

Verdict nmf_monotonicity() {
  Verdict v;
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t violations = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    const NmfResult r = nmf(oracle::random_nonneg(50, 20, rng), {5, 200, 0.0, seed});
    for (std::size_t t = 1; t < r.history.size(); ++t) violations += r.history[t] > r.history[t - 1] + 1e-9;
  }
  v.require(violations == 0, fmt::format("{} monotonicity violations over 20 matrices x 200 steps", violations));
  double worst = 0.0;
  for (std::uint64_t seed = 100; seed < 105; ++seed) {
    std::mt19937_64 rng(seed);
    const Eigen::MatrixXd U0 = oracle::random_nonneg(50, 5, rng);
    const Eigen::MatrixXd W0 = oracle::random_nonneg(5, 20, rng);
    worst = std::max(worst, nmf(U0 * W0, {5, 20000, 0.0, seed}).relative_error);
  }
  v.require(worst <= 1e-3, fmt::format("planted rank-5 worst error {:.2e}", worst));
  const double t = seconds_since(t0);
  v.require(t < 30.0, fmt::format("{:.1f} s", t));
  return v;
}

Verdict sobol_oracle() {
  Verdict v;
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<double> a{1.0, 2.0, 0.5, 3.0, 1.5, 0.25};
  double norm = 0.0;
  for (double x : a) norm += x * x;
  auto f = [&](std::span<const double> u) {
    double s = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j) s += a[j] * u[j];
    return s;
  };
  for (int n : {8192, 2048}) {
    const auto totals = sobol_total_indices(f, 6, n, 1).totals;
    double err = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j) err = std::max(err, std::abs(totals[j] - a[j] * a[j] / norm));
    v.require(err <= (n == 8192 ? 0.02 : 0.05), fmt::format("additive N={} max error {:.4f}", n, err));
  }
  auto single = [](std::span<const double> u) { return std::sin(2.0 * std::numbers::pi * u[0]) + u[0] * u[0]; };
  const double active = sobol_total_indices(single, 5, 2048, 7).totals[0];
  v.require(active >= 0.95, fmt::format("single-factor S_T {:.4f}", active));
  const double t = seconds_since(t0);
  v.require(t < 60.0, fmt::format("{:.1f} s", t));
  return v;
}

Verdict top_n_selection() {
  Verdict v;
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> level(0, 5);
  std::uniform_real_distribution<double> pct(0.5, 60.0);
  int mismatches = 0;
  for (int t = 0; t < 100; ++t) {
    std::vector<double> values(32 * 32);
    for (double& x : values) x = level(rng) * 0.25;  // six levels, so ties straddle every threshold
    const double n = pct(rng);
    const PixelMask m = top_n_mask({32, 32, values, 0, 0}, n);
    std::vector<std::uint8_t> expect(values.size(), 0);
    for (auto i : oracle::top_indices_by_full_sort(values, top_n_count(32, 32, n))) expect[i] = 1;
    mismatches += m.selected != expect;
  }
  v.require(mismatches == 0, fmt::format("{} of 100 tied random maps differ from the full-sort oracle", mismatches));
  const PixelMask c = top_n_mask({4, 4, std::vector<double>(16, 1.0), 0, 0}, 25.0);
  const std::vector<std::uint8_t> first4{1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0};
  v.require(c.selected == first4, "constant 4x4 map at 25% selects the first row");
  return v;
}

ConceptLibrary random_library(int classes, int k, int channels) {
  ConceptLibrary lib;
  for (int c = 0; c < classes; ++c) {
    std::mt19937_64 rng(10 + c);
    ConceptBank b;
    b.class_id = c;
    b.W = oracle::random_nonneg(k, channels, rng);
    for (int j = 0; j < k; ++j) b.W.row(j).normalize();
    lib.banks.push_back(b);
    ImportanceScores s;
    s.class_id = c;
    s.raw.assign(static_cast<std::size_t>(k), 0.0);
    s.clipped = s.raw;
    for (int j = 0; j < k; ++j) s.ranking.push_back((j + c) % k);
    lib.scores.push_back(s);
  }
  return lib;
}

Verdict identity_defenses() {
  Verdict v;
  const auto adapter = fixture::small_adapter();
  const ConceptLibrary lib = random_library(3, 4, 12);
  int not_identical = 0;
  for (int i = 0; i < 10; ++i) {
    const Image img = fixture::texture_image(500 + i);
    DefenseConfig m0;
    m0.m = 0;
    DefenseConfig n0;
    n0.n_percent = 0.0;
    not_identical += defend(adapter, img, lib, m0).defended.pixels.data != img.pixels.data;
    not_identical += defend(adapter, img, lib, n0).defended.pixels.data != img.pixels.data;
  }
  v.require(not_identical == 0, fmt::format("{} of 20 empty-mask defenses changed the image", not_identical));
  std::size_t changed_outside = 0;
  for (int i = 0; i < 100; ++i) {
    const Image img = i % 2 ? fixture::texture_image(600 + i) : fixture::random_image(600 + i);
    DefenseConfig cfg;
    cfg.m = 1 + i % 4;
    cfg.n_percent = 1.0 + i % 10;
    const DefenseResult r = defend(adapter, img, lib, cfg);
    for (std::size_t p = 0; p < r.mask.selected.size(); ++p) {
      if (r.mask.selected[p]) continue;
      for (int c = 0; c < 3; ++c) changed_outside += r.defended.pixels.data[p * 3 + c] != img.pixels.data[p * 3 + c];
    }
  }
  v.require(changed_outside == 0, fmt::format("{} outside-mask values changed over 100 fuzzed images", changed_outside));
  return v;
}

// Answers from prediction tables, identifying the applied masks by their fill.
class TableClassifier final : public Classifier {
 public:
  TableClassifier(const MaskSet& set, const std::vector<int>& first, const std::vector<std::vector<int>>& second)
      : set_(set), first_(first), second_(second) {}
  Prediction predict(const Image& image) const override {
    std::vector<int> applied;
    for (std::size_t i = 0; i < set_.masks.size(); ++i) {
      const MaskRect& r = set_.masks[i];
      bool filled = true;
      for (int y = r.top; y < r.top + r.height && filled; ++y)
        for (int x = r.left; x < r.left + r.width && filled; ++x) filled = image.pixels.at(y, x, 0) == set_.fill[0];
      if (filled) applied.push_back(static_cast<int>(i));
    }
    Prediction p;
    p.label = applied.size() == 1 ? first_[applied[0]] : second_[applied[0]][applied[1]];
    return p;
  }
  int num_classes() const override { return 4; }

 private:
  const MaskSet& set_;
  const std::vector<int>& first_;
  const std::vector<std::vector<int>>& second_;
};

Verdict double_masking() {
  Verdict v;
  const MaskSet s = build_mask_set(64, 64, 3, 11);
  Image img = fixture::random_image(2);
  for (double& x : img.pixels.data) x = 0.1;
  std::mt19937_64 rng(5);
  int mismatches = 0;
  for (int t = 0; t < 200; ++t) {
    const int spread = 1 + t % 4;
    std::uniform_int_distribution<int> label(0, spread - 1);
    std::uniform_int_distribution<int> coin(0, 3);
    std::vector<int> first(9);
    for (int& x : first) x = coin(rng) ? 0 : label(rng);
    std::vector<std::vector<int>> second(9, std::vector<int>(9));
    for (int i = 0; i < 9; ++i)
      for (int j = 0; j < 9; ++j) second[i][j] = j < i ? second[j][i] : (coin(rng) ? first[i] : label(rng));
    const TableClassifier clf(s, first, second);
    mismatches += double_masked_predict(clf, img, s) != oracle::double_masking_by_enumeration(first, second, 4);
  }
  v.require(mismatches == 0, fmt::format("{} of 200 prediction tables disagree with the enumeration oracle", mismatches));
  std::size_t uncovered = 0, placements = 0;
  for (int est = 1; est <= 32; ++est) {
    const MaskSet m = build_mask_set(64, 64, 3, est);
    for (int top = 0; top + est <= 64; ++top)
      for (int left = 0; left + est <= 64; ++left) {
        ++placements;
        bool covered = false;
        for (const MaskRect& r : m.masks)
          covered = covered || (top >= r.top && left >= r.left && top + est <= r.top + r.height &&
                                left + est <= r.left + r.width);
        uncovered += !covered;
      }
  }
  v.require(uncovered == 0, fmt::format("{} of {} patch placements (sides 1..32 at 64 px) uncovered", uncovered, placements));
  return v;
}

struct DeskRun {
  EvaluationReport report;
  SweepReport n_sweep;
  SweepReport m_sweep;
  double seconds = 0.0;
};

DeskRun run_desk(const fs::path& dir) {
  fs::remove_all(dir);
  const auto t0 = std::chrono::steady_clock::now();
  Pipeline p(default_config("desk"), dir);
  DeskRun r;
  r.report = p.evaluate();
  r.n_sweep = p.sweep("n_percent");
  r.m_sweep = p.sweep("m");
  p.figures();
  r.seconds = seconds_since(t0);
  return r;
}

Verdict end_to_end(const DeskRun& run) {
  Verdict v;
  const EvaluationReport& rep = run.report;
  const ReportRow& none = rep.row("undefended");
  const ReportRow& ours = rep.row("ours");
  for (std::size_t i = 0; i < rep.areas.size(); ++i) {
    v.require(none.robust[i].value == 0.0,
              fmt::format("undefended {} = {:.3f}", area_label(rep.areas[i]), none.robust[i].value));
  }
  for (std::size_t i = 0; i < rep.areas.size(); ++i) {
    const ReportCell& c = ours.robust[i];
    v.require(c.value >= 0.70, fmt::format("ours {} = {:.3f} ({}/{})", area_label(rep.areas[i]), c.value, c.hits,
                                           c.denominator));
  }
  v.require(ours.clean.value >= 0.95, fmt::format("clean recovery {:.3f} ({}/{})", ours.clean.value, ours.clean.hits,
                                                  ours.clean.denominator));
  const double mine = rep.mean_robust("ours"), theirs = rep.mean_robust("patchcleanser");
  v.require(mine >= theirs, fmt::format("mean robust ours {:.3f} vs patchcleanser {:.3f}", mine, theirs));
  v.require(run.seconds < 1800.0, fmt::format("{:.0f} s", run.seconds));
  return v;
}

Verdict sweep_trends(const DeskRun& run) {
  Verdict v;
  std::size_t two = 0;
  while (two < run.n_sweep.areas.size() && std::abs(run.n_sweep.areas[two] - 0.02) > 1e-9) ++two;
  if (two == run.n_sweep.areas.size()) {
    v.require(false, "no 2% area in the sweep");
    return v;
  }
  double at10 = -1.0, at2 = -1.0;
  for (const SweepPoint& p : run.n_sweep.points) {
    if (p.setting == 10.0) at10 = p.row.robust[two].value;
    if (p.setting == 2.0) at2 = p.row.robust[two].value;
  }
  v.require(at10 - at2 >= 0.10, fmt::format("robust@2% n=10: {:.3f}, n=2: {:.3f} (m={})", at10, at2,
                                            run.n_sweep.fixed_value));
  std::vector<std::string> clean;
  bool monotone = true;
  for (std::size_t i = 0; i < run.m_sweep.points.size(); ++i) {
    clean.push_back(fmt::format("{:.3f}", run.m_sweep.points[i].row.clean.value));
    if (i > 0) monotone = monotone && run.m_sweep.points[i].row.clean.value <= run.m_sweep.points[i - 1].row.clean.value + 0.02;
  }
  v.require(monotone, fmt::format("clean over m=1..{}: {} (n={})", run.m_sweep.points.size(), fmt::join(clean, " "),
                                  run.m_sweep.fixed_value));
  return v;
}

Verdict determinism(const fs::path& a, const fs::path& b) {
  Verdict v;
  for (const char* f : {"report.json", "report.txt", "sweeps/n_percent.json", "sweeps/n_percent.csv", "sweeps/m.json",
                        "sweeps/m.csv", "figures/defense_grid.png"}) {
    const std::string x = read_file(a / f), y = read_file(b / f);
    v.require(!x.empty() && x == y, fmt::format("{} {}", f, x == y ? "identical" : "differs"));
  }
  return v;
}

// Repro mode end to end on a small 224 px stand-in: a mini residual network with the same
// block names as ResNet-50 and a rendered three-class image folder.
Verdict repro_schema(const fs::path& dir) {
  Verdict v;
  fs::remove_all(dir);
  const std::vector<std::string> classes{"horizontal", "checker", "dots"};

  const nn::Network full = nn::make_resnet50(classes, 224);
  std::vector<std::string> blocks;
  for (const auto& b : full.blocks()) blocks.push_back(b.name);
  v.require(blocks == std::vector<std::string>{"stem", "layer1", "layer2", "layer3", "layer4", "head"},
            fmt::format("resnet50 blocks {}", fmt::join(blocks, ",")));

  PipelineConfig c = default_config("repro");
  v.require(c.model.backbone == "resnet50" && c.model.split_layer == "layer4" &&
                c.data.ingest.preprocessing.image_size == 224 && c.defense.m == 2 && c.defense.n_percent == 5.0,
            "repro defaults: resnet50 split after layer4, 224 px, m=2, n=5%");

  DeskCorpusConfig corpus;
  corpus.classes = classes;
  corpus.images_per_class = 16;
  corpus.image_size = 224;
  generate_desk_corpus(dir / "data", corpus);
  IngestConfig ingest = c.data.ingest;
  ingest.seed = c.stage_seed("split");
  const DatasetManifest manifest = ingest_dataset(dir / "data", ingest);
  nn::Network net = nn::make_mini_resnet(classes, 224, 4);
  net.normalization = {ingest.preprocessing.mean, ingest.preprocessing.stddev};
  nn::initialize(net, 3);
  TrainConfig train;
  train.epochs = 6;
  train.batch_size = 8;
  train.learning_rate = 1e-2;
  train_classifier(net, load_split(manifest, kSplitConceptBuild), train);
  net.save(dir / "weights.h5");

  c.data.root = (dir / "data").string();
  c.model.weights = (dir / "weights.h5").string();
  c.model.backbone = "mini-resnet";
  c.model.sanity_floor = 0.0;
  c.data.min_class_set = 2;
  c.concepts.k = 3;
  c.concepts.iterations = 60;
  c.scoring.designs = 32;
  c.scoring.sample_images = 2;
  c.attack.steps = 60;
  c.attack.step_size = 0.2;
  Pipeline p(c, dir / "out");
  const EvaluationReport rep = p.evaluate();
  const nlohmann::json j = read_json(dir / "out" / "report.json");
  std::vector<std::string> rows;
  for (const auto& r : j.at("rows")) rows.push_back(r.at("defense"));
  v.require(j.at("mode") == "repro", "report mode repro");
  v.require(rows == std::vector<std::string>{"undefended", "patchcleanser", "ours"},
            fmt::format("rows {}", fmt::join(rows, ",")));
  v.require(j.at("columns") == nlohmann::json({"clean", "robust@1%", "robust@2%", "robust@3%"}),
            fmt::format("columns {}", j.at("columns").dump()));
  bool denominators = true;
  for (const auto& r : j.at("rows")) {
    denominators = denominators && r.at("clean").at("denominator").get<int>() > 0;
    for (const auto& [label, cell] : r.at("robust").items()) denominators = denominators && cell.at("denominator").get<int>() > 0;
  }
  v.require(denominators, "every cell carries a nonzero denominator");
  v.require(rep.rows.size() == 3, fmt::format("attacked at 1/2/3%: {}/{}/{}", rep.rows[0].robust[0].denominator,
                                              rep.rows[0].robust[1].denominator, rep.rows[0].robust[2].denominator));
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  fs::path work = fs::temp_directory_path() / "cpd_acceptance";
  bool require_all = false;
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--require-all") {
      require_all = true;
    } else if (a == "--only" && i + 1 < argc) {
      std::stringstream list(argv[++i]);
      for (std::string item; std::getline(list, item, ',');) only.insert(std::stoi(item));
    } else {
      work = a;
    }
  }
  auto wanted = [&](int n) { return only.empty() || only.count(n) > 0; };
  spdlog::set_level(spdlog::level::warn);

  int passed = 0, total = 0;
  auto report = [&](int n, const std::string& title, const std::function<Verdict()>& check) {
    if (!wanted(n)) return;
    Verdict v;
    try {
      v = check();
    } catch (const std::exception& e) {
      v.require(false, std::string("threw: ") + e.what());
    }
    ++total;
    passed += v.pass;
    std::cout << fmt::format("criterion {} {}: {} [{}]", n, title, v.pass ? "PASS" : "FAIL", fmt::join(v.details, "; "))
              << std::endl;
  };

  report(1, "NMF monotonicity", nmf_monotonicity);
  report(2, "Sobol oracle equivalence", sobol_oracle);
  report(3, "top-n% selection", top_n_selection);
  report(4, "identity defenses", identity_defenses);
  report(5, "double-masking correctness", double_masking);

  std::optional<DeskRun> first;
  std::string first_error;
  if (wanted(6) || wanted(7) || wanted(8)) {
    try {
      first = run_desk(work / "desk_a");
    } catch (const std::exception& e) {
      first_error = e.what();
    }
  }
  auto need_first = [&]() -> const DeskRun& {
    if (!first) throw std::runtime_error("desk run failed: " + first_error);
    return *first;
  };
  report(6, "desk end-to-end", [&] { return end_to_end(need_first()); });
  report(7, "sweep trends", [&] { return sweep_trends(need_first()); });
  report(8, "determinism", [&] {
    need_first();
    run_desk(work / "desk_b");
    return determinism(work / "desk_a", work / "desk_b");
  });
  report(9, "repro mode schema", [&] { return repro_schema(work / "repro"); });

  std::cout << fmt::format("{} of {} criteria passed", passed, total) << std::endl;
  return require_all && passed != total ? 1 : 0;
}
