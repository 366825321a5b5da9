#include <doctest.h>

#include "cpdefense/defense.hpp"
#include "cpdefense/errors.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace cpd;

namespace {

ConceptBank random_bank(ClassId c, int k, int channels, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ConceptBank b;
  b.class_id = c;
  b.W = oracle::random_nonneg(k, channels, rng);
  for (int j = 0; j < k; ++j) b.W.row(j).normalize();
  return b;
}

ConceptLibrary random_library(int classes, int k, int channels) {
  ConceptLibrary lib;
  for (int c = 0; c < classes; ++c) {
    lib.banks.push_back(random_bank(c, k, channels, 10 + c));
    ImportanceScores s;
    s.class_id = c;
    s.raw.assign(k, 0.0);
    s.clipped = s.raw;
    for (int j = 0; j < k; ++j) s.ranking.push_back((j + c) % k);
    lib.scores.push_back(s);
  }
  return lib;
}

Heatmap map_from(std::vector<double> v, int h, int w) { return {h, w, std::move(v), 0, 0}; }

}  // namespace

TEST_CASE("planted concept gives a constant maximal map") {
  const ConceptBank bank = random_bank(0, 4, 12, 1);
  Tensor3 act(4, 4, 12);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x)
      for (int c = 0; c < 12; ++c) act.at(y, x, c) = bank.W(2, c);
  const auto maps = coefficient_maps(act, bank);
  for (int j = 0; j < 4; ++j) {
    for (double v : maps[j].values) CHECK(v == doctest::Approx(j == 2 ? 1.0 : 0.0).epsilon(1e-6).scale(1.0));
  }
  const Heatmap up = upsample(maps[2], 64, 64, Upsampling::kBilinear);
  for (double v : up.values) CHECK(v == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("zero activations give a zero heatmap") {
  const ConceptBank bank = random_bank(0, 3, 12, 2);
  const auto maps = coefficient_maps(Tensor3(4, 4, 12), bank);
  for (const auto& m : maps)
    for (double v : m.values) CHECK(v == 0.0);
}

TEST_CASE("bilinear upsampling matches the interpolation oracle") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> grid(16);
  for (double& v : grid) v = u(rng);
  const Heatmap up = upsample(map_from(grid, 4, 4), 64, 64, Upsampling::kBilinear);
  std::uniform_int_distribution<int> pix(0, 63);
  for (int t = 0; t < 20; ++t) {
    const int y = pix(rng);
    const int x = pix(rng);
    CHECK(up.values[static_cast<std::size_t>(y * 64 + x)] ==
          doctest::Approx(oracle::bilinear_at(grid, 4, 4, 64, 64, y, x)).epsilon(1e-6).scale(1.0));
  }
  const Heatmap near = upsample(map_from(grid, 4, 4), 64, 64, Upsampling::kNearest);
  CHECK(near.values[0] == grid[0]);
  CHECK(near.values[63 * 64 + 63] == grid[15]);
  CHECK(near.values[17 * 64 + 33] == grid[1 * 4 + 2]);
}

TEST_CASE("top-n selection examples") {
  const Heatmap constant = map_from(std::vector<double>(16, 0.3), 4, 4);
  const PixelMask first = top_n_mask(constant, 25.0);
  CHECK(first.count() == 4);
  for (int i = 0; i < 16; ++i) CHECK(first.selected[i] == (i < 4 ? 1 : 0));
  CHECK(top_n_mask(constant, 100.0).count() == 16);
  CHECK(top_n_mask(constant, 0.0).count() == 0);

  std::vector<double> distinct(16);
  for (int i = 0; i < 16; ++i) distinct[i] = (i * 7) % 16;
  const PixelMask m = top_n_mask(map_from(distinct, 4, 4), 25.0);
  for (std::size_t i : oracle::top_indices_by_full_sort(distinct, 4)) CHECK(m.selected[i] == 1);
  CHECK(m.count() == 4);
}

TEST_CASE("top-n count is the ceiling of the requested share") {
  CHECK(top_n_count(64, 64, 5.0) == 205);
  CHECK(top_n_count(4, 4, 25.0) == 4);
  CHECK(top_n_count(10, 10, 7.0) == 7);
  CHECK(top_n_count(64, 64, 1e-6) == 1);
  CHECK(top_n_count(64, 64, 100.0) == 4096);
}

TEST_CASE("top-n agrees with the full-sort oracle on random maps with ties") {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> level(0, 5);
  std::uniform_real_distribution<double> pct(0.5, 60.0);
  for (int t = 0; t < 100; ++t) {
    std::vector<double> v(32 * 32);
    for (double& x : v) x = level(rng) * 0.25;
    const double n = pct(rng);
    const PixelMask m = top_n_mask(map_from(v, 32, 32), n);
    const auto ref = oracle::top_indices_by_full_sort(v, top_n_count(32, 32, n));
    std::vector<std::uint8_t> expect(v.size(), 0);
    for (auto i : ref) expect[i] = 1;
    CHECK(m.selected == expect);
  }
}

TEST_CASE("blur leaves constant images unchanged") {
  Tensor3 img(64, 64, 3, 0.37);
  const Tensor3 b = gaussian_blur(img, 5, 2.0);
  for (double v : b.data) CHECK(v == doctest::Approx(0.37).epsilon(1e-6));
  CHECK_THROWS_AS(gaussian_blur(img, 4, 2.0), ConfigError);
}

TEST_CASE("blur parameters scale with resolution") {
  DefenseConfig c;
  CHECK(c.kernel_for(224) == 15);
  CHECK(c.sigma_for(224) == doctest::Approx(7.0));
  CHECK(c.kernel_for(64) == 5);
  CHECK(c.sigma_for(64) == doctest::Approx(2.0));
  c.blur_kernel = 9;
  c.blur_sigma = 3.0;
  CHECK(c.kernel_for(64) == 9);
  CHECK(c.sigma_for(64) == 3.0);
  c.blur_kernel = 8;
  CHECK_THROWS_AS(c.validate(10), ConfigError);
  DefenseConfig bad;
  bad.m = 11;
  CHECK_THROWS_AS(bad.validate(10), ConfigError);
  bad.m = 2;
  bad.n_percent = 101;
  CHECK_THROWS_AS(bad.validate(10), ConfigError);
}

TEST_CASE("empty-mask configurations are identities") {
  const auto adapter = fixture::small_adapter();
  const ConceptLibrary lib = random_library(3, 4, 12);
  for (int i = 0; i < 5; ++i) {
    const Image img = fixture::texture_image(200 + i);
    const ClassId f = adapter.predict(img).label;
    DefenseConfig m0;
    m0.m = 0;
    const DefenseResult a = defend(adapter, img, lib, m0);
    CHECK(a.defended.pixels.data == img.pixels.data);
    CHECK(a.label == f);
    DefenseConfig n0;
    n0.n_percent = 0.0;
    const DefenseResult b = defend(adapter, img, lib, n0);
    CHECK(b.defended.pixels.data == img.pixels.data);
    CHECK(b.label == f);
    CHECK(b.mask.count() == 0);
  }
}

TEST_CASE("defense changes only masked pixels and respects the mask-size bounds") {
  const auto adapter = fixture::small_adapter();
  const ConceptLibrary lib = random_library(3, 4, 12);
  for (int i = 0; i < 10; ++i) {
    const Image img = i % 2 ? fixture::texture_image(300 + i) : fixture::random_image(300 + i);
    DefenseConfig cfg;
    cfg.m = 1 + i % 3;
    cfg.n_percent = 2.0 + i;
    const DefenseResult r = defend(adapter, img, lib, cfg);
    const std::size_t per_map = top_n_count(64, 64, cfg.n_percent);
    CHECK(r.mask.count() >= per_map);
    CHECK(r.mask.count() <= static_cast<std::size_t>(cfg.m) * per_map);
    CHECK(r.concepts.size() == static_cast<std::size_t>(cfg.m));
    CHECK(r.predicted_class == adapter.predict(img).label);
    CHECK(r.label == adapter.predict(r.defended).label);
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x)
        if (!r.mask.selected[static_cast<std::size_t>(y * 64 + x)])
          for (int c = 0; c < 3; ++c) CHECK(r.defended.pixels.at(y, x, c) == img.pixels.at(y, x, c));
    const DefenseResult again = defend(adapter, img, lib, cfg);
    CHECK(again.defended.pixels.data == r.defended.pixels.data);
  }
}

TEST_CASE("fused selection selects exactly one share") {
  const auto adapter = fixture::small_adapter();
  const ConceptLibrary lib = random_library(3, 4, 12);
  DefenseConfig cfg;
  cfg.m = 3;
  cfg.selection = MaskSelection::kFused;
  const DefenseResult r = defend(adapter, fixture::texture_image(7), lib, cfg);
  CHECK(r.mask.count() == top_n_count(64, 64, 5.0));
}

TEST_CASE("missing bank is a configuration error") {
  const auto adapter = fixture::small_adapter();
  ConceptLibrary lib;
  CHECK_THROWS_AS(defend(adapter, fixture::texture_image(1), lib, {}), ConfigError);
  CHECK_THROWS_AS(parse_upsampling("cubic"), ConfigError);
  CHECK(parse_selection("fused") == MaskSelection::kFused);
}

TEST_CASE("prepared images reproduce the one-shot defense") {
  const auto adapter = fixture::small_adapter();
  const ConceptLibrary lib = random_library(3, 4, 12);
  const Image img = fixture::texture_image(41);
  const PreparedImage prepared = prepare_defense(adapter, img, lib, DefenseConfig{});
  for (int m : {1, 2, 4}) {
    for (double n : {1.0, 5.0, 10.0}) {
      DefenseConfig cfg;
      cfg.m = m;
      cfg.n_percent = n;
      const DefenseResult a = defend(adapter, img, lib, cfg);
      const DefenseResult b = finish_defense(adapter, prepared, lib, cfg);
      CHECK(a.label == b.label);
      CHECK(a.mask.selected == b.mask.selected);
      CHECK(a.defended.pixels.data == b.defended.pixels.data);
      CHECK(a.concepts == b.concepts);
    }
  }
}
