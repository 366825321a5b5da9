#include <doctest.h>

#include <filesystem>

#include "cpdefense/errors.hpp"
#include "cpdefense/image_io.hpp"
#include "cpdefense/patch_attack.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace cpd;

TEST_CASE("patch side follows the area") {
  PatchSpec s;
  s.area = 0.01;
  CHECK(s.side(64, 64) == 6);
  s.area = 0.02;
  CHECK(s.side(64, 64) == 9);
  s.area = 0.03;
  CHECK(s.side(64, 64) == 11);
  s.area = 0.02;
  CHECK(s.side(224, 224) == 32);
}

TEST_CASE("apply_patch replaces exactly the rectangle") {
  const Image img = fixture::random_image(1);
  CHECK(apply_patch(img, Tensor3(), 5, 5).pixels == img.pixels);
  CHECK(apply_patch(img, crop(img.pixels, 10, 20, 9, 9), 10, 20).pixels == img.pixels);
  Tensor3 patch(9, 9, 3, 2.0);  // values no image pixel can hold
  const Image out = apply_patch(img, patch, 0, 0);
  std::size_t changed_pixels = 0;
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) changed_pixels += out.pixels.at(y, x, 0) != img.pixels.at(y, x, 0) ? 1 : 0;
  CHECK(changed_pixels == 81);
  CHECK(oracle::count_differences(out.pixels.data, img.pixels.data) == 243);
  CHECK_THROWS_AS(apply_patch(img, patch, 60, 0), InputError);
  CHECK_THROWS_AS(apply_patch(img, patch, -1, 0), InputError);
}

TEST_CASE("zero steps keeps the initialization") {
  const auto adapter = fixture::small_adapter();
  const Image img = fixture::texture_image(3);
  PatchSpec spec;
  spec.steps = 0;
  spec.seed = 4;
  const PatchResult r = optimize_patch(adapter, img, spec);
  CHECK(r.steps_taken == 0);
  CHECK(r.side == 9);
  CHECK(r.clean_label == adapter.predict(img).label);
  CHECK(r.success == (r.patched_label != r.clean_label));
  for (double v : r.patch.data) CHECK((v >= 0.0 && v <= 1.0));
}

TEST_CASE("optimization is deterministic, local and in range") {
  const auto adapter = fixture::small_adapter(3, 2);
  const Image img = fixture::texture_image(8);
  PatchSpec spec;
  spec.area = 0.03;
  spec.steps = 20;
  spec.seed = 5;
  const PatchResult a = optimize_patch(adapter, img, spec);
  const PatchResult b = optimize_patch(adapter, img, spec);
  CHECK(a.patch == b.patch);
  CHECK(a.row == b.row);
  CHECK(a.col == b.col);
  CHECK(a.patched_label == b.patched_label);
  const Image patched = patched_image(img, a);
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) {
      const bool inside = y >= a.row && y < a.row + a.side && x >= a.col && x < a.col + a.side;
      for (int c = 0; c < 3; ++c) {
        if (!inside) CHECK(patched.pixels.at(y, x, c) == img.pixels.at(y, x, c));
        CHECK((patched.pixels.at(y, x, c) >= 0.0 && patched.pixels.at(y, x, c) <= 1.0));
      }
    }
  CHECK(adapter.predict(patched).label == a.patched_label);
}

TEST_CASE("fixed placement and targeted loss") {
  const auto adapter = fixture::small_adapter(3, 2);
  const Image img = fixture::texture_image(9);
  PatchSpec spec;
  spec.location = LocationPolicy::kFixed;
  spec.fixed_row = 3;
  spec.fixed_col = 50;
  spec.steps = 5;
  spec.target = (adapter.predict(img).label + 1) % 3;
  const PatchResult r = optimize_patch(adapter, img, spec);
  CHECK(r.row == 3);
  CHECK(r.col == 50);
  spec.fixed_col = 60;
  CHECK_THROWS_AS(optimize_patch(adapter, img, spec), InputError);
}

TEST_CASE("attacked set keeps successes only and round-trips") {
  const auto adapter = fixture::small_adapter(3, 2);
  std::vector<Image> images;
  for (int i = 0; i < 6; ++i) {
    Image img = fixture::texture_image(20 + i);
    img.true_label = adapter.predict(img).label;
    images.push_back(img);
  }
  images[0].true_label = (images[0].true_label + 1) % 3;  // misclassified: not attacked
  PatchSpec spec;
  spec.area = 0.03;
  spec.steps = 60;
  spec.step_size = 0.1;
  spec.stop_confidence = 1.0;
  const AttackedSet set = build_attacked_set(adapter, images, spec);
  CHECK(set.skipped_misclassified == 1);
  CHECK(set.attempted == 5);
  for (const auto& r : set.results) {
    CHECK(r.success);
    CHECK(r.patched_label != r.clean_label);
    const Image* src = nullptr;
    for (const auto& im : images)
      if (im.id == r.image_id) src = &im;
    REQUIRE(src != nullptr);
    CHECK(adapter.predict(patched_image(*src, r)).label == r.patched_label);
  }
  const auto dir = std::filesystem::temp_directory_path() / "cpd_attack_rt";
  save_attacked_set(dir, set);
  const AttackedSet loaded = load_attacked_set(dir);
  REQUIRE(loaded.results.size() == set.results.size());
  CHECK(loaded.results[0].patch == set.results[0].patch);
  CHECK(loaded.spec.area == spec.area);
  std::filesystem::remove_all(dir);

  PatchSpec none;
  none.steps = 0;
  none.area = 0.0001;
  CHECK_THROWS_AS(build_attacked_set(adapter, images, none), DegenerateInputError);
  CHECK_THROWS_AS(build_attacked_set(adapter, {}, spec), InputError);
}
