#include <doctest.h>

#include <map>

#include "cpdefense/errors.hpp"
#include "cpdefense/patchcleanser.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace cpd;

namespace {

// Answers from a prediction table, identifying the applied masks by the fill they left.
class ScriptedClassifier final : public Classifier {
 public:
  ScriptedClassifier(const MaskSet& set, std::vector<int> first, std::vector<std::vector<int>> second)
      : set_(set), first_(std::move(first)), second_(std::move(second)) {}

  Prediction predict(const Image& image) const override {
    std::vector<int> applied;
    for (std::size_t i = 0; i < set_.masks.size(); ++i) {
      const MaskRect& r = set_.masks[i];
      bool filled = true;
      for (int y = r.top; y < r.top + r.height && filled; ++y)
        for (int x = r.left; x < r.left + r.width && filled; ++x) filled = image.pixels.at(y, x, 0) == set_.fill[0];
      if (filled) applied.push_back(static_cast<int>(i));
    }
    ++calls;
    Prediction p;
    if (applied.size() == 1) p.label = first_[applied[0]];
    else if (applied.size() == 2) p.label = second_[applied[0]][applied[1]];
    else throw std::logic_error("unexpected mask combination");
    return p;
  }
  int num_classes() const override { return 4; }
  mutable int calls = 0;

 private:
  const MaskSet& set_;
  std::vector<int> first_;
  std::vector<std::vector<int>> second_;
};

bool contains_square(const MaskRect& m, int top, int left, int side) {
  return top >= m.top && left >= m.left && top + side <= m.top + m.height && left + side <= m.left + m.width;
}

}  // namespace

TEST_CASE("single mask covers the whole image") {
  const MaskSet s = build_mask_set(64, 64, 1, 13);
  REQUIRE(s.masks.size() == 1);
  CHECK(s.masks[0].height == 64);
  CHECK(s.masks[0].width == 64);
}

TEST_CASE("3x3 masks cover every placement of the estimated patch") {
  for (int est : {6, 9, 11, 13}) {
    const MaskSet s = build_mask_set(64, 64, 3, est);
    CHECK(s.masks.size() == 9);
    CHECK(s.mask_height == s.stride_y + est);
    for (int top = 0; top + est <= 64; ++top)
      for (int left = 0; left + est <= 64; ++left) {
        bool covered = false;
        for (const auto& m : s.masks) covered = covered || contains_square(m, top, left, est);
        CHECK(covered);
      }
    for (const auto& m : s.masks) CHECK(m.top + m.height <= 64);
  }
}

TEST_CASE("infeasible mask sets are rejected") {
  CHECK_THROWS_AS(build_mask_set(64, 64, 3, 64), ConfigError);
  CHECK_THROWS_AS(build_mask_set(64, 64, 3, 80), ConfigError);
  CHECK_THROWS_AS(build_mask_set(64, 64, 0, 8), ConfigError);
  CHECK(masks_per_axis(6, MaskCountMode::kTotal) == 3);
  CHECK(masks_per_axis(9, MaskCountMode::kTotal) == 3);
  CHECK(masks_per_axis(3, MaskCountMode::kPerAxis) == 3);
}

TEST_CASE("unanimous first round returns that label") {
  const MaskSet s = build_mask_set(64, 64, 3, 11);
  std::vector<std::vector<int>> second(9, std::vector<int>(9, 3));
  ScriptedClassifier clf(s, std::vector<int>(9, 2), second);
  Image img = fixture::random_image(1);
  for (double& v : img.pixels.data) v = 0.1;
  CHECK(double_masked_predict(clf, img, s) == 2);
  CHECK(clf.calls == 9);
}

TEST_CASE("double masking equals the enumeration oracle") {
  const MaskSet s = build_mask_set(64, 64, 3, 11);
  Image img = fixture::random_image(2);
  for (double& v : img.pixels.data) v = 0.1;
  std::mt19937_64 rng(5);
  for (int t = 0; t < 200; ++t) {
    // Skewed label draws so that unanimous and near-unanimous tables both occur.
    const int spread = 1 + t % 4;
    std::uniform_int_distribution<int> label(0, spread - 1);
    std::uniform_int_distribution<int> coin(0, 3);
    std::vector<int> first(9);
    for (int& v : first) v = coin(rng) ? 0 : label(rng);
    std::vector<std::vector<int>> second(9, std::vector<int>(9));
    for (int i = 0; i < 9; ++i)
      for (int j = 0; j < 9; ++j) second[i][j] = coin(rng) ? first[i] : label(rng);
    for (int i = 0; i < 9; ++i)
      for (int j = 0; j < i; ++j) second[i][j] = second[j][i];
    const int expected = oracle::double_masking_by_enumeration(first, second, 4);
    const int direct = double_masking_decision(
        9, [&](int i) { return first[i]; }, [&](int i, int j) { return second[i][j]; });
    CHECK(direct == expected);
    if (t < 40) {
      ScriptedClassifier clf(s, first, second);
      CHECK(double_masked_predict(clf, img, s) == expected);
    }
  }
}

TEST_CASE("majority ties resolve to the lowest label") {
  const std::vector<int> first{1, 1, 0, 0};
  const std::vector<std::vector<int>> second(4, std::vector<int>(4, 2));
  CHECK(double_masking_decision(
            4, [&](int i) { return first[i]; }, [&](int i, int j) { return second[i][j]; }) == 0);
}

TEST_CASE("masks use the configured fill") {
  const MaskSet s = build_mask_set(64, 64, 3, 9, {0.2, 0.4, 0.6});
  const Image img = fixture::random_image(3);
  const Image out = apply_masks(img, s, 4);
  const MaskRect& r = s.masks[4];
  CHECK(out.pixels.at(r.top, r.left, 1) == 0.4);
  CHECK(out.pixels.at(0, 0, 0) == img.pixels.at(0, 0, 0));
}
