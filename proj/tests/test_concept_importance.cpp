#include <doctest.h>

#include <filesystem>

#include "cpdefense/concept_importance.hpp"
#include "cpdefense/errors.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace cpd;

namespace {

ConceptBank bank_from(Eigen::MatrixXd W, ClassId c = 0) {
  for (Eigen::Index i = 0; i < W.rows(); ++i) W.row(i).normalize();
  ConceptBank b;
  b.class_id = c;
  b.W = std::move(W);
  return b;
}

}  // namespace

TEST_CASE("coefficient recovery: exact member and zero") {
  std::mt19937_64 rng(1);
  const ConceptBank bank = bank_from(oracle::random_nonneg(5, 20, rng));
  std::vector<double> a(20);
  for (int c = 0; c < 20; ++c) a[c] = 2.0 * bank.W(0, c);
  const auto u = recover_coefficients(a, bank);
  CHECK(u[0] == doctest::Approx(2.0).epsilon(1e-4));
  for (int j = 1; j < 5; ++j) CHECK(std::abs(u[j]) <= 1e-4);
  const auto z = recover_coefficients(std::vector<double>(20, 0.0), bank);
  for (double v : z) CHECK(v == 0.0);
}

TEST_CASE("coefficient recovery matches projected gradient") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  for (int t = 0; t < 10; ++t) {
    const ConceptBank bank = bank_from(oracle::random_nonneg(5, 20, rng));
    std::vector<double> a(20);
    for (double& v : a) v = u01(rng);
    const auto u = recover_coefficients(a, bank);
    const auto ref = oracle::nnls_projected_gradient(bank.W, a);
    for (int j = 0; j < 5; ++j) CHECK(u[j] == doctest::Approx(ref[j]).epsilon(1e-3).scale(1.0));
  }
}

TEST_CASE("concept coefficients require the predicted class") {
  const auto adapter = fixture::small_adapter();
  const Image img = fixture::random_image(4);
  const ClassId pred = adapter.predict(img).label;
  std::mt19937_64 rng(3);
  ConceptBank bank = bank_from(oracle::random_nonneg(3, 12, rng), pred);
  CHECK(concept_coefficients(adapter, img, bank).size() == 3);
  bank.class_id = (pred + 1) % 3;
  CHECK_THROWS_AS(concept_coefficients(adapter, img, bank), InputError);
}

TEST_CASE("ranking ties keep ascending index") {
  CHECK(rank_descending({0.1, 0.5, 0.5, 0.0, 0.5}) == std::vector<int>{1, 2, 4, 0, 3});
}

TEST_CASE("mean-activation concept ranks first and matches the linear-model indices") {
  const auto adapter = fixture::small_adapter(3, 7);
  const ClassId cls = adapter.predict(fixture::random_image(50)).label;
  ClassConditionedSet set;
  set.class_id = cls;
  for (int i = 0; i < 4; ++i) set.images.push_back(fixture::random_image(50 + i));

  const int C = 12;
  Eigen::MatrixXd W(4, C);
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(C);
  for (const auto& img : set.images) {
    const auto pooled = spatial_mean(adapter.activations(img).values);
    mean += Eigen::Map<const Eigen::VectorXd>(pooled.data(), C);
  }
  W.row(0) = mean.transpose();
  std::mt19937_64 rng(9);
  W.bottomRows(3) = oracle::random_nonneg(3, C, rng);
  const ConceptBank bank = bank_from(W, cls);

  // The head after global pooling is affine, so f(m) = b + sum_j m_j a_j and the total index of
  // concept j is a_j^2 / sum a^2 for independent uniform masks.
  const Tensor3 zero(16, 16, C);
  const double bias = adapter.head_logits(zero)[cls];
  std::vector<double> expected(4, 0.0);
  for (const auto& img : set.images) {
    const auto u = recover_coefficients(spatial_mean(adapter.activations(img).values), bank);
    std::vector<double> a(4);
    double total = 0.0;
    for (int j = 0; j < 4; ++j) {
      Tensor3 act(16, 16, C);
      for (int p = 0; p < 256; ++p)
        for (int c = 0; c < C; ++c) act.data[static_cast<std::size_t>(p * C + c)] = u[j] * bank.W(j, c);
      a[j] = adapter.head_logits(act)[cls] - bias;
      total += a[j] * a[j];
    }
    for (int j = 0; j < 4; ++j) expected[j] += a[j] * a[j] / total / 4.0;
  }

  ScoringConfig cfg;
  cfg.designs = 4096;
  cfg.sample_images = 4;
  const ImportanceScores s = score_concepts(adapter, bank, set, cfg);
  CHECK(s.ranking == rank_descending(expected));
  CHECK(s.ranking.front() == 0);
  for (int j = 0; j < 4; ++j) CHECK(s.raw[j] == doctest::Approx(expected[j]).epsilon(0.05).scale(1.0));
  const ImportanceScores again = score_concepts(adapter, bank, set, cfg);
  CHECK(again.ranking == s.ranking);
  CHECK(again.raw == s.raw);
  CHECK(s.images_used.size() == 4);
}

TEST_CASE("scores round-trip and validation") {
  ImportanceScores s;
  s.class_id = 3;
  s.raw = {0.2, -0.01, 0.5};
  s.clipped = {0.2, 0.0, 0.5};
  s.ranking = {2, 0, 1};
  s.designs = 1024;
  s.seed = 5;
  s.images_used = {"a", "b"};
  const auto path = std::filesystem::temp_directory_path() / "cpd_scores.json";
  save_scores(path, s);
  const auto t = load_scores(path);
  CHECK(t.raw == s.raw);
  CHECK(t.ranking == s.ranking);
  CHECK(t.top(2) == std::vector<int>{2, 0});
  CHECK_THROWS_AS(t.top(4), ConfigError);
  auto j = to_json(s);
  j["ranking"] = {0, 0, 1};
  CHECK_THROWS_AS(scores_from_json(j), InputError);
  std::filesystem::remove(path);
}

TEST_CASE("all-degenerate scoring is an error") {
  const auto adapter = fixture::small_adapter();
  ConceptBank bank;
  bank.class_id = 0;
  bank.W = Eigen::MatrixXd::Zero(2, 12);
  bank.W(0, 0) = 1.0;
  bank.W(1, 1) = 1.0;
  ClassConditionedSet set;
  set.class_id = 0;
  Image black = fixture::random_image(1);
  for (double& v : black.pixels.data) v = 0.0;
  set.images.push_back(black);
  ScoringConfig cfg;
  cfg.designs = 64;
  // Whether or not these two channels are active on a black image, a mismatched class id must fail.
  set.class_id = 1;
  CHECK_THROWS_AS(score_concepts(adapter, bank, set, cfg), ConfigError);
}
