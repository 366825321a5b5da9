#include "cpdefense/concept_importance.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>

#include "cpdefense/errors.hpp"
#include "cpdefense/nnls.hpp"

namespace cpd {

std::vector<double> recover_coefficients(std::span<const double> pooled_activation, const ConceptBank& bank) {
  return nnls(bank.W, pooled_activation);
}

std::vector<double> concept_coefficients(const ClassifierAdapter& adapter, const Image& image,
                                         const ConceptBank& bank) {
  const ClassId predicted = adapter.predict(image).label;
  if (predicted != bank.class_id) {
    throw InputError("image " + image.id + " is predicted as class " + std::to_string(predicted) +
                     " but the bank belongs to class " + std::to_string(bank.class_id));
  }
  return recover_coefficients(spatial_mean(adapter.activations(image).values), bank);
}

std::vector<int> ImportanceScores::top(int m) const {
  if (m < 0 || m > static_cast<int>(ranking.size())) {
    throw ConfigError("requested top " + std::to_string(m) + " of " + std::to_string(ranking.size()) + " concepts");
  }
  return {ranking.begin(), ranking.begin() + m};
}

std::vector<int> rank_descending(const std::vector<double>& scores) {
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores[a] > scores[b]; });
  return order;
}

ValueFunction masked_concept_value(const ClassifierAdapter& adapter, const ConceptBank& bank,
                                   std::vector<double> coefficients, int activation_height, int activation_width) {
  return [&adapter, &bank, u = std::move(coefficients), activation_height, activation_width](
             std::span<const double> mask) {
    const Eigen::Index C = bank.W.cols();
    Eigen::VectorXd pooled = Eigen::VectorXd::Zero(C);
    for (int j = 0; j < bank.k(); ++j) pooled += (mask[j] * u[j]) * bank.W.row(j).transpose();
    Tensor3 act(activation_height, activation_width, static_cast<int>(C));
    for (int y = 0; y < activation_height; ++y)
      for (int x = 0; x < activation_width; ++x) {
        auto px = act.pixel(y, x);
        for (Eigen::Index c = 0; c < C; ++c) px[c] = pooled[c];
      }
    return adapter.head_logits(act)[bank.class_id];
  };
}

ImportanceScores score_concepts(const ClassifierAdapter& adapter, const ConceptBank& bank,
                                const ClassConditionedSet& set, const ScoringConfig& config) {
  if (bank.class_id != set.class_id) {
    throw ConfigError("bank class " + std::to_string(bank.class_id) + " does not match set class " +
                      std::to_string(set.class_id));
  }
  if (set.images.empty()) throw DegenerateInputError("class " + std::to_string(set.class_id) + " has no images");
  if (config.sample_images < 1) throw ConfigError("sample_images must be positive");

  std::vector<std::size_t> order(set.images.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(config.seed ^ (0xA24BAED4963EE407ULL * static_cast<std::uint64_t>(set.class_id + 1)));
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  order.resize(std::min(order.size(), static_cast<std::size_t>(config.sample_images)));

  const SobolDesign design = make_sobol_design(bank.k(), config.designs, config.seed);
  ImportanceScores out;
  out.class_id = bank.class_id;
  out.designs = config.designs;
  out.seed = config.seed;
  out.raw.assign(static_cast<std::size_t>(bank.k()), 0.0);
  int used = 0;
  for (std::size_t idx : order) {
    const Image& img = set.images[idx];
    const ActivationTensor act = adapter.activations(img);
    const std::vector<double> u = recover_coefficients(spatial_mean(act.values), bank);
    const SobolTotals t =
        sobol_total_indices(masked_concept_value(adapter, bank, u, act.values.height, act.values.width), design);
    if (t.zero_variance) {
      ++out.degenerate_images;
      continue;
    }
    for (std::size_t j = 0; j < out.raw.size(); ++j) out.raw[j] += t.totals[j];
    out.images_used.push_back(img.id);
    ++used;
  }
  if (used == 0) {
    throw DegenerateInputError("class " + std::to_string(bank.class_id) +
                               ": the class score does not vary with the concept masks on any sampled image; "
                               "try a larger k or a different split layer");
  }
  if (out.degenerate_images > 0) {
    spdlog::warn("class {}: {} sampled images had zero score variance", bank.class_id, out.degenerate_images);
  }
  for (double& v : out.raw) v /= used;
  out.clipped = out.raw;
  for (double& v : out.clipped) v = std::max(0.0, v);
  out.ranking = rank_descending(out.clipped);
  return out;
}

nlohmann::json to_json(const ImportanceScores& s) {
  return {{"class_id", s.class_id}, {"raw_scores", s.raw},   {"clipped_scores", s.clipped},
          {"ranking", s.ranking},   {"N", s.designs},        {"seed", s.seed},
          {"images_used", s.images_used}, {"degenerate_images", s.degenerate_images}};
}

ImportanceScores scores_from_json(const nlohmann::json& j) {
  ImportanceScores s;
  s.class_id = j.at("class_id");
  s.raw = j.at("raw_scores").get<std::vector<double>>();
  s.clipped = j.at("clipped_scores").get<std::vector<double>>();
  s.ranking = j.at("ranking").get<std::vector<int>>();
  s.designs = j.at("N");
  s.seed = j.at("seed");
  s.images_used = j.at("images_used").get<std::vector<std::string>>();
  s.degenerate_images = j.value("degenerate_images", 0);
  std::vector<int> sorted = s.ranking;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    if (sorted[i] != static_cast<int>(i) || sorted.size() != s.raw.size()) {
      throw InputError("scores ranking is not a permutation of the concept indices");
    }
  }
  return s;
}

void save_scores(const std::filesystem::path& path, const ImportanceScores& scores) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write scores " + path.string());
  out << to_json(scores).dump(2) << "\n";
}

ImportanceScores load_scores(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read scores " + path.string());
  return scores_from_json(nlohmann::json::parse(in));
}

}  // namespace cpd
