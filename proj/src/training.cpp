#include "cpdefense/training.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "cpdefense/errors.hpp"

namespace cpd {

namespace {

Tensor3 augment(const Tensor3& in, std::mt19937_64& rng, const TrainConfig& cfg) {
  Tensor3 out = in;
  std::uniform_int_distribution<int> coin(0, 1);
  const bool flip_x = cfg.flips && coin(rng) == 1;
  const bool flip_y = cfg.flips && coin(rng) == 1;
  if (flip_x || flip_y) {
    for (int y = 0; y < in.height; ++y) {
      for (int x = 0; x < in.width; ++x) {
        const int sy = flip_y ? in.height - 1 - y : y;
        const int sx = flip_x ? in.width - 1 - x : x;
        for (int c = 0; c < in.channels; ++c) out.at(y, x, c) = in.at(sy, sx, c);
      }
    }
  }
  if (cfg.noise_std > 0.0) {
    std::normal_distribution<double> noise(0.0, cfg.noise_std);
    for (double& v : out.data) v = std::clamp(v + noise(rng), 0.0, 1.0);
  }
  return out;
}

}  // namespace

TrainHistory train_classifier(nn::Network& net, const std::vector<Image>& images, const TrainConfig& config) {
  if (images.empty()) throw InputError("training set is empty");
  if (config.batch_size < 1 || config.epochs < 0) throw ConfigError("invalid training configuration");
  std::mt19937_64 rng(config.seed);
  auto params = net.params();
  nn::ParamGrads m = net.zero_grads();
  nn::ParamGrads v = net.zero_grads();
  const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  long step = 0;
  const int last = static_cast<int>(net.blocks().size()) - 1;
  TrainHistory history;

  std::vector<std::size_t> order(images.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
    double loss_sum = 0.0;
    int correct = 0;
    // Cosine decay over epochs.
    const double lr = config.learning_rate * 0.5 *
                      (1.0 + std::cos(3.141592653589793 * epoch / std::max(1, config.epochs)));
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      nn::ParamGrads grads = net.zero_grads();
      for (std::size_t b = start; b < end; ++b) {
        const Image& img = images[order[b]];
        const Tensor3 x = net.normalize(augment(img.pixels, rng, config));
        std::vector<std::vector<nn::LayerCache>> caches;
        const Tensor3 out = net.forward_blocks(x, 0, last, &caches);
        std::vector<double> dl;
        loss_sum += nn::cross_entropy(out.data, img.true_label, &dl);
        if (std::max_element(out.data.begin(), out.data.end()) - out.data.begin() == img.true_label) ++correct;
        Tensor3 g(1, 1, static_cast<int>(dl.size()));
        g.data = dl;
        net.backward_blocks(g, 0, last, caches, &grads);
      }
      const double inv = 1.0 / static_cast<double>(end - start);
      ++step;
      const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
      for (std::size_t p = 0; p < params.size(); ++p) {
        auto& w = params[p]->value;
        const bool decay = params[p]->name == "weight";
        for (std::size_t i = 0; i < w.size(); ++i) {
          double g = grads[p][i] * inv;
          if (decay) g += config.weight_decay * w[i];
          m[p][i] = beta1 * m[p][i] + (1 - beta1) * g;
          v[p][i] = beta2 * v[p][i] + (1 - beta2) * g * g;
          w[i] -= lr * (m[p][i] / c1) / (std::sqrt(v[p][i] / c2) + eps);
        }
      }
    }
    history.epoch_loss.push_back(loss_sum / static_cast<double>(images.size()));
    history.epoch_accuracy.push_back(static_cast<double>(correct) / static_cast<double>(images.size()));
    spdlog::info("epoch {:2d}  loss {:.4f}  train acc {:.3f}", epoch + 1, history.epoch_loss.back(),
                 history.epoch_accuracy.back());
  }
  return history;
}

}  // namespace cpd
