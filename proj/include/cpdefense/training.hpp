#pragma once

#include <cstdint>
#include <vector>

#include "cpdefense/network.hpp"
#include "cpdefense/tensor.hpp"

namespace cpd {

struct TrainConfig {
  int epochs = 12;
  int batch_size = 16;
  double learning_rate = 2e-3;
  double weight_decay = 1e-4;
  // Per-image augmentation: random flips and additive Gaussian noise.
  bool flips = true;
  double noise_std = 0.02;
  std::uint64_t seed = 11;
};

struct TrainHistory {
  std::vector<double> epoch_loss;
  std::vector<double> epoch_accuracy;
};

// Minibatch Adam on softmax cross-entropy. Deterministic for a fixed seed.
TrainHistory train_classifier(nn::Network& net, const std::vector<Image>& images, const TrainConfig& config);

}  // namespace cpd
