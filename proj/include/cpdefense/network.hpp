#pragma once

#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cpdefense/tensor.hpp"

namespace cpd::nn {

struct Param {
  std::string name;
  std::vector<int> shape;
  std::vector<double> value;
};

// Per-parameter gradient buffers, aligned with Network::params() order.
using ParamGrads = std::vector<std::vector<double>>;

// Intermediate state a layer needs to run its backward pass.
struct LayerCache {
  Tensor3 input;
  std::vector<double> aux;
  std::vector<LayerCache> children;
};

class Layer {
 public:
  virtual ~Layer() = default;

  virtual Tensor3 forward(const Tensor3& in, LayerCache* cache) const = 0;
  // `grads` is empty (input gradient only) or holds one buffer per entry of params().
  virtual Tensor3 backward(const Tensor3& grad_out, const LayerCache& cache,
                           std::span<std::vector<double>* const> grads) const = 0;

  virtual std::vector<Param*> params() { return {}; }
  virtual std::vector<const Param*> params() const { return {}; }
  virtual nlohmann::json config() const = 0;
  virtual std::unique_ptr<Layer> clone() const = 0;
};

std::unique_ptr<Layer> make_layer(const nlohmann::json& config);

struct Block {
  std::string name;
  std::vector<std::unique_ptr<Layer>> layers;
};

struct Normalization {
  std::vector<double> mean{0.5, 0.5, 0.5};
  std::vector<double> stddev{0.25, 0.25, 0.25};
};

// A feed-forward classifier built from named blocks. The last block ends in logits
// (a 1x1xK tensor); every other block boundary is a candidate split point.
class Network {
 public:
  Network() = default;
  Network(const Network& other);
  Network& operator=(const Network& other);
  Network(Network&&) noexcept = default;
  Network& operator=(Network&&) noexcept = default;

  static Network from_architecture(const nlohmann::json& arch);
  nlohmann::json architecture() const;

  void add_block(std::string name, std::vector<std::unique_ptr<Layer>> layers);

  int input_height = 64;
  int input_width = 64;
  std::vector<std::string> class_names;
  Normalization normalization;

  int num_classes() const { return static_cast<int>(class_names.size()); }
  const std::vector<Block>& blocks() const { return blocks_; }
  std::vector<std::string> block_names() const;
  int block_index(const std::string& name) const;  // -1 when absent

  // Runs blocks [first, last] on `in`. When `caches` is given it receives one cache
  // vector per executed block.
  Tensor3 forward_blocks(const Tensor3& in, int first, int last,
                         std::vector<std::vector<LayerCache>>* caches = nullptr) const;
  // Back-propagates through blocks [first, last] given the caches of a matching forward.
  Tensor3 backward_blocks(const Tensor3& grad_out, int first, int last,
                          const std::vector<std::vector<LayerCache>>& caches, ParamGrads* grads) const;

  Tensor3 normalize(const Tensor3& pixels) const;
  std::vector<double> logits(const Tensor3& pixels) const;

  std::vector<Param*> params();
  std::vector<const Param*> params() const;
  std::size_t parameter_count() const;
  ParamGrads zero_grads() const;

  void save(const std::filesystem::path& path) const;
  static Network load(const std::filesystem::path& path);

 private:
  std::vector<Block> blocks_;
};

// Softmax cross-entropy of `logits` against `label`; writes d(loss)/d(logits) when requested.
double cross_entropy(const std::vector<double>& logits, int label, std::vector<double>* grad = nullptr);
std::vector<double> softmax(const std::vector<double>& logits);

// Small VGG-style desk classifier: one 3x3 conv + ReLU per block, 2x2 average pooling
// after the first `pooled_blocks` blocks, then global pooling ("gap" average or "gmp" max)
// and a linear head.
Network make_desk_cnn(const std::vector<std::string>& classes, const std::vector<int>& channels,
                      int pooled_blocks, int image_size, const std::string& global_pool = "gap");

// Standard 50-layer bottleneck residual network (ImageNet layout) with batch norm folded
// into per-channel affine layers. Blocks: stem, layer1..layer4, head.
Network make_resnet50(const std::vector<std::string>& classes, int image_size);

// Same topology with one bottleneck unit per stage and reduced widths, for tests.
Network make_mini_resnet(const std::vector<std::string>& classes, int image_size, int base_width);

// He-normal weights, zero biases, identity affine layers.
void initialize(Network& net, unsigned seed);

}  // namespace cpd::nn
