#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cpdefense/network.hpp"
#include "cpdefense/tensor.hpp"

namespace cpd {

struct Prediction {
  ClassId label = -1;
  std::vector<double> logits;
};

// Anything that maps an image to a label. Stub classifiers in tests implement this directly.
class Classifier {
 public:
  virtual ~Classifier() = default;
  virtual Prediction predict(const Image& image) const = 0;
  virtual int num_classes() const = 0;
};

struct ActivationTensor {
  Tensor3 values;  // (H_a, W_a, C), non-negative
  std::string layer;
  std::string image_id;
};

struct LossSpec {
  enum class Kind { kUntargeted, kTargeted };
  Kind kind = Kind::kUntargeted;
  // Targeted: the class to move toward. Untargeted: the class to move away from;
  // defaults to the image's current prediction.
  std::optional<ClassId> label;

  static LossSpec untargeted(std::optional<ClassId> reference = std::nullopt) {
    return {Kind::kUntargeted, reference};
  }
  static LossSpec targeted(ClassId target) { return {Kind::kTargeted, target}; }
};

struct AdapterSpec {
  std::filesystem::path weights;
  std::string split_layer;  // empty selects the last spatial block
  std::string backbone = "desk-cnn";
};

// A trained network viewed as f = g o h, split after a named block. h ends in a rectifier,
// so its activations are non-negative; g maps them to logits. Immutable once constructed.
class ClassifierAdapter final : public Classifier {
 public:
  ClassifierAdapter(nn::Network network, const std::string& split_layer, std::string backbone = "desk-cnn");

  static ClassifierAdapter load(const AdapterSpec& spec);

  Prediction predict(const Image& image) const override;
  int num_classes() const override { return network_.num_classes(); }

  ActivationTensor activations(const Image& image) const;
  // g: logits from a split-layer activation tensor.
  std::vector<double> head_logits(const Tensor3& activation) const;
  // Gradient of the cross-entropy loss with respect to the [0,1] pixels. Untargeted loss
  // is the cross-entropy of the reference class (ascend to attack); targeted loss is the
  // cross-entropy of the target class (descend to attack).
  Tensor3 input_gradient(const Image& image, const LossSpec& loss, double* loss_value = nullptr) const;

  // Largest |g(h(x)) - f(x)| relative to 1 + |f(x)|_inf.
  double split_consistency_error(const Image& image) const;

  const nn::Network& network() const { return network_; }
  const std::string& split_layer() const { return split_layer_; }
  const std::string& backbone() const { return backbone_; }
  int input_size() const { return network_.input_height; }
  int split_index() const { return split_index_; }
  std::vector<std::string> valid_split_layers() const;

 private:
  void check_input(const Image& image) const;

  nn::Network network_;
  std::string split_layer_;
  std::string backbone_;
  int split_index_ = -1;
};

// Top-1 accuracy on a labelled sanity batch; logs a warning when it falls below `floor`.
double sanity_accuracy(const Classifier& classifier, const std::vector<Image>& batch, double floor);

// Activation cache file: one container per image holding the tensor and its layer name.
void save_activation(const std::filesystem::path& path, const ActivationTensor& act);
ActivationTensor load_activation(const std::filesystem::path& path);

}  // namespace cpd
