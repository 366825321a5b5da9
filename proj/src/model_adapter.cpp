#include "cpdefense/model_adapter.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>

#include "cpdefense/array_store.hpp"
#include "cpdefense/errors.hpp"

namespace cpd {

ClassifierAdapter::ClassifierAdapter(nn::Network network, const std::string& split_layer, std::string backbone)
    : network_(std::move(network)), backbone_(std::move(backbone)) {
  const auto names = valid_split_layers();
  if (names.empty()) throw ConfigError("network has no spatial block to split after");
  split_layer_ = split_layer.empty() ? names.back() : split_layer;
  if (std::find(names.begin(), names.end(), split_layer_) == names.end()) {
    std::string list;
    for (const auto& n : names) list += (list.empty() ? "" : ", ") + n;
    throw ConfigError("unknown split layer '" + split_layer_ + "'; valid layers: " + list);
  }
  split_index_ = network_.block_index(split_layer_);
}

ClassifierAdapter ClassifierAdapter::load(const AdapterSpec& spec) {
  return ClassifierAdapter(nn::Network::load(spec.weights), spec.split_layer, spec.backbone);
}

std::vector<std::string> ClassifierAdapter::valid_split_layers() const {
  auto names = network_.block_names();
  if (!names.empty()) names.pop_back();  // the head produces logits, not a spatial map
  return names;
}

void ClassifierAdapter::check_input(const Image& image) const {
  if (image.pixels.height != network_.input_height || image.pixels.width != network_.input_width ||
      image.pixels.channels != 3) {
    throw InputError("image '" + image.id + "' is " + std::to_string(image.pixels.height) + "x" +
                     std::to_string(image.pixels.width) + "x" + std::to_string(image.pixels.channels) +
                     ", classifier expects " + std::to_string(network_.input_height) + "x" +
                     std::to_string(network_.input_width) + "x3");
  }
}

Prediction ClassifierAdapter::predict(const Image& image) const {
  check_input(image);
  Prediction p;
  p.logits = network_.logits(image.pixels);
  p.label = static_cast<ClassId>(std::max_element(p.logits.begin(), p.logits.end()) - p.logits.begin());
  return p;
}

ActivationTensor ClassifierAdapter::activations(const Image& image) const {
  check_input(image);
  return {network_.forward_blocks(network_.normalize(image.pixels), 0, split_index_), split_layer_, image.id};
}

std::vector<double> ClassifierAdapter::head_logits(const Tensor3& activation) const {
  const int last = static_cast<int>(network_.blocks().size()) - 1;
  return network_.forward_blocks(activation, split_index_ + 1, last).data;
}

Tensor3 ClassifierAdapter::input_gradient(const Image& image, const LossSpec& loss, double* loss_value) const {
  check_input(image);
  const int last = static_cast<int>(network_.blocks().size()) - 1;
  std::vector<std::vector<nn::LayerCache>> caches;
  const Tensor3 out = network_.forward_blocks(network_.normalize(image.pixels), 0, last, &caches);
  ClassId label;
  if (loss.label) {
    label = *loss.label;
  } else if (loss.kind == LossSpec::Kind::kUntargeted) {
    label = static_cast<ClassId>(std::max_element(out.data.begin(), out.data.end()) - out.data.begin());
  } else {
    throw UnsupportedError("targeted loss requires a target class");
  }
  if (label < 0 || label >= num_classes()) throw InputError("loss label out of range");
  std::vector<double> dlogits;
  const double value = nn::cross_entropy(out.data, label, &dlogits);
  if (loss_value) *loss_value = value;
  Tensor3 g(1, 1, static_cast<int>(dlogits.size()));
  g.data = dlogits;
  Tensor3 grad = network_.backward_blocks(g, 0, last, caches, nullptr);
  const std::size_t c = 3;
  for (std::size_t i = 0; i < grad.data.size(); ++i) grad.data[i] /= network_.normalization.stddev[i % c];
  return grad;
}

double ClassifierAdapter::split_consistency_error(const Image& image) const {
  const std::vector<double> full = predict(image).logits;
  const std::vector<double> split = head_logits(activations(image).values);
  double diff = 0.0;
  double scale = 0.0;
  for (std::size_t i = 0; i < full.size(); ++i) {
    diff = std::max(diff, std::abs(full[i] - split[i]));
    scale = std::max(scale, std::abs(full[i]));
  }
  return diff / (1.0 + scale);
}

double sanity_accuracy(const Classifier& classifier, const std::vector<Image>& batch, double floor) {
  if (batch.empty()) return 0.0;
  int correct = 0;
  for (const Image& img : batch) correct += classifier.predict(img).label == img.true_label ? 1 : 0;
  const double acc = static_cast<double>(correct) / static_cast<double>(batch.size());
  if (acc < floor) {
    spdlog::warn("classifier sanity accuracy {:.3f} is below the configured floor {:.3f}", acc, floor);
  }
  return acc;
}

void save_activation(const std::filesystem::path& path, const ActivationTensor& act) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  ArrayStore store(path, ArrayStore::Mode::kCreate);
  store.set_attribute("layer", act.layer);
  store.set_attribute("image_id", act.image_id);
  store.write("activation", {{act.values.height, act.values.width, act.values.channels}, act.values.data});
}

ActivationTensor load_activation(const std::filesystem::path& path) {
  ArrayStore store(path, ArrayStore::Mode::kRead);
  NamedArray a = store.read("activation");
  if (a.shape.size() != 3) throw InputError("activation container must hold a rank-3 tensor");
  ActivationTensor act;
  act.values = Tensor3(a.shape[0], a.shape[1], a.shape[2]);
  act.values.data = std::move(a.values);
  act.layer = store.attribute("layer");
  act.image_id = store.attribute("image_id");
  return act;
}

}  // namespace cpd
