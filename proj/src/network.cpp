#include "cpdefense/network.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "cpdefense/array_store.hpp"
#include "cpdefense/errors.hpp"

namespace cpd::nn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;
using GradSpan = std::span<std::vector<double>* const>;

Tensor3 shape_only(const Tensor3& t) {
  Tensor3 s;
  s.height = t.height;
  s.width = t.width;
  s.channels = t.channels;
  return s;
}

class Conv2d final : public Layer {
 public:
  Conv2d(int in_ch, int out_ch, int kernel, int stride, int pad, bool bias)
      : in_ch_(in_ch), out_ch_(out_ch), kernel_(kernel), stride_(stride), pad_(pad), has_bias_(bias) {
    weight_.name = "weight";
    weight_.shape = {kernel * kernel * in_ch, out_ch};
    weight_.value.assign(static_cast<std::size_t>(kernel) * kernel * in_ch * out_ch, 0.0);
    if (has_bias_) {
      bias_.name = "bias";
      bias_.shape = {out_ch};
      bias_.value.assign(static_cast<std::size_t>(out_ch), 0.0);
    }
  }

  int out_size(int in, int) const { return (in + 2 * pad_ - kernel_) / stride_ + 1; }
  bool pointwise() const { return kernel_ == 1 && stride_ == 1 && pad_ == 0; }

  void im2col(const Tensor3& in, int oh, int ow, std::vector<double>& col) const {
    const int patch = kernel_ * kernel_ * in_ch_;
    col.assign(static_cast<std::size_t>(oh) * ow * patch, 0.0);
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        double* row = col.data() + (static_cast<std::size_t>(oy) * ow + ox) * patch;
        for (int ky = 0; ky < kernel_; ++ky) {
          const int iy = oy * stride_ - pad_ + ky;
          if (iy < 0 || iy >= in.height) continue;
          for (int kx = 0; kx < kernel_; ++kx) {
            const int ix = ox * stride_ - pad_ + kx;
            if (ix < 0 || ix >= in.width) continue;
            const double* src = in.data.data() + in.index(iy, ix, 0);
            std::copy(src, src + in_ch_, row + (ky * kernel_ + kx) * in_ch_);
          }
        }
      }
    }
  }

  Tensor3 forward(const Tensor3& in, LayerCache* cache) const override {
    if (in.channels != in_ch_) throw InputError("conv input channel mismatch");
    const int oh = out_size(in.height, 0);
    const int ow = out_size(in.width, 0);
    const int patch = kernel_ * kernel_ * in_ch_;
    Tensor3 out(oh, ow, out_ch_);
    ConstMapMat w(weight_.value.data(), patch, out_ch_);
    MapMat o(out.data.data(), static_cast<Eigen::Index>(oh) * ow, out_ch_);
    if (pointwise()) {
      ConstMapMat x(in.data.data(), static_cast<Eigen::Index>(oh) * ow, patch);
      o.noalias() = x * w;
      if (cache) cache->input = in;
    } else {
      std::vector<double> col;
      im2col(in, oh, ow, col);
      ConstMapMat x(col.data(), static_cast<Eigen::Index>(oh) * ow, patch);
      o.noalias() = x * w;
      if (cache) {
        cache->input = shape_only(in);
        cache->aux = std::move(col);
      }
    }
    if (has_bias_) {
      Eigen::Map<const Eigen::RowVectorXd> b(bias_.value.data(), out_ch_);
      o.rowwise() += b;
    }
    return out;
  }

  Tensor3 backward(const Tensor3& grad_out, const LayerCache& cache, GradSpan grads) const override {
    const int oh = grad_out.height;
    const int ow = grad_out.width;
    const int patch = kernel_ * kernel_ * in_ch_;
    const Eigen::Index rows = static_cast<Eigen::Index>(oh) * ow;
    ConstMapMat g(grad_out.data.data(), rows, out_ch_);
    ConstMapMat w(weight_.value.data(), patch, out_ch_);
    const double* col_data = pointwise() ? cache.input.data.data() : cache.aux.data();
    ConstMapMat x(col_data, rows, patch);
    if (!grads.empty()) {
      MapMat dw(grads[0]->data(), patch, out_ch_);
      dw.noalias() += x.transpose() * g;
      if (has_bias_) {
        // Plain loop: Eigen's vectorized reduction over a Map peels by buffer alignment,
        // which makes the summation order (and the low bits) depend on heap addresses.
        double* db = grads[1]->data();
        for (Eigen::Index r = 0; r < rows; ++r)
          for (int c = 0; c < out_ch_; ++c) db[c] += g(r, c);
      }
    }
    Tensor3 grad_in(cache.input.height, cache.input.width, cache.input.channels);
    if (pointwise()) {
      MapMat gi(grad_in.data.data(), rows, patch);
      gi.noalias() = g * w.transpose();
      return grad_in;
    }
    RowMat dcol = g * w.transpose();
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        const double* row = dcol.data() + (static_cast<std::size_t>(oy) * ow + ox) * patch;
        for (int ky = 0; ky < kernel_; ++ky) {
          const int iy = oy * stride_ - pad_ + ky;
          if (iy < 0 || iy >= grad_in.height) continue;
          for (int kx = 0; kx < kernel_; ++kx) {
            const int ix = ox * stride_ - pad_ + kx;
            if (ix < 0 || ix >= grad_in.width) continue;
            double* dst = grad_in.data.data() + grad_in.index(iy, ix, 0);
            const double* src = row + (ky * kernel_ + kx) * in_ch_;
            for (int c = 0; c < in_ch_; ++c) dst[c] += src[c];
          }
        }
      }
    }
    return grad_in;
  }

  std::vector<Param*> params() override {
    if (has_bias_) return {&weight_, &bias_};
    return {&weight_};
  }
  std::vector<const Param*> params() const override {
    if (has_bias_) return {&weight_, &bias_};
    return {&weight_};
  }
  nlohmann::json config() const override {
    return {{"type", "conv"}, {"in", in_ch_}, {"out", out_ch_}, {"kernel", kernel_},
            {"stride", stride_}, {"pad", pad_}, {"bias", has_bias_}};
  }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Conv2d>(*this); }

 private:
  int in_ch_, out_ch_, kernel_, stride_, pad_;
  bool has_bias_;
  Param weight_;
  Param bias_;
};

class Relu final : public Layer {
 public:
  Tensor3 forward(const Tensor3& in, LayerCache* cache) const override {
    Tensor3 out = in;
    for (double& v : out.data) v = v > 0.0 ? v : 0.0;
    if (cache) cache->input = out;
    return out;
  }
  Tensor3 backward(const Tensor3& grad_out, const LayerCache& cache, GradSpan) const override {
    Tensor3 g = grad_out;
    for (std::size_t i = 0; i < g.data.size(); ++i) {
      if (cache.input.data[i] <= 0.0) g.data[i] = 0.0;
    }
    return g;
  }
  nlohmann::json config() const override { return {{"type", "relu"}}; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Relu>(*this); }
};

class AvgPool final : public Layer {
 public:
  explicit AvgPool(int size) : size_(size) {}
  Tensor3 forward(const Tensor3& in, LayerCache* cache) const override {
    const int oh = in.height / size_;
    const int ow = in.width / size_;
    Tensor3 out(oh, ow, in.channels);
    const double scale = 1.0 / (size_ * size_);
    for (int y = 0; y < oh; ++y) {
      for (int x = 0; x < ow; ++x) {
        auto dst = out.pixel(y, x);
        for (int dy = 0; dy < size_; ++dy) {
          for (int dx = 0; dx < size_; ++dx) {
            auto src = in.pixel(y * size_ + dy, x * size_ + dx);
            for (int c = 0; c < in.channels; ++c) dst[c] += src[c];
          }
        }
        for (double& v : dst) v *= scale;
      }
    }
    if (cache) cache->input = shape_only(in);
    return out;
  }
  Tensor3 backward(const Tensor3& grad_out, const LayerCache& cache, GradSpan) const override {
    Tensor3 g(cache.input.height, cache.input.width, cache.input.channels);
    const double scale = 1.0 / (size_ * size_);
    for (int y = 0; y < grad_out.height; ++y) {
      for (int x = 0; x < grad_out.width; ++x) {
        auto src = grad_out.pixel(y, x);
        for (int dy = 0; dy < size_; ++dy) {
          for (int dx = 0; dx < size_; ++dx) {
            auto dst = g.pixel(y * size_ + dy, x * size_ + dx);
            for (int c = 0; c < g.channels; ++c) dst[c] = src[c] * scale;
          }
        }
      }
    }
    return g;
  }
  nlohmann::json config() const override { return {{"type", "avgpool"}, {"size", size_}}; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<AvgPool>(*this); }

 private:
  int size_;
};

class MaxPool final : public Layer {
 public:
  MaxPool(int kernel, int stride, int pad) : kernel_(kernel), stride_(stride), pad_(pad) {}
  Tensor3 forward(const Tensor3& in, LayerCache* cache) const override {
    const int oh = (in.height + 2 * pad_ - kernel_) / stride_ + 1;
    const int ow = (in.width + 2 * pad_ - kernel_) / stride_ + 1;
    Tensor3 out(oh, ow, in.channels, -std::numeric_limits<double>::infinity());
    std::vector<double> argmax(out.size(), -1.0);
    for (int y = 0; y < oh; ++y) {
      for (int x = 0; x < ow; ++x) {
        for (int ky = 0; ky < kernel_; ++ky) {
          const int iy = y * stride_ - pad_ + ky;
          if (iy < 0 || iy >= in.height) continue;
          for (int kx = 0; kx < kernel_; ++kx) {
            const int ix = x * stride_ - pad_ + kx;
            if (ix < 0 || ix >= in.width) continue;
            for (int c = 0; c < in.channels; ++c) {
              const std::size_t o = out.index(y, x, c);
              const std::size_t i = in.index(iy, ix, c);
              if (in.data[i] > out.data[o]) {
                out.data[o] = in.data[i];
                argmax[o] = static_cast<double>(i);
              }
            }
          }
        }
      }
    }
    if (cache) {
      cache->input = shape_only(in);
      cache->aux = std::move(argmax);
    }
    return out;
  }
  Tensor3 backward(const Tensor3& grad_out, const LayerCache& cache, GradSpan) const override {
    Tensor3 g(cache.input.height, cache.input.width, cache.input.channels);
    for (std::size_t o = 0; o < grad_out.size(); ++o) {
      if (cache.aux[o] >= 0.0) g.data[static_cast<std::size_t>(cache.aux[o])] += grad_out.data[o];
    }
    return g;
  }
  nlohmann::json config() const override {
    return {{"type", "maxpool"}, {"kernel", kernel_}, {"stride", stride_}, {"pad", pad_}};
  }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<MaxPool>(*this); }

 private:
  int kernel_, stride_, pad_;
};

// Per-channel y = scale * x + shift (inference-mode batch norm).
class Affine final : public Layer {
 public:
  explicit Affine(int channels) : channels_(channels) {
    scale_ = {"scale", {channels}, std::vector<double>(static_cast<std::size_t>(channels), 1.0)};
    shift_ = {"shift", {channels}, std::vector<double>(static_cast<std::size_t>(channels), 0.0)};
  }
  Tensor3 forward(const Tensor3& in, LayerCache* cache) const override {
    Tensor3 out = in;
    const std::size_t c = static_cast<std::size_t>(channels_);
    for (std::size_t i = 0; i < out.data.size(); ++i) {
      out.data[i] = out.data[i] * scale_.value[i % c] + shift_.value[i % c];
    }
    if (cache) cache->input = in;
    return out;
  }
  Tensor3 backward(const Tensor3& grad_out, const LayerCache& cache, GradSpan grads) const override {
    Tensor3 g = grad_out;
    const std::size_t c = static_cast<std::size_t>(channels_);
    for (std::size_t i = 0; i < g.data.size(); ++i) {
      if (!grads.empty()) {
        (*grads[0])[i % c] += grad_out.data[i] * cache.input.data[i];
        (*grads[1])[i % c] += grad_out.data[i];
      }
      g.data[i] *= scale_.value[i % c];
    }
    return g;
  }
  std::vector<Param*> params() override { return {&scale_, &shift_}; }
  std::vector<const Param*> params() const override { return {&scale_, &shift_}; }
  nlohmann::json config() const override { return {{"type", "affine"}, {"channels", channels_}}; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Affine>(*this); }

 private:
  int channels_;
  Param scale_;
  Param shift_;
};

class GlobalAvgPool final : public Layer {
 public:
  Tensor3 forward(const Tensor3& in, LayerCache* cache) const override {
    Tensor3 out(1, 1, in.channels);
    const std::vector<double> mean = spatial_mean(in);
    std::copy(mean.begin(), mean.end(), out.data.begin());
    if (cache) cache->input = shape_only(in);
    return out;
  }
  Tensor3 backward(const Tensor3& grad_out, const LayerCache& cache, GradSpan) const override {
    Tensor3 g(cache.input.height, cache.input.width, cache.input.channels);
    const double scale = 1.0 / (static_cast<double>(g.height) * g.width);
    for (std::size_t i = 0; i < g.data.size(); ++i) {
      g.data[i] = grad_out.data[i % static_cast<std::size_t>(g.channels)] * scale;
    }
    return g;
  }
  nlohmann::json config() const override { return {{"type", "gap"}}; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<GlobalAvgPool>(*this); }
};

class Dense final : public Layer {
 public:
  Dense(int in, int out) : in_(in), out_(out) {
    weight_ = {"weight", {in, out}, std::vector<double>(static_cast<std::size_t>(in) * out, 0.0)};
    bias_ = {"bias", {out}, std::vector<double>(static_cast<std::size_t>(out), 0.0)};
  }
  Tensor3 forward(const Tensor3& in, LayerCache* cache) const override {
    if (in.size() != static_cast<std::size_t>(in_)) throw InputError("dense input size mismatch");
    Tensor3 out(1, 1, out_);
    Eigen::Map<const Eigen::RowVectorXd> x(in.data.data(), in_);
    ConstMapMat w(weight_.value.data(), in_, out_);
    Eigen::Map<Eigen::RowVectorXd> o(out.data.data(), out_);
    o.noalias() = x * w;
    o += Eigen::Map<const Eigen::RowVectorXd>(bias_.value.data(), out_);
    if (cache) cache->input = in;
    return out;
  }
  Tensor3 backward(const Tensor3& grad_out, const LayerCache& cache, GradSpan grads) const override {
    Eigen::Map<const Eigen::RowVectorXd> g(grad_out.data.data(), out_);
    Eigen::Map<const Eigen::RowVectorXd> x(cache.input.data.data(), in_);
    ConstMapMat w(weight_.value.data(), in_, out_);
    if (!grads.empty()) {
      MapMat dw(grads[0]->data(), in_, out_);
      dw.noalias() += x.transpose() * g;
      Eigen::Map<Eigen::RowVectorXd>(grads[1]->data(), out_) += g;
    }
    Tensor3 gi(cache.input.height, cache.input.width, cache.input.channels);
    Eigen::Map<Eigen::RowVectorXd>(gi.data.data(), in_).noalias() = g * w.transpose();
    return gi;
  }
  std::vector<Param*> params() override { return {&weight_, &bias_}; }
  std::vector<const Param*> params() const override { return {&weight_, &bias_}; }
  nlohmann::json config() const override { return {{"type", "dense"}, {"in", in_}, {"out", out_}}; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Dense>(*this); }

 private:
  int in_, out_;
  Param weight_;
  Param bias_;
};

std::vector<std::unique_ptr<Layer>> clone_layers(const std::vector<std::unique_ptr<Layer>>& layers) {
  std::vector<std::unique_ptr<Layer>> out;
  out.reserve(layers.size());
  for (const auto& l : layers) out.push_back(l->clone());
  return out;
}

std::size_t param_total(const std::vector<std::unique_ptr<Layer>>& layers) {
  std::size_t n = 0;
  for (const auto& l : layers) n += std::as_const(*l).params().size();
  return n;
}

Tensor3 run_forward(const std::vector<std::unique_ptr<Layer>>& layers, const Tensor3& in,
                    std::vector<LayerCache>* caches) {
  if (caches) caches->assign(layers.size(), LayerCache{});
  Tensor3 x = in;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    x = layers[i]->forward(x, caches ? &(*caches)[i] : nullptr);
  }
  return x;
}

Tensor3 run_backward(const std::vector<std::unique_ptr<Layer>>& layers, const Tensor3& grad_out,
                     const std::vector<LayerCache>& caches, GradSpan grads) {
  std::size_t offset = param_total(layers);
  Tensor3 g = grad_out;
  for (std::size_t i = layers.size(); i-- > 0;) {
    const std::size_t n = std::as_const(*layers[i]).params().size();
    offset -= n;
    GradSpan sub = grads.empty() ? GradSpan{} : grads.subspan(offset, n);
    g = layers[i]->backward(g, caches[i], sub);
  }
  return g;
}

// Residual bottleneck: relu(main(x) + shortcut(x)).
class Bottleneck final : public Layer {
 public:
  Bottleneck(int in_ch, int mid, int out_ch, int stride) : in_(in_ch), mid_(mid), out_(out_ch), stride_(stride) {
    main_.push_back(std::make_unique<Conv2d>(in_ch, mid, 1, 1, 0, false));
    main_.push_back(std::make_unique<Affine>(mid));
    main_.push_back(std::make_unique<Relu>());
    main_.push_back(std::make_unique<Conv2d>(mid, mid, 3, stride, 1, false));
    main_.push_back(std::make_unique<Affine>(mid));
    main_.push_back(std::make_unique<Relu>());
    main_.push_back(std::make_unique<Conv2d>(mid, out_ch, 1, 1, 0, false));
    main_.push_back(std::make_unique<Affine>(out_ch));
    if (stride != 1 || in_ch != out_ch) {
      shortcut_.push_back(std::make_unique<Conv2d>(in_ch, out_ch, 1, stride, 0, false));
      shortcut_.push_back(std::make_unique<Affine>(out_ch));
    }
  }
  Bottleneck(const Bottleneck& o)
      : in_(o.in_), mid_(o.mid_), out_(o.out_), stride_(o.stride_),
        main_(clone_layers(o.main_)), shortcut_(clone_layers(o.shortcut_)) {}

  Tensor3 forward(const Tensor3& in, LayerCache* cache) const override {
    std::vector<LayerCache> main_cache;
    std::vector<LayerCache> short_cache;
    Tensor3 y = run_forward(main_, in, cache ? &main_cache : nullptr);
    Tensor3 s = shortcut_.empty() ? in : run_forward(shortcut_, in, cache ? &short_cache : nullptr);
    for (std::size_t i = 0; i < y.data.size(); ++i) {
      y.data[i] = std::max(0.0, y.data[i] + s.data[i]);
    }
    if (cache) {
      cache->children.clear();
      cache->children.push_back(LayerCache{});
      cache->children[0].children = std::move(main_cache);
      cache->children.push_back(LayerCache{});
      cache->children[1].children = std::move(short_cache);
      cache->input = y;
    }
    return y;
  }

  Tensor3 backward(const Tensor3& grad_out, const LayerCache& cache, GradSpan grads) const override {
    Tensor3 g = grad_out;
    for (std::size_t i = 0; i < g.data.size(); ++i) {
      if (cache.input.data[i] <= 0.0) g.data[i] = 0.0;
    }
    const std::size_t n_main = param_total(main_);
    GradSpan main_grads = grads.empty() ? GradSpan{} : grads.subspan(0, n_main);
    GradSpan short_grads = grads.empty() ? GradSpan{} : grads.subspan(n_main);
    Tensor3 gi = run_backward(main_, g, cache.children[0].children, main_grads);
    if (shortcut_.empty()) {
      for (std::size_t i = 0; i < gi.data.size(); ++i) gi.data[i] += g.data[i];
    } else {
      Tensor3 gs = run_backward(shortcut_, g, cache.children[1].children, short_grads);
      for (std::size_t i = 0; i < gi.data.size(); ++i) gi.data[i] += gs.data[i];
    }
    return gi;
  }

  std::vector<Param*> params() override {
    std::vector<Param*> out;
    for (auto& l : main_) for (Param* p : l->params()) out.push_back(p);
    for (auto& l : shortcut_) for (Param* p : l->params()) out.push_back(p);
    return out;
  }
  std::vector<const Param*> params() const override {
    std::vector<const Param*> out;
    for (const auto& l : main_) for (const Param* p : std::as_const(*l).params()) out.push_back(p);
    for (const auto& l : shortcut_) for (const Param* p : std::as_const(*l).params()) out.push_back(p);
    return out;
  }
  nlohmann::json config() const override {
    return {{"type", "bottleneck"}, {"in", in_}, {"mid", mid_}, {"out", out_}, {"stride", stride_}};
  }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Bottleneck>(*this); }

 private:
  int in_, mid_, out_, stride_;
  std::vector<std::unique_ptr<Layer>> main_;
  std::vector<std::unique_ptr<Layer>> shortcut_;
};

}  // namespace

std::unique_ptr<Layer> make_layer(const nlohmann::json& c) {
  const std::string type = c.at("type").get<std::string>();
  if (type == "conv") {
    return std::make_unique<Conv2d>(c.at("in"), c.at("out"), c.at("kernel"), c.at("stride"), c.at("pad"),
                                    c.value("bias", true));
  }
  if (type == "relu") return std::make_unique<Relu>();
  if (type == "avgpool") return std::make_unique<AvgPool>(c.at("size"));
  if (type == "maxpool") return std::make_unique<MaxPool>(c.at("kernel"), c.at("stride"), c.at("pad"));
  if (type == "affine") return std::make_unique<Affine>(c.at("channels"));
  if (type == "gap") return std::make_unique<GlobalAvgPool>();
  if (type == "dense") return std::make_unique<Dense>(c.at("in"), c.at("out"));
  if (type == "bottleneck") {
    return std::make_unique<Bottleneck>(c.at("in"), c.at("mid"), c.at("out"), c.at("stride"));
  }
  throw ConfigError("unknown layer type '" + type + "'");
}

Network::Network(const Network& other)
    : input_height(other.input_height), input_width(other.input_width),
      class_names(other.class_names), normalization(other.normalization) {
  for (const Block& b : other.blocks_) blocks_.push_back(Block{b.name, clone_layers(b.layers)});
}

Network& Network::operator=(const Network& other) {
  if (this != &other) {
    Network copy(other);
    *this = std::move(copy);
  }
  return *this;
}

void Network::add_block(std::string name, std::vector<std::unique_ptr<Layer>> layers) {
  blocks_.push_back(Block{std::move(name), std::move(layers)});
}

std::vector<std::string> Network::block_names() const {
  std::vector<std::string> names;
  for (const Block& b : blocks_) names.push_back(b.name);
  return names;
}

int Network::block_index(const std::string& name) const {
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    if (blocks_[i].name == name) return static_cast<int>(i);
  }
  return -1;
}

Tensor3 Network::forward_blocks(const Tensor3& in, int first, int last,
                                std::vector<std::vector<LayerCache>>* caches) const {
  if (caches) caches->assign(static_cast<std::size_t>(std::max(0, last - first + 1)), {});
  Tensor3 x = in;
  for (int b = first; b <= last; ++b) {
    x = run_forward(blocks_[static_cast<std::size_t>(b)].layers, x,
                    caches ? &(*caches)[static_cast<std::size_t>(b - first)] : nullptr);
  }
  return x;
}

Tensor3 Network::backward_blocks(const Tensor3& grad_out, int first, int last,
                                 const std::vector<std::vector<LayerCache>>& caches, ParamGrads* grads) const {
  std::vector<std::vector<double>*> all;
  std::vector<std::size_t> block_offset(blocks_.size() + 1, 0);
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    block_offset[b + 1] = block_offset[b] + param_total(blocks_[b].layers);
  }
  if (grads) {
    for (auto& g : *grads) all.push_back(&g);
  }
  Tensor3 g = grad_out;
  for (int b = last; b >= first; --b) {
    const auto ub = static_cast<std::size_t>(b);
    GradSpan sub;
    if (grads) {
      sub = GradSpan(all).subspan(block_offset[ub], block_offset[ub + 1] - block_offset[ub]);
    }
    g = run_backward(blocks_[ub].layers, g, caches[static_cast<std::size_t>(b - first)], sub);
  }
  return g;
}

Tensor3 Network::normalize(const Tensor3& pixels) const {
  Tensor3 out = pixels;
  const std::size_t c = static_cast<std::size_t>(pixels.channels);
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    out.data[i] = (out.data[i] - normalization.mean[i % c]) / normalization.stddev[i % c];
  }
  return out;
}

std::vector<double> Network::logits(const Tensor3& pixels) const {
  return forward_blocks(normalize(pixels), 0, static_cast<int>(blocks_.size()) - 1).data;
}

std::vector<Param*> Network::params() {
  std::vector<Param*> out;
  for (Block& b : blocks_) {
    for (auto& l : b.layers) for (Param* p : l->params()) out.push_back(p);
  }
  return out;
}

std::vector<const Param*> Network::params() const {
  std::vector<const Param*> out;
  for (const Block& b : blocks_) {
    for (const auto& l : b.layers) for (const Param* p : std::as_const(*l).params()) out.push_back(p);
  }
  return out;
}

std::size_t Network::parameter_count() const {
  std::size_t n = 0;
  for (const Param* p : params()) n += p->value.size();
  return n;
}

ParamGrads Network::zero_grads() const {
  ParamGrads g;
  for (const Param* p : params()) g.emplace_back(p->value.size(), 0.0);
  return g;
}

nlohmann::json Network::architecture() const {
  nlohmann::json blocks = nlohmann::json::array();
  for (const Block& b : blocks_) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : b.layers) layers.push_back(l->config());
    blocks.push_back({{"name", b.name}, {"layers", layers}});
  }
  return {{"input", {{"height", input_height}, {"width", input_width}}},
          {"classes", class_names},
          {"normalization", {{"mean", normalization.mean}, {"std", normalization.stddev}}},
          {"blocks", blocks}};
}

Network Network::from_architecture(const nlohmann::json& arch) {
  Network net;
  net.input_height = arch.at("input").at("height");
  net.input_width = arch.at("input").at("width");
  net.class_names = arch.at("classes").get<std::vector<std::string>>();
  net.normalization.mean = arch.at("normalization").at("mean").get<std::vector<double>>();
  net.normalization.stddev = arch.at("normalization").at("std").get<std::vector<double>>();
  for (const auto& b : arch.at("blocks")) {
    std::vector<std::unique_ptr<Layer>> layers;
    for (const auto& l : b.at("layers")) layers.push_back(make_layer(l));
    net.add_block(b.at("name").get<std::string>(), std::move(layers));
  }
  return net;
}

void Network::save(const std::filesystem::path& path) const {
  ArrayStore store(path, ArrayStore::Mode::kCreate);
  store.set_attribute("format", "cpdefense-network-v1");
  store.set_attribute("architecture", architecture().dump());
  const auto ps = params();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "params/%05zu", i);
    store.write(name, NamedArray{ps[i]->shape, ps[i]->value});
  }
}

Network Network::load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("weights file not found: " + path.string());
  ArrayStore store(path, ArrayStore::Mode::kRead);
  Network net = from_architecture(nlohmann::json::parse(store.attribute("architecture")));
  auto ps = net.params();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "params/%05zu", i);
    NamedArray a = store.read(name);
    if (a.values.size() != ps[i]->value.size()) {
      throw ConfigError("weights file " + path.string() + ": parameter " + name + " has wrong size");
    }
    ps[i]->value = std::move(a.values);
  }
  return net;
}

std::vector<double> softmax(const std::vector<double>& logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) z += (p[i] = std::exp(logits[i] - mx));
  for (double& v : p) v /= z;
  return p;
}

double cross_entropy(const std::vector<double>& logits, int label, std::vector<double>* grad) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double v : logits) z += std::exp(v - mx);
  const double lse = mx + std::log(z);
  if (grad) {
    grad->resize(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) (*grad)[i] = std::exp(logits[i] - lse);
    (*grad)[static_cast<std::size_t>(label)] -= 1.0;
  }
  return lse - logits[static_cast<std::size_t>(label)];
}

Network make_desk_cnn(const std::vector<std::string>& classes, const std::vector<int>& channels,
                      int pooled_blocks, int image_size, const std::string& global_pool) {
  if (global_pool != "gap" && global_pool != "gmp") throw ConfigError("global pool must be gap or gmp");
  Network net;
  net.input_height = net.input_width = image_size;
  net.class_names = classes;
  int in = 3;
  for (std::size_t i = 0; i < channels.size(); ++i) {
    std::vector<std::unique_ptr<Layer>> layers;
    layers.push_back(std::make_unique<Conv2d>(in, channels[i], 3, 1, 1, true));
    layers.push_back(std::make_unique<Relu>());
    if (static_cast<int>(i) < pooled_blocks) layers.push_back(std::make_unique<AvgPool>(2));
    net.add_block("block" + std::to_string(i + 1), std::move(layers));
    in = channels[i];
  }
  std::vector<std::unique_ptr<Layer>> head;
  const int side = image_size >> pooled_blocks;
  if (global_pool == "gap") {
    head.push_back(std::make_unique<GlobalAvgPool>());
  } else {
    head.push_back(std::make_unique<MaxPool>(side, side, 0));
  }
  head.push_back(std::make_unique<Dense>(in, static_cast<int>(classes.size())));
  net.add_block("head", std::move(head));
  return net;
}

namespace {

Network make_bottleneck_net(const std::vector<std::string>& classes, int image_size, int stem_width,
                            const std::vector<int>& units, int base_width) {
  Network net;
  net.input_height = net.input_width = image_size;
  net.class_names = classes;
  net.normalization.mean = {0.485, 0.456, 0.406};
  net.normalization.stddev = {0.229, 0.224, 0.225};
  std::vector<std::unique_ptr<Layer>> stem;
  stem.push_back(std::make_unique<Conv2d>(3, stem_width, 7, 2, 3, false));
  stem.push_back(std::make_unique<Affine>(stem_width));
  stem.push_back(std::make_unique<Relu>());
  stem.push_back(std::make_unique<MaxPool>(3, 2, 1));
  net.add_block("stem", std::move(stem));
  int in = stem_width;
  for (std::size_t s = 0; s < units.size(); ++s) {
    const int mid = base_width << s;
    const int out = mid * 4;
    std::vector<std::unique_ptr<Layer>> layers;
    for (int u = 0; u < units[s]; ++u) {
      const int stride = (u == 0 && s > 0) ? 2 : 1;
      layers.push_back(std::make_unique<Bottleneck>(in, mid, out, stride));
      in = out;
    }
    net.add_block("layer" + std::to_string(s + 1), std::move(layers));
  }
  std::vector<std::unique_ptr<Layer>> head;
  head.push_back(std::make_unique<GlobalAvgPool>());
  head.push_back(std::make_unique<Dense>(in, static_cast<int>(classes.size())));
  net.add_block("head", std::move(head));
  return net;
}

}  // namespace

Network make_resnet50(const std::vector<std::string>& classes, int image_size) {
  return make_bottleneck_net(classes, image_size, 64, {3, 4, 6, 3}, 64);
}

Network make_mini_resnet(const std::vector<std::string>& classes, int image_size, int base_width) {
  return make_bottleneck_net(classes, image_size, base_width, {1, 1, 1, 1}, base_width);
}

void initialize(Network& net, unsigned seed) {
  std::mt19937_64 rng(seed);
  for (Param* p : net.params()) {
    if (p->name == "scale") {
      std::fill(p->value.begin(), p->value.end(), 1.0);
    } else if (p->name == "weight") {
      const double fan_in = p->shape.front();
      std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
      for (double& v : p->value) v = dist(rng);
    } else {
      std::fill(p->value.begin(), p->value.end(), 0.0);
    }
  }
}

}  // namespace cpd::nn
