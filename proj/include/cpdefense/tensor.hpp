#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace cpd {

using ClassId = int;

// Dense (height, width, channels) array in row-major HWC order.
struct Tensor3 {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<double> data;

  Tensor3() = default;
  Tensor3(int h, int w, int c, double fill = 0.0)
      : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, fill) {}

  std::size_t size() const { return data.size(); }
  std::size_t index(int y, int x, int ch) const {
    return (static_cast<std::size_t>(y) * width + x) * channels + ch;
  }
  double& at(int y, int x, int ch) { return data[index(y, x, ch)]; }
  double at(int y, int x, int ch) const { return data[index(y, x, ch)]; }
  std::span<double> pixel(int y, int x) {
    return {data.data() + index(y, x, 0), static_cast<std::size_t>(channels)};
  }
  std::span<const double> pixel(int y, int x) const {
    return {data.data() + index(y, x, 0), static_cast<std::size_t>(channels)};
  }
  bool same_shape(const Tensor3& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }
  bool operator==(const Tensor3&) const = default;
};

// An RGB image with values in [0,1].
struct Image {
  Tensor3 pixels;
  std::string id;
  ClassId true_label = -1;

  int height() const { return pixels.height; }
  int width() const { return pixels.width; }
};

// Throws InputError unless the image has 3 channels, side >= min_side and values in [0,1].
void validate_image(const Image& image, int min_side = 64);

// Channel-wise spatial mean of a tensor.
std::vector<double> spatial_mean(const Tensor3& t);

}  // namespace cpd
