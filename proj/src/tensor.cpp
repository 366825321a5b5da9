#include "cpdefense/tensor.hpp"

#include <cmath>

#include "cpdefense/errors.hpp"

namespace cpd {

void validate_image(const Image& image, int min_side) {
  const Tensor3& p = image.pixels;
  if (p.channels != 3) throw InputError("image '" + image.id + "' must have exactly 3 channels");
  if (p.height < min_side || p.width < min_side) {
    throw InputError("image '" + image.id + "' is smaller than " + std::to_string(min_side) + " pixels");
  }
  for (double v : p.data) {
    if (!(v >= 0.0 && v <= 1.0)) throw InputError("image '" + image.id + "' has pixel values outside [0,1]");
  }
}

std::vector<double> spatial_mean(const Tensor3& t) {
  std::vector<double> mean(static_cast<std::size_t>(t.channels), 0.0);
  const std::size_t c = mean.size();
  for (std::size_t i = 0; i < t.data.size(); ++i) mean[i % c] += t.data[i];
  const double n = static_cast<double>(t.height) * t.width;
  for (double& v : mean) v /= n;
  return mean;
}

}  // namespace cpd
