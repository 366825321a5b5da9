#include "cpdefense/image_io.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>

#include "cpdefense/errors.hpp"

namespace cpd {

namespace {

cv::Mat to_mat(const Tensor3& t) {
  cv::Mat m(t.height, t.width, CV_64FC(t.channels));
  std::copy(t.data.begin(), t.data.end(), m.ptr<double>());
  return m;
}

Tensor3 from_mat(const cv::Mat& m) {
  cv::Mat cont = m.isContinuous() ? m : m.clone();
  Tensor3 t(cont.rows, cont.cols, cont.channels());
  const double* p = cont.ptr<double>();
  std::copy(p, p + t.size(), t.data.begin());
  return t;
}

}  // namespace

std::optional<Tensor3> read_rgb(const std::filesystem::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) return std::nullopt;
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  cv::Mat f;
  rgb.convertTo(f, CV_64FC3, 1.0 / 255.0);
  return from_mat(f);
}

void write_png(const std::filesystem::path& path, const Tensor3& rgb) {
  if (rgb.channels != 3) throw InputError("write_png expects 3 channels");
  cv::Mat m(rgb.height, rgb.width, CV_8UC3);
  for (int y = 0; y < rgb.height; ++y) {
    for (int x = 0; x < rgb.width; ++x) {
      auto px = rgb.pixel(y, x);
      auto& dst = m.at<cv::Vec3b>(y, x);
      for (int c = 0; c < 3; ++c) {
        // OpenCV stores BGR.
        dst[2 - c] = static_cast<unsigned char>(std::lround(std::clamp(px[c], 0.0, 1.0) * 255.0));
      }
    }
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), m)) throw InputError("cannot write image " + path.string());
}

Tensor3 resize_bilinear(const Tensor3& in, int height, int width) {
  if (in.height == height && in.width == width) return in;
  cv::Mat out;
  cv::resize(to_mat(in), out, cv::Size(width, height), 0, 0, cv::INTER_LINEAR);
  return from_mat(out);
}

Tensor3 crop(const Tensor3& in, int top, int left, int height, int width) {
  if (top < 0 || left < 0 || top + height > in.height || left + width > in.width) {
    throw InputError("crop box outside image");
  }
  Tensor3 out(height, width, in.channels);
  for (int y = 0; y < height; ++y) {
    auto src = in.data.begin() + static_cast<std::ptrdiff_t>(in.index(top + y, left, 0));
    std::copy(src, src + static_cast<std::ptrdiff_t>(width) * in.channels,
              out.data.begin() + static_cast<std::ptrdiff_t>(out.index(y, 0, 0)));
  }
  return out;
}

Tensor3 resize_and_center_crop(const Tensor3& in, int side) {
  const double scale = static_cast<double>(side) / std::min(in.height, in.width);
  const int h = std::max(side, static_cast<int>(std::lround(in.height * scale)));
  const int w = std::max(side, static_cast<int>(std::lround(in.width * scale)));
  Tensor3 resized = resize_bilinear(in, h, w);
  Tensor3 out = crop(resized, (h - side) / 2, (w - side) / 2, side, side);
  for (double& v : out.data) v = std::clamp(v, 0.0, 1.0);
  return out;
}

Tensor3 quantize_8bit(const Tensor3& in) {
  Tensor3 out = in;
  // Same arithmetic as decoding (multiply by 1/255) so a PNG round trip is bit-exact.
  for (double& v : out.data) v = static_cast<double>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)) * (1.0 / 255.0);
  return out;
}

}  // namespace cpd
