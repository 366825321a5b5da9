#include "cpdefense/defense.hpp"

#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cpdefense/errors.hpp"
#include "cpdefense/nnls.hpp"

namespace cpd {

Upsampling parse_upsampling(const std::string& name) {
  if (name == "bilinear") return Upsampling::kBilinear;
  if (name == "nearest") return Upsampling::kNearest;
  throw ConfigError("unknown upsampling mode '" + name + "' (bilinear, nearest)");
}

MaskSelection parse_selection(const std::string& name) {
  if (name == "per-map") return MaskSelection::kPerMap;
  if (name == "fused") return MaskSelection::kFused;
  throw ConfigError("unknown mask selection '" + name + "' (per-map, fused)");
}

std::string to_string(Upsampling u) { return u == Upsampling::kBilinear ? "bilinear" : "nearest"; }
std::string to_string(MaskSelection s) { return s == MaskSelection::kPerMap ? "per-map" : "fused"; }

void DefenseConfig::validate(int k) const {
  if (m < 0 || m > k) throw ConfigError("m must lie in [0, " + std::to_string(k) + "], got " + std::to_string(m));
  if (!(n_percent >= 0.0 && n_percent <= 100.0)) throw ConfigError("n_percent must lie in [0, 100]");
  if (blur_kernel > 0 && blur_kernel % 2 == 0) throw ConfigError("blur kernel side must be odd");
}

int DefenseConfig::kernel_for(int image_side) const {
  if (blur_kernel > 0) return blur_kernel;
  const int s = static_cast<int>(std::lround(15.0 * image_side / 224.0));
  return std::max(3, s % 2 == 0 ? s + 1 : s);
}

double DefenseConfig::sigma_for(int image_side) const {
  return blur_sigma > 0.0 ? blur_sigma : 7.0 * image_side / 224.0;
}

std::size_t PixelMask::count() const {
  return static_cast<std::size_t>(std::count(selected.begin(), selected.end(), std::uint8_t{1}));
}

std::vector<Heatmap> coefficient_maps(const Tensor3& activation, const ConceptBank& bank) {
  if (activation.channels != bank.channels()) {
    throw InputError("activation has " + std::to_string(activation.channels) + " channels, bank expects " +
                     std::to_string(bank.channels()));
  }
  const NnlsSolver solver(bank.W);
  std::vector<Heatmap> maps(static_cast<std::size_t>(bank.k()));
  for (int j = 0; j < bank.k(); ++j) {
    maps[j] = {activation.height, activation.width,
               std::vector<double>(static_cast<std::size_t>(activation.height) * activation.width, 0.0), j,
               bank.class_id};
  }
  for (int y = 0; y < activation.height; ++y) {
    for (int x = 0; x < activation.width; ++x) {
      const std::vector<double> u = solver.solve(activation.pixel(y, x));
      for (int j = 0; j < bank.k(); ++j) maps[j].values[static_cast<std::size_t>(y) * activation.width + x] = u[j];
    }
  }
  return maps;
}

Heatmap upsample(const Heatmap& map, int height, int width, Upsampling mode) {
  Heatmap out{height, width, std::vector<double>(static_cast<std::size_t>(height) * width), map.concept_index,
              map.class_id};
  const double sy = static_cast<double>(map.height) / height;
  const double sx = static_cast<double>(map.width) / width;
  auto src = [&](int y, int x) { return map.values[static_cast<std::size_t>(y) * map.width + x]; };
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      double v;
      if (mode == Upsampling::kNearest) {
        const int yy = std::min(map.height - 1, static_cast<int>(std::floor((y + 0.5) * sy)));
        const int xx = std::min(map.width - 1, static_cast<int>(std::floor((x + 0.5) * sx)));
        v = src(yy, xx);
      } else {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, map.height - 1.0);
        const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, map.width - 1.0);
        const int y0 = static_cast<int>(fy);
        const int x0 = static_cast<int>(fx);
        const int y1 = std::min(y0 + 1, map.height - 1);
        const int x1 = std::min(x0 + 1, map.width - 1);
        const double ay = fy - y0;
        const double ax = fx - x0;
        v = (1 - ay) * ((1 - ax) * src(y0, x0) + ax * src(y0, x1)) + ay * ((1 - ax) * src(y1, x0) + ax * src(y1, x1));
      }
      out.values[static_cast<std::size_t>(y) * width + x] = v;
    }
  }
  return out;
}

Heatmap concept_heatmap(const ClassifierAdapter& adapter, const Image& image, const ConceptBank& bank, int j,
                        Upsampling mode) {
  if (j < 0 || j >= bank.k()) throw ConfigError("concept index " + std::to_string(j) + " out of range");
  auto maps = coefficient_maps(adapter.activations(image).values, bank);
  return upsample(maps[j], image.height(), image.width(), mode);
}

std::size_t top_n_count(int height, int width, double n_percent) {
  const double total = static_cast<double>(height) * width;
  const double want = n_percent / 100.0 * total;
  // Guard against n/100*HW landing a rounding error above an integer.
  const auto count = static_cast<std::size_t>(std::ceil(want - 1e-9 * std::max(1.0, want)));
  return std::min(count, static_cast<std::size_t>(total));
}

PixelMask top_n_mask(const Heatmap& heatmap, double n_percent) {
  PixelMask mask(heatmap.height, heatmap.width);
  const std::size_t count = top_n_count(heatmap.height, heatmap.width, n_percent);
  if (count == 0) return mask;
  std::vector<std::size_t> idx(heatmap.values.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const auto before = [&](std::size_t a, std::size_t b) {
    const double va = heatmap.values[a];
    const double vb = heatmap.values[b];
    return va > vb || (va == vb && a < b);
  };
  std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(count - 1), idx.end(), before);
  for (std::size_t i = 0; i < count; ++i) mask.selected[idx[i]] = 1;
  return mask;
}

PixelMask mask_union(const std::vector<PixelMask>& masks) {
  if (masks.empty()) return {};
  PixelMask out(masks.front().height, masks.front().width);
  for (const auto& m : masks) {
    if (m.height != out.height || m.width != out.width) throw InputError("mask union needs equal sizes");
    for (std::size_t i = 0; i < out.selected.size(); ++i) out.selected[i] |= m.selected[i];
  }
  return out;
}

Tensor3 gaussian_blur(const Tensor3& image, int kernel, double sigma) {
  if (kernel < 1 || kernel % 2 == 0) throw ConfigError("blur kernel side must be a positive odd number");
  Tensor3 out(image.height, image.width, image.channels);
  const cv::Mat src(image.height, image.width, CV_64FC(image.channels), const_cast<double*>(image.data.data()));
  cv::Mat dst(image.height, image.width, CV_64FC(image.channels), out.data.data());
  cv::GaussianBlur(src, dst, cv::Size(kernel, kernel), sigma, sigma, cv::BORDER_REFLECT_101);
  return out;
}

Tensor3 blend_masked(const Tensor3& image, const Tensor3& blurred, const PixelMask& mask) {
  if (!image.same_shape(blurred) || mask.height != image.height || mask.width != image.width) {
    throw InputError("blend_masked: mismatched shapes");
  }
  Tensor3 out = image;
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      if (!mask.selected[static_cast<std::size_t>(y) * image.width + x]) continue;
      for (int c = 0; c < image.channels; ++c) out.at(y, x, c) = blurred.at(y, x, c);
    }
  }
  return out;
}

const ConceptBank& ConceptLibrary::bank(ClassId c) const {
  for (const auto& b : banks) {
    if (b.class_id == c) return b;
  }
  throw ConfigError("no concept bank for class " + std::to_string(c));
}

const ImportanceScores& ConceptLibrary::scores_for(ClassId c) const {
  for (const auto& s : scores) {
    if (s.class_id == c) return s;
  }
  throw ConfigError("no importance scores for class " + std::to_string(c));
}

namespace {

PixelMask select_pixels(const std::vector<Heatmap>& maps, const std::vector<int>& top, int height, int width,
                        const DefenseConfig& config) {
  PixelMask empty(height, width);
  if (top.empty() || top_n_count(height, width, config.n_percent) == 0) return empty;
  if (config.selection == MaskSelection::kFused) {
    Heatmap fused = maps[top.front()];
    for (std::size_t i = 1; i < top.size(); ++i) {
      const Heatmap& h = maps[top[i]];
      for (std::size_t p = 0; p < fused.values.size(); ++p) fused.values[p] += h.values[p];
    }
    return top_n_mask(fused, config.n_percent);
  }
  std::vector<PixelMask> masks;
  for (int j : top) masks.push_back(top_n_mask(maps[j], config.n_percent));
  return mask_union(masks);
}

std::vector<Heatmap> upsampled_maps(const ClassifierAdapter& adapter, const Image& image, const ConceptBank& bank,
                                    Upsampling mode) {
  std::vector<Heatmap> maps = coefficient_maps(adapter.activations(image).values, bank);
  for (Heatmap& h : maps) h = upsample(h, image.height(), image.width(), mode);
  return maps;
}

}  // namespace

PixelMask defense_mask(const ClassifierAdapter& adapter, const Image& image, ClassId predicted,
                       const ConceptLibrary& library, const DefenseConfig& config, std::vector<int>* concepts) {
  const ConceptBank& bank = library.bank(predicted);
  config.validate(bank.k());
  const std::vector<int> top = library.scores_for(predicted).top(config.m);
  if (concepts) *concepts = top;
  if (top.empty() || top_n_count(image.height(), image.width(), config.n_percent) == 0) {
    return PixelMask(image.height(), image.width());
  }
  return select_pixels(upsampled_maps(adapter, image, bank, config.upsampling), top, image.height(), image.width(),
                       config);
}

PreparedImage prepare_defense(const ClassifierAdapter& adapter, const Image& image, const ConceptLibrary& library,
                              const DefenseConfig& config) {
  PreparedImage p;
  p.image = image;
  p.predicted_class = adapter.predict(image).label;
  p.heatmaps = upsampled_maps(adapter, image, library.bank(p.predicted_class), config.upsampling);
  const int side = std::min(image.height(), image.width());
  p.blurred = gaussian_blur(image.pixels, config.kernel_for(side), config.sigma_for(side));
  return p;
}

PixelMask prepared_mask(const PreparedImage& prepared, const ConceptLibrary& library, const DefenseConfig& config,
                        std::vector<int>* concepts) {
  config.validate(library.bank(prepared.predicted_class).k());
  const std::vector<int> top = library.scores_for(prepared.predicted_class).top(config.m);
  if (concepts) *concepts = top;
  return select_pixels(prepared.heatmaps, top, prepared.image.height(), prepared.image.width(), config);
}

DefenseResult finish_defense(const ClassifierAdapter& adapter, const PreparedImage& prepared,
                             const ConceptLibrary& library, const DefenseConfig& config) {
  DefenseResult r;
  r.predicted_class = prepared.predicted_class;
  r.mask = prepared_mask(prepared, library, config, &r.concepts);
  r.defended = prepared.image;
  if (r.mask.count() == 0) {
    r.label = r.predicted_class;
    return r;
  }
  r.defended.pixels = blend_masked(prepared.image.pixels, prepared.blurred, r.mask);
  r.label = adapter.predict(r.defended).label;
  return r;
}

DefenseResult defend(const ClassifierAdapter& adapter, const Image& image, const ConceptLibrary& library,
                     const DefenseConfig& config) {
  DefenseResult r;
  r.predicted_class = adapter.predict(image).label;
  r.mask = defense_mask(adapter, image, r.predicted_class, library, config, &r.concepts);
  r.defended = image;
  if (r.mask.count() == 0) {
    r.label = r.predicted_class;
    return r;
  }
  const int side = std::min(image.height(), image.width());
  r.defended.pixels = blend_masked(image.pixels, gaussian_blur(image.pixels, config.kernel_for(side), config.sigma_for(side)),
                                   r.mask);
  r.label = adapter.predict(r.defended).label;
  return r;
}

}  // namespace cpd
