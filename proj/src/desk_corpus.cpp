#include "cpdefense/desk_corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

#include "cpdefense/errors.hpp"
#include "cpdefense/image_io.hpp"

namespace cpd {

const std::vector<std::string>& desk_texture_families() {
  static const std::vector<std::string> families{"horizontal", "vertical", "checker", "dots",
                                                 "diagonal",   "rings",    "grid",    "antidiagonal"};
  return families;
}

namespace {

struct Palette {
  double fg[3];
  double bg[3];
};

Palette random_palette(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.2, 0.8);
  Palette p{};
  for (;;) {
    double d2 = 0.0;
    for (int c = 0; c < 3; ++c) {
      p.fg[c] = u(rng);
      p.bg[c] = u(rng);
      d2 += (p.fg[c] - p.bg[c]) * (p.fg[c] - p.bg[c]);
    }
    if (d2 >= 0.3 * 0.3) return p;
  }
}

// Smooth periodic profile in [0,1].
double wave(double t) { return 0.5 + 0.5 * std::sin(2.0 * std::numbers::pi * t); }

}  // namespace

Tensor3 render_texture(const std::string& family, int size, std::uint64_t seed) {
  const auto& fams = desk_texture_families();
  if (std::find(fams.begin(), fams.end(), family) == fams.end()) {
    throw ConfigError("unknown texture family '" + family + "'");
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const Palette pal = random_palette(rng);
  const double period = size * (0.14 + 0.10 * unit(rng));
  const double phase_a = unit(rng);
  const double phase_b = unit(rng);
  const double jitter = (unit(rng) - 0.5) * 0.3;  // radians
  const double cx = size * (0.3 + 0.4 * unit(rng));
  const double cy = size * (0.3 + 0.4 * unit(rng));

  struct Dot {
    double y, x, r;
  };
  std::vector<Dot> dots;
  if (family == "dots") {
    const int n = 10 + static_cast<int>(unit(rng) * 6);
    for (int i = 0; i < n; ++i) dots.push_back({unit(rng) * size, unit(rng) * size, size * (0.04 + 0.03 * unit(rng))});
  }

  auto oriented = [&](double y, double x, double angle, double ph) {
    const double t = (x * std::cos(angle) + y * std::sin(angle)) / period + ph;
    return wave(t);
  };

  std::normal_distribution<double> noise(0.0, 0.03);
  Tensor3 img(size, size, 3);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      double v = 0.0;
      const double fy = y;
      const double fx = x;
      if (family == "horizontal") {
        v = oriented(fy, fx, std::numbers::pi / 2 + jitter, phase_a);
      } else if (family == "vertical") {
        v = oriented(fy, fx, jitter, phase_a);
      } else if (family == "diagonal") {
        v = oriented(fy, fx, std::numbers::pi / 4 + jitter, phase_a);
      } else if (family == "antidiagonal") {
        v = oriented(fy, fx, -std::numbers::pi / 4 + jitter, phase_a);
      } else if (family == "checker") {
        const double a = std::sin(2.0 * std::numbers::pi * (fx / period + phase_a));
        const double b = std::sin(2.0 * std::numbers::pi * (fy / period + phase_b));
        v = 0.5 + 0.5 * std::tanh(3.0 * a * b);
      } else if (family == "grid") {
        const double a = oriented(fy, fx, jitter, phase_a);
        const double b = oriented(fy, fx, std::numbers::pi / 2 + jitter, phase_b);
        v = std::max(a, b) > 0.85 ? 1.0 : 0.0;
      } else if (family == "rings") {
        const double r = std::hypot(fy - cy, fx - cx);
        v = wave(r / period + phase_a);
      } else if (family == "dots") {
        for (const Dot& d : dots) {
          const double r = std::hypot(fy - d.y, fx - d.x);
          v = std::max(v, std::clamp(d.r - r + 0.5, 0.0, 1.0));
        }
      }
      for (int c = 0; c < 3; ++c) {
        const double px = pal.fg[c] * v + pal.bg[c] * (1.0 - v) + noise(rng);
        img.at(y, x, c) = std::clamp(px, 0.0, 1.0);
      }
    }
  }
  return img;
}

int generate_desk_corpus(const std::filesystem::path& out, const DeskCorpusConfig& config) {
  int written = 0;
  for (std::size_t ci = 0; ci < config.classes.size(); ++ci) {
    const std::string& cls = config.classes[ci];
    const auto dir = out / cls;
    std::filesystem::create_directories(dir);
    for (int i = 0; i < config.images_per_class; ++i) {
      const std::uint64_t seed = config.seed * 1000003ULL + ci * 100003ULL + static_cast<std::uint64_t>(i);
      char name[128];
      std::snprintf(name, sizeof(name), "%s_%04d.png", cls.c_str(), i);
      write_png(dir / name, render_texture(cls, config.image_size, seed));
      ++written;
    }
  }
  return written;
}

}  // namespace cpd
