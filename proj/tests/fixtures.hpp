#pragma once
// Small deterministic models and images shared by the tests.

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "cpdefense/desk_corpus.hpp"
#include "cpdefense/model_adapter.hpp"
#include "cpdefense/network.hpp"

namespace cpd::fixture {

inline std::vector<std::string> class_names(int n) {
  std::vector<std::string> names;
  for (int i = 0; i < n; ++i) names.push_back("c" + std::to_string(i));
  return names;
}

// Randomly initialized desk CNN with a 16x16 split-layer grid at 64 px.
inline ClassifierAdapter small_adapter(int classes = 3, unsigned seed = 1, std::vector<int> channels = {8, 12}) {
  auto net = nn::make_desk_cnn(class_names(classes), channels, 2, 64);
  nn::initialize(net, seed);
  return ClassifierAdapter(std::move(net), "");
}

inline Image random_image(std::uint64_t seed, int size = 64, ClassId label = 0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image img;
  img.pixels = Tensor3(size, size, 3);
  for (double& v : img.pixels.data) v = u(rng);
  img.id = "img" + std::to_string(seed);
  img.true_label = label;
  return img;
}

// Procedural texture cycling through the first five families.
inline Image texture_image(std::uint64_t seed, int size = 64, ClassId label = 0) {
  Image img;
  img.pixels = render_texture(desk_texture_families()[seed % 5], size, seed);
  img.id = "tex" + std::to_string(seed);
  img.true_label = label;
  return img;
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& name = "cpd_tmp")
      : path_(std::filesystem::temp_directory_path() / name) {
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace cpd::fixture
