#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cpdefense/tensor.hpp"

namespace cpd {

// Procedural texture families used as desk-scale classes. Each family is defined by
// spatial structure (orientation, periodicity, blob layout); colors, periods, phases and
// noise are randomized so that color alone is not predictive.
const std::vector<std::string>& desk_texture_families();

struct DeskCorpusConfig {
  std::vector<std::string> classes{"horizontal", "vertical", "checker", "dots", "diagonal"};
  int images_per_class = 120;
  int image_size = 64;
  std::uint64_t seed = 7;
};

Tensor3 render_texture(const std::string& family, int size, std::uint64_t seed);

// Writes <out>/<class>/<class>_NNNN.png for every class; returns the number of files.
int generate_desk_corpus(const std::filesystem::path& out, const DeskCorpusConfig& config);

}  // namespace cpd
