#pragma once

#include <filesystem>
#include <optional>

#include "cpdefense/tensor.hpp"

namespace cpd {

// Decodes any format OpenCV understands into RGB values in [0,1]; nullopt when undecodable.
std::optional<Tensor3> read_rgb(const std::filesystem::path& path);

// 8-bit RGB PNG (values are clamped to [0,1] then rounded).
void write_png(const std::filesystem::path& path, const Tensor3& rgb);

// Bilinear resize (half-pixel centers).
Tensor3 resize_bilinear(const Tensor3& in, int height, int width);

// Resize so the shorter side equals `side`, then take the centered side x side square.
Tensor3 resize_and_center_crop(const Tensor3& in, int side);

Tensor3 crop(const Tensor3& in, int top, int left, int height, int width);

// Round-trips values through 8-bit quantization, as a saved PNG would.
Tensor3 quantize_8bit(const Tensor3& in);

}  // namespace cpd
