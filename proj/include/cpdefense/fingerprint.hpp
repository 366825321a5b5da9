#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

namespace cpd {

// 64-bit FNV-1a.
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t basis = 0xcbf29ce484222325ULL);

std::string hex64(std::uint64_t v);

std::string fingerprint(std::string_view bytes);
std::string fingerprint_json(const nlohmann::json& j);
// Hash of the file bytes; throws InputError when unreadable.
std::string fingerprint_file(const std::filesystem::path& path);

}  // namespace cpd
