#include "cpdefense/fingerprint.hpp"

#include <fmt/format.h>

#include <fstream>
#include <iterator>

#include "cpdefense/errors.hpp"

namespace cpd {

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t basis) {
  std::uint64_t h = basis;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) { return fmt::format("{:016x}", v); }

std::string fingerprint(std::string_view bytes) { return hex64(fnv1a(bytes)); }

std::string fingerprint_json(const nlohmann::json& j) { return hex64(fnv1a(j.dump())); }

std::string fingerprint_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return hex64(fnv1a(bytes));
}

}  // namespace cpd
