#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "cpdefense/array_store.hpp"
#include "cpdefense/errors.hpp"
#include "cpdefense/fingerprint.hpp"
#include "cpdefense/image_io.hpp"
#include "cpdefense/tensor.hpp"
#include "fixtures.hpp"

using namespace cpd;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("cpd_storage_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("array store round trip with nested names and attributes") {
  const fs::path path = scratch("store.h5");
  {
    ArrayStore s(path, ArrayStore::Mode::kCreate);
    s.write("W", {{2, 3}, {1, 2, 3, 4, 5, 6}});
    s.write("patches/a/b", {{1}, {0.25}});
    s.set_attribute("metadata", R"({"k": 2})");
  }
  const ArrayStore s(path, ArrayStore::Mode::kRead);
  const NamedArray w = s.read("W");
  CHECK(w.shape == std::vector<int>{2, 3});
  CHECK(w.values == std::vector<double>{1, 2, 3, 4, 5, 6});
  CHECK(s.read("patches/a/b").values == std::vector<double>{0.25});
  CHECK(s.contains("patches/a/b"));
  CHECK_FALSE(s.contains("nope"));
  CHECK(s.attribute("metadata") == R"({"k": 2})");
  CHECK_FALSE(s.has_attribute("other"));
  CHECK_THROWS_AS(s.read("nope"), InputError);
  CHECK_THROWS_AS(s.attribute("other"), InputError);
  fs::remove(path);
}

TEST_CASE("array store rejects bad input") {
  const fs::path path = scratch("bad.h5");
  ArrayStore s(path, ArrayStore::Mode::kCreate);
  CHECK_THROWS_AS(s.write("x", {{2, 2}, {1, 2, 3}}), InputError);
  CHECK_THROWS_AS(ArrayStore(scratch("missing.h5"), ArrayStore::Mode::kRead), InputError);
}

TEST_CASE("png round trip equals 8-bit quantization") {
  const fs::path path = scratch("img.png");
  const Image img = fixture::random_image(4, 17);
  write_png(path, img.pixels);
  const auto back = read_rgb(path);
  REQUIRE(back);
  CHECK(*back == quantize_8bit(img.pixels));
  fs::remove(path);
}

TEST_CASE("undecodable files read as nullopt") {
  const fs::path path = scratch("junk.png");
  std::ofstream(path) << "not an image";
  CHECK_FALSE(read_rgb(path).has_value());
  CHECK_FALSE(read_rgb(scratch("absent.png")).has_value());
  fs::remove(path);
}

TEST_CASE("resize and crop geometry") {
  Tensor3 wide(40, 80, 3);
  for (int y = 0; y < 40; ++y)
    for (int x = 0; x < 80; ++x)
      for (int c = 0; c < 3; ++c) wide.at(y, x, c) = x < 20 || x >= 60 ? 1.0 : 0.0;
  // Shorter side to 20, then the centered 20x20 square: only the middle band survives.
  const Tensor3 sq = resize_and_center_crop(wide, 20);
  CHECK(sq.height == 20);
  CHECK(sq.width == 20);
  for (double v : sq.data) CHECK(v == doctest::Approx(0.0));
  const Tensor3 c = crop(wide, 5, 18, 3, 4);
  CHECK(c.height == 3);
  CHECK(c.width == 4);
  CHECK(c.at(0, 0, 0) == 1.0);
  CHECK(c.at(0, 3, 0) == 0.0);
  CHECK_THROWS_AS(crop(wide, 38, 0, 3, 3), InputError);
  // Resizing a constant image keeps it constant.
  const Tensor3 k = resize_bilinear(Tensor3(7, 9, 3, 0.3), 13, 5);
  for (double v : k.data) CHECK(v == doctest::Approx(0.3));
}

TEST_CASE("image validation") {
  Image ok = fixture::random_image(1);
  CHECK_NOTHROW(validate_image(ok));
  Image small = fixture::random_image(1, 32);
  CHECK_THROWS_AS(validate_image(small), InputError);
  ok.pixels.data[5] = 1.5;
  CHECK_THROWS_AS(validate_image(ok), InputError);
}

TEST_CASE("fnv1a reference vectors") {
  CHECK(fnv1a("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a("a") == 0xaf63dc4c8601ec8cULL);
  CHECK(fnv1a("foobar") == 0x85944171f73967e8ULL);
  CHECK(hex64(0xabcULL) == "0000000000000abc");
  CHECK(fingerprint("x") != fingerprint("y"));
  CHECK(fingerprint_json({{"a", 1}, {"b", 2}}) == fingerprint_json({{"b", 2}, {"a", 1}}));
}

TEST_CASE("file fingerprints follow the bytes") {
  const fs::path path = scratch("bytes.bin");
  std::ofstream(path, std::ios::binary) << "hello";
  CHECK(fingerprint_file(path) == fingerprint("hello"));
  CHECK_THROWS_AS(fingerprint_file(scratch("absent.bin")), InputError);
  fs::remove(path);
}
