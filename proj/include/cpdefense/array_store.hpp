#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

namespace cpd {

struct NamedArray {
  std::vector<int> shape;
  std::vector<double> values;
};

// Named float64 tensors plus string attributes in a single HDF5 file.
// Dataset names may contain '/' to create nested groups.
class ArrayStore {
 public:
  enum class Mode { kCreate, kRead };

  ArrayStore(const std::filesystem::path& path, Mode mode);
  ~ArrayStore();
  ArrayStore(ArrayStore&&) noexcept;
  ArrayStore& operator=(ArrayStore&&) noexcept;

  void write(const std::string& name, const NamedArray& array);
  NamedArray read(const std::string& name) const;
  bool contains(const std::string& name) const;
  std::vector<std::string> list(const std::string& group = "/") const;

  void set_attribute(const std::string& key, const std::string& value);
  std::string attribute(const std::string& key) const;
  bool has_attribute(const std::string& key) const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace cpd
