#include "cpdefense/array_store.hpp"

#include <H5Cpp.h>

#include <numeric>

#include "cpdefense/errors.hpp"

namespace cpd {

struct ArrayStore::Impl {
  H5::H5File file;
};

namespace {

void ensure_groups(H5::H5File& file, const std::string& name) {
  std::size_t pos = 0;
  while ((pos = name.find('/', pos + 1)) != std::string::npos) {
    const std::string group = name.substr(0, pos);
    if (group.empty() || group == "/") continue;
    if (!file.nameExists(group)) file.createGroup(group);
  }
}

}  // namespace

ArrayStore::ArrayStore(const std::filesystem::path& path, Mode mode) : impl_(std::make_unique<Impl>()) {
  H5::Exception::dontPrint();
  try {
    if (mode == Mode::kCreate) {
      impl_->file = H5::H5File(path.string(), H5F_ACC_TRUNC);
    } else {
      impl_->file = H5::H5File(path.string(), H5F_ACC_RDONLY);
    }
  } catch (const H5::Exception& e) {
    throw InputError("cannot open array container " + path.string() + ": " + e.getDetailMsg());
  }
}

ArrayStore::~ArrayStore() = default;
ArrayStore::ArrayStore(ArrayStore&&) noexcept = default;
ArrayStore& ArrayStore::operator=(ArrayStore&&) noexcept = default;

void ArrayStore::write(const std::string& name, const NamedArray& array) {
  const std::size_t expected = std::accumulate(array.shape.begin(), array.shape.end(), std::size_t{1},
                                               [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
  if (expected != array.values.size()) {
    throw InputError("array '" + name + "' shape does not match value count");
  }
  ensure_groups(impl_->file, name);
  std::vector<hsize_t> dims(array.shape.begin(), array.shape.end());
  if (dims.empty()) dims.push_back(array.values.size());
  H5::DataSpace space(static_cast<int>(dims.size()), dims.data());
  // Object timestamps off so identical content gives identical bytes.
  H5::DSetCreatPropList props;
  H5Pset_obj_track_times(props.getId(), false);
  H5::DataSet ds = impl_->file.createDataSet(name, H5::PredType::NATIVE_DOUBLE, space, props);
  if (!array.values.empty()) ds.write(array.values.data(), H5::PredType::NATIVE_DOUBLE);
}

NamedArray ArrayStore::read(const std::string& name) const {
  if (!contains(name)) throw InputError("array container has no dataset '" + name + "'");
  H5::DataSet ds = impl_->file.openDataSet(name);
  H5::DataSpace space = ds.getSpace();
  const int rank = space.getSimpleExtentNdims();
  std::vector<hsize_t> dims(static_cast<std::size_t>(rank));
  space.getSimpleExtentDims(dims.data());
  NamedArray out;
  std::size_t count = 1;
  for (hsize_t d : dims) {
    out.shape.push_back(static_cast<int>(d));
    count *= d;
  }
  out.values.resize(count);
  if (count > 0) ds.read(out.values.data(), H5::PredType::NATIVE_DOUBLE);
  return out;
}

bool ArrayStore::contains(const std::string& name) const {
  try {
    return impl_->file.nameExists(name);
  } catch (const H5::Exception&) {
    return false;
  }
}

std::vector<std::string> ArrayStore::list(const std::string& group) const {
  std::vector<std::string> names;
  if (group != "/" && !contains(group)) return names;
  H5::Group g = impl_->file.openGroup(group);
  for (hsize_t i = 0; i < g.getNumObjs(); ++i) names.push_back(g.getObjnameByIdx(i));
  return names;
}

void ArrayStore::set_attribute(const std::string& key, const std::string& value) {
  H5::Group root = impl_->file.openGroup("/");
  if (root.attrExists(key)) root.removeAttr(key);
  H5::StrType type(H5::PredType::C_S1, value.empty() ? 1 : value.size());
  H5::Attribute attr = root.createAttribute(key, type, H5::DataSpace(H5S_SCALAR));
  attr.write(type, value.empty() ? std::string(1, '\0') : value);
}

std::string ArrayStore::attribute(const std::string& key) const {
  H5::Group root = impl_->file.openGroup("/");
  if (!root.attrExists(key)) throw InputError("array container has no attribute '" + key + "'");
  H5::Attribute attr = root.openAttribute(key);
  H5::StrType type = attr.getStrType();
  std::string value;
  attr.read(type, value);
  while (!value.empty() && value.back() == '\0') value.pop_back();
  return value;
}

bool ArrayStore::has_attribute(const std::string& key) const {
  return impl_->file.openGroup("/").attrExists(key);
}

}  // namespace cpd
