#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "cpdefense/desk_corpus.hpp"
#include "cpdefense/errors.hpp"
#include "cpdefense/evaluation.hpp"
#include "cpdefense/network.hpp"
#include "cpdefense/nmf.hpp"
#include "cpdefense/patchcleanser.hpp"
#include "cpdefense/pipeline.hpp"
#include "cpdefense/sobol.hpp"

namespace py = pybind11;
using namespace cpd;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

// Round-trips through the json module; the C++ side only ever sees nlohmann::json.
nlohmann::json to_cpp(const py::object& obj) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(obj).cast<std::string>());
}

py::object to_py(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

Image to_image(const Array& a, const std::string& id = "array") {
  if (a.ndim() != 3 || a.shape(2) != 3) throw InputError("expected an H x W x 3 float array");
  Image img;
  img.id = id;
  img.pixels = Tensor3(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)), 3);
  std::copy(a.data(), a.data() + a.size(), img.pixels.data.begin());
  return img;
}

Array to_array(const Tensor3& t) {
  Array a({t.height, t.width, t.channels});
  std::copy(t.data.begin(), t.data.end(), a.mutable_data());
  return a;
}

py::array_t<bool> mask_array(const PixelMask& m) {
  py::array_t<bool> a({m.height, m.width});
  auto* out = a.mutable_data();
  for (std::size_t i = 0; i < m.selected.size(); ++i) out[i] = m.selected[i] != 0;
  return a;
}

Eigen::MatrixXd to_matrix(const Array& a) {
  if (a.ndim() != 2) throw InputError("expected a 2-D array");
  Eigen::MatrixXd m(a.shape(0), a.shape(1));
  for (py::ssize_t i = 0; i < a.shape(0); ++i)
    for (py::ssize_t j = 0; j < a.shape(1); ++j) m(i, j) = a.at(i, j);
  return m;
}

Array from_matrix(const Eigen::MatrixXd& m) {
  Array a({m.rows(), m.cols()});
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) a.mutable_at(i, j) = m(i, j);
  return a;
}

py::dict defense_dict(const DefenseResult& r) {
  py::dict d;
  d["label"] = r.label;
  d["predicted_class"] = r.predicted_class;
  d["concepts"] = r.concepts;
  d["mask"] = mask_array(r.mask);
  d["defended"] = to_array(r.defended.pixels);
  return d;
}

}  // namespace

PYBIND11_MODULE(_cpdefense, m) {
  m.doc() = "Concept-based adversarial patch defense";

  // The C++ error types share no base; give them one on the Python side.
  const py::object base =
      py::module_::import("builtins").attr("type")("Error", py::make_tuple(py::handle(PyExc_RuntimeError)), py::dict());
  m.attr("Error") = base;
  py::register_exception<ConfigError>(m, "ConfigError", base);
  py::register_exception<InputError>(m, "InputError", base);
  py::register_exception<DegenerateInputError>(m, "DegenerateInputError", base);
  py::register_exception<UnsupportedError>(m, "UnsupportedError", base);
  py::register_exception<StaleArtifactError>(m, "StaleArtifactError", base);

  m.def("default_config", [](const std::string& mode) { return to_py(to_json(default_config(mode))); },
        py::arg("mode") = "desk");
  m.def("resolve_config", [](const py::object& cfg) { return to_py(to_json(config_from_json(to_cpp(cfg)))); },
        "Fill in defaults and validate a config dict.");
  m.def("generate_desk_corpus",
        [](const std::filesystem::path& out, int images_per_class, int image_size, std::uint64_t seed) {
          DeskCorpusConfig c;
          c.images_per_class = images_per_class;
          c.image_size = image_size;
          c.seed = seed;
          return generate_desk_corpus(out, c);
        },
        py::arg("out"), py::arg("images_per_class") = 120, py::arg("image_size") = 64, py::arg("seed") = 7);
  m.def("render_texture", [](const std::string& family, int size, std::uint64_t seed) {
    return to_array(render_texture(family, size, seed));
  });

  m.def("nmf",
        [](const Array& a, int rank, int iterations, double tolerance, std::uint64_t seed) {
          const NmfResult r = nmf(to_matrix(a), {rank, iterations, tolerance, seed});
          return py::make_tuple(from_matrix(r.U), from_matrix(r.W), r.relative_error);
        },
        py::arg("a"), py::arg("rank"), py::arg("iterations") = 200, py::arg("tolerance") = 1e-5, py::arg("seed") = 0,
        "Returns (U, W, relative_error) with A ~ U W.");
  m.def("sobol_total_indices",
        [](const py::function& fn, int dimensions, int designs, std::uint64_t seed) {
          const SobolTotals t = sobol_total_indices(
              [&](std::span<const double> x) {
                return fn(py::array_t<double>(static_cast<py::ssize_t>(x.size()), x.data())).cast<double>();
              },
              dimensions, designs, seed);
          return t.totals;
        },
        py::arg("fn"), py::arg("dimensions"), py::arg("designs") = 1024, py::arg("seed") = 0);
  m.def("top_n_count", &top_n_count);
  m.def("gaussian_blur", [](const Array& img, int kernel, double sigma) {
    return to_array(gaussian_blur(to_image(img).pixels, kernel, sigma));
  });

  m.def("save_resnet50",
        [](const std::filesystem::path& path, const std::vector<std::string>& classes, int image_size,
           const std::vector<Array>& params) {
          nn::Network net = nn::make_resnet50(classes, image_size);
          auto ps = net.params();
          if (params.size() != ps.size()) {
            throw InputError("expected " + std::to_string(ps.size()) + " parameter arrays, got " +
                             std::to_string(params.size()));
          }
          for (std::size_t i = 0; i < ps.size(); ++i) {
            if (static_cast<std::size_t>(params[i].size()) != ps[i]->value.size()) {
              throw InputError("parameter " + std::to_string(i) + " (" + ps[i]->name + ") has " +
                               std::to_string(params[i].size()) + " values, expected " +
                               std::to_string(ps[i]->value.size()));
            }
            std::copy(params[i].data(), params[i].data() + params[i].size(), ps[i]->value.begin());
          }
          net.save(path);
        },
        py::arg("path"), py::arg("classes"), py::arg("image_size"), py::arg("params"),
        "Write ResNet-50 weights given in engine order (see tools/convert_torchvision_resnet50.py).");

  py::class_<ClassifierAdapter>(m, "Classifier")
      .def_static("load",
                  [](const std::filesystem::path& weights, const std::string& split_layer, const std::string& backbone) {
                    return ClassifierAdapter::load({weights, split_layer, backbone});
                  },
                  py::arg("weights"), py::arg("split_layer") = "", py::arg("backbone") = "desk-cnn")
      .def_property_readonly("input_size", &ClassifierAdapter::input_size)
      .def_property_readonly("num_classes", &ClassifierAdapter::num_classes)
      .def_property_readonly("split_layer", &ClassifierAdapter::split_layer)
      .def("predict",
           [](const ClassifierAdapter& a, const Array& img) {
             const Prediction p = a.predict(to_image(img));
             return py::make_tuple(p.label, p.logits);
           })
      .def("activations", [](const ClassifierAdapter& a, const Array& img) {
        return to_array(a.activations(to_image(img)).values);
      });

  py::class_<Pipeline>(m, "Pipeline")
      .def(py::init([](const py::object& cfg, const std::filesystem::path& out) {
             return std::make_unique<Pipeline>(config_from_json(to_cpp(cfg)), out);
           }),
           py::arg("config"), py::arg("out"))
      .def_property_readonly("config", [](const Pipeline& p) { return to_py(to_json(p.config())); })
      .def_property_readonly("out", &Pipeline::out)
      .def("classifier", &Pipeline::adapter, py::return_value_policy::reference_internal)
      .def("corpus_fingerprint", &Pipeline::corpus_fingerprint)
      .def("split",
           [](Pipeline& p, const std::string& name) {
             py::list images;
             for (const Image& img : p.split(name)) images.append(py::make_tuple(img.id, img.true_label, to_array(img.pixels)));
             return images;
           })
      .def("concept_banks",
           [](Pipeline& p) {
             py::list banks;
             for (const ConceptBank& b : p.banks()) {
               py::dict d = to_py(metadata_json(b));
               d["W"] = from_matrix(b.W);
               banks.append(d);
             }
             return banks;
           })
      .def("concept_scores",
           [](Pipeline& p) {
             py::list out;
             for (const ImportanceScores& s : p.library().scores) out.append(to_py(to_json(s)));
             return out;
           })
      .def("attacked_set",
           [](Pipeline& p, std::size_t i) {
             const AttackedSet& s = p.attacked_set(i);
             py::list results;
             for (const PatchResult& r : s.results) {
               py::dict d;
               d["id"] = r.image_id;
               d["true_label"] = r.true_label;
               d["patched_label"] = r.patched_label;
               d["loc"] = py::make_tuple(r.row, r.col);
               d["side"] = r.side;
               d["patch"] = to_array(r.patch);
               results.append(d);
             }
             py::dict d;
             d["area"] = s.spec.area;
             d["attempted"] = s.attempted;
             d["skipped_misclassified"] = s.skipped_misclassified;
             d["results"] = results;
             return d;
           })
      .def("defend",
           [](Pipeline& p, const Array& img, std::optional<int> m_, std::optional<double> n) {
             DefenseConfig c = p.config().defense;
             if (m_) c.m = *m_;
             if (n) c.n_percent = *n;
             return defense_dict(defend(p.adapter(), to_image(img), p.library(), c));
           },
           py::arg("image"), py::arg("m") = py::none(), py::arg("n_percent") = py::none())
      .def("patchcleanser",
           [](Pipeline& p, const Array& img, std::optional<double> area) {
             const MaskSet masks = p.patchcleanser_masks(area.value_or(p.config().patchcleanser.clean_area));
             return double_masked_predict(p.adapter(), to_image(img), masks);
           },
           py::arg("image"), py::arg("area") = py::none())
      .def("evaluate", [](Pipeline& p) { return to_py(to_json(p.evaluate())); })
      .def("sweep", [](Pipeline& p, const std::string& axis) { return to_py(to_json(p.sweep(axis))); })
      .def("figures", &Pipeline::figures)
      .def("run_all", &Pipeline::run_all);
}
