#include "cpdefense/concept_extraction.hpp"

#include <algorithm>
#include <numeric>

#include "cpdefense/array_store.hpp"
#include "cpdefense/errors.hpp"
#include "cpdefense/image_io.hpp"
#include "cpdefense/nmf.hpp"
#include "cpdefense/nnls.hpp"

namespace cpd {

CropPolicy CropPolicy::resolved(int image_side) const {
  CropPolicy p = *this;
  if (p.crop_size <= 0) p.crop_size = image_side / 2;
  if (p.stride <= 0) p.stride = std::max(1, p.crop_size / 2);
  return p;
}

std::vector<CropBox> crop_grid(int height, int width, const CropPolicy& policy) {
  const CropPolicy p = policy.resolved(std::min(height, width));
  if (p.crop_size > height || p.crop_size > width) {
    throw ConfigError("crop size " + std::to_string(p.crop_size) + " exceeds image size " +
                      std::to_string(height) + "x" + std::to_string(width));
  }
  std::vector<CropBox> boxes;
  for (int top = 0; top + p.crop_size <= height; top += p.stride) {
    for (int left = 0; left + p.crop_size <= width; left += p.stride) boxes.push_back({top, left, p.crop_size});
  }
  return boxes;
}

std::vector<Crop> make_crops(const ClassConditionedSet& set, const CropPolicy& policy, int output_size) {
  std::vector<Crop> crops;
  for (const Image& img : set.images) {
    for (const CropBox& box : crop_grid(img.height(), img.width(), policy)) {
      Crop c;
      c.image_id = img.id;
      c.box = box;
      c.image.id = img.id;
      c.image.true_label = img.true_label;
      c.image.pixels = resize_bilinear(crop(img.pixels, box.top, box.left, box.size, box.size), output_size, output_size);
      for (double& v : c.image.pixels.data) v = std::clamp(v, 0.0, 1.0);
      crops.push_back(std::move(c));
    }
  }
  return crops;
}

CropActivationMatrix crop_activation_matrix(const ClassifierAdapter& adapter, const std::vector<Crop>& crops) {
  CropActivationMatrix m;
  if (crops.empty()) throw DegenerateInputError("no crops to factorize");
  for (std::size_t i = 0; i < crops.size(); ++i) {
    const std::vector<double> pooled = spatial_mean(adapter.activations(crops[i].image).values);
    if (i == 0) m.A.resize(static_cast<Eigen::Index>(crops.size()), static_cast<Eigen::Index>(pooled.size()));
    for (std::size_t c = 0; c < pooled.size(); ++c) m.A(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = pooled[c];
    m.image_ids.push_back(crops[i].image_id);
    m.boxes.push_back(crops[i].box);
  }
  return m;
}

double max_pairwise_cosine(const Eigen::MatrixXd& W) {
  double best = 0.0;
  for (Eigen::Index i = 0; i < W.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < W.rows(); ++j) {
      const double denom = W.row(i).norm() * W.row(j).norm();
      if (denom > 0.0) best = std::max(best, W.row(i).dot(W.row(j)) / denom);
    }
  }
  return best;
}

namespace {

Eigen::MatrixXd coefficients_for(const Eigen::MatrixXd& A, const Eigen::MatrixXd& W) {
  const NnlsSolver solver(W);
  Eigen::MatrixXd U(A.rows(), W.rows());
  std::vector<double> row(static_cast<std::size_t>(A.cols()));
  for (Eigen::Index i = 0; i < A.rows(); ++i) {
    for (Eigen::Index c = 0; c < A.cols(); ++c) row[static_cast<std::size_t>(c)] = A(i, c);
    const auto u = solver.solve(row);
    for (Eigen::Index j = 0; j < W.rows(); ++j) U(i, j) = u[static_cast<std::size_t>(j)];
  }
  return U;
}

}  // namespace

ConceptBank factorize_concepts(const CropActivationMatrix& crops, ClassId class_id, const std::string& split_layer,
                               const ConceptExtractionConfig& config) {
  const Eigen::MatrixXd& A = crops.A;
  if (config.recursion_depth < 0 || config.recursion_depth > 1) throw ConfigError("recursion depth must be 0 or 1");
  if (config.k < 1 || config.k > std::min(A.rows(), A.cols())) {
    throw ConfigError("concept count k=" + std::to_string(config.k) + " must lie in [1, min(N_crops, C)] = [1, " +
                      std::to_string(std::min(A.rows(), A.cols())) + "]");
  }
  if (config.recursion_depth == 1 && config.k < 2) throw ConfigError("recursive extraction needs k >= 2");

  ConceptBank bank;
  bank.class_id = class_id;
  const int first_rank = config.recursion_depth == 1 ? config.k - 1 : config.k;
  const NmfResult top = nmf(A, {first_rank, config.iterations, config.tolerance, config.seed});
  if (config.recursion_depth == 0) {
    bank.W = top.W;
  } else {
    const Eigen::VectorXd mass = top.U.colwise().sum().transpose();
    Eigen::Index dominant = 0;
    mass.maxCoeff(&dominant);
    std::vector<Eigen::Index> rows;
    for (Eigen::Index i = 0; i < A.rows(); ++i) {
      Eigen::Index arg = 0;
      top.U.row(i).maxCoeff(&arg);
      if (arg == dominant) rows.push_back(i);
    }
    const std::size_t min_rows = std::min<std::size_t>(8, static_cast<std::size_t>(A.rows()));
    if (rows.size() < min_rows) {
      std::vector<Eigen::Index> order(static_cast<std::size_t>(A.rows()));
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(),
                       [&](Eigen::Index a, Eigen::Index b) { return top.U(a, dominant) > top.U(b, dominant); });
      rows.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(min_rows));
      std::sort(rows.begin(), rows.end());
    }
    Eigen::MatrixXd sub(static_cast<Eigen::Index>(rows.size()), A.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) sub.row(static_cast<Eigen::Index>(r)) = A.row(rows[r]);
    const NmfResult split = nmf(sub, {2, config.iterations, config.tolerance, config.seed + 1});
    bank.W.resize(config.k, A.cols());
    Eigen::Index out = 0;
    for (Eigen::Index j = 0; j < top.W.rows(); ++j) {
      if (j == dominant) {
        bank.W.row(out++) = split.W.row(0);
        bank.W.row(out++) = split.W.row(1);
      } else {
        bank.W.row(out++) = top.W.row(j);
      }
    }
  }

  if (max_pairwise_cosine(bank.W) > 0.999) {
    throw DegenerateInputError("class " + std::to_string(class_id) +
                               ": extracted concepts are not distinct (cosine > 0.999); try a smaller k or another seed");
  }
  const Eigen::MatrixXd U = coefficients_for(A, bank.W);
  bank.u_summary.resize(static_cast<std::size_t>(config.k));
  for (int j = 0; j < config.k; ++j) bank.u_summary[static_cast<std::size_t>(j)] = U.col(j).sum();
  bank.metadata.split_layer = split_layer;
  bank.metadata.crop_policy = config.crops;
  bank.metadata.seed = config.seed;
  bank.metadata.iterations = config.iterations;
  bank.metadata.tolerance = config.tolerance;
  bank.metadata.final_error = relative_reconstruction_error(A, U, bank.W);
  bank.metadata.recursion_depth = config.recursion_depth;
  bank.metadata.n_crops = static_cast<int>(A.rows());
  return bank;
}

ConceptBank extract_concept_bank(const ClassConditionedSet& set, const ClassifierAdapter& adapter,
                                 const ConceptExtractionConfig& config) {
  if (set.images.empty()) throw DegenerateInputError("class " + std::to_string(set.class_id) + " has no images");
  const CropPolicy policy = config.crops.resolved(std::min(set.images.front().height(), set.images.front().width()));
  const auto crops = make_crops(set, policy, adapter.input_size());
  ConceptExtractionConfig cfg = config;
  cfg.crops = policy;
  return factorize_concepts(crop_activation_matrix(adapter, crops), set.class_id, adapter.split_layer(), cfg);
}

ConceptExtractionConfig config_from_metadata(const ConceptBank& bank) {
  ConceptExtractionConfig c;
  c.k = bank.k();
  c.crops = bank.metadata.crop_policy;
  c.iterations = bank.metadata.iterations;
  c.tolerance = bank.metadata.tolerance;
  c.seed = bank.metadata.seed;
  c.recursion_depth = bank.metadata.recursion_depth;
  return c;
}

nlohmann::json metadata_json(const ConceptBank& bank) {
  const auto& m = bank.metadata;
  return {{"class_id", bank.class_id},
          {"k", bank.k()},
          {"split_layer", m.split_layer},
          {"crop_policy", {{"crop_size", m.crop_policy.crop_size}, {"stride", m.crop_policy.stride}, {"pooling", "spatial-mean"}}},
          {"seed", m.seed},
          {"iters", m.iterations},
          {"tolerance", m.tolerance},
          {"final_error", m.final_error},
          {"recursion_depth", m.recursion_depth},
          {"n_crops", m.n_crops}};
}

void save_concept_bank(const std::filesystem::path& path, const ConceptBank& bank) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  ArrayStore store(path, ArrayStore::Mode::kCreate);
  store.set_attribute("metadata", metadata_json(bank).dump());
  std::vector<double> w(static_cast<std::size_t>(bank.W.size()));
  for (Eigen::Index i = 0; i < bank.W.rows(); ++i)
    for (Eigen::Index c = 0; c < bank.W.cols(); ++c) w[static_cast<std::size_t>(i * bank.W.cols() + c)] = bank.W(i, c);
  store.write("W", {{bank.k(), bank.channels()}, w});
  store.write("U_summary", {{bank.k()}, bank.u_summary});
}

ConceptBank load_concept_bank(const std::filesystem::path& path) {
  ArrayStore store(path, ArrayStore::Mode::kRead);
  const auto meta = nlohmann::json::parse(store.attribute("metadata"));
  ConceptBank bank;
  bank.class_id = meta.at("class_id");
  bank.metadata.split_layer = meta.at("split_layer");
  bank.metadata.crop_policy.crop_size = meta.at("crop_policy").at("crop_size");
  bank.metadata.crop_policy.stride = meta.at("crop_policy").at("stride");
  bank.metadata.seed = meta.at("seed");
  bank.metadata.iterations = meta.at("iters");
  bank.metadata.tolerance = meta.at("tolerance");
  bank.metadata.final_error = meta.at("final_error");
  bank.metadata.recursion_depth = meta.at("recursion_depth");
  bank.metadata.n_crops = meta.at("n_crops");
  const NamedArray w = store.read("W");
  if (w.shape.size() != 2) throw InputError("concept bank W must be a matrix");
  bank.W.resize(w.shape[0], w.shape[1]);
  for (int i = 0; i < w.shape[0]; ++i)
    for (int c = 0; c < w.shape[1]; ++c) bank.W(i, c) = w.values[static_cast<std::size_t>(i * w.shape[1] + c)];
  bank.u_summary = store.read("U_summary").values;
  return bank;
}

}  // namespace cpd
