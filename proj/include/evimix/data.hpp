#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "evimix/errors.hpp"
#include "evimix/random.hpp"
#include "evimix/tensor.hpp"

namespace evimix {

/// V feature matrices (N x d_v) plus N one-hot labels.
struct MultiViewBatch {
  std::vector<Tensor> views;
  Tensor labels;
  std::size_t num_classes = 0;

  std::size_t size() const noexcept { return labels.rows(); }
  std::size_t num_views() const noexcept { return views.size(); }

  std::vector<std::size_t> view_dims() const {
    std::vector<std::size_t> d;
    for (const auto& v : views) d.push_back(v.cols());
    return d;
  }

  std::size_t label(std::size_t n) const {
    for (std::size_t k = 0; k < num_classes; ++k)
      if (labels(n, k) == 1.0) return k;
    throw ContractError("MultiViewBatch: row " + std::to_string(n) + " has no label");
  }

  std::vector<std::size_t> label_indices() const {
    std::vector<std::size_t> out(size());
    for (std::size_t n = 0; n < size(); ++n) out[n] = label(n);
    return out;
  }

  MultiViewBatch subset(const std::vector<std::size_t>& rows) const {
    MultiViewBatch out;
    out.num_classes = num_classes;
    for (const auto& v : views) {
      Tensor t = Tensor::matrix(rows.size(), v.cols());
      for (std::size_t i = 0; i < rows.size(); ++i) {
        auto src = v.row_span(rows[i]);
        std::copy(src.begin(), src.end(), t.row_span(i).begin());
      }
      out.views.push_back(std::move(t));
    }
    out.labels = Tensor::matrix(rows.size(), num_classes);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      auto src = labels.row_span(rows[i]);
      std::copy(src.begin(), src.end(), out.labels.row_span(i).begin());
    }
    return out;
  }

  /// Throws ContractError unless views share N and labels are one-hot.
  void validate() const {
    if (views.empty()) throw ContractError("MultiViewBatch: no views");
    if (labels.cols() != num_classes) throw ContractError("MultiViewBatch: label width differs from class count");
    for (const auto& v : views) {
      if (v.rows() != size()) throw ContractError("MultiViewBatch: views differ in instance count");
    }
    for (std::size_t n = 0; n < size(); ++n) (void)label(n);
  }
};

inline Tensor one_hot(const std::vector<std::size_t>& labels, std::size_t num_classes) {
  Tensor y = Tensor::matrix(labels.size(), num_classes);
  for (std::size_t n = 0; n < labels.size(); ++n) {
    if (labels[n] >= num_classes) throw ContractError("one_hot: label out of range");
    y(n, labels[n]) = 1.0;
  }
  return y;
}

/// Per-feature min/max used for [0, 1] scaling.
struct Normalization {
  std::vector<std::vector<double>> min;
  std::vector<std::vector<double>> max;

  static Normalization fit(const MultiViewBatch& batch) {
    Normalization n;
    for (const auto& v : batch.views) {
      std::vector<double> lo(v.cols(), std::numeric_limits<double>::infinity());
      std::vector<double> hi(v.cols(), -std::numeric_limits<double>::infinity());
      for (std::size_t r = 0; r < v.rows(); ++r)
        for (std::size_t c = 0; c < v.cols(); ++c) {
          lo[c] = std::min(lo[c], v(r, c));
          hi[c] = std::max(hi[c], v(r, c));
        }
      n.min.push_back(std::move(lo));
      n.max.push_back(std::move(hi));
    }
    return n;
  }

  /// (x - min) / (max - min), clipped to [0, 1]; constant columns map to 0.
  MultiViewBatch apply(const MultiViewBatch& batch) const {
    if (batch.num_views() != min.size()) throw ContractError("Normalization: view count mismatch");
    MultiViewBatch out = batch;
    for (std::size_t v = 0; v < out.views.size(); ++v) {
      Tensor& t = out.views[v];
      if (t.cols() != min[v].size()) throw ContractError("Normalization: feature count mismatch");
      for (std::size_t r = 0; r < t.rows(); ++r)
        for (std::size_t c = 0; c < t.cols(); ++c) {
          const double range = max[v][c] - min[v][c];
          t(r, c) = range > 0.0 ? std::clamp((t(r, c) - min[v][c]) / range, 0.0, 1.0) : 0.0;
        }
    }
    return out;
  }

  nlohmann::json to_json() const { return {{"min", min}, {"max", max}}; }
};

/// Fits on `batch` and applies to it.
inline MultiViewBatch normalize(const MultiViewBatch& batch, Normalization* record = nullptr) {
  Normalization n = Normalization::fit(batch);
  MultiViewBatch out = n.apply(batch);
  if (record) *record = std::move(n);
  return out;
}

struct ViewEntry {
  std::string name;
  std::string file;
  std::size_t dim = 0;
};

/// JSON manifest `{name, num_classes, views:[{name, file, dim}], labels_file}`.
/// Relative file paths resolve against the manifest's directory.
struct DatasetManifest {
  std::string name;
  std::size_t num_classes = 0;
  std::vector<ViewEntry> views;
  std::string labels_file;

  nlohmann::json to_json() const {
    nlohmann::json j{{"name", name}, {"num_classes", num_classes}, {"labels_file", labels_file}};
    j["views"] = nlohmann::json::array();
    for (const auto& v : views) j["views"].push_back({{"name", v.name}, {"file", v.file}, {"dim", v.dim}});
    return j;
  }

  static DatasetManifest from_json(const nlohmann::json& j) {
    DatasetManifest m;
    try {
      m.name = j.at("name").get<std::string>();
      m.num_classes = j.at("num_classes").get<std::size_t>();
      m.labels_file = j.at("labels_file").get<std::string>();
      for (const auto& v : j.at("views")) {
        m.views.push_back({v.at("name").get<std::string>(), v.at("file").get<std::string>(),
                           v.at("dim").get<std::size_t>()});
      }
    } catch (const nlohmann::json::exception& e) {
      throw LoadError(std::string("manifest: ") + e.what());
    }
    if (m.views.empty()) throw LoadError("manifest: no views");
    if (m.num_classes < 2) throw LoadError("manifest: num_classes must be >= 2");
    return m;
  }

  static DatasetManifest read(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw LoadError("manifest: cannot open " + path.string());
    try {
      return from_json(nlohmann::json::parse(is));
    } catch (const nlohmann::json::parse_error& e) {
      throw LoadError("manifest " + path.string() + ": " + e.what());
    }
  }
};

namespace detail {

inline std::vector<std::vector<double>> read_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw LoadError(path.string() + ": cannot open file");
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      const auto b = cell.find_first_not_of(" \t");
      const auto e = cell.find_last_not_of(" \t");
      const std::string trimmed = b == std::string::npos ? "" : cell.substr(b, e - b + 1);
      double v = 0.0;
      const auto [ptr, ec] = std::from_chars(trimmed.data(), trimmed.data() + trimmed.size(), v);
      if (trimmed.empty() || ec != std::errc() || ptr != trimmed.data() + trimmed.size() || !std::isfinite(v)) {
        throw LoadError(path.string() + ":" + std::to_string(lineno) + ": non-numeric cell '" + trimmed + "'");
      }
      row.push_back(v);
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace detail

struct LoadedDataset {
  DatasetManifest manifest;
  MultiViewBatch batch;
  Normalization normalization;  ///< empty when loaded without normalization
};

/// Reads every view CSV and the label CSV named by the manifest. With
/// `normalize_features`, features are min-max scaled per column and the
/// parameters recorded.
inline LoadedDataset load_dataset(const std::filesystem::path& manifest_path, bool normalize_features = true) {
  LoadedDataset out;
  out.manifest = DatasetManifest::read(manifest_path);
  const auto base = manifest_path.parent_path();
  auto resolve = [&](const std::string& f) {
    std::filesystem::path p(f);
    return p.is_absolute() ? p : base / p;
  };

  const auto label_path = resolve(out.manifest.labels_file);
  const auto label_rows = detail::read_csv(label_path);
  std::vector<std::size_t> labels;
  for (std::size_t i = 0; i < label_rows.size(); ++i) {
    const auto& r = label_rows[i];
    if (r.size() != 1 || r[0] < 0 || r[0] != std::floor(r[0]) ||
        r[0] >= static_cast<double>(out.manifest.num_classes)) {
      throw LoadError(label_path.string() + ":" + std::to_string(i + 1) + ": label must be an integer in [0, " +
                      std::to_string(out.manifest.num_classes) + ")");
    }
    labels.push_back(static_cast<std::size_t>(r[0]));
  }
  out.batch.num_classes = out.manifest.num_classes;
  out.batch.labels = one_hot(labels, out.manifest.num_classes);

  for (const auto& view : out.manifest.views) {
    const auto path = resolve(view.file);
    const auto rows = detail::read_csv(path);
    if (rows.size() != labels.size()) {
      throw LoadError(path.string() + ": has " + std::to_string(rows.size()) + " rows but labels file has " +
                      std::to_string(labels.size()));
    }
    Tensor t = Tensor::matrix(rows.size(), view.dim);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (rows[r].size() != view.dim) {
        throw LoadError(path.string() + ":" + std::to_string(r + 1) + ": expected " + std::to_string(view.dim) +
                        " columns, found " + std::to_string(rows[r].size()));
      }
      std::copy(rows[r].begin(), rows[r].end(), t.row_span(r).begin());
    }
    out.batch.views.push_back(std::move(t));
  }
  if (normalize_features) out.batch = normalize(out.batch, &out.normalization);
  return out;
}

/// Writes `batch` as view CSVs plus labels and returns the manifest path.
inline std::filesystem::path write_dataset(const std::filesystem::path& dir, const std::string& name,
                                           const MultiViewBatch& batch,
                                           std::vector<std::filesystem::path>* written = nullptr) {
  std::filesystem::create_directories(dir);
  DatasetManifest m;
  m.name = name;
  m.num_classes = batch.num_classes;
  m.labels_file = "labels.csv";
  auto track = [&](const std::filesystem::path& p) {
    if (written) written->push_back(p);
  };
  for (std::size_t v = 0; v < batch.num_views(); ++v) {
    const std::string file = "view" + std::to_string(v) + ".csv";
    m.views.push_back({"view" + std::to_string(v), file, batch.views[v].cols()});
    std::ofstream os(dir / file);
    track(dir / file);
    const Tensor& t = batch.views[v];
    for (std::size_t r = 0; r < t.rows(); ++r) {
      for (std::size_t c = 0; c < t.cols(); ++c) os << (c ? "," : "") << detail::format_double(t(r, c));
      os << '\n';
    }
    if (!os) throw LoadError("cannot write " + (dir / file).string());
  }
  {
    std::ofstream os(dir / m.labels_file);
    track(dir / m.labels_file);
    for (std::size_t n = 0; n < batch.size(); ++n) os << batch.label(n) << '\n';
  }
  const auto manifest = dir / "manifest.json";
  std::ofstream os(manifest);
  track(manifest);
  os << m.to_json().dump(2) << '\n';
  return manifest;
}

struct Split {
  MultiViewBatch train;
  MultiViewBatch test;
  std::vector<std::size_t> train_indices;
  std::vector<std::size_t> test_indices;
};

/// Stratified shuffle split; each class keeps round(fraction * count) rows
/// for training and at least one row on each side.
inline Split split(const MultiViewBatch& batch, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw SplitError("split: fraction must lie in (0, 1)");
  Rng rng(derive_seed(seed, {0x5b117}));
  std::vector<std::vector<std::size_t>> by_class(batch.num_classes);
  for (std::size_t n = 0; n < batch.size(); ++n) by_class[batch.label(n)].push_back(n);
  Split s;
  for (std::size_t k = 0; k < by_class.size(); ++k) {
    auto& idx = by_class[k];
    if (idx.empty()) continue;
    if (idx.size() < 2) throw SplitError("split: class " + std::to_string(k) + " has fewer than 2 samples");
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(idx.size())));
    if (n_train < 1 || n_train >= idx.size()) {
      throw SplitError("split: class " + std::to_string(k) + " with " + std::to_string(idx.size()) +
                       " samples cannot be split at fraction " + detail::format_double(train_fraction));
    }
    s.train_indices.insert(s.train_indices.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    s.test_indices.insert(s.test_indices.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
  }
  std::sort(s.train_indices.begin(), s.train_indices.end());
  std::sort(s.test_indices.begin(), s.test_indices.end());
  s.train = batch.subset(s.train_indices);
  s.test = batch.subset(s.test_indices);
  return s;
}

struct SyntheticSpec {
  std::size_t num_views = 3;
  std::size_t num_classes = 4;
  std::vector<std::size_t> dims{20, 20, 20};
  std::size_t num_instances = 1000;
  double class_separation = 1.0;
  std::vector<double> view_noise{1.0, 1.0, 1.0};
  std::size_t latent_dim = 0;  ///< 0 picks max(2, K)
  std::uint64_t seed = 1;
};

/// Class centers in a shared latent space, observed through an independent
/// random linear projection per view plus Gaussian noise, then min-max
/// normalized. Labels cycle through the classes so counts differ by <= 1.
inline MultiViewBatch generate_synthetic(const SyntheticSpec& spec) {
  const std::size_t V = spec.num_views, K = spec.num_classes, N = spec.num_instances;
  if (V < 1 || K < 2) throw ContractError("generate_synthetic: need V >= 1 and K >= 2");
  if (spec.dims.size() != V) throw ContractError("generate_synthetic: dims must list one size per view");
  if (spec.view_noise.size() != V) throw ContractError("generate_synthetic: view_noise must list one value per view");
  for (auto d : spec.dims)
    if (d < 2) throw ContractError("generate_synthetic: every view dimension must be >= 2");
  for (double s : spec.view_noise)
    if (!(s >= 0.0)) throw ContractError("generate_synthetic: view noise must be non-negative");
  if (!(spec.class_separation >= 0.0)) throw ContractError("generate_synthetic: class separation must be >= 0");
  if (N < K * 10) throw ContractError("generate_synthetic: need at least 10 instances per class");

  const std::size_t L = spec.latent_dim ? spec.latent_dim : std::max<std::size_t>(2, K);
  std::normal_distribution<double> gauss(0.0, 1.0);

  Rng center_rng(derive_seed(spec.seed, {0xce17}));
  std::vector<std::vector<double>> centers(K, std::vector<double>(L));
  for (auto& c : centers)
    for (auto& v : c) v = spec.class_separation * gauss(center_rng);

  std::vector<std::size_t> labels(N);
  for (std::size_t n = 0; n < N; ++n) labels[n] = n % K;

  MultiViewBatch batch;
  batch.num_classes = K;
  batch.labels = one_hot(labels, K);
  for (std::size_t v = 0; v < V; ++v) {
    const std::size_t d = spec.dims[v];
    Rng proj_rng(derive_seed(spec.seed, {0x9207, v}));
    Tensor proj = Tensor::matrix(L, d);
    const double s = 1.0 / std::sqrt(static_cast<double>(L));
    for (auto& x : proj.values()) x = s * gauss(proj_rng);
    Rng noise_rng(derive_seed(spec.seed, {0x7015e, v}));
    Tensor x = Tensor::matrix(N, d);
    for (std::size_t n = 0; n < N; ++n) {
      const auto& c = centers[labels[n]];
      for (std::size_t j = 0; j < d; ++j) {
        double acc = 0.0;
        for (std::size_t l = 0; l < L; ++l) acc += c[l] * proj(l, j);
        x(n, j) = acc + spec.view_noise[v] * gauss(noise_rng);
      }
    }
    batch.views.push_back(std::move(x));
  }
  return normalize(batch);
}

}  // namespace evimix
