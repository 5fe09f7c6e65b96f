#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "evimix/autodiff.hpp"
#include "evimix/errors.hpp"
#include "evimix/random.hpp"

namespace evimix {

/// x W + b with W of shape (in, out) and b of shape (1, out).
struct Affine {
  Parameter weight;
  Parameter bias;

  Affine() = default;
  Affine(const std::string& prefix, std::size_t in, std::size_t out)
      : weight{prefix + ".weight", Tensor::matrix(in, out)}, bias{prefix + ".bias", Tensor::matrix(1, out)} {}

  std::size_t in() const { return weight.value.rows(); }
  std::size_t out() const { return weight.value.cols(); }

  /// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
  void init(Rng& rng) {
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    const double bound = 1.0 / std::sqrt(static_cast<double>(in()));
    for (auto& v : weight.value.values()) v = bound * dist(rng);
    for (auto& v : bias.value.values()) v = bound * dist(rng);
  }

  Var forward(Tape& t, const Var& x) const {
    if (x.cols() != in()) {
      throw ContractError(weight.name + ": input has " + std::to_string(x.cols()) + " features, expected " +
                          std::to_string(in()));
    }
    return matmul(x, t.param(weight)) + t.param(bias);
  }

  void set_frozen(bool f) { weight.frozen = bias.frozen = f; }
  bool frozen() const { return weight.frozen && bias.frozen; }
};

/// Evidence extractor d_v -> K with Softplus evidence (E_pt and E_c).
struct EvidenceExtractor {
  Affine fc;

  /// Pre-activation class scores.
  Var logits(Tape& t, const Var& x) const { return fc.forward(t, x); }
  Var forward(Tape& t, const Var& x) const { return softplus(logits(t, x)); }
};

/// Evidence mapping layer K -> d_v (f_EM,1 and f_EM,2).
struct MappingLayer {
  Affine fc;
  Var forward(Tape& t, const Var& x) const { return fc.forward(t, x); }
};

/// Feature recalibration d_v -> d_v: affine, ReLU, affine.
struct Recalibrator {
  Affine fc1;
  Affine fc2;
  Var forward(Tape& t, const Var& x) const { return fc2.forward(t, relu(fc1.forward(t, x))); }
};

/// Training-only evidential classifier d_v -> K returning Dirichlet means.
struct EvidentialClassifier {
  Affine fc;

  Var forward(Tape& t, const Var& h) const {
    Var alpha = shift(relu(fc.forward(t, h)), 1.0);
    return alpha / row_sum(alpha);
  }
};

/// All per-view components of the model.
struct ViewComponents {
  EvidenceExtractor pretrained;
  EvidenceExtractor extractor;
  MappingLayer robustness_map;
  MappingLayer attention_map;
  Recalibrator recalibrator;
  EvidentialClassifier classifier;
};

/// Component names as used in parameter and checkpoint keys.
namespace component {
inline constexpr const char* pretrained = "pretrained";
inline constexpr const char* extractor = "extractor";
inline constexpr const char* robustness_map = "robustness_map";
inline constexpr const char* attention_map = "attention_map";
inline constexpr const char* recalibrator = "recalibrator";
inline constexpr const char* classifier = "classifier";
}  // namespace component

/// Networks for every view. Parameters are keyed
/// `{component}.{view}.{layer}.{weight|bias}`.
///
/// Tapes and optimizers refer to parameters by address or name; do not move
/// a set while a tape that uses it is alive.
class ViewNetworkSet {
 public:
  ViewNetworkSet() = default;

  ViewNetworkSet(std::vector<std::size_t> view_dims, std::size_t num_classes, std::uint64_t seed)
      : dims_(std::move(view_dims)), num_classes_(num_classes), seed_(seed) {
    if (num_classes_ < 2) throw ContractError("ViewNetworkSet: need at least 2 classes");
    if (dims_.empty()) throw ContractError("ViewNetworkSet: need at least one view");
    const std::size_t K = num_classes_;
    for (std::size_t v = 0; v < dims_.size(); ++v) {
      const std::size_t d = dims_[v];
      if (d == 0) throw ContractError("ViewNetworkSet: view dimension must be positive");
      auto key = [v](const char* comp, const char* layer) {
        return std::string(comp) + "." + std::to_string(v) + "." + layer;
      };
      ViewComponents c;
      c.pretrained.fc = Affine(key(component::pretrained, "fc"), d, K);
      c.extractor.fc = Affine(key(component::extractor, "fc"), d, K);
      c.robustness_map.fc = Affine(key(component::robustness_map, "fc"), K, d);
      c.attention_map.fc = Affine(key(component::attention_map, "fc"), K, d);
      c.recalibrator.fc1 = Affine(key(component::recalibrator, "fc1"), d, d);
      c.recalibrator.fc2 = Affine(key(component::recalibrator, "fc2"), d, d);
      c.classifier.fc = Affine(key(component::classifier, "fc"), d, K);
      views_.push_back(std::move(c));
    }
    std::uint64_t layer = 0;
    for (Affine* a : layers()) {
      Rng rng(derive_seed(seed, {0x1a17, layer++}));
      a->init(rng);
    }
  }

  std::size_t num_views() const noexcept { return views_.size(); }
  std::size_t num_classes() const noexcept { return num_classes_; }
  const std::vector<std::size_t>& view_dims() const noexcept { return dims_; }
  std::uint64_t seed() const noexcept { return seed_; }

  ViewComponents& view(std::size_t v) { return views_.at(v); }
  const ViewComponents& view(std::size_t v) const { return views_.at(v); }

  std::vector<Affine*> layers() {
    std::vector<Affine*> out;
    for (auto& c : views_) {
      for (Affine* a : {&c.pretrained.fc, &c.extractor.fc, &c.robustness_map.fc, &c.attention_map.fc,
                        &c.recalibrator.fc1, &c.recalibrator.fc2, &c.classifier.fc}) {
        out.push_back(a);
      }
    }
    return out;
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    for (Affine* a : layers()) {
      out.push_back(&a->weight);
      out.push_back(&a->bias);
    }
    return out;
  }

  std::vector<const Parameter*> parameters() const {
    std::vector<const Parameter*> out;
    for (Parameter* p : const_cast<ViewNetworkSet*>(this)->parameters()) out.push_back(p);
    return out;
  }

  Parameter* find(const std::string& name) {
    for (Parameter* p : parameters())
      if (p->name == name) return p;
    return nullptr;
  }

  /// Freezes or thaws one component across all views.
  void set_frozen(const std::string& comp, bool frozen) {
    for (Parameter* p : parameters())
      if (p->name.rfind(comp + ".", 0) == 0) p->frozen = frozen;
  }

  bool is_frozen(const std::string& comp) const {
    bool any = false;
    for (const Parameter* p : parameters()) {
      if (p->name.rfind(comp + ".", 0) != 0) continue;
      any = true;
      if (!p->frozen) return false;
    }
    return any;
  }

 private:
  std::vector<std::size_t> dims_;
  std::size_t num_classes_ = 0;
  std::uint64_t seed_ = 0;
  std::vector<ViewComponents> views_;
};

/// Copies each view's pretrained extractor into the trainable extractor and
/// freezes the pretrained one.
inline void copy_and_freeze(ViewNetworkSet& nets) {
  for (std::size_t v = 0; v < nets.num_views(); ++v) {
    auto& src = nets.view(v).pretrained.fc;
    auto& dst = nets.view(v).extractor.fc;
    if (!src.weight.value.same_shape(dst.weight.value) || !src.bias.value.same_shape(dst.bias.value)) {
      throw ContractError("copy_and_freeze: extractor shapes differ in view " + std::to_string(v));
    }
    dst.weight.value = src.weight.value;
    dst.bias.value = src.bias.value;
    dst.set_frozen(false);
    src.set_frozen(true);
  }
}

/// Adaptive moment estimation. State is keyed by parameter name so an
/// optimizer can follow a network set through copies.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  /// Updates every unfrozen parameter from `grads`; parameters absent from
  /// the gradient map see a zero gradient.
  void step(const std::vector<Parameter*>& params, const GradientMap& grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (Parameter* p : params) {
      if (p->frozen) continue;
      auto& st = state_[p->name];
      if (st.m.empty()) {
        st.m = Tensor::zeros_like(p->value);
        st.v = Tensor::zeros_like(p->value);
      }
      const Tensor g = grads[*p];
      for (std::size_t i = 0; i < p->value.size(); ++i) {
        st.m[i] = beta1_ * st.m[i] + (1.0 - beta1_) * g[i];
        st.v[i] = beta2_ * st.v[i] + (1.0 - beta2_) * g[i] * g[i];
        const double mhat = st.m[i] / c1;
        const double vhat = st.v[i] / c2;
        p->value[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  double learning_rate() const noexcept { return lr_; }

 private:
  struct Moments {
    Tensor m;
    Tensor v;
  };
  double lr_, beta1_, beta2_, eps_;
  std::uint64_t t_ = 0;
  std::map<std::string, Moments> state_;
};

// ---------------------------------------------------------------------------
// Checkpoints.
//
// Layout: the 8-byte magic "EVMXCKP1", a little-endian uint64 header length,
// a JSON header {stage, seed, num_classes, view_dims, tensors:[{key, shape,
// frozen}]}, then the raw IEEE-754 doubles of each tensor in header order.

struct CheckpointInfo {
  std::string stage;
  std::uint64_t seed = 0;
};

namespace detail {
inline constexpr char kCheckpointMagic[8] = {'E', 'V', 'M', 'X', 'C', 'K', 'P', '1'};

inline void write_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw LoadError("checkpoint: truncated file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}
}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const ViewNetworkSet& nets,
                            const CheckpointInfo& info) {
  nlohmann::json header;
  header["stage"] = info.stage;
  header["seed"] = info.seed;
  header["num_classes"] = nets.num_classes();
  header["view_dims"] = nets.view_dims();
  header["tensors"] = nlohmann::json::array();
  for (const Parameter* p : nets.parameters()) {
    header["tensors"].push_back({{"key", p->name}, {"shape", p->value.shape()}, {"frozen", p->frozen}});
  }
  const std::string text = header.dump();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw LoadError("checkpoint: cannot write " + path.string());
  os.write(detail::kCheckpointMagic, 8);
  detail::write_u64(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const Parameter* p : nets.parameters()) {
    for (double v : p->value.values()) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      detail::write_u64(os, bits);
    }
  }
  if (!os) throw LoadError("checkpoint: write failed for " + path.string());
}

inline ViewNetworkSet load_checkpoint(const std::filesystem::path& path, CheckpointInfo* info = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw LoadError("checkpoint: cannot open " + path.string());
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, detail::kCheckpointMagic, 8) != 0) {
    throw LoadError("checkpoint: bad magic in " + path.string());
  }
  const std::uint64_t len = detail::read_u64(is);
  std::string text(len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(len))) throw LoadError("checkpoint: truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("checkpoint: malformed header: ") + e.what());
  }
  ViewNetworkSet nets(header.at("view_dims").get<std::vector<std::size_t>>(),
                      header.at("num_classes").get<std::size_t>(), header.at("seed").get<std::uint64_t>());
  for (const auto& entry : header.at("tensors")) {
    Parameter* p = nets.find(entry.at("key").get<std::string>());
    if (!p) throw LoadError("checkpoint: unknown tensor " + entry.at("key").get<std::string>());
    if (entry.at("shape").get<Shape>() != p->value.shape()) {
      throw LoadError("checkpoint: shape mismatch for " + p->name);
    }
    for (auto& v : p->value.values()) {
      const std::uint64_t bits = detail::read_u64(is);
      std::memcpy(&v, &bits, sizeof v);
    }
    p->frozen = entry.at("frozen").get<bool>();
  }
  if (info) {
    info->stage = header.at("stage").get<std::string>();
    info->seed = header.at("seed").get<std::uint64_t>();
  }
  return nets;
}

}  // namespace evimix
