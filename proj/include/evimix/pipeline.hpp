#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "evimix/attack.hpp"
#include "evimix/autodiff.hpp"
#include "evimix/data.hpp"
#include "evimix/disentangle.hpp"
#include "evimix/errors.hpp"
#include "evimix/evidential.hpp"
#include "evimix/networks.hpp"
#include "evimix/random.hpp"

namespace evimix {

// ---------------------------------------------------------------------------
// Ablation switches.

/// Components that can be switched off. Flag names follow the ablation
/// table: pretrain-with-attacks, disentangle, recalibrate, attention, L_ACL,
/// L_EDL, L_FRL.
struct AblationFlags {
  bool pretrain_with_attacks = true;
  bool disentangle = true;
  bool recalibrate = true;
  bool attention = true;
  bool acl = true;
  bool edl = true;
  bool frl = true;

  static const std::vector<std::string>& names() {
    static const std::vector<std::string> n{"pretrain-with-attacks", "disentangle", "recalibrate", "attention",
                                            "L_ACL",                 "L_EDL",       "L_FRL"};
    return n;
  }

  bool* slot(const std::string& name) {
    if (name == "pretrain-with-attacks") return &pretrain_with_attacks;
    if (name == "disentangle") return &disentangle;
    if (name == "recalibrate") return &recalibrate;
    if (name == "attention") return &attention;
    if (name == "L_ACL") return &acl;
    if (name == "L_EDL") return &edl;
    if (name == "L_FRL") return &frl;
    return nullptr;
  }

  bool enabled(const std::string& name) const { return *const_cast<AblationFlags*>(this)->slot(name); }

  /// Builds a flag set from disabled component names; throws ConfigError on
  /// unknown or repeated names and on inconsistent combinations.
  static AblationFlags disabling(const std::vector<std::string>& disabled) {
    AblationFlags f;
    std::set<std::string> seen;
    for (const auto& n : disabled) {
      bool* s = f.slot(n);
      if (!s) throw ConfigError("unknown ablation flag '" + n + "'");
      if (!seen.insert(n).second) throw ConfigError("ablation flag '" + n + "' given twice");
      *s = false;
    }
    f.validate();
    return f;
  }

  std::vector<std::string> disabled() const {
    std::vector<std::string> out;
    for (const auto& n : names())
      if (!enabled(n)) out.push_back(n);
    return out;
  }

  /// Without the disentangled split there is no h_a for L_EDL and no h_f
  /// path for attention; without recalibration there is no h_cr for L_FRL;
  /// without a pretrained extractor the attention scores carry nothing.
  void validate() const {
    if (!disentangle && edl) throw ConfigError("ablation: disabling disentangle requires disabling L_EDL");
    if (!disentangle && attention) throw ConfigError("ablation: disabling disentangle requires disabling attention");
    if (!recalibrate && frl) throw ConfigError("ablation: disabling recalibrate requires disabling L_FRL");
    if (!pretrain_with_attacks && attention) {
      throw ConfigError("ablation: disabling pretrain-with-attacks requires disabling attention");
    }
  }

  std::string label() const {
    const auto d = disabled();
    if (d.empty()) return "full";
    std::string s = "w/o";
    for (std::size_t i = 0; i < d.size(); ++i) s += (i ? "," : " ") + d[i];
    return s;
  }

  friend bool operator==(const AblationFlags&, const AblationFlags&) = default;
};

/// Single-component ablations in table order, each with the dependent
/// switches that go with it.
inline std::vector<std::pair<std::string, AblationFlags>> standard_ablations() {
  return {
      {"no-pretrain", AblationFlags::disabling({"pretrain-with-attacks", "attention"})},
      {"no-disentangle", AblationFlags::disabling({"disentangle", "attention", "L_EDL"})},
      {"no-recalibrate", AblationFlags::disabling({"recalibrate", "L_FRL"})},
      {"no-attention", AblationFlags::disabling({"attention"})},
      {"no-acl", AblationFlags::disabling({"L_ACL"})},
      {"no-edl", AblationFlags::disabling({"L_EDL"})},
      {"no-frl", AblationFlags::disabling({"L_FRL"})},
      {"full", AblationFlags{}},
  };
}

/// Baseline without perturbation-insensitive pretraining and without the
/// disentangled split.
inline AblationFlags baseline_ablation() {
  return AblationFlags::disabling({"pretrain-with-attacks", "disentangle", "attention", "L_EDL"});
}

// ---------------------------------------------------------------------------
// Configuration.

struct ExperimentConfig {
  std::string method = "RDML";
  std::string data;  ///< manifest path
  double gamma1 = 1.0;
  double gamma2 = 1.0;
  double learning_rate = 0.003;
  std::size_t pretrain_epochs = 1000;
  std::optional<std::size_t> train_epochs;  ///< defaults to 400 under attack, 500 clean
  std::size_t batch_size = 500;
  std::size_t anneal_epochs = 10;
  double mu = 0.1;
  AttackConfig attack;
  std::size_t runs = 5;
  std::vector<std::uint64_t> seeds;  ///< defaults to 1..runs
  double train_fraction = 0.8;
  std::uint64_t split_seed = 0;
  std::vector<std::size_t> attacked_view_counts;  ///< empty means 0..V
  std::size_t histogram_bins = 20;
  AblationFlags ablation;

  std::size_t effective_train_epochs() const {
    return train_epochs.value_or(attack.views_to_attack > 0 ? 400 : 500);
  }

  std::vector<std::uint64_t> effective_seeds() const {
    if (!seeds.empty()) return seeds;
    std::vector<std::uint64_t> s(runs);
    std::iota(s.begin(), s.end(), std::uint64_t{1});
    return s;
  }

  std::vector<std::size_t> effective_attacked_counts(std::size_t num_views) const {
    if (!attacked_view_counts.empty()) return attacked_view_counts;
    std::vector<std::size_t> a(num_views + 1);
    std::iota(a.begin(), a.end(), std::size_t{0});
    return a;
  }

  void validate() const {
    if (!(gamma1 >= 0.0) || !(gamma2 >= 0.0)) throw ConfigError("gamma1 and gamma2 must be >= 0");
    if (!(learning_rate >= 0.0)) throw ConfigError("learning-rate must be >= 0");
    if (pretrain_epochs < 1 || effective_train_epochs() < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch-size must be >= 1");
    if (anneal_epochs < 1) throw ConfigError("anneal-epochs must be >= 1");
    if (!(mu > 0.0)) throw ConfigError("mu must be > 0");
    if (runs < 1) throw ConfigError("runs must be >= 1");
    if (!seeds.empty() && seeds.size() != runs) throw ConfigError("number of seeds must equal runs");
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("train-fraction must lie in (0, 1)");
    if (histogram_bins < 1) throw ConfigError("histogram-bins must be >= 1");
    if (!(attack.epsilon >= 0.0)) throw ConfigError("epsilon must be >= 0");
    if (attack.steps < 1) throw ConfigError("attack steps must be >= 1");
    if (attack.step_size && !(*attack.step_size >= 0.0)) throw ConfigError("step-size must be >= 0");
    ablation.validate();
  }

  /// Checks settings that depend on the data.
  void validate_for(const MultiViewBatch& batch) const {
    const std::size_t V = batch.num_views();
    if (attack.views_to_attack > V) throw ConfigError("views-to-attack exceeds the number of views");
    for (std::size_t a : effective_attacked_counts(V))
      if (a > V) throw ConfigError("attacked view count " + std::to_string(a) + " exceeds the number of views");
  }

  /// All effective parameters, including defaults that were not set.
  nlohmann::json to_json() const {
    nlohmann::json j;
    j["method"] = method;
    j["data"] = data;
    j["gamma1"] = gamma1;
    j["gamma2"] = gamma2;
    j["learning_rate"] = learning_rate;
    j["pretrain_epochs"] = pretrain_epochs;
    j["train_epochs"] = effective_train_epochs();
    j["batch_size"] = batch_size;
    j["anneal_epochs"] = anneal_epochs;
    j["mu"] = mu;
    j["attack"] = {{"epsilon", attack.epsilon},
                   {"steps", attack.steps},
                   {"step_size", attack.effective_step_size()},
                   {"views_to_attack", attack.views_to_attack},
                   {"loss_target", to_string(attack.loss_target)},
                   {"seed", attack.seed}};
    j["runs"] = runs;
    j["seeds"] = effective_seeds();
    j["train_fraction"] = train_fraction;
    j["split_seed"] = split_seed;
    j["attacked_view_counts"] = attacked_view_counts;
    j["histogram_bins"] = histogram_bins;
    j["ablation"] = ablation.disabled();
    return j;
  }

  /// Missing keys keep their defaults; unknown keys are rejected.
  static ExperimentConfig from_json(const nlohmann::json& j) {
    static const std::set<std::string> known{
        "method", "data",   "gamma1", "gamma2", "learning_rate",  "pretrain_epochs", "train_epochs",
        "batch_size", "anneal_epochs", "mu", "attack", "runs", "seeds", "train_fraction", "split_seed",
        "attacked_view_counts", "histogram_bins", "ablation"};
    static const std::set<std::string> known_attack{"epsilon",         "steps",       "step_size",
                                                    "views_to_attack", "loss_target", "seed"};
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    for (const auto& [k, v] : j.items())
      if (!known.count(k)) throw ConfigError("unknown config key '" + k + "'");
    ExperimentConfig c;
    try {
      if (j.contains("method")) c.method = j["method"].get<std::string>();
      if (j.contains("data")) c.data = j["data"].get<std::string>();
      if (j.contains("gamma1")) c.gamma1 = j["gamma1"].get<double>();
      if (j.contains("gamma2")) c.gamma2 = j["gamma2"].get<double>();
      if (j.contains("learning_rate")) c.learning_rate = j["learning_rate"].get<double>();
      if (j.contains("pretrain_epochs")) c.pretrain_epochs = j["pretrain_epochs"].get<std::size_t>();
      if (j.contains("train_epochs")) c.train_epochs = j["train_epochs"].get<std::size_t>();
      if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<std::size_t>();
      if (j.contains("anneal_epochs")) c.anneal_epochs = j["anneal_epochs"].get<std::size_t>();
      if (j.contains("mu")) c.mu = j["mu"].get<double>();
      if (j.contains("attack")) {
        const auto& a = j["attack"];
        for (const auto& [k, v] : a.items())
          if (!known_attack.count(k)) throw ConfigError("unknown attack config key '" + k + "'");
        if (a.contains("epsilon")) c.attack.epsilon = a["epsilon"].get<double>();
        if (a.contains("steps")) c.attack.steps = a["steps"].get<std::size_t>();
        if (a.contains("step_size")) c.attack.step_size = a["step_size"].get<double>();
        if (a.contains("views_to_attack")) c.attack.views_to_attack = a["views_to_attack"].get<std::size_t>();
        if (a.contains("loss_target")) c.attack.loss_target = loss_target_from_string(a["loss_target"].get<std::string>());
        if (a.contains("seed")) c.attack.seed = a["seed"].get<std::uint64_t>();
      }
      if (j.contains("runs")) c.runs = j["runs"].get<std::size_t>();
      if (j.contains("seeds")) c.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
      if (j.contains("train_fraction")) c.train_fraction = j["train_fraction"].get<double>();
      if (j.contains("split_seed")) c.split_seed = j["split_seed"].get<std::uint64_t>();
      if (j.contains("attacked_view_counts")) {
        c.attacked_view_counts = j["attacked_view_counts"].get<std::vector<std::size_t>>();
      }
      if (j.contains("histogram_bins")) c.histogram_bins = j["histogram_bins"].get<std::size_t>();
      if (j.contains("ablation")) c.ablation = AblationFlags::disabling(j["ablation"].get<std::vector<std::string>>());
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
    c.validate();
    return c;
  }

  /// FNV-1a over the canonical JSON of every setting except file locations.
  std::string hash() const {
    nlohmann::json j = to_json();
    j.erase("data");
    const std::string text = j.dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    std::ostringstream os;
    os << std::hex;
    os.width(16);
    os.fill('0');
    os << h;
    return os.str();
  }
};

// ---------------------------------------------------------------------------
// Model forward passes.

struct ViewForward {
  MaskBundle mask;  ///< unset when disentanglement is disabled
  FeatureBundle features;
  OpinionVars opinion;
};

struct ModelForward {
  std::vector<ViewForward> views;
  OpinionVars fused;
};

/// Per-view opinions of the pretrained extractors and their fusion.
struct PretrainForward {
  std::vector<OpinionVars> views;
  OpinionVars fused;
};

inline PretrainForward forward_pretrained(Tape& t, const ViewNetworkSet& nets, const std::vector<Var>& inputs) {
  if (inputs.size() != nets.num_views()) throw ContractError("forward_pretrained: wrong number of views");
  PretrainForward f;
  for (std::size_t v = 0; v < inputs.size(); ++v) {
    f.views.push_back(opinion_from_evidence(nets.view(v).pretrained.forward(t, inputs[v])));
  }
  f.fused = fuse_all(f.views);
  return f;
}

/// Mask, split, recalibrate, attend, extract evidence, fuse. `noise` holds
/// one Gumbel pair per view; pass GumbelNoise::zero for evaluation.
inline ModelForward forward_model(Tape& t, const ViewNetworkSet& nets, const std::vector<Var>& inputs,
                                  const AblationFlags& flags, const std::vector<GumbelNoise>& noise, double mu) {
  if (inputs.size() != nets.num_views()) throw ContractError("forward_model: wrong number of views");
  if (flags.disentangle && noise.size() != inputs.size()) throw ContractError("forward_model: need noise per view");
  ModelForward f;
  std::vector<OpinionVars> opinions;
  for (std::size_t v = 0; v < inputs.size(); ++v) {
    const ViewComponents& c = nets.view(v);
    const Var& x = inputs[v];
    ViewForward vf;
    FeatureBundle& h = vf.features;
    if (flags.disentangle) {
      vf.mask = build_mask(t, x, c.pretrained, c.robustness_map, mu, noise[v]);
      std::tie(h.clean, h.adversarial) = split_features(x, vf.mask.mask);
    } else {
      h.clean = x;
      h.adversarial = t.constant(Tensor::zeros_like(x.value()));
    }
    if (flags.recalibrate) {
      h.recalibrated = recalibrate(t, h.adversarial, c.recalibrator);
      h.final = h.clean + h.recalibrated;
    } else {
      h.final = h.clean;
    }
    if (flags.attention) {
      AttentionResult att = evidential_attention(t, h.final, c.pretrained, c.attention_map);
      h.attention = att.attention;
      h.augmented = att.augmented;
    } else {
      h.augmented = h.final;
    }
    vf.opinion = opinion_from_evidence(c.extractor.forward(t, h.augmented));
    opinions.push_back(vf.opinion);
    f.views.push_back(std::move(vf));
  }
  f.fused = fuse_all(opinions);
  return f;
}

/// Noise-free inference pass.
inline ModelForward infer(Tape& t, const ViewNetworkSet& nets, const std::vector<Var>& inputs,
                          const AblationFlags& flags, double mu) {
  std::vector<GumbelNoise> noise;
  for (const auto& x : inputs) noise.push_back(GumbelNoise::zero(x.rows(), x.cols()));
  return forward_model(t, nets, inputs, flags, noise, mu);
}

// ---------------------------------------------------------------------------
// Losses.

/// Logged loss terms; `total = fused_ecl + view_ecl + acl + gamma1 * edl +
/// gamma2 * frl`.
struct LossTerms {
  double fused_ecl = 0.0;
  double view_ecl = 0.0;
  double acl = 0.0;
  double edl = 0.0;
  double frl = 0.0;
  double total = 0.0;
};

/// KL weight at a 1-based epoch.
inline double anneal_coefficient(std::size_t epoch, std::size_t anneal_epochs) {
  return std::min(1.0, static_cast<double>(epoch) / static_cast<double>(anneal_epochs));
}

inline Var classification_terms(const OpinionVars& fused, const std::vector<OpinionVars>& views, const Tensor& y,
                                double anneal, double* fused_out = nullptr, double* views_out = nullptr) {
  Var f = evidential_classification_loss(fused.alpha, y, anneal);
  Var sum_views;
  for (const auto& o : views) {
    Var l = evidential_classification_loss(o.alpha, y, anneal);
    sum_views = sum_views.valid() ? sum_views + l : l;
  }
  if (fused_out) *fused_out = f.value().item();
  if (views_out) *views_out = sum_views.value().item();
  return f + sum_views;
}

/// Pretraining objective: fused and per-view classification plus consistency.
inline Var pretraining_loss(const PretrainForward& f, const Tensor& y, double anneal, const AblationFlags& flags,
                            LossTerms* terms = nullptr) {
  LossTerms lt;
  Var total = classification_terms(f.fused, f.views, y, anneal, &lt.fused_ecl, &lt.view_ecl);
  if (flags.acl && f.views.size() >= 2) {
    std::vector<Var> probs;
    for (const auto& o : f.views) probs.push_back(o.probs);
    Var acl = adversarial_consistency_loss(probs);
    lt.acl = acl.value().item();
    total = total + acl;
  }
  lt.total = total.value().item();
  if (terms) *terms = lt;
  return total;
}

/// Training objective over a forward pass; `y_wrong` holds one wrong class per row.
inline Var training_loss(Tape& t, const ViewNetworkSet& nets, const ModelForward& f, const Tensor& y,
                         const Tensor& y_wrong, double anneal, double gamma1, double gamma2,
                         const AblationFlags& flags, LossTerms* terms = nullptr) {
  LossTerms lt;
  std::vector<OpinionVars> views;
  for (const auto& vf : f.views) views.push_back(vf.opinion);
  Var total = classification_terms(f.fused, views, y, anneal, &lt.fused_ecl, &lt.view_ecl);
  if (flags.acl && views.size() >= 2) {
    std::vector<Var> probs;
    for (const auto& o : views) probs.push_back(o.probs);
    Var acl = adversarial_consistency_loss(probs);
    lt.acl = acl.value().item();
    total = total + acl;
  }
  if (flags.edl && flags.disentangle) {
    std::vector<Var> pc, pa;
    for (std::size_t v = 0; v < f.views.size(); ++v) {
      const auto& clf = nets.view(v).classifier;
      pc.push_back(clf.forward(t, f.views[v].features.clean));
      pa.push_back(clf.forward(t, f.views[v].features.adversarial));
    }
    Var edl = disentanglement_loss(pc, pa, y, y_wrong);
    lt.edl = edl.value().item();
    total = total + scale(edl, gamma1);
  }
  if (flags.frl && flags.recalibrate) {
    std::vector<Var> pcr;
    for (std::size_t v = 0; v < f.views.size(); ++v) {
      pcr.push_back(nets.view(v).classifier.forward(t, f.views[v].features.recalibrated));
    }
    Var frl = recalibration_loss(pcr, y);
    lt.frl = frl.value().item();
    total = total + scale(frl, gamma2);
  }
  lt.total = total.value().item();
  if (terms) *terms = lt;
  return total;
}

/// Attack objective on the pretrained extractors alone.
inline InputLoss pretrained_attack_loss(const ViewNetworkSet& nets) {
  return [&nets](Tape& t, const std::vector<Var>& x, const Tensor& y) {
    PretrainForward f = forward_pretrained(t, nets, x);
    return classification_terms(f.fused, f.views, y, 1.0);
  };
}

/// White-box attack objective through the whole noise-free inference path.
inline InputLoss full_model_attack_loss(const ViewNetworkSet& nets, const AblationFlags& flags, double mu) {
  return [&nets, flags, mu](Tape& t, const std::vector<Var>& x, const Tensor& y) {
    ModelForward f = infer(t, nets, x, flags, mu);
    std::vector<OpinionVars> views;
    for (const auto& vf : f.views) views.push_back(vf.opinion);
    return classification_terms(f.fused, views, y, 1.0);
  };
}

// ---------------------------------------------------------------------------
// Training stages.

struct EpochRecord {
  std::string stage;
  std::size_t epoch = 0;
  LossTerms loss;
};

using LossCurve = std::vector<EpochRecord>;

namespace detail {

/// Shuffled minibatch index lists; one full batch when N <= batch_size.
inline std::vector<std::vector<std::size_t>> minibatches(std::size_t n, std::size_t batch_size, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

inline void accumulate_terms(LossTerms& acc, const LossTerms& t, double w) {
  acc.fused_ecl += w * t.fused_ecl;
  acc.view_ecl += w * t.view_ecl;
  acc.acl += w * t.acl;
  acc.edl += w * t.edl;
  acc.frl += w * t.frl;
  acc.total += w * t.total;
}

inline std::string describe(const LossTerms& t) {
  std::ostringstream os;
  os << "fused_ecl=" << t.fused_ecl << " view_ecl=" << t.view_ecl << " acl=" << t.acl << " edl=" << t.edl
     << " frl=" << t.frl << " total=" << t.total;
  return os.str();
}

inline std::vector<Parameter*> component_parameters(ViewNetworkSet& nets, const std::string& comp) {
  std::vector<Parameter*> out;
  for (Parameter* p : nets.parameters())
    if (p->name.rfind(comp + ".", 0) == 0) out.push_back(p);
  return out;
}

/// Uniform wrong class per row.
inline Tensor sample_wrong_labels(const MultiViewBatch& batch, Rng& rng) {
  const std::size_t K = batch.num_classes;
  Tensor out = Tensor::matrix(batch.size(), K);
  std::uniform_int_distribution<std::size_t> pick(0, K - 2);
  for (std::size_t n = 0; n < batch.size(); ++n) {
    std::size_t k = pick(rng);
    if (k >= batch.label(n)) ++k;
    out(n, k) = 1.0;
  }
  return out;
}

enum Stream : std::uint64_t { kShuffle = 1, kAttack, kGumbel, kWrongLabel, kEvalAttack };

}  // namespace detail

/// Perturbation-insensitive pretraining of the pretrained extractors on a
/// 1:1 mix of clean and freshly attacked instances.
inline void pretrain(const ExperimentConfig& cfg, const MultiViewBatch& train, ViewNetworkSet& nets,
                     std::uint64_t seed, LossCurve* curve = nullptr) {
  cfg.validate();
  cfg.validate_for(train);
  nets.set_frozen(component::pretrained, false);
  auto params = detail::component_parameters(nets, component::pretrained);
  Adam opt(cfg.learning_rate);
  Rng shuffle_rng(derive_seed(seed, {detail::kShuffle, 0}));
  Rng attack_rng(derive_seed(seed, {detail::kAttack, 0}));
  AttackConfig attack = cfg.attack;
  for (std::size_t epoch = 1; epoch <= cfg.pretrain_epochs; ++epoch) {
    const double anneal = anneal_coefficient(epoch, cfg.anneal_epochs);
    LossTerms epoch_terms;
    const auto batches = detail::minibatches(train.size(), cfg.batch_size, shuffle_rng);
    for (const auto& idx : batches) {
      const MultiViewBatch clean = train.subset(idx);
      LossTerms terms;
      GradientMap grads;
      try {
        const MultiViewBatch adv = pgd_attack_views(clean, pretrained_attack_loss(nets), attack, attack_rng);
        Tape t;
        std::vector<Var> inputs;
        for (std::size_t v = 0; v < train.num_views(); ++v) {
          inputs.push_back(concat_rows({t.constant(clean.views[v]), t.constant(adv.views[v])}));
        }
        Tensor y = Tensor::matrix(2 * clean.size(), train.num_classes);
        std::copy(clean.labels.values().begin(), clean.labels.values().end(), y.values().begin());
        std::copy(clean.labels.values().begin(), clean.labels.values().end(),
                  y.values().begin() + static_cast<std::ptrdiff_t>(clean.labels.size()));
        Var loss = pretraining_loss(forward_pretrained(t, nets, inputs), y, anneal, cfg.ablation, &terms);
        grads = t.backward(loss);
      } catch (const NumericError& e) {
        throw TrainingError("pretrain epoch " + std::to_string(epoch) + ": " + e.what());
      } catch (const TotalConflictError& e) {
        throw TrainingError("pretrain epoch " + std::to_string(epoch) + ": " + e.what());
      }
      if (!std::isfinite(terms.total)) {
        throw TrainingError("pretrain epoch " + std::to_string(epoch) + ": loss diverged (" + detail::describe(terms) + ")");
      }
      opt.step(params, grads);
      detail::accumulate_terms(epoch_terms, terms, static_cast<double>(idx.size()) / static_cast<double>(train.size()));
    }
    if (curve) curve->push_back({"pretrain", epoch, epoch_terms});
  }
}

/// Disentangled training stage. Expects frozen pretrained extractors and
/// extractors initialized from them (see copy_and_freeze).
inline void train(const ExperimentConfig& cfg, ViewNetworkSet& nets, const MultiViewBatch& data, std::uint64_t seed,
                  LossCurve* curve = nullptr) {
  cfg.validate();
  cfg.validate_for(data);
  if (!nets.is_frozen(component::pretrained)) throw ContractError("train: pretrained extractors must be frozen");
  auto params = nets.parameters();
  Adam opt(cfg.learning_rate);
  Rng shuffle_rng(derive_seed(seed, {detail::kShuffle, 1}));
  Rng attack_rng(derive_seed(seed, {detail::kAttack, 1}));
  Rng gumbel_rng(derive_seed(seed, {detail::kGumbel, 1}));
  Rng wrong_rng(derive_seed(seed, {detail::kWrongLabel, 1}));
  const std::size_t epochs = cfg.effective_train_epochs();
  for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
    const double anneal = anneal_coefficient(epoch, cfg.anneal_epochs);
    LossTerms epoch_terms;
    const auto batches = detail::minibatches(data.size(), cfg.batch_size, shuffle_rng);
    for (const auto& idx : batches) {
      const MultiViewBatch clean = data.subset(idx);
      const InputLoss target = cfg.attack.loss_target == LossTarget::full_model
                                   ? full_model_attack_loss(nets, cfg.ablation, cfg.mu)
                                   : pretrained_attack_loss(nets);
      LossTerms terms;
      GradientMap grads;
      try {
        const MultiViewBatch adv = pgd_attack_views(clean, target, cfg.attack, attack_rng);
        std::vector<GumbelNoise> noise;
        for (const auto& x : adv.views) noise.push_back(GumbelNoise::sample(gumbel_rng, x.rows(), x.cols()));
        const Tensor y_wrong = detail::sample_wrong_labels(adv, wrong_rng);
        Tape t;
        std::vector<Var> inputs;
        for (const auto& x : adv.views) inputs.push_back(t.constant(x));
        ModelForward f = forward_model(t, nets, inputs, cfg.ablation, noise, cfg.mu);
        Var loss = training_loss(t, nets, f, adv.labels, y_wrong, anneal, cfg.gamma1, cfg.gamma2, cfg.ablation, &terms);
        grads = t.backward(loss);
      } catch (const NumericError& e) {
        throw TrainingError("train epoch " + std::to_string(epoch) + ": " + e.what() + " (" + detail::describe(terms) + ")");
      } catch (const TotalConflictError& e) {
        throw TrainingError("train epoch " + std::to_string(epoch) + ": " + e.what() + " (" + detail::describe(terms) + ")");
      }
      if (!std::isfinite(terms.total)) {
        throw TrainingError("train epoch " + std::to_string(epoch) + ": loss diverged (" + detail::describe(terms) + ")");
      }
      opt.step(params, grads);
      detail::accumulate_terms(epoch_terms, terms, static_cast<double>(idx.size()) / static_cast<double>(data.size()));
    }
    if (curve) curve->push_back({"train", epoch, epoch_terms});
  }
}

// ---------------------------------------------------------------------------
// Evaluation and reports.

struct AttackedEvaluation {
  double accuracy = 0.0;
  double mean_uncertainty = 0.0;
  std::vector<double> uncertainty;    ///< fused u per test instance
  std::vector<double> view_accuracy;  ///< argmax of each view's opinion
  double max_normalization_error = 0.0;  ///< max |sum b + u - 1| over instances
};

struct Evaluation {
  std::map<std::size_t, AttackedEvaluation> by_attacked_views;
  double clean_accuracy() const {
    auto it = by_attacked_views.find(0);
    return it == by_attacked_views.end() ? std::nan("") : it->second.accuracy;
  }
};

namespace detail {
inline std::size_t argmax_row(const Tensor& t, std::size_t r) {
  const auto row = t.row_span(r);
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}
}  // namespace detail

/// Noise-free inference on `batch` (already attacked or clean).
inline AttackedEvaluation score(const ViewNetworkSet& nets, const MultiViewBatch& batch, const AblationFlags& flags,
                                double mu) {
  Tape t;
  t.treat_parameters_as_constants();
  std::vector<Var> inputs;
  for (const auto& x : batch.views) inputs.push_back(t.constant(x));
  const ModelForward f = infer(t, nets, inputs, flags, mu);
  const std::size_t N = batch.size();
  AttackedEvaluation r;
  const Tensor& p = f.fused.probs.value();
  const Tensor& u = f.fused.uncertainty.value();
  const Tensor& b = f.fused.belief.value();
  std::size_t correct = 0;
  for (std::size_t n = 0; n < N; ++n) {
    const std::size_t truth = batch.label(n);
    if (detail::argmax_row(p, n) == truth) ++correct;
    r.uncertainty.push_back(u[n]);
    double mass = u[n];
    for (double v : b.row_span(n)) mass += v;
    r.max_normalization_error = std::max(r.max_normalization_error, std::abs(mass - 1.0));
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(N);
  r.mean_uncertainty = std::accumulate(r.uncertainty.begin(), r.uncertainty.end(), 0.0) / static_cast<double>(N);
  for (const auto& vf : f.views) {
    std::size_t ok = 0;
    const Tensor& pv = vf.opinion.probs.value();
    for (std::size_t n = 0; n < N; ++n)
      if (detail::argmax_row(pv, n) == batch.label(n)) ++ok;
    r.view_accuracy.push_back(static_cast<double>(ok) / static_cast<double>(N));
  }
  return r;
}

/// Attacks the test set with `a` random views per instance (white-box,
/// through the whole model) for every requested `a` and scores the result.
inline Evaluation evaluate(const ExperimentConfig& cfg, const ViewNetworkSet& nets, const MultiViewBatch& test,
                           std::uint64_t seed) {
  cfg.validate_for(test);
  Evaluation ev;
  for (std::size_t a : cfg.effective_attacked_counts(test.num_views())) {
    AttackConfig attack = cfg.attack;
    attack.views_to_attack = a;
    attack.loss_target = LossTarget::full_model;
    Rng rng(derive_seed(seed, {detail::kEvalAttack, a}));
    const MultiViewBatch attacked =
        a == 0 ? test : pgd_attack_views(test, full_model_attack_loss(nets, cfg.ablation, cfg.mu), attack, rng);
    ev.by_attacked_views[a] = score(nets, attacked, cfg.ablation, cfg.mu);
  }
  return ev;
}

struct RunResult {
  std::uint64_t seed = 0;
  Evaluation evaluation;
  LossCurve curve;
};

/// Pretrain (unless ablated), copy and freeze, train.
inline ViewNetworkSet fit_model(const ExperimentConfig& cfg, const MultiViewBatch& train_data, std::uint64_t seed,
                                LossCurve* curve = nullptr) {
  ViewNetworkSet nets(train_data.view_dims(), train_data.num_classes, seed);
  if (cfg.ablation.pretrain_with_attacks) pretrain(cfg, train_data, nets, seed, curve);
  copy_and_freeze(nets);
  train(cfg, nets, train_data, seed, curve);
  return nets;
}

struct RunReport {
  std::string config_hash;
  std::string method;
  std::string dataset;
  std::vector<std::string> ablation;
  std::vector<RunResult> runs;

  nlohmann::json to_json() const;
  std::string histogram_csv(std::size_t bins) const;
  std::string curves_csv(std::size_t run) const;
};

namespace detail {
inline std::pair<double, double> mean_std(const std::vector<double>& xs) {
  if (xs.empty()) return {std::nan(""), std::nan("")};
  const double m = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  double s = 0.0;
  for (double x : xs) s += (x - m) * (x - m);
  return {m, std::sqrt(s / static_cast<double>(xs.size()))};
}
}  // namespace detail

inline nlohmann::json RunReport::to_json() const {
  using nlohmann::json;
  json j;
  j["config_hash"] = config_hash;
  j["method"] = method;
  j["dataset"] = dataset;
  j["ablation"] = ablation;
  j["runs"] = json::array();
  std::map<std::size_t, std::vector<double>> acc, unc;
  std::vector<double> clean;
  for (const auto& r : runs) {
    json jr;
    jr["seed"] = r.seed;
    jr["clean_acc"] = r.evaluation.clean_accuracy();
    json attacked = json::object(), mean_u = json::object(), views = json::object(), u = json::object();
    for (const auto& [a, e] : r.evaluation.by_attacked_views) {
      const std::string key = std::to_string(a);
      attacked[key] = e.accuracy;
      mean_u[key] = e.mean_uncertainty;
      views[key] = e.view_accuracy;
      u[key] = e.uncertainty;
      acc[a].push_back(e.accuracy);
      unc[a].push_back(e.mean_uncertainty);
    }
    jr["attacked"] = attacked;
    jr["mean_u"] = mean_u;
    jr["per_view_acc"] = views;
    jr["uncertainty"] = u;
    if (!r.curve.empty()) {
      const auto& last = r.curve.back().loss;
      jr["final_loss"] = {{"fused_ecl", last.fused_ecl}, {"view_ecl", last.view_ecl}, {"acl", last.acl},
                          {"edl", last.edl},             {"frl", last.frl},           {"total", last.total}};
    }
    clean.push_back(r.evaluation.clean_accuracy());
    j["runs"].push_back(std::move(jr));
  }
  json mean = json::object(), stdev = json::object();
  if (!runs.empty() && runs.front().evaluation.by_attacked_views.count(0)) {
    const auto [m, s] = detail::mean_std(clean);
    mean["clean_acc"] = m;
    stdev["clean_acc"] = s;
  }
  mean["attacked"] = json::object();
  stdev["attacked"] = json::object();
  mean["mean_u"] = json::object();
  stdev["mean_u"] = json::object();
  for (const auto& [a, xs] : acc) {
    const auto [m, s] = detail::mean_std(xs);
    mean["attacked"][std::to_string(a)] = m;
    stdev["attacked"][std::to_string(a)] = s;
  }
  for (const auto& [a, xs] : unc) {
    const auto [m, s] = detail::mean_std(xs);
    mean["mean_u"][std::to_string(a)] = m;
    stdev["mean_u"][std::to_string(a)] = s;
  }
  j["aggregate"] = {{"mean", mean}, {"std", stdev}};
  return j;
}

/// `a,bin_left,bin_right,density` over [0, 1], pooling all runs.
inline std::string RunReport::histogram_csv(std::size_t bins) const {
  std::map<std::size_t, std::vector<double>> pooled;
  for (const auto& r : runs)
    for (const auto& [a, e] : r.evaluation.by_attacked_views)
      pooled[a].insert(pooled[a].end(), e.uncertainty.begin(), e.uncertainty.end());
  std::ostringstream os;
  os.precision(17);
  os << "a,bin_left,bin_right,density\n";
  const double width = 1.0 / static_cast<double>(bins);
  for (const auto& [a, us] : pooled) {
    std::vector<std::size_t> counts(bins, 0);
    for (double u : us) {
      auto b = static_cast<std::size_t>(u / width);
      counts[std::min(b, bins - 1)]++;
    }
    for (std::size_t b = 0; b < bins; ++b) {
      const double density =
          us.empty() ? 0.0 : static_cast<double>(counts[b]) / (static_cast<double>(us.size()) * width);
      os << a << ',' << static_cast<double>(b) * width << ',' << static_cast<double>(b + 1) * width << ',' << density
         << '\n';
    }
  }
  return os.str();
}

inline std::string RunReport::curves_csv(std::size_t run) const {
  std::ostringstream os;
  os.precision(17);
  os << "stage,epoch,total,fused_ecl,view_ecl,acl,edl,frl\n";
  for (const auto& r : runs.at(run).curve) {
    os << r.stage << ',' << r.epoch << ',' << r.loss.total << ',' << r.loss.fused_ecl << ',' << r.loss.view_ecl << ','
       << r.loss.acl << ',' << r.loss.edl << ',' << r.loss.frl << '\n';
  }
  return os.str();
}

/// Worker count: EVIMIX_THREADS if set, else hardware concurrency, capped by `jobs`.
inline std::size_t worker_count(std::size_t jobs) {
  std::size_t n = std::max<std::size_t>(1, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("EVIMIX_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && v >= 1) n = static_cast<std::size_t>(v);
  }
  return std::max<std::size_t>(1, std::min(n, jobs));
}

/// Runs `job(i)` for i in [0, count) on up to worker_count(count) threads.
/// The first exception thrown by any job is rethrown.
template <class Job>
void parallel_for(std::size_t count, Job job) {
  const std::size_t workers = worker_count(count);
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) job(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex m;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          job(i);
        } catch (...) {
          std::lock_guard lock(m);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

/// Fits and evaluates one model per seed.
inline RunReport run_experiment(const ExperimentConfig& cfg, const MultiViewBatch& train_data,
                                const MultiViewBatch& test_data, const std::string& dataset = "") {
  cfg.validate();
  cfg.validate_for(train_data);
  const auto seeds = cfg.effective_seeds();
  RunReport report;
  report.config_hash = cfg.hash();
  report.method = cfg.method;
  report.dataset = dataset;
  report.ablation = cfg.ablation.disabled();
  report.runs.resize(seeds.size());
  parallel_for(seeds.size(), [&](std::size_t i) {
    RunResult& r = report.runs[i];
    r.seed = seeds[i];
    const ViewNetworkSet nets = fit_model(cfg, train_data, seeds[i], &r.curve);
    r.evaluation = evaluate(cfg, nets, test_data, seeds[i]);
  });
  return report;
}

/// run_experiment with the given components switched off.
inline RunReport ablate(ExperimentConfig cfg, const AblationFlags& flags, const MultiViewBatch& train_data,
                        const MultiViewBatch& test_data, const std::string& dataset = "") {
  flags.validate();
  cfg.ablation = flags;
  return run_experiment(cfg, train_data, test_data, dataset);
}

/// Markdown tables (methods x datasets, mean +- std in percent) of clean and
/// attacked accuracy, with `attacked_views` attacked views per instance.
inline std::string markdown_report(const std::vector<nlohmann::json>& reports, std::size_t attacked_views = 1) {
  std::vector<std::string> methods, datasets;
  auto add_unique = [](std::vector<std::string>& xs, const std::string& x) {
    if (std::find(xs.begin(), xs.end(), x) == xs.end()) xs.push_back(x);
  };
  auto method_of = [](const nlohmann::json& r) {
    std::string m = r.value("method", std::string("?"));
    const auto abl = r.value("ablation", std::vector<std::string>{});
    if (!abl.empty()) {
      m += " (w/o";
      for (std::size_t i = 0; i < abl.size(); ++i) m += (i ? ", " : " ") + abl[i];
      m += ")";
    }
    return m;
  };
  for (const auto& r : reports) {
    add_unique(methods, method_of(r));
    add_unique(datasets, r.value("dataset", std::string("?")));
  }
  auto cell = [&](const std::string& method, const std::string& dataset, bool clean) -> std::string {
    for (const auto& r : reports) {
      if (method_of(r) != method || r.value("dataset", std::string("?")) != dataset) continue;
      const auto& agg = r.at("aggregate");
      const std::string key = std::to_string(attacked_views);
      const nlohmann::json* m = nullptr;
      const nlohmann::json* s = nullptr;
      if (clean && agg.at("mean").contains("clean_acc")) {
        m = &agg.at("mean").at("clean_acc");
        s = &agg.at("std").at("clean_acc");
      } else if (!clean && agg.at("mean").at("attacked").contains(key)) {
        m = &agg.at("mean").at("attacked").at(key);
        s = &agg.at("std").at("attacked").at(key);
      }
      if (!m || m->is_null()) return "-";
      std::ostringstream os;
      os.setf(std::ios::fixed);
      os.precision(2);
      os << 100.0 * m->get<double>() << " ± " << 100.0 * s->get<double>();
      return os.str();
    }
    return "-";
  };
  std::ostringstream os;
  for (bool clean : {true, false}) {
    os << (clean ? "### Clean accuracy (%)\n\n"
                 : "### Accuracy (%) with " + std::to_string(attacked_views) + " attacked view(s)\n\n");
    os << "| Method |";
    for (const auto& d : datasets) os << ' ' << d << " |";
    os << "\n|---|";
    for (std::size_t i = 0; i < datasets.size(); ++i) os << "---|";
    os << '\n';
    for (const auto& m : methods) {
      os << "| " << m << " |";
      for (const auto& d : datasets) os << ' ' << cell(m, d, clean) << " |";
      os << '\n';
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace evimix
