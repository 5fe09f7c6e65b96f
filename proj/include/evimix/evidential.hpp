#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "evimix/autodiff.hpp"
#include "evimix/errors.hpp"
#include "evimix/special.hpp"
#include "evimix/tensor.hpp"

namespace evimix {

/// Conflict mass at or above `1 - kTotalConflict` is rejected by Dempster
/// combination.
inline constexpr double kTotalConflict = 1e-12;

/// Subjective-logic opinion of a Dirichlet with parameters alpha = e + 1.
struct DirichletOpinion {
  std::vector<double> evidence;
  std::vector<double> alpha;
  double strength = 0.0;
  std::vector<double> belief;
  double uncertainty = 1.0;
  std::vector<double> probs;

  std::size_t num_classes() const noexcept { return alpha.size(); }
};

inline DirichletOpinion opinion_from_evidence(std::span<const double> evidence) {
  const std::size_t K = evidence.size();
  if (K < 2) throw ContractError("opinion_from_evidence: need at least 2 classes");
  DirichletOpinion o;
  o.evidence.assign(evidence.begin(), evidence.end());
  o.alpha.resize(K);
  for (std::size_t k = 0; k < K; ++k) {
    if (!(evidence[k] >= 0.0) || !std::isfinite(evidence[k])) {
      throw DomainError("opinion_from_evidence: evidence must be finite and non-negative");
    }
    o.alpha[k] = evidence[k] + 1.0;
    o.strength += o.alpha[k];
  }
  o.belief.resize(K);
  o.probs.resize(K);
  for (std::size_t k = 0; k < K; ++k) {
    o.belief[k] = evidence[k] / o.strength;
    o.probs[k] = o.alpha[k] / o.strength;
  }
  o.uncertainty = static_cast<double>(K) / o.strength;
  return o;
}

inline DirichletOpinion opinion_from_evidence(std::initializer_list<double> evidence) {
  return opinion_from_evidence(std::span<const double>(evidence.begin(), evidence.size()));
}

/// Re-materializes S = K/u, e = b*S, alpha = e + 1 from a (b, u) pair.
inline DirichletOpinion opinion_from_belief(std::span<const double> belief, double uncertainty) {
  const std::size_t K = belief.size();
  if (K < 2) throw ContractError("opinion_from_belief: need at least 2 classes");
  if (!(uncertainty > 0.0)) throw DomainError("opinion_from_belief: uncertainty must be positive");
  DirichletOpinion o;
  o.belief.assign(belief.begin(), belief.end());
  o.uncertainty = uncertainty;
  o.strength = static_cast<double>(K) / uncertainty;
  o.evidence.resize(K);
  o.alpha.resize(K);
  o.probs.resize(K);
  for (std::size_t k = 0; k < K; ++k) {
    o.evidence[k] = belief[k] * o.strength;
    o.alpha[k] = o.evidence[k] + 1.0;
    o.probs[k] = o.alpha[k] / o.strength;
  }
  return o;
}

/// Reduced Dempster combination of two opinions over the same frame.
inline DirichletOpinion dempster_fuse(const DirichletOpinion& a, const DirichletOpinion& b) {
  const std::size_t K = a.num_classes();
  if (b.num_classes() != K) throw ContractError("dempster_fuse: opinions have different class counts");
  double conflict = 0.0;
  for (std::size_t i = 0; i < K; ++i)
    for (std::size_t j = 0; j < K; ++j)
      if (i != j) conflict += a.belief[i] * b.belief[j];
  const double norm = 1.0 - conflict;
  if (norm <= kTotalConflict) {
    throw TotalConflictError("dempster_fuse: total conflict (M = " + std::to_string(conflict) + ")");
  }
  std::vector<double> belief(K);
  for (std::size_t k = 0; k < K; ++k) {
    belief[k] = (a.belief[k] * b.belief[k] + b.belief[k] * a.uncertainty + a.belief[k] * b.uncertainty) / norm;
  }
  return opinion_from_belief(belief, a.uncertainty * b.uncertainty / norm);
}

/// Left fold of dempster_fuse in view order.
inline DirichletOpinion fuse_all(const std::vector<DirichletOpinion>& opinions) {
  if (opinions.empty()) throw ContractError("fuse_all: no opinions");
  DirichletOpinion acc = opinions.front();
  for (std::size_t v = 1; v < opinions.size(); ++v) {
    try {
      acc = dempster_fuse(acc, opinions[v]);
    } catch (const TotalConflictError& e) {
      throw TotalConflictError(std::string(e.what()) + " while fusing view " + std::to_string(v), v);
    }
  }
  return acc;
}

// ---------------------------------------------------------------------------
// Batched, differentiable forms. Each row of a Var is one instance.

/// Row-wise opinion nodes. `strength` and `uncertainty` are R x 1.
struct OpinionVars {
  Var evidence;
  Var alpha;
  Var strength;
  Var belief;
  Var uncertainty;
  Var probs;
};

inline OpinionVars opinion_from_evidence(const Var& evidence) {
  if (evidence.cols() < 2) throw ContractError("opinion_from_evidence: need at least 2 classes");
  Tape& t = evidence.tape();
  const double K = static_cast<double>(evidence.cols());
  OpinionVars o;
  o.evidence = evidence;
  o.alpha = shift(evidence, 1.0);
  o.strength = row_sum(o.alpha);
  o.belief = evidence / o.strength;
  o.uncertainty = div(t.constant(Tensor(o.strength.value().shape(), K)), o.strength);
  o.probs = o.alpha / o.strength;
  return o;
}

inline OpinionVars dempster_fuse(const OpinionVars& a, const OpinionVars& b) {
  if (a.belief.cols() != b.belief.cols() || a.belief.rows() != b.belief.rows()) {
    throw ContractError("dempster_fuse: opinion batches differ in shape");
  }
  Tape& t = a.belief.tape();
  const double K = static_cast<double>(a.belief.cols());
  // sum_{i != j} b1_i b2_j = (sum b1)(sum b2) - sum b1_k b2_k
  Var agree = a.belief * b.belief;
  Var conflict = row_sum(a.belief) * row_sum(b.belief) - row_sum(agree);
  Var norm = affine(conflict, -1.0, 1.0);
  for (double v : norm.value().values()) {
    if (v <= kTotalConflict) throw TotalConflictError("dempster_fuse: total conflict in batch");
  }
  OpinionVars o;
  o.belief = (agree + b.belief * a.uncertainty + a.belief * b.uncertainty) / norm;
  o.uncertainty = (a.uncertainty * b.uncertainty) / norm;
  o.strength = div(t.constant(Tensor(o.uncertainty.value().shape(), K)), o.uncertainty);
  o.evidence = o.belief * o.strength;
  o.alpha = shift(o.evidence, 1.0);
  o.probs = o.alpha / o.strength;
  return o;
}

inline OpinionVars fuse_all(const std::vector<OpinionVars>& opinions) {
  if (opinions.empty()) throw ContractError("fuse_all: no opinions");
  OpinionVars acc = opinions.front();
  for (std::size_t v = 1; v < opinions.size(); ++v) {
    try {
      acc = dempster_fuse(acc, opinions[v]);
    } catch (const TotalConflictError& e) {
      throw TotalConflictError(std::string(e.what()) + " while fusing view " + std::to_string(v), v);
    }
  }
  return acc;
}

namespace detail {

inline void check_one_hot(const Tensor& y, std::size_t rows, std::size_t cols, const char* op) {
  if (y.rows() != rows || y.cols() != cols) {
    throw ContractError(std::string(op) + ": label shape " + to_string(y.shape()) + " does not match " +
                        std::to_string(rows) + "x" + std::to_string(cols));
  }
  for (std::size_t r = 0; r < rows; ++r) {
    int ones = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double v = y(r, c);
      if (v == 1.0) {
        ++ones;
      } else if (v != 0.0) {
        ones = -1;
        break;
      }
    }
    if (ones != 1) throw ContractError(std::string(op) + ": labels must be one-hot (row " + std::to_string(r) + ")");
  }
}

}  // namespace detail

/// Mean over rows of sum_k y_k (psi(S) - psi(alpha_k)).
inline Var evidential_ce_loss(const Var& alpha, const Tensor& y) {
  detail::check_one_hot(y, alpha.rows(), alpha.cols(), "evidential_ce_loss");
  Tape& t = alpha.tape();
  Var onehot = t.constant(y);
  Var per_row = digamma(row_sum(alpha)) - row_sum(digamma(alpha) * onehot);
  return mean(per_row);
}

/// Mean over rows of KL(Dir(alpha) || Dir(1)).
inline Var dirichlet_kl_to_uniform(const Var& alpha) {
  for (double a : alpha.value().values()) {
    if (a < 1.0 - kTotalConflict) throw DomainError("dirichlet_kl_to_uniform: alpha must be >= 1");
  }
  Tape& t = alpha.tape();
  const std::size_t K = alpha.cols();
  Var strength = row_sum(alpha);
  Var terms = shift(alpha, -1.0) * (digamma(alpha) - digamma(strength));
  Var per_row = log_gamma(strength) - row_sum(log_gamma(alpha)) + row_sum(terms);
  per_row = sub(per_row, t.constant(Tensor::scalar(evimix::log_gamma(static_cast<double>(K)))));
  return mean(per_row);
}

/// ECE plus annealed KL on the evidence of wrong classes only.
inline Var evidential_classification_loss(const Var& alpha, const Tensor& y, double anneal) {
  if (!(anneal >= 0.0 && anneal <= 1.0)) {
    throw ContractError("evidential_classification_loss: anneal coefficient must lie in [0, 1]");
  }
  Var ce = evidential_ce_loss(alpha, y);
  if (anneal == 0.0) return ce;
  Tape& t = alpha.tape();
  Tensor off_target(y.shape());
  for (std::size_t i = 0; i < y.size(); ++i) off_target[i] = 1.0 - y[i];
  Var adapted = alpha * t.constant(off_target) + t.constant(y);
  return ce + scale(dirichlet_kl_to_uniform(adapted), anneal);
}

/// Pairwise total-variation distances between view predictions, counting
/// ordered pairs, divided by V - 1 and averaged over rows.
inline Var adversarial_consistency_loss(const std::vector<Var>& probs) {
  const std::size_t V = probs.size();
  if (V < 2) throw ContractError("adversarial_consistency_loss: need at least 2 views");
  for (const auto& p : probs) {
    if (p.rows() != probs.front().rows() || p.cols() != probs.front().cols()) {
      throw ContractError("adversarial_consistency_loss: views differ in shape");
    }
    for (std::size_t r = 0; r < p.rows(); ++r) {
      double s = 0.0;
      for (double v : p.value().row_span(r)) s += v;
      if (std::abs(s - 1.0) > 1e-6) throw ContractError("adversarial_consistency_loss: probabilities must sum to 1");
    }
  }
  std::vector<Var> distances;
  for (std::size_t v1 = 0; v1 < V; ++v1)
    for (std::size_t v2 = 0; v2 < V; ++v2)
      if (v1 != v2) distances.push_back(row_sum(abs(probs[v1] - probs[v2])));
  Var total = distances.front();
  for (std::size_t i = 1; i < distances.size(); ++i) total = total + distances[i];
  return mean(scale(total, 0.5 / static_cast<double>(V - 1)));
}

// ---------------------------------------------------------------------------
// Single-instance conveniences evaluated on a private tape.

inline double evidential_ce_loss(std::span<const double> alpha, std::span<const double> y) {
  Tape t;
  return evidential_ce_loss(t.constant(Tensor::row(alpha)), Tensor::row(y)).value().item();
}

inline double dirichlet_kl_to_uniform(std::span<const double> alpha) {
  Tape t;
  return dirichlet_kl_to_uniform(t.constant(Tensor::row(alpha))).value().item();
}

inline double evidential_classification_loss(std::span<const double> alpha, std::span<const double> y,
                                             double anneal) {
  Tape t;
  return evidential_classification_loss(t.constant(Tensor::row(alpha)), Tensor::row(y), anneal).value().item();
}

inline double adversarial_consistency_loss(const std::vector<std::vector<double>>& probs) {
  Tape t;
  std::vector<Var> vars;
  for (const auto& p : probs) vars.push_back(t.constant(Tensor::row(p)));
  return adversarial_consistency_loss(vars).value().item();
}

}  // namespace evimix
