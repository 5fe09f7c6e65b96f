#pragma once

#include <cmath>
#include <vector>

#include "evimix/autodiff.hpp"
#include "evimix/errors.hpp"
#include "evimix/evidential.hpp"
#include "evimix/networks.hpp"
#include "evimix/random.hpp"

namespace evimix {

/// Pair of Gumbel noise matrices for the two-class mask, one entry per feature.
struct GumbelNoise {
  Tensor q1;
  Tensor q2;

  static GumbelNoise sample(Rng& rng, std::size_t rows, std::size_t cols) {
    GumbelNoise n{Tensor::matrix(rows, cols), Tensor::matrix(rows, cols)};
    for (auto& v : n.q1.values()) v = gumbel(rng);
    for (auto& v : n.q2.values()) v = gumbel(rng);
    return n;
  }

  /// q1 = q2 = 0, used at evaluation time.
  static GumbelNoise zero(std::size_t rows, std::size_t cols) {
    return {Tensor::matrix(rows, cols), Tensor::matrix(rows, cols)};
  }
};

struct MaskBundle {
  Var evidence_map;
  Var robustness_map;
  Var mask;
  double temperature = 0.1;
  GumbelNoise noise;
};

struct FeatureBundle {
  Var clean;
  Var adversarial;
  Var recalibrated;
  Var final;
  Var attention;
  Var augmented;
};

/// Mask logits beyond this magnitude would round the sigmoid to exactly 0 or 1.
inline constexpr double kMaskLogitBound = 36.0;

/// Two-class Gumbel softmax over (sigma(rm), 1 - sigma(rm)) at temperature mu.
///
/// Since log sigma(r) - log(1 - sigma(r)) = r, the first class probability is
/// sigmoid((rm + q1 - q2) / mu); that form avoids log(0) for large |rm|.
inline Var gumbel_soft_mask(const Var& robustness_map, const GumbelNoise& noise, double temperature) {
  if (!(temperature > 0.0)) throw ContractError("gumbel_soft_mask: temperature must be positive");
  Tape& t = robustness_map.tape();
  Tensor dq = noise.q1;
  if (!dq.same_shape(robustness_map.value()) || !noise.q2.same_shape(dq)) {
    throw ContractError("gumbel_soft_mask: noise shape does not match robustness map");
  }
  for (std::size_t i = 0; i < dq.size(); ++i) dq[i] -= noise.q2[i];
  Var logits = scale(robustness_map + t.constant(std::move(dq)), 1.0 / temperature);
  return sigmoid(clamp(logits, -kMaskLogitBound, kMaskLogitBound));
}

/// em = E_pt(x), rm = f_EM1(em), m = gumbel_soft_mask(rm).
inline MaskBundle build_mask(Tape& t, const Var& x, const EvidenceExtractor& pretrained,
                             const MappingLayer& robustness_layer, double temperature, GumbelNoise noise) {
  if (!(temperature > 0.0)) throw ContractError("build_mask: temperature must be positive");
  if (!pretrained.fc.frozen()) throw ContractError("build_mask: pretrained extractor must be frozen");
  MaskBundle b;
  b.temperature = temperature;
  b.evidence_map = pretrained.forward(t, x);
  b.robustness_map = robustness_layer.forward(t, b.evidence_map);
  b.mask = gumbel_soft_mask(b.robustness_map, noise, temperature);
  b.noise = std::move(noise);
  return b;
}

/// h_c = x * m, h_a = x * (1 - m).
inline std::pair<Var, Var> split_features(const Var& x, const Var& mask) {
  if (x.rows() != mask.rows() || x.cols() != mask.cols()) {
    throw ContractError("split_features: mask shape does not match input");
  }
  return {x * mask, x * affine(mask, -1.0, 1.0)};
}

inline Var recalibrate(Tape& t, const Var& adversarial, const Recalibrator& layer) {
  return layer.forward(t, adversarial);
}

struct AttentionResult {
  Var scores;     ///< softmax over E_pt's K outputs
  Var attention;  ///< per-feature gate in (0, 1)
  Var augmented;  ///< h_f * attention
};

inline AttentionResult evidential_attention(Tape& t, const Var& final_features, const EvidenceExtractor& pretrained,
                                            const MappingLayer& attention_layer) {
  if (!pretrained.fc.frozen()) throw ContractError("evidential_attention: pretrained extractor must be frozen");
  AttentionResult r;
  r.scores = softmax(pretrained.forward(t, final_features));
  r.attention = sigmoid(attention_layer.forward(t, r.scores));
  r.augmented = final_features * r.attention;
  return r;
}

namespace detail {
inline void check_positive_probs(const Var& p, const char* op) {
  for (double v : p.value().values())
    if (!(v > 0.0)) throw ContractError(std::string(op) + ": probabilities must be strictly positive");
}
}  // namespace detail

/// Mean over rows of -sum_v (y . log p_c^v + y_wrong . log p_a^v).
inline Var disentanglement_loss(const std::vector<Var>& clean_probs, const std::vector<Var>& adversarial_probs,
                                const Tensor& y, const Tensor& y_wrong) {
  if (clean_probs.empty() || clean_probs.size() != adversarial_probs.size()) {
    throw ContractError("disentanglement_loss: need matching, non-empty view lists");
  }
  const std::size_t R = clean_probs.front().rows(), K = clean_probs.front().cols();
  detail::check_one_hot(y, R, K, "disentanglement_loss");
  detail::check_one_hot(y_wrong, R, K, "disentanglement_loss");
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] == 1.0 && y_wrong[i] == 1.0) throw ContractError("disentanglement_loss: wrong label equals true label");
  }
  Tape& t = clean_probs.front().tape();
  Var yc = t.constant(y);
  Var yw = t.constant(y_wrong);
  Var total;
  for (std::size_t v = 0; v < clean_probs.size(); ++v) {
    detail::check_positive_probs(clean_probs[v], "disentanglement_loss");
    detail::check_positive_probs(adversarial_probs[v], "disentanglement_loss");
    Var term = row_sum(yc * log(clean_probs[v]) + yw * log(adversarial_probs[v]));
    total = total.valid() ? total + term : term;
  }
  return neg(mean(total));
}

/// Mean over rows of -sum_v y . log p_cr^v.
inline Var recalibration_loss(const std::vector<Var>& recalibrated_probs, const Tensor& y) {
  if (recalibrated_probs.empty()) throw ContractError("recalibration_loss: no views");
  const std::size_t R = recalibrated_probs.front().rows(), K = recalibrated_probs.front().cols();
  detail::check_one_hot(y, R, K, "recalibration_loss");
  Tape& t = recalibrated_probs.front().tape();
  Var yc = t.constant(y);
  Var total;
  for (const auto& p : recalibrated_probs) {
    detail::check_positive_probs(p, "recalibration_loss");
    Var term = row_sum(yc * log(p));
    total = total.valid() ? total + term : term;
  }
  return neg(mean(total));
}

}  // namespace evimix
