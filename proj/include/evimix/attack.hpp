#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "evimix/autodiff.hpp"
#include "evimix/data.hpp"
#include "evimix/errors.hpp"
#include "evimix/random.hpp"

namespace evimix {

enum class LossTarget { pretrained_extractor, full_model };

inline std::string to_string(LossTarget t) {
  return t == LossTarget::full_model ? "full_model" : "pretrained_extractor";
}

inline LossTarget loss_target_from_string(const std::string& s) {
  if (s == "full_model") return LossTarget::full_model;
  if (s == "pretrained_extractor") return LossTarget::pretrained_extractor;
  throw ConfigError("unknown attack loss target '" + s + "'");
}

struct AttackConfig {
  double epsilon = 8.0 / 255.0;
  std::size_t steps = 10;
  std::optional<double> step_size;  ///< defaults to epsilon / 4
  std::size_t views_to_attack = 1;
  LossTarget loss_target = LossTarget::pretrained_extractor;
  std::uint64_t seed = 0;

  double effective_step_size() const { return step_size.value_or(epsilon / 4.0); }

  void validate() const {
    if (!(epsilon >= 0.0)) throw ContractError("attack: epsilon must be >= 0");
    if (steps < 1) throw ContractError("attack: steps must be >= 1");
    if (!(effective_step_size() >= 0.0)) throw ContractError("attack: step size must be >= 0");
  }
};

/// Differentiable scalar loss of the model given one input node per view.
/// It must be a sum or mean of per-instance terms so that each instance's
/// input gradient depends only on that instance.
using InputLoss = std::function<Var(Tape&, const std::vector<Var>&, const Tensor& labels)>;

/// Per-instance choice of which views to perturb: row n lists
/// `views_to_attack` distinct view indices drawn uniformly.
inline std::vector<std::vector<std::size_t>> choose_attacked_views(std::size_t instances, std::size_t views,
                                                                   std::size_t views_to_attack, Rng& rng) {
  if (views_to_attack > views) throw ContractError("attack: cannot attack more views than exist");
  std::vector<std::vector<std::size_t>> out(instances);
  std::vector<std::size_t> order(views);
  for (auto& row : out) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    // Partial Fisher-Yates keeps the draw uniform over subsets.
    for (std::size_t i = 0; i < views_to_attack; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, views - 1);
      std::swap(order[i], order[pick(rng)]);
    }
    row.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(views_to_attack));
    std::sort(row.begin(), row.end());
  }
  return out;
}

/// Random-view L-infinity PGD without random start.
///
/// For each instance, `views_to_attack` views are selected and iterated
/// x <- clip01(project_eps(x + step * sign(grad))). Other views and labels are
/// returned unchanged.
inline MultiViewBatch pgd_attack_views(const MultiViewBatch& batch, const InputLoss& loss, const AttackConfig& cfg,
                                       Rng& rng) {
  cfg.validate();
  batch.validate();
  for (std::size_t v = 0; v < batch.num_views(); ++v) {
    for (double x : batch.views[v].values()) {
      if (x < -1e-9 || x > 1.0 + 1e-9) {
        throw ContractError("attack: view " + std::to_string(v) + " is not normalized to [0, 1]");
      }
    }
  }
  const std::size_t N = batch.size(), V = batch.num_views();
  const auto chosen = choose_attacked_views(N, V, cfg.views_to_attack, rng);
  MultiViewBatch adv = batch;
  if (cfg.views_to_attack == 0 || cfg.epsilon == 0.0) return adv;

  // selected[v][n]
  std::vector<std::vector<char>> selected(V, std::vector<char>(N, 0));
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t v : chosen[n]) selected[v][n] = 1;

  const double eps = cfg.epsilon;
  const double step = cfg.effective_step_size();
  for (std::size_t it = 0; it < cfg.steps; ++it) {
    Tape tape;
    tape.treat_parameters_as_constants();
    std::vector<Var> inputs;
    for (std::size_t v = 0; v < V; ++v) inputs.push_back(tape.variable(adv.views[v]));
    Var l = loss(tape, inputs, batch.labels);
    const GradientMap grads = tape.backward(l);
    for (std::size_t v = 0; v < V; ++v) {
      const Tensor& g = grads.wrt(inputs[v]);
      Tensor& x = adv.views[v];
      const Tensor& x0 = batch.views[v];
      const std::size_t d = x.cols();
      for (std::size_t n = 0; n < N; ++n) {
        if (!selected[v][n]) continue;
        for (std::size_t j = 0; j < d; ++j) {
          const std::size_t i = n * d + j;
          const double s = g[i] > 0 ? 1.0 : (g[i] < 0 ? -1.0 : 0.0);
          const double moved = std::clamp(x[i] + step * s, x0[i] - eps, x0[i] + eps);
          x[i] = std::clamp(moved, 0.0, 1.0);
        }
      }
    }
  }
  return adv;
}

inline MultiViewBatch pgd_attack_views(const MultiViewBatch& batch, const InputLoss& loss, const AttackConfig& cfg) {
  Rng rng(derive_seed(cfg.seed, {0xa77ac}));
  return pgd_attack_views(batch, loss, cfg, rng);
}

}  // namespace evimix
