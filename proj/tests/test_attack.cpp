#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "evimix/attack.hpp"
#include "support.hpp"

using namespace evimix;
using evimix::testing::random_one_hot;
using evimix::testing::uniform_tensor;

namespace {

MultiViewBatch random_batch(Rng& rng, std::size_t N, const std::vector<std::size_t>& dims, std::size_t K,
                            double lo = 0.0, double hi = 1.0) {
  MultiViewBatch b;
  b.num_classes = K;
  for (std::size_t d : dims) b.views.push_back(uniform_tensor(rng, N, d, lo, hi));
  b.labels = random_one_hot(rng, N, K);
  return b;
}

// Sum over views and rows of x . w_v.
InputLoss linear_loss(const std::vector<Tensor>& w) {
  return [w](Tape& t, const std::vector<Var>& x, const Tensor&) {
    Var total;
    for (std::size_t v = 0; v < x.size(); ++v) {
      Var term = sum(matmul(x[v], t.constant(w[v])));
      total = total.valid() ? total + term : term;
    }
    return total;
  };
}

// Convex: sum of squared distances to fixed targets.
InputLoss quadratic_loss(const std::vector<Tensor>& targets) {
  return [targets](Tape& t, const std::vector<Var>& x, const Tensor&) {
    Var total;
    for (std::size_t v = 0; v < x.size(); ++v) {
      Var d = x[v] - t.constant(targets[v]);
      Var term = sum(d * d);
      total = total.valid() ? total + term : term;
    }
    return total;
  };
}

double evaluate(const InputLoss& loss, const MultiViewBatch& b) {
  Tape t;
  std::vector<Var> x;
  for (const auto& v : b.views) x.push_back(t.constant(v));
  return loss(t, x, b.labels).value().item();
}

bool row_equal(const Tensor& a, const Tensor& b, std::size_t r) {
  const auto x = a.row_span(r), y = b.row_span(r);
  return std::equal(x.begin(), x.end(), y.begin());
}

}  // namespace

TEST(Attack, ZeroViewsIsIdentity) {
  Rng rng(1);
  const auto b = random_batch(rng, 20, {4, 3}, 3);
  AttackConfig cfg;
  cfg.views_to_attack = 0;
  const auto adv = pgd_attack_views(b, quadratic_loss({Tensor::matrix(20, 4), Tensor::matrix(20, 3)}), cfg, rng);
  EXPECT_EQ(adv.views, b.views);
  EXPECT_EQ(adv.labels, b.labels);
}

TEST(Attack, LinearObjectiveReachesBallCornerInOneStep) {
  const Tensor w({3, 1}, {2.0, -0.5, 1e-3});
  MultiViewBatch b;
  b.num_classes = 2;
  b.views = {Tensor({2, 3}, {0.5, 0.5, 0.5, 0.2, 0.7, 0.4})};
  b.labels = Tensor({2, 2}, {1, 0, 0, 1});
  AttackConfig cfg;
  cfg.step_size = cfg.epsilon;
  const double eps = cfg.epsilon;
  for (std::size_t steps : {1u, 5u}) {
    cfg.steps = steps;
    Rng rng(2);
    const auto adv = pgd_attack_views(b, linear_loss({w}), cfg, rng);
    for (std::size_t n = 0; n < 2; ++n) {
      for (std::size_t j = 0; j < 3; ++j) {
        const double s = w[j] > 0 ? 1.0 : -1.0;
        EXPECT_EQ(adv.views[0](n, j), b.views[0](n, j) + eps * s) << "steps " << steps;
      }
    }
  }
}

TEST(Attack, DefaultStepReachesCornerAfterFourSteps) {
  const Tensor w({2, 1}, {1.0, -1.0});
  MultiViewBatch b;
  b.num_classes = 2;
  b.views = {Tensor({1, 2}, {0.5, 0.5})};
  b.labels = Tensor({1, 2}, {1, 0});
  AttackConfig cfg;
  EXPECT_DOUBLE_EQ(cfg.effective_step_size(), cfg.epsilon / 4.0);
  Rng rng(3);
  const auto adv = pgd_attack_views(b, linear_loss({w}), cfg, rng);
  EXPECT_NEAR(adv.views[0][0], 0.5 + cfg.epsilon, 1e-15);
  EXPECT_NEAR(adv.views[0][1], 0.5 - cfg.epsilon, 1e-15);
}

TEST(Attack, ClipsToUnitInterval) {
  const Tensor w({2, 1}, {1.0, -1.0});
  MultiViewBatch b;
  b.num_classes = 2;
  b.views = {Tensor({1, 2}, {0.99, 0.01})};
  b.labels = Tensor({1, 2}, {1, 0});
  AttackConfig cfg;
  Rng rng(4);
  const auto adv = pgd_attack_views(b, linear_loss({w}), cfg, rng);
  EXPECT_EQ(adv.views[0][0], 1.0);
  EXPECT_EQ(adv.views[0][1], 0.0);
}

TEST(Attack, ProjectionAndUntouchedViewsOnRandomConfigs) {
  Rng rng(5);
  std::uniform_int_distribution<std::size_t> vd(1, 5), nd(1, 12), dd(1, 6), sd(1, 12);
  std::uniform_real_distribution<double> ed(0.0, 0.2);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t V = vd(rng), N = nd(rng);
    std::vector<std::size_t> dims(V);
    for (auto& d : dims) d = dd(rng);
    const auto b = random_batch(rng, N, dims, 3);
    std::vector<Tensor> targets;
    for (std::size_t d : dims) targets.push_back(uniform_tensor(rng, N, d, -1.0, 2.0));
    AttackConfig cfg;
    cfg.epsilon = ed(rng);
    cfg.steps = sd(rng);
    cfg.views_to_attack = std::uniform_int_distribution<std::size_t>(0, V)(rng);
    const auto adv = pgd_attack_views(b, quadratic_loss(targets), cfg, rng);
    ASSERT_EQ(adv.labels, b.labels);
    for (std::size_t n = 0; n < N; ++n) {
      std::size_t untouched = 0;
      for (std::size_t v = 0; v < V; ++v) {
        for (std::size_t j = 0; j < dims[v]; ++j) {
          const double x = adv.views[v](n, j);
          ASSERT_LE(std::abs(x - b.views[v](n, j)), cfg.epsilon + 1e-12);
          ASSERT_GE(x, 0.0);
          ASSERT_LE(x, 1.0);
        }
        untouched += row_equal(adv.views[v], b.views[v], n);
      }
      // A selected view moves unless its gradient is exactly zero, which the quadratic never gives here.
      ASSERT_EQ(untouched, V - cfg.views_to_attack) << "trial " << trial;
    }
  }
}

TEST(Attack, IncreasesConvexLoss) {
  Rng rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    const auto b = random_batch(rng, 8, {5, 5, 5}, 2);
    std::vector<Tensor> targets;
    for (int v = 0; v < 3; ++v) targets.push_back(uniform_tensor(rng, 8, 5, 0.0, 1.0));
    AttackConfig cfg;
    cfg.views_to_attack = 1 + trial % 3;
    const auto loss = quadratic_loss(targets);
    ASSERT_GE(evaluate(loss, pgd_attack_views(b, loss, cfg, rng)), evaluate(loss, b));
  }
}

TEST(Attack, SeededAndDeterministic) {
  Rng data_rng(7);
  const auto b = random_batch(data_rng, 30, {4, 4, 4}, 3);
  const auto loss = quadratic_loss({Tensor::matrix(30, 4), Tensor::matrix(30, 4, 1.0), Tensor::matrix(30, 4, 0.5)});
  AttackConfig cfg;
  cfg.seed = 99;
  EXPECT_EQ(pgd_attack_views(b, loss, cfg).views, pgd_attack_views(b, loss, cfg).views);
  Rng r1(5), r2(5);
  EXPECT_EQ(pgd_attack_views(b, loss, cfg, r1).views, pgd_attack_views(b, loss, cfg, r2).views);
}

TEST(Attack, ViewSelectionIsPerInstanceAndUniform) {
  Rng rng(8);
  std::map<std::vector<std::size_t>, int> counts;
  const auto chosen = choose_attacked_views(30000, 3, 2, rng);
  for (const auto& row : chosen) {
    ASSERT_EQ(row.size(), 2u);
    ASSERT_LT(row[0], row[1]);
    counts[row]++;
  }
  ASSERT_EQ(counts.size(), 3u);
  for (const auto& [subset, c] : counts) EXPECT_NEAR(c / 30000.0, 1.0 / 3.0, 0.02);
  EXPECT_THROW(choose_attacked_views(1, 2, 3, rng), ContractError);
}

TEST(Attack, RejectsInvalidInputs) {
  Rng rng(9);
  const auto loss = quadratic_loss({Tensor::matrix(4, 2)});
  AttackConfig cfg;
  EXPECT_THROW(pgd_attack_views(random_batch(rng, 4, {2}, 2, 0.0, 1.5), loss, cfg, rng), ContractError);
  EXPECT_THROW(pgd_attack_views(random_batch(rng, 4, {2}, 2, -0.5, 0.5), loss, cfg, rng), ContractError);
  cfg.views_to_attack = 2;
  EXPECT_THROW(pgd_attack_views(random_batch(rng, 4, {2}, 2), loss, cfg, rng), ContractError);
  AttackConfig bad;
  bad.steps = 0;
  EXPECT_THROW(pgd_attack_views(random_batch(rng, 4, {2}, 2), loss, bad, rng), ContractError);
  bad = AttackConfig{};
  bad.epsilon = -0.1;
  EXPECT_THROW(pgd_attack_views(random_batch(rng, 4, {2}, 2), loss, bad, rng), ContractError);
}

TEST(Attack, LossTargetNames) {
  EXPECT_EQ(loss_target_from_string("full_model"), LossTarget::full_model);
  EXPECT_EQ(loss_target_from_string(to_string(LossTarget::pretrained_extractor)), LossTarget::pretrained_extractor);
  EXPECT_THROW(loss_target_from_string("whatever"), ConfigError);
}
