#include <gtest/gtest.h>

#include <cmath>
#include <string>

#include "evimix/autodiff.hpp"
#include "evimix/evidential.hpp"
#include "support.hpp"

using namespace evimix;
using evimix::testing::max_gradient_error;
using evimix::testing::uniform_tensor;

namespace {

constexpr int kPoints = 100;
constexpr double kTol = 1e-4;

// Scalarizes a matrix output with fixed random weights so every entry's
// gradient is exercised.
Var weighted(Tape& t, const Var& out, std::uint64_t seed) {
  Rng rng(seed);
  return sum(out * t.constant(uniform_tensor(rng, out.rows(), out.cols(), -1.0, 1.0)));
}

struct Unary {
  std::string name;
  std::function<Var(const Var&)> op;
  double lo, hi;
};

std::vector<Unary> unary_ops() {
  return {
      {"affine", [](const Var& x) { return affine(x, -1.7, 0.3); }, -3, 3},
      {"relu", [](const Var& x) { return relu(x); }, -3, 3},
      {"softplus", [](const Var& x) { return softplus(x); }, -8, 8},
      {"sigmoid", [](const Var& x) { return sigmoid(x); }, -8, 8},
      {"log", [](const Var& x) { return log(x); }, 0.1, 5},
      {"exp", [](const Var& x) { return exp(x); }, -3, 3},
      {"abs", [](const Var& x) { return abs(x); }, -3, 3},
      {"clamp", [](const Var& x) { return clamp(x, -1.0, 1.5); }, -3, 3},
      {"digamma", [](const Var& x) { return digamma(x); }, 0.2, 12},
      {"log_gamma", [](const Var& x) { return log_gamma(x); }, 0.2, 12},
      {"softmax", [](const Var& x) { return softmax(x); }, -4, 4},
      {"row_sum", [](const Var& x) { return row_sum(x); }, -2, 2},
  };
}

}  // namespace

TEST(Autodiff, SumOfParametersHasUnitGradient) {
  Parameter theta{"theta", Tensor::row({0.3, -1.0, 2.5})};
  Tape t;
  const GradientMap g = t.backward(sum(t.param(theta)));
  EXPECT_EQ(g[theta], Tensor::row({1.0, 1.0, 1.0}));
}

TEST(Autodiff, SquareHasDerivativeTwoTheta) {
  Parameter theta{"theta", Tensor::scalar(3.0)};
  Tape t;
  Var x = t.param(theta);
  EXPECT_DOUBLE_EQ(t.backward(sum(x * x))[theta].item(), 6.0);
}

TEST(Autodiff, EvidentialCrossEntropyMatchesFiniteDifferences) {
  const Tensor y = Tensor::row({1.0, 0.0});
  auto f = [&](Tape&, const Var& a) { return evidential_ce_loss(a, y); };
  EXPECT_LE(max_gradient_error(f, Tensor::row({2.0, 1.0})), kTol);
}

TEST(Autodiff, UnaryPrimitivesMatchFiniteDifferences) {
  for (const auto& u : unary_ops()) {
    Rng rng(derive_seed(11, {std::hash<std::string>{}(u.name)}));
    for (int i = 0; i < kPoints; ++i) {
      const Tensor x = uniform_tensor(rng, 3, 4, u.lo, u.hi);
      auto f = [&](Tape& t, const Var& v) { return weighted(t, u.op(v), 99); };
      ASSERT_LE(max_gradient_error(f, x), kTol) << u.name << " point " << i;
    }
  }
}

TEST(Autodiff, BinaryPrimitivesMatchFiniteDifferencesForEveryBroadcast) {
  using Op = std::function<Var(const Var&, const Var&)>;
  const std::vector<std::pair<std::string, Op>> ops{
      {"add", [](const Var& a, const Var& b) { return a + b; }},
      {"sub", [](const Var& a, const Var& b) { return a - b; }},
      {"mul", [](const Var& a, const Var& b) { return a * b; }},
      {"div", [](const Var& a, const Var& b) { return a / b; }},
  };
  const std::vector<std::pair<std::size_t, std::size_t>> rhs_shapes{{3, 4}, {1, 4}, {3, 1}, {1, 1}};
  Rng rng(5);
  for (const auto& [name, op] : ops) {
    for (auto [r, c] : rhs_shapes) {
      for (int i = 0; i < kPoints; ++i) {
        const Tensor a = uniform_tensor(rng, 3, 4, -2, 2);
        const Tensor b = uniform_tensor(rng, r, c, 0.5, 2);  // away from 0 for div
        auto wrt_a = [&](Tape& t, const Var& v) { return weighted(t, op(v, t.constant(b)), 3); };
        auto wrt_b = [&](Tape& t, const Var& v) { return weighted(t, op(t.constant(a), v), 3); };
        ASSERT_LE(max_gradient_error(wrt_a, a), kTol) << name << " lhs " << r << "x" << c;
        ASSERT_LE(max_gradient_error(wrt_b, b), kTol) << name << " rhs " << r << "x" << c;
      }
    }
  }
}

TEST(Autodiff, MatmulMatchesFiniteDifferences) {
  Rng rng(8);
  for (int i = 0; i < kPoints; ++i) {
    const Tensor a = uniform_tensor(rng, 3, 5, -1, 1);
    const Tensor b = uniform_tensor(rng, 5, 2, -1, 1);
    auto wrt_a = [&](Tape& t, const Var& v) { return weighted(t, matmul(v, t.constant(b)), 4); };
    auto wrt_b = [&](Tape& t, const Var& v) { return weighted(t, matmul(t.constant(a), v), 4); };
    ASSERT_LE(max_gradient_error(wrt_a, a), kTol);
    ASSERT_LE(max_gradient_error(wrt_b, b), kTol);
  }
}

TEST(Autodiff, ReductionsAndConcatenationMatchFiniteDifferences) {
  Rng rng(9);
  for (int i = 0; i < kPoints; ++i) {
    const Tensor x = uniform_tensor(rng, 3, 4, -2, 2);
    const Tensor other = uniform_tensor(rng, 3, 4, -2, 2);
    auto f_sum = [](Tape&, const Var& v) { return sum(v * v); };
    auto f_mean = [](Tape&, const Var& v) { return mean(v * v); };
    auto f_rows = [&](Tape& t, const Var& v) { return weighted(t, concat_rows({v, t.constant(other), v}), 6); };
    auto f_cols = [&](Tape& t, const Var& v) { return weighted(t, concat_cols({t.constant(other), v}), 6); };
    ASSERT_LE(max_gradient_error(f_sum, x), kTol);
    ASSERT_LE(max_gradient_error(f_mean, x), kTol);
    ASSERT_LE(max_gradient_error(f_rows, x), kTol);
    ASSERT_LE(max_gradient_error(f_cols, x), kTol);
  }
}

TEST(Autodiff, ForwardValues) {
  Tape t;
  Var x = t.constant(Tensor::row({-1.0, 0.0, 2.0}));
  EXPECT_EQ(relu(x).value(), Tensor::row({0.0, 0.0, 2.0}));
  EXPECT_EQ(abs(x).value(), Tensor::row({1.0, 0.0, 2.0}));
  EXPECT_NEAR(softplus(x).value()[1], std::log(2.0), 1e-15);
  EXPECT_DOUBLE_EQ(sigmoid(x).value()[1], 0.5);
  const Tensor s = softmax(t.constant(Tensor::row({std::log(2.0), 0.0}))).value();
  EXPECT_NEAR(s[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(s[1], 1.0 / 3.0, 1e-15);
  // Max-subtraction keeps large logits finite.
  const Tensor big = softmax(t.constant(Tensor::row({1000.0, 999.0}))).value();
  EXPECT_TRUE(big.all_finite());
  EXPECT_NEAR(big[0], 1.0 / (1.0 + std::exp(-1.0)), 1e-15);
  const Tensor m = matmul(t.constant(Tensor({2, 2}, {1, 2, 3, 4})), t.constant(Tensor({2, 1}, {1, -1}))).value();
  EXPECT_EQ(m, Tensor({2, 1}, {-1, -1}));
}

TEST(Autodiff, KinkSubgradientsAreZero) {
  Tape t;
  Var x = t.variable(Tensor::row({0.0, 0.0}));
  const GradientMap g = t.backward(sum(relu(x) + abs(x)));
  EXPECT_EQ(g.wrt(x), Tensor::row({0.0, 0.0}));
}

TEST(Autodiff, NonScalarLossIsContractError) {
  Tape t;
  Var x = t.variable(Tensor::row({1.0, 2.0}));
  EXPECT_THROW(t.backward(x * x), ContractError);
}

TEST(Autodiff, NonFiniteValueReportsFirstOffendingNode) {
  Tape t;
  Var x = t.variable(Tensor::row({-1.0, 2.0}));
  Var l = log(x);  // log(-1) = NaN
  try {
    t.backward(sum(l));
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_EQ(e.node(), l.id());
    EXPECT_NE(std::string(e.what()).find("log"), std::string::npos);
  }
}

TEST(Autodiff, NonParticipatingAndFrozenParametersGetZeroGradient) {
  Parameter used{"used", Tensor::row({1.0, 2.0})};
  Parameter unused{"unused", Tensor::matrix(2, 3, 1.0)};
  Parameter frozen{"frozen", Tensor::row({4.0, 5.0}), true};
  Tape t;
  t.param(unused);
  Var l = sum(t.param(used) * t.param(frozen));
  const GradientMap g = t.backward(l);
  EXPECT_EQ(g[used], Tensor::row({4.0, 5.0}));
  EXPECT_EQ(g[unused], Tensor::zeros_like(unused.value));
  EXPECT_FALSE(g.contains(frozen));
  EXPECT_EQ(g[frozen], Tensor::zeros_like(frozen.value));
  EXPECT_EQ(g.num_parameters(), 2u);
}

TEST(Autodiff, ParametersRegisterOncePerTape) {
  Parameter p{"p", Tensor::row({3.0})};
  Tape t;
  Var a = t.param(p);
  Var b = t.param(p);
  EXPECT_EQ(a.id(), b.id());
  EXPECT_DOUBLE_EQ(t.backward(sum(a * b))[p].item(), 6.0);
}

TEST(Autodiff, ParametersAsConstants) {
  Parameter p{"p", Tensor::row({3.0})};
  Tape t;
  t.treat_parameters_as_constants();
  Var x = t.variable(Tensor::row({2.0}));
  const GradientMap g = t.backward(sum(t.param(p) * x));
  EXPECT_FALSE(g.contains(p));
  EXPECT_DOUBLE_EQ(g.wrt(x).item(), 3.0);
}

TEST(Autodiff, ReplayIsBitIdentical) {
  Rng rng(21);
  Parameter w{"w", uniform_tensor(rng, 4, 3, -1, 1)};
  Tape t;
  Var x = t.constant(uniform_tensor(rng, 5, 4, 0, 1));
  Var l = mean(log_gamma(softplus(matmul(x, t.param(w))) + t.constant(Tensor::scalar(1.0))));
  const Tensor first = t.backward(l)[w];
  const Tensor second = t.backward(l)[w];
  EXPECT_EQ(first, second);
  EXPECT_EQ(first.shape(), w.value.shape());
}

TEST(Autodiff, ShapeMismatchIsContractError) {
  Tape t;
  Var a = t.constant(Tensor::matrix(2, 3));
  EXPECT_THROW(a + t.constant(Tensor::matrix(3, 2)), ContractError);
  EXPECT_THROW(matmul(a, t.constant(Tensor::matrix(2, 3))), ContractError);
  Tape other;
  EXPECT_THROW(a + other.constant(Tensor::matrix(2, 3)), ContractError);
}
