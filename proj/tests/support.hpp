#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <ostream>
#include <random>

#include "evimix/autodiff.hpp"
#include "evimix/random.hpp"

namespace evimix {
inline void PrintTo(const Tensor& t, std::ostream* os) {
  *os << to_string(t.shape()) << " [";
  for (std::size_t i = 0; i < t.size(); ++i) *os << (i ? ", " : "") << t[i];
  *os << "]";
}
}  // namespace evimix

namespace evimix::testing {

inline std::vector<double> values(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

using ScalarFn = std::function<Var(Tape&, const Var&)>;

/// |analytic - numeric| / max(|analytic|, |numeric|, floor).
inline double relative_error(double analytic, double numeric, double floor = 1e-3) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Largest relative error between the tape gradient of f at x and central
/// differences with step h.
inline double max_gradient_error(const ScalarFn& f, const Tensor& x, double h = 1e-5) {
  Tape tape;
  Var xv = tape.variable(x);
  const GradientMap g = tape.backward(f(tape, xv));
  const Tensor& analytic = g.wrt(xv);
  auto eval = [&](const Tensor& at) {
    Tape t;
    return f(t, t.constant(at)).value().item();
  };
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    Tensor plus = x, minus = x;
    plus[i] += h;
    minus[i] -= h;
    const double numeric = (eval(plus) - eval(minus)) / (2.0 * h);
    worst = std::max(worst, relative_error(analytic[i], numeric));
  }
  return worst;
}

/// Same check against a parameter's value.
inline double max_parameter_gradient_error(Parameter& p, const std::function<Var(Tape&)>& f, double h = 1e-5) {
  Tape tape;
  const GradientMap g = tape.backward(f(tape));
  const Tensor analytic = g[p];
  const Tensor saved = p.value;
  auto eval = [&] {
    Tape t;
    return f(t).value().item();
  };
  double worst = 0.0;
  for (std::size_t i = 0; i < saved.size(); ++i) {
    p.value[i] = saved[i] + h;
    const double up = eval();
    p.value[i] = saved[i] - h;
    const double down = eval();
    p.value[i] = saved[i];
    worst = std::max(worst, relative_error(analytic[i], (up - down) / (2.0 * h)));
  }
  return worst;
}

inline Tensor uniform_tensor(Rng& rng, std::size_t rows, std::size_t cols, double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor t = Tensor::matrix(rows, cols);
  for (auto& v : t.values()) v = d(rng);
  return t;
}

inline Tensor random_one_hot(Rng& rng, std::size_t rows, std::size_t k) {
  std::uniform_int_distribution<std::size_t> d(0, k - 1);
  Tensor t = Tensor::matrix(rows, k);
  for (std::size_t r = 0; r < rows; ++r) t(r, d(rng)) = 1.0;
  return t;
}

}  // namespace evimix::testing
