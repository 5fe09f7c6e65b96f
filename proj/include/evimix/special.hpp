#pragma once

#include <cmath>
#include <string>

#include "evimix/errors.hpp"

namespace evimix {

// Digamma and trigamma by upward recurrence into x >= 6, then the
// Bernoulli-number asymptotic expansion. At x = 6 the first omitted digamma
// term is below 1e-13.

inline double digamma(double x) {
  if (!(x > 0.0)) throw DomainError("digamma: x must be positive, got " + std::to_string(x));
  double shift = 0.0;
  while (x < 6.0) {
    shift -= 1.0 / x;
    x += 1.0;
  }
  const double inv = 1.0 / x;
  const double inv2 = inv * inv;
  // B2/2, B4/4, ... B14/14 with alternating signs folded in.
  const double series =
      inv2 * (1.0 / 12 -
              inv2 * (1.0 / 120 -
                      inv2 * (1.0 / 252 -
                              inv2 * (1.0 / 240 -
                                      inv2 * (1.0 / 132 - inv2 * (691.0 / 32760 - inv2 / 12.0))))));
  return shift + std::log(x) - 0.5 * inv - series;
}

/// Derivative of `digamma`, obtained by differentiating the same series.
inline double trigamma(double x) {
  if (!(x > 0.0)) throw DomainError("trigamma: x must be positive, got " + std::to_string(x));
  double shift = 0.0;
  while (x < 6.0) {
    shift += 1.0 / (x * x);
    x += 1.0;
  }
  const double inv = 1.0 / x;
  const double inv2 = inv * inv;
  const double series =
      inv * inv2 *
      (1.0 / 6 -
       inv2 * (1.0 / 30 -
               inv2 * (1.0 / 42 -
                       inv2 * (1.0 / 30 - inv2 * (5.0 / 66 - inv2 * (691.0 / 2730 - inv2 * 7.0 / 6))))));
  return shift + inv + 0.5 * inv2 + series;
}

inline double log_gamma(double x) {
  if (!(x > 0.0)) throw DomainError("log_gamma: x must be positive, got " + std::to_string(x));
#if defined(__GLIBC__)
  int sign = 0;
  return ::lgamma_r(x, &sign);  // reentrant: does not touch the global signgam
#else
  return std::lgamma(x);
#endif
}

}  // namespace evimix
