#include "efn/special.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace efn {

namespace {

// Lanczos g=7, n=9 coefficients (Godfrey's tabulation).
constexpr double kLanczos[9] = {
    0.99999999999980993,      676.5203681218851,     -1259.1392167224028,
    771.32342877765313,       -176.61502916214059,   12.507343278686905,
    -0.13857109526572012,     9.9843695780195716e-6, 1.5056327351493116e-7};

}  // namespace

double lgamma_pos(double x) {
  if (!(x > 0.0)) throw std::domain_error("lgamma_pos: requires x > 0");
  // Reflection is never needed on the positive axis; shift small arguments
  // up via log Gamma(x) = log Gamma(x+1) - log x for accuracy near 0.
  if (x < 0.5) return lgamma_pos(x + 1.0) - std::log(x);
  const double g = 7.0;
  double a = kLanczos[0];
  double t = x + g - 0.5;  // x shifted: series is for Gamma(z), z = x
  double z = x - 1.0;
  for (int i = 1; i < 9; ++i) a += kLanczos[i] / (z + i);
  constexpr double half_log_2pi = 0.91893853320467274178;
  return half_log_2pi + (z + 0.5) * std::log(t) - t + std::log(a);
}

double digamma(double x) {
  if (!(x > 0.0)) throw std::domain_error("digamma: requires x > 0");
  double result = 0.0;
  while (x < 6.0) {
    result -= 1.0 / x;
    x += 1.0;
  }
  // Asymptotic series with Bernoulli numbers.
  const double inv = 1.0 / x;
  const double inv2 = inv * inv;
  result += std::log(x) - 0.5 * inv -
            inv2 * (1.0 / 12.0 -
                    inv2 * (1.0 / 120.0 -
                            inv2 * (1.0 / 252.0 -
                                    inv2 * (1.0 / 240.0 - inv2 / 132.0))));
  return result;
}

double log_multivariate_beta(std::span<const double> a) {
  double total = 0.0;
  double sum = 0.0;
  for (double ai : a) {
    total += lgamma_pos(ai);
    sum += ai;
  }
  return total - lgamma_pos(sum);
}

}  // namespace efn
