#pragma once

#include <span>

namespace efn {

/// log Gamma(x) for x > 0, Lanczos approximation (g=7, 9 terms).
/// Absolute error below 1e-10 over the positive axis.
double lgamma_pos(double x);

/// Digamma (psi) for x > 0: recurrence up-shift plus asymptotic series.
double digamma(double x);

/// log of the multivariate beta function: sum lgamma(a_i) - lgamma(sum a_i).
double log_multivariate_beta(std::span<const double> a);

}  // namespace efn
