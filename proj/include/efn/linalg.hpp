#pragma once

#include <span>
#include <vector>

#include "efn/rng.hpp"
#include "efn/tensor.hpp"

namespace efn {

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
/// Throws std::domain_error if a pivot is not strictly positive.
Tensor cholesky(const Tensor& a);

/// Solve L y = b with L lower triangular (forward substitution).
std::vector<double> solve_lower(const Tensor& l, std::span<const double> b);

/// Solve L^T x = b with L lower triangular (back substitution).
std::vector<double> solve_lower_transposed(const Tensor& l,
                                           std::span<const double> b);

/// Solve (L L^T) x = b given the Cholesky factor.
std::vector<double> cholesky_solve(const Tensor& l, std::span<const double> b);

/// Full inverse of L L^T via D right-hand sides.
Tensor cholesky_inverse(const Tensor& l);

/// Sum of log of the diagonal of a triangular factor (log-det of L).
double log_det_triangular(const Tensor& l);

/// Wishart(df, scale) draw by Bartlett decomposition; df > D - 1.
Tensor wishart_sample(double df, const Tensor& scale, RngStream& rng);

/// Inverse-Wishart(df, psi) draw: inverts a Wishart draw with the inverted
/// scale. Retries a handful of times if the result fails factorization.
Tensor inverse_wishart_sample(double df, const Tensor& psi, RngStream& rng);

}  // namespace efn
