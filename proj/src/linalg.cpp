#include "efn/linalg.hpp"

#include <cmath>
#include <stdexcept>

namespace efn {

Tensor cholesky(const Tensor& a) {
  if (a.rank() != 2 || a.rows() != a.cols())
    throw std::invalid_argument("cholesky: square matrix required");
  const std::size_t n = a.rows();
  Tensor l = Tensor::zeros({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double s = a.at(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l.at(i, k) * l.at(j, k);
      if (i == j) {
        if (s <= 0.0)
          throw std::domain_error("cholesky: matrix not positive definite");
        l.at(i, i) = std::sqrt(s);
      } else {
        l.at(i, j) = s / l.at(j, j);
      }
    }
  }
  return l;
}

std::vector<double> solve_lower(const Tensor& l, std::span<const double> b) {
  const std::size_t n = l.rows();
  std::vector<double> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = b[i];
    for (std::size_t k = 0; k < i; ++k) s -= l.at(i, k) * y[k];
    y[i] = s / l.at(i, i);
  }
  return y;
}

std::vector<double> solve_lower_transposed(const Tensor& l,
                                           std::span<const double> b) {
  const std::size_t n = l.rows();
  std::vector<double> x(n);
  for (std::size_t ii = n; ii-- > 0;) {
    double s = b[ii];
    for (std::size_t k = ii + 1; k < n; ++k) s -= l.at(k, ii) * x[k];
    x[ii] = s / l.at(ii, ii);
  }
  return x;
}

std::vector<double> cholesky_solve(const Tensor& l,
                                   std::span<const double> b) {
  auto y = solve_lower(l, b);
  return solve_lower_transposed(l, y);
}

Tensor cholesky_inverse(const Tensor& l) {
  const std::size_t n = l.rows();
  Tensor inv = Tensor::zeros({n, n});
  std::vector<double> e(n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    e[j] = 1.0;
    auto col = cholesky_solve(l, e);
    for (std::size_t i = 0; i < n; ++i) inv.at(i, j) = col[i];
    e[j] = 0.0;
  }
  // Symmetrize to kill round-off drift between the two triangles.
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < i; ++j) {
      double m = 0.5 * (inv.at(i, j) + inv.at(j, i));
      inv.at(i, j) = m;
      inv.at(j, i) = m;
    }
  return inv;
}

double log_det_triangular(const Tensor& l) {
  double s = 0.0;
  for (std::size_t i = 0; i < l.rows(); ++i) s += std::log(std::abs(l.at(i, i)));
  return s;
}

Tensor wishart_sample(double df, const Tensor& scale, RngStream& rng) {
  const std::size_t n = scale.rows();
  if (df <= static_cast<double>(n) - 1.0)
    throw std::invalid_argument("wishart_sample: df must exceed D - 1");
  Tensor ls = cholesky(scale);
  // Bartlett factor: chi draws on the diagonal, normals below.
  Tensor a = Tensor::zeros({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    a.at(i, i) = std::sqrt(2.0 * rng.gamma(0.5 * (df - static_cast<double>(i))));
    for (std::size_t j = 0; j < i; ++j) a.at(i, j) = rng.normal();
  }
  // W = (Ls A)(Ls A)^T
  Tensor m = Tensor::zeros({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < n; ++k) s += ls.at(i, k) * a.at(k, j);
      m.at(i, j) = s;
    }
  Tensor w = Tensor::zeros({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < n; ++k) s += m.at(i, k) * m.at(j, k);
      w.at(i, j) = s;
    }
  return w;
}

Tensor inverse_wishart_sample(double df, const Tensor& psi, RngStream& rng) {
  const std::size_t n = psi.rows();
  Tensor psi_inv = cholesky_inverse(cholesky(psi));
  for (int attempt = 0; attempt < 10; ++attempt) {
    Tensor w = wishart_sample(df, psi_inv, rng);
    try {
      Tensor sigma = cholesky_inverse(cholesky(w));
      cholesky(sigma);  // reject draws too ill-conditioned to factor
      return sigma;
    } catch (const std::domain_error&) {
      continue;
    }
  }
  throw std::domain_error(
      "inverse_wishart_sample: repeated non-positive-definite draws");
}

}  // namespace efn
