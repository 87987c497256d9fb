#include "vlaquant/linalg.hpp"

#include <cmath>
#include <string>

#include "vlaquant/error.hpp"

namespace vlaq {

namespace linalg {

std::vector<double> cholesky_lower(std::span<const double> h, std::size_t n) {
  if (h.size() != n * n) throw ShapeError("cholesky_lower: buffer is not n x n");
  std::vector<double> l(n * n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    // Left-looking: column j only reads the already finished columns 0..j-1.
    double diag = h[j * n + j];
    for (std::size_t k = 0; k < j; ++k) diag -= l[j * n + k] * l[j * n + k];
    if (!(diag > 0.0) || !std::isfinite(diag)) {
      throw NotPositiveDefinite("cholesky_lower: non-positive pivot " + std::to_string(diag) +
                                " at column " + std::to_string(j));
    }
    const double ljj = std::sqrt(diag);
    l[j * n + j] = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = h[i * n + j];
      for (std::size_t k = 0; k < j; ++k) s -= l[i * n + k] * l[j * n + k];
      l[i * n + j] = s / ljj;
    }
  }
  return l;
}

void cholesky_solve(std::span<const double> lower, std::size_t n, std::span<double> b) {
  // L y = b
  for (std::size_t i = 0; i < n; ++i) {
    double s = b[i];
    for (std::size_t k = 0; k < i; ++k) s -= lower[i * n + k] * b[k];
    b[i] = s / lower[i * n + i];
  }
  // L^T x = y
  for (std::size_t ii = n; ii-- > 0;) {
    double s = b[ii];
    for (std::size_t k = ii + 1; k < n; ++k) s -= lower[k * n + ii] * b[k];
    b[ii] = s / lower[ii * n + ii];
  }
}

std::vector<double> spd_inverse(std::span<const double> h, std::size_t n) {
  const auto l = cholesky_lower(h, n);
  std::vector<double> inv(n * n, 0.0);
  std::vector<double> col(n);
  for (std::size_t j = 0; j < n; ++j) {
    std::fill(col.begin(), col.end(), 0.0);
    col[j] = 1.0;
    cholesky_solve(l, n, col);
    for (std::size_t i = 0; i < n; ++i) inv[i * n + j] = col[i];
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double avg = 0.5 * (inv[i * n + j] + inv[j * n + i]);
      inv[i * n + j] = avg;
      inv[j * n + i] = avg;
    }
  }
  return inv;
}

}  // namespace linalg

namespace {

std::vector<double> square_symmetric_f64(const Tensor& h, const char* what) {
  require_matrix(h, what);
  const std::size_t n = h.shape()[0];
  if (h.shape()[1] != n) throw ShapeError(std::string(what) + ": matrix is not square");
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      if (std::abs(double(h.at(i, j)) - double(h.at(j, i))) > 1e-6) {
        throw ShapeError(std::string(what) + ": matrix is not symmetric");
      }
    }
  }
  return {h.data().begin(), h.data().end()};
}

Tensor to_tensor(const std::vector<double>& v, std::size_t n) {
  std::vector<float> data(v.begin(), v.end());
  Tensor out({}, {n, n}, std::move(data));
  out.require_finite("linalg");
  return out;
}

}  // namespace

Tensor cholesky_lower(const Tensor& h) {
  const auto buf = square_symmetric_f64(h, "cholesky_lower");
  const std::size_t n = h.shape()[0];
  return to_tensor(linalg::cholesky_lower(buf, n), n);
}

Tensor spd_inverse(const Tensor& h) {
  const auto buf = square_symmetric_f64(h, "spd_inverse");
  const std::size_t n = h.shape()[0];
  return to_tensor(linalg::spd_inverse(buf, n), n);
}

}  // namespace vlaq
