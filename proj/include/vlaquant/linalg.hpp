#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "vlaquant/tensor.hpp"

namespace vlaq {

/// Lower-triangular L with L * L^T = h. Left-looking, no pivoting.
/// Throws NotPositiveDefinite on a non-positive pivot and ShapeError when h is
/// not square or not symmetric within 1e-6.
Tensor cholesky_lower(const Tensor& h);

/// Inverse of a symmetric positive definite matrix via its Cholesky factor.
/// The result is exactly symmetric.
Tensor spd_inverse(const Tensor& h);

namespace linalg {

// Row-major n x n double-precision variants. GPTQ runs its Hessian algebra
// through these so that f32 rounding does not leak into the column sweep.
std::vector<double> cholesky_lower(std::span<const double> h, std::size_t n);
std::vector<double> spd_inverse(std::span<const double> h, std::size_t n);

// Solves L * L^T * x = b in place for one right-hand side.
void cholesky_solve(std::span<const double> lower, std::size_t n, std::span<double> b);

}  // namespace linalg

}  // namespace vlaq
