#include "vlaquant/gptq.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "vlaquant/error.hpp"
#include "vlaquant/linalg.hpp"

namespace vlaq {

HessianState::HessianState(std::size_t dim) : dim_(dim), h_(dim * dim, 0.0) {
  if (dim == 0) throw ShapeError("HessianState: zero dimension");
}

void HessianState::accumulate(const Tensor& x_batch) {
  require_matrix(x_batch, "HessianState::accumulate");
  if (x_batch.cols() != dim_) {
    throw ShapeError("HessianState::accumulate: batch has " + std::to_string(x_batch.cols()) +
                     " columns, expected " + std::to_string(dim_));
  }
  const std::size_t nb = x_batch.rows();
  const double total = static_cast<double>(count_ + nb);
  const double keep = static_cast<double>(count_) / total;
  std::vector<double> outer(dim_ * dim_, 0.0);
  for (std::size_t r = 0; r < nb; ++r) {
    const float* x = x_batch.data().data() + r * dim_;
    for (std::size_t i = 0; i < dim_; ++i) {
      const double xi = x[i];
      if (xi == 0.0) continue;
      for (std::size_t j = 0; j < dim_; ++j) outer[i * dim_ + j] += xi * x[j];
    }
  }
  for (std::size_t k = 0; k < h_.size(); ++k) h_[k] = h_[k] * keep + (2.0 / total) * outer[k];
  count_ += nb;
}

Tensor HessianState::hessian() const {
  std::vector<float> data(h_.begin(), h_.end());
  return Tensor("hessian", {dim_, dim_}, std::move(data));
}

void GptqConfig::validate() const {
  if (!(percdamp > 0.0)) throw FormatError("gptq: percdamp must be > 0");
  if (block_size < 1) throw FormatError("gptq: block_size must be >= 1");
  if (max_redamp_retries < 0) throw FormatError("gptq: max_redamp_retries must be >= 0");
  scheme.validate();
}

double damping_lambda(const HessianState& state, double percdamp) {
  const std::size_t n = state.dim();
  double diag = 0.0;
  for (std::size_t i = 0; i < n; ++i) diag += state.values()[i * n + i];
  diag /= static_cast<double>(n);
  return diag == 0.0 ? percdamp : percdamp * diag;
}

namespace {

std::vector<double> add_diagonal(const HessianState& state, double lambda) {
  auto h = state.values();
  const std::size_t n = state.dim();
  for (std::size_t i = 0; i < n; ++i) h[i * n + i] += lambda;
  return h;
}

void require_calibrated(const HessianState& state) {
  if (state.sample_count() == 0) throw CalibrationError("gptq: no calibration samples accumulated");
}

}  // namespace

Tensor dampen(const HessianState& state, double percdamp) {
  require_calibrated(state);
  const auto h = add_diagonal(state, damping_lambda(state, percdamp));
  std::vector<float> data(h.begin(), h.end());
  return Tensor("hessian_damped", {state.dim(), state.dim()}, std::move(data));
}

GptqResult gptq_quantize_layer(const Tensor& w, const HessianState& state, const GptqConfig& cfg) {
  cfg.validate();
  require_matrix(w, "gptq_quantize_layer");
  require_calibrated(state);
  const std::size_t rows = w.rows(), cols = w.cols();
  if (state.dim() != cols) {
    throw ShapeError("gptq_quantize_layer: Hessian dim " + std::to_string(state.dim()) +
                     " does not match in_features " + std::to_string(cols));
  }

  GptqStats stats;
  double lambda = damping_lambda(state, cfg.percdamp);
  // Upper Cholesky factor of the inverse damped Hessian, stored row-major:
  // hinv = U^T U with U = L^T where hinv = L L^T.
  std::vector<double> upper;
  for (;;) {
    try {
      const auto hinv = linalg::spd_inverse(add_diagonal(state, lambda), cols);
      const auto lower = linalg::cholesky_lower(hinv, cols);
      upper.assign(cols * cols, 0.0);
      for (std::size_t i = 0; i < cols; ++i)
        for (std::size_t j = 0; j <= i; ++j) upper[j * cols + i] = lower[i * cols + j];
      break;
    } catch (const NotPositiveDefinite&) {
      if (stats.retries >= cfg.max_redamp_retries) {
        throw NotPositiveDefinite("gptq_quantize_layer: damped Hessian still not positive definite after " +
                                  std::to_string(stats.retries) + " retries");
      }
      ++stats.retries;
      lambda *= 2.0;
    }
  }
  stats.damping_used = lambda;

  const QuantScheme& scheme = cfg.scheme;
  const ScaleSet ss = compute_scales(w, scheme);
  const bool asym = scheme.mode == QuantMode::asymmetric;

  QuantizedTensor q;
  q.scheme = scheme;
  q.shape = w.shape();
  q.codes.assign(w.size(), 0);

  std::vector<double> work(w.data().begin(), w.data().end());
  const std::size_t block = std::min(cfg.block_size, cols);
  std::vector<double> err(rows * block);  // err[r * block + (j - start)]

  for (std::size_t start = 0; start < cols; start += block) {
    const std::size_t end = std::min(start + block, cols);
    const std::size_t width = end - start;
    for (std::size_t j = start; j < end; ++j) {
      const double d = upper[j * cols + j];
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t i = r * cols + j;
        const std::size_t g = scheme.group_of(w.shape(), i);
        const int zp = asym ? ss.zero_points[g] : 0;
        const std::int32_t code = quantize_value(work[i], ss.scales[g], zp, scheme);
        q.codes[i] = code;
        const double e = (work[i] - static_cast<double>(dequantize_value(code, ss.scales[g], zp, scheme))) / d;
        err[r * block + (j - start)] = e;
        for (std::size_t k = j + 1; k < end; ++k) work[r * cols + k] -= e * upper[j * cols + k];
      }
    }
    // Lazy update of every column past the block.
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t k = end; k < cols; ++k) {
        double acc = 0.0;
        for (std::size_t t = 0; t < width; ++t) acc += err[r * block + t] * upper[(start + t) * cols + k];
        work[r * cols + k] -= acc;
      }
    }
  }
  q.scales = ss.scales;
  q.zero_points = ss.zero_points;

  const Tensor w_gptq = dequantize(q);
  const Tensor w_rtn = dequantize(rtn_quantize(w, scheme));
  stats.proxy_loss_gptq = proxy_loss_from_hessian(w, w_gptq, state);
  stats.proxy_loss_rtn = proxy_loss_from_hessian(w, w_rtn, state);
  return {std::move(q), stats};
}

double proxy_loss(const Tensor& w, const Tensor& w_hat, const Tensor& x) {
  require_matrix(w, "proxy_loss");
  require_matrix(x, "proxy_loss");
  if (w.shape() != w_hat.shape()) throw ShapeError("proxy_loss: w and w_hat shapes differ");
  if (x.cols() != w.cols()) throw ShapeError("proxy_loss: calibration width does not match in_features");
  const std::size_t out = w.rows(), in = w.cols(), n = x.rows();
  double total = 0.0;
  for (std::size_t r = 0; r < out; ++r) {
    for (std::size_t s = 0; s < n; ++s) {
      double y = 0.0;
      for (std::size_t c = 0; c < in; ++c) y += (double(w.at(r, c)) - double(w_hat.at(r, c))) * x.at(s, c);
      total += y * y;
    }
  }
  return total / static_cast<double>(n);
}

double proxy_loss_from_hessian(const Tensor& w, const Tensor& w_hat, const HessianState& state) {
  require_matrix(w, "proxy_loss_from_hessian");
  if (w.shape() != w_hat.shape()) throw ShapeError("proxy_loss_from_hessian: w and w_hat shapes differ");
  const std::size_t out = w.rows(), in = w.cols();
  if (state.dim() != in) throw ShapeError("proxy_loss_from_hessian: Hessian dim mismatch");
  const auto& h = state.values();
  std::vector<double> e(in);
  double total = 0.0;
  for (std::size_t r = 0; r < out; ++r) {
    for (std::size_t c = 0; c < in; ++c) e[c] = double(w.at(r, c)) - double(w_hat.at(r, c));
    for (std::size_t i = 0; i < in; ++i) {
      if (e[i] == 0.0) continue;
      double hi = 0.0;
      for (std::size_t j = 0; j < in; ++j) hi += h[i * in + j] * e[j];
      total += e[i] * hi;
    }
  }
  return std::max(0.0, 0.5 * total);
}

}  // namespace vlaq
