#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "vlaquant/quant.hpp"
#include "vlaquant/tensor.hpp"

namespace vlaq {

/// Running estimate of the layer Hessian H = (2/n) * sum_i x_i x_i^T over the
/// calibration rows seen so far.
class HessianState {
 public:
  explicit HessianState(std::size_t dim);

  void accumulate(const Tensor& x_batch);

  std::size_t dim() const noexcept { return dim_; }
  std::uint64_t sample_count() const noexcept { return count_; }
  const std::vector<double>& values() const noexcept { return h_; }
  Tensor hessian() const;

 private:
  std::size_t dim_;
  std::uint64_t count_ = 0;
  std::vector<double> h_;
};

struct GptqConfig {
  double percdamp = 0.01;
  std::size_t block_size = 32;
  int max_redamp_retries = 10;
  QuantScheme scheme;

  void validate() const;
};

struct GptqStats {
  double proxy_loss_rtn = 0.0;
  double proxy_loss_gptq = 0.0;
  double damping_used = 0.0;
  int retries = 0;
};

struct GptqResult {
  QuantizedTensor quantized;
  GptqStats stats;
};

/// H + lambda * I with lambda = percdamp * mean(diag H), or percdamp when the
/// diagonal mean is zero.
Tensor dampen(const HessianState& state, double percdamp);
double damping_lambda(const HessianState& state, double percdamp);

GptqResult gptq_quantize_layer(const Tensor& w, const HessianState& state, const GptqConfig& cfg);

/// ||(w - w_hat) x^T||_F^2 / n
double proxy_loss(const Tensor& w, const Tensor& w_hat, const Tensor& x);

/// Same objective evaluated through the Hessian: 0.5 * sum_r e_r H e_r^T.
double proxy_loss_from_hessian(const Tensor& w, const Tensor& w_hat, const HessianState& state);

}  // namespace vlaq
