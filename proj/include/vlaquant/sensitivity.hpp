#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "vlaquant/manifest.hpp"
#include "vlaquant/tensor.hpp"

namespace vlaq {

struct SensitivityScore {
  std::string layer;
  float grad_mean_abs = 0.0f;
  float act_mean_abs = 0.0f;
  float combined = 0.0f;  // grad_mean_abs * act_mean_abs
  std::uint64_t param_count = 0;
};

struct ModuleSensitivity {
  std::string name;
  Modality modality = Modality::other;
  double aggregate = 0.0;  // parameter-weighted mean of the layers' combined scores
  std::uint64_t params = 0;
};

struct ModalitySensitivity {
  double vision = 0.0;
  double language = 0.0;
  double other = 0.0;
};

struct SensitivityReport {
  std::vector<SensitivityScore> layers;
  std::vector<ModuleSensitivity> modules;
  ModalitySensitivity modalities;
  // language / vision; 1.0 for 0/0 and +inf for x/0 with x > 0.
  double modality_ratio = 1.0;

  const ModuleSensitivity* find_module(const std::string& name) const;
};

SensitivityScore layer_score(const Tensor& grad, const Tensor& act, const std::string& layer);
// Also checks grad against the manifest layer's shape and act against its input width.
SensitivityScore layer_score(const Tensor& grad, const Tensor& act, const LayerInfo& layer);

SensitivityReport aggregate(std::span<const SensitivityScore> scores, const ModuleManifest& manifest);

}  // namespace vlaq
