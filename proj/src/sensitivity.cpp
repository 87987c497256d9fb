#include "vlaquant/sensitivity.hpp"

#include <cmath>
#include <limits>
#include <map>

#include "vlaquant/error.hpp"

namespace vlaq {

namespace {

double mean_abs(const Tensor& t) {
  double s = 0.0;
  for (float v : t.data()) s += std::abs(double(v));
  return s / static_cast<double>(t.size());
}

}  // namespace

const ModuleSensitivity* SensitivityReport::find_module(const std::string& name) const {
  for (const auto& m : modules) {
    if (m.name == name) return &m;
  }
  return nullptr;
}

SensitivityScore layer_score(const Tensor& grad, const Tensor& act, const std::string& layer) {
  if (grad.empty() || act.empty()) throw ShapeError("layer_score: empty tensor for layer '" + layer + "'");
  SensitivityScore s;
  s.layer = layer;
  s.grad_mean_abs = static_cast<float>(mean_abs(grad));
  s.act_mean_abs = static_cast<float>(mean_abs(act));
  s.combined = s.grad_mean_abs * s.act_mean_abs;
  s.param_count = grad.size();
  if (!std::isfinite(s.combined)) throw IntegrityError("layer_score: non-finite score for layer '" + layer + "'");
  return s;
}

SensitivityScore layer_score(const Tensor& grad, const Tensor& act, const LayerInfo& layer) {
  if (grad.shape() != layer.shape) {
    throw ShapeError("layer_score: gradient shape " + shape_string(grad.shape()) + " does not match layer '" +
                     layer.name + "' " + shape_string(layer.shape));
  }
  if (layer.shape.size() == 2 && (act.rank() != 2 || act.cols() != layer.shape[1])) {
    throw ShapeError("layer_score: activation batch width does not match layer '" + layer.name + "'");
  }
  return layer_score(grad, act, layer.name);
}

SensitivityReport aggregate(std::span<const SensitivityScore> scores, const ModuleManifest& manifest) {
  std::map<std::string, const SensitivityScore*> by_layer;
  for (const auto& s : scores) {
    if (!manifest.module_of(s.layer)) throw ManifestError("sensitivity: layer '" + s.layer + "' is not in the manifest");
    if (!by_layer.emplace(s.layer, &s).second) throw ManifestError("sensitivity: layer '" + s.layer + "' scored twice");
  }

  SensitivityReport report;
  // Layers are listed in manifest order so the report does not depend on the
  // order scores were supplied in.
  double mod_num[3] = {0, 0, 0}, mod_den[3] = {0, 0, 0};
  for (const auto& m : manifest.modules) {
    double num = 0.0, den = 0.0;
    for (const auto& l : m.layers) {
      auto it = by_layer.find(l.name);
      if (it == by_layer.end()) continue;
      const auto& s = *it->second;
      report.layers.push_back(s);
      num += double(s.combined) * double(s.param_count);
      den += double(s.param_count);
    }
    if (den == 0.0) continue;
    ModuleSensitivity ms{m.name, m.modality, num / den, static_cast<std::uint64_t>(den)};
    report.modules.push_back(ms);
    const auto k = static_cast<int>(m.modality);
    mod_num[k] += num;
    mod_den[k] += den;
  }
  auto agg = [&](Modality m) {
    const auto k = static_cast<int>(m);
    return mod_den[k] == 0.0 ? 0.0 : mod_num[k] / mod_den[k];
  };
  report.modalities = {agg(Modality::vision), agg(Modality::language), agg(Modality::other)};
  const double v = report.modalities.vision, l = report.modalities.language;
  if (v == 0.0) {
    report.modality_ratio = l > 0.0 ? std::numeric_limits<double>::infinity() : 1.0;
  } else {
    report.modality_ratio = l / v;
  }
  return report;
}

}  // namespace vlaq
