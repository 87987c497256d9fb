#include "vlaquant/planner.hpp"

#include <algorithm>
#include <numeric>
#include <set>

#include "vlaquant/error.hpp"

namespace vlaq {

const char* to_string(QuantMethod m) {
  switch (m) {
    case QuantMethod::rtn: return "rtn";
    case QuantMethod::gptq: return "gptq";
    case QuantMethod::skip: return "skip";
  }
  return "?";
}

const char* to_string(Policy p) {
  switch (p) {
    case Policy::modality: return "modality";
    case Policy::uniform8: return "uniform8";
    case Policy::uniform4: return "uniform4";
    case Policy::budget: return "budget";
  }
  return "?";
}

QuantMethod parse_method(const std::string& s) {
  if (s == "rtn") return QuantMethod::rtn;
  if (s == "gptq") return QuantMethod::gptq;
  if (s == "skip") return QuantMethod::skip;
  throw PlanError("unknown quantization method '" + s + "'");
}

Policy parse_policy(const std::string& s) {
  if (s == "modality") return Policy::modality;
  if (s == "uniform8") return Policy::uniform8;
  if (s == "uniform4") return Policy::uniform4;
  if (s == "budget") return Policy::budget;
  throw PlanError("unknown policy '" + s + "'");
}

void Assignment::validate() const {
  if (method == QuantMethod::skip) {
    if (scheme) throw PlanError("module '" + module + "': skip takes no scheme");
    return;
  }
  if (!scheme) throw PlanError("module '" + module + "': " + to_string(method) + " needs a scheme");
  scheme->validate();
}

const Assignment& PrecisionPlan::for_module(const std::string& module) const {
  for (const auto& a : assignments) {
    if (a.module == module) return a;
  }
  throw PlanError("plan has no assignment for module '" + module + "'");
}

Storage storage_of(const Assignment& a) {
  if (a.method == QuantMethod::skip) return SkipStorage{};
  return *a.scheme;
}

std::uint64_t module_bytes(const ModuleInfo& module, const Assignment& a) {
  std::uint64_t n = 0;
  const Storage s = storage_of(a);
  for (const auto& l : module.layers) n += quantized_bytes(l.shape, s);
  return n;
}

std::uint64_t projected_bytes(const PrecisionPlan& plan, const ModuleManifest& manifest) {
  std::uint64_t n = 0;
  for (const auto& m : manifest.modules) n += module_bytes(m, plan.for_module(m.name));
  return n;
}

std::uint64_t fp16_bytes(const ModuleManifest& manifest) {
  std::uint64_t n = 0;
  for (const auto& m : manifest.modules)
    for (const auto& l : m.layers) n += quantized_bytes(l.shape, Fp16Storage{});
  return n;
}

void validate_plan(const PrecisionPlan& plan, const ModuleManifest& manifest) {
  std::set<std::string> seen;
  for (const auto& a : plan.assignments) {
    if (!manifest.find_module(a.module)) throw PlanError("plan assigns unknown module '" + a.module + "'");
    if (!seen.insert(a.module).second) throw PlanError("plan assigns module '" + a.module + "' twice");
    a.validate();
  }
  for (const auto& m : manifest.modules) {
    if (!seen.count(m.name)) throw PlanError("plan has no assignment for module '" + m.name + "'");
  }
  if (plan.projected_bytes != projected_bytes(plan, manifest)) {
    throw PlanError("plan projected_bytes does not match its assignments");
  }
  if (plan.projected_fp16_bytes != fp16_bytes(manifest)) {
    throw PlanError("plan projected_fp16_bytes does not match the manifest");
  }
}

namespace {

QuantScheme scheme_with_bits(int bits) {
  QuantScheme s;
  s.bits = bits;
  return s;
}

Assignment quantized(const std::string& module, QuantMethod method, int bits) {
  return {module, method, scheme_with_bits(bits)};
}

void finish(PrecisionPlan& plan, const ModuleManifest& manifest) {
  plan.projected_bytes = projected_bytes(plan, manifest);
  plan.projected_fp16_bytes = fp16_bytes(manifest);
}

}  // namespace

PrecisionPlan build_plan(Policy policy, const ModuleManifest& manifest, const SensitivityReport* sensitivity,
                         std::optional<std::uint64_t> budget_bytes) {
  manifest.validate();
  PrecisionPlan plan;
  plan.policy = to_string(policy);

  for (const auto& m : manifest.modules) {
    if (m.role == Role::projector) {
      plan.assignments.push_back({m.name, QuantMethod::skip, std::nullopt});
      continue;
    }
    switch (policy) {
      case Policy::modality:
        if (m.role == Role::action_head) {
          plan.assignments.push_back(quantized(m.name, QuantMethod::rtn, 8));
        } else if (m.modality == Modality::vision) {
          plan.assignments.push_back(quantized(m.name, QuantMethod::gptq, 4));
        } else {
          plan.assignments.push_back(quantized(m.name, QuantMethod::gptq, 8));
        }
        break;
      case Policy::uniform8:
      case Policy::budget:
        plan.assignments.push_back(quantized(m.name, QuantMethod::rtn, 8));
        break;
      case Policy::uniform4:
        plan.assignments.push_back(quantized(m.name, QuantMethod::rtn, 4));
        break;
    }
  }
  finish(plan, manifest);
  if (policy != Policy::budget) return plan;

  if (!budget_bytes) throw PlanError("budget policy needs a byte budget");
  if (!sensitivity) throw PlanError("budget policy needs a sensitivity report");

  // Demotion order: ascending aggregate sensitivity, manifest order on ties.
  std::vector<std::size_t> order;
  std::vector<double> score(manifest.modules.size(), 0.0);
  for (std::size_t i = 0; i < manifest.modules.size(); ++i) {
    const auto& m = manifest.modules[i];
    if (m.role == Role::projector) continue;
    const auto* ms = sensitivity->find_module(m.name);
    if (!ms) throw PlanError("sensitivity report has no entry for module '" + m.name + "'");
    score[i] = ms->aggregate;
    order.push_back(i);
  }
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return score[a] < score[b]; });

  for (std::size_t k = 0; plan.projected_bytes > *budget_bytes; ++k) {
    if (k == order.size()) {
      throw PlanError("budget of " + std::to_string(*budget_bytes) + " bytes is unreachable; smallest plan needs " +
                      std::to_string(plan.projected_bytes));
    }
    plan.assignments[order[k]].scheme->bits = 4;
    finish(plan, manifest);
  }
  return plan;
}

PrecisionPlan apply_overrides(PrecisionPlan plan, const PlanOverrides& overrides, const ModuleManifest& manifest) {
  for (const auto& [module, a] : overrides) {
    if (!manifest.find_module(module)) throw PlanError("override names unknown module '" + module + "'");
    Assignment next = a;
    next.module = module;
    next.validate();
    auto it = std::find_if(plan.assignments.begin(), plan.assignments.end(),
                           [&](const Assignment& x) { return x.module == module; });
    if (it == plan.assignments.end()) throw PlanError("plan has no assignment for module '" + module + "'");
    *it = next;
  }
  finish(plan, manifest);
  return plan;
}

namespace {

template <typename E>
[[noreturn]] void rethrow_with(const E& e, const std::string& context) {
  throw E(context + ": " + e.what());
}

HessianState hessian_for(const TensorStore& calib, const LayerInfo& layer) {
  const Tensor x = calib.tensor(layer.name);
  if (x.rank() != 2 || x.cols() != layer.shape[1]) {
    throw ShapeError("calibration rows for layer '" + layer.name + "' have shape " + shape_string(x.shape()) +
                     ", expected [n x " + std::to_string(layer.shape[1]) + "]");
  }
  HessianState h(layer.shape[1]);
  h.accumulate(x);
  return h;
}

LayerReport quantize_layer(const ModuleInfo& module, const LayerInfo& layer, const Assignment& a,
                           const TensorStore& weights, const TensorStore* calib, const ApplyOptions& options,
                           TensorStore& out) {
  LayerReport r;
  r.layer = layer.name;
  r.module = module.name;
  r.method = a.method;
  r.scheme = a.scheme;
  r.fp16_bytes = quantized_bytes(layer.shape, Fp16Storage{});

  if (!weights.contains(layer.name)) throw ManifestError("weight store has no layer '" + layer.name + "'");
  const Tensor w = weights.tensor(layer.name);
  if (w.shape() != layer.shape) {
    throw ShapeError("weight '" + layer.name + "' has shape " + shape_string(w.shape()) + ", manifest says " +
                     shape_string(layer.shape));
  }

  const bool has_calib = calib && calib->contains(layer.name);
  switch (a.method) {
    case QuantMethod::skip:
      out.add(layer.name, w);
      r.bytes = quantized_bytes(layer.shape, SkipStorage{});
      break;
    case QuantMethod::rtn: {
      const QuantizedTensor q = rtn_quantize(w, *a.scheme);
      write_quantized(out, layer.name, q);
      r.bytes = quantized_bytes(layer.shape, *a.scheme);
      if (has_calib && w.rank() == 2) r.proxy_loss_rtn = proxy_loss_from_hessian(w, dequantize(q), hessian_for(*calib, layer));
      break;
    }
    case QuantMethod::gptq: {
      if (!has_calib) {
        throw CalibrationError("no calibration activations for gptq layer '" + layer.name + "' (module '" +
                               module.name + "')");
      }
      GptqConfig cfg;
      cfg.percdamp = options.percdamp;
      cfg.block_size = options.block_size;
      cfg.max_redamp_retries = options.max_redamp_retries;
      cfg.scheme = *a.scheme;
      const GptqResult res = gptq_quantize_layer(w, hessian_for(*calib, layer), cfg);
      write_quantized(out, layer.name, res.quantized);
      r.bytes = quantized_bytes(layer.shape, *a.scheme);
      r.proxy_loss_rtn = res.stats.proxy_loss_rtn;
      r.proxy_loss_gptq = res.stats.proxy_loss_gptq;
      r.damping_used = res.stats.damping_used;
      r.retries = res.stats.retries;
      break;
    }
  }
  return r;
}

}  // namespace

ApplyResult apply_plan(const PrecisionPlan& plan, const TensorStore& weights, const TensorStore* calib,
                       const ModuleManifest& manifest, const ApplyOptions& options) {
  manifest.validate();
  validate_plan(plan, manifest);
  ApplyResult result;
  result.report.plan = plan;
  for (const auto& m : manifest.modules) {
    const Assignment& a = plan.for_module(m.name);
    for (const auto& l : m.layers) {
      const std::string ctx = "module '" + m.name + "', layer '" + l.name + "'";
      try {
        result.report.layers.push_back(quantize_layer(m, l, a, weights, calib, options, result.store));
      } catch (const CalibrationError&) {
        throw;
      } catch (const NotPositiveDefinite& e) {
        rethrow_with(e, ctx);
      } catch (const ShapeError& e) {
        rethrow_with(e, ctx);
      } catch (const IntegrityError& e) {
        rethrow_with(e, ctx);
      }
    }
  }
  // Entries outside the manifest pass through untouched.
  for (const auto& e : weights.entries()) {
    if (!manifest.find_layer(e.name)) result.store.add(e);
  }

  auto& rep = result.report;
  for (const auto& l : rep.layers) {
    rep.fp16_bytes += l.fp16_bytes;
    rep.quantized_bytes += l.bytes;
  }
  rep.ratio = rep.fp16_bytes == 0 ? 1.0 : static_cast<double>(rep.quantized_bytes) / static_cast<double>(rep.fp16_bytes);
  return result;
}

ProjectorComparison compare_projector_methods(const TensorStore& weights, const TensorStore& calib,
                                              const ModuleManifest& manifest, const ToyModelSpec& spec,
                                              std::span<const Episode> episodes, double epsilon,
                                              std::vector<TensorStore>* stores) {
  const PrecisionPlan base = build_plan(Policy::modality, manifest);
  const ModuleInfo* projector = nullptr;
  for (const auto& m : manifest.modules) {
    if (m.role == Role::projector) projector = &m;
  }
  if (!projector) throw ManifestError("compare_projector_methods: manifest has no projector module");

  const std::pair<const char*, PlanOverrides> variants[] = {
      {"skip", {}},
      {"rtn8", {{projector->name, quantized(projector->name, QuantMethod::rtn, 8)}}},
      {"gptq8", {{projector->name, quantized(projector->name, QuantMethod::gptq, 8)}}},
  };

  ProjectorComparison cmp;
  cmp.episodes = episodes.size();
  cmp.epsilon = epsilon;
  for (const auto& [name, overrides] : variants) {
    ProjectorConfiguration c;
    c.name = name;
    c.plan = apply_overrides(base, overrides, manifest);
    ApplyResult applied = apply_plan(c.plan, weights, &calib, manifest);
    c.quantized_bytes = applied.report.quantized_bytes;
    c.eval = evaluate(weights, applied.store, spec, manifest, episodes, epsilon);
    if (stores) stores->push_back(std::move(applied.store));
    cmp.configurations.push_back(std::move(c));
  }
  return cmp;
}

SensitivityReport analyze_sensitivity(const TensorStore& weights, const ModuleManifest& manifest,
                                      const ToyModelSpec& spec, std::span<const Episode> episodes) {
  manifest.validate();
  const TensorStore plain = resolve_weights(weights, manifest);
  const TensorStore grads = backward(plain, spec, episodes);
  const TensorStore acts = collect_calibration(plain, spec, episodes);
  std::vector<SensitivityScore> scores;
  for (const auto* layer : manifest.all_layers()) {
    scores.push_back(layer_score(grads.tensor(layer->name), acts.tensor(layer->name), *layer));
  }
  return aggregate(scores, manifest);
}

}  // namespace vlaq
