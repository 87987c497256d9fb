#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vlaquant/gptq.hpp"
#include "vlaquant/manifest.hpp"
#include "vlaquant/quant.hpp"
#include "vlaquant/sensitivity.hpp"
#include "vlaquant/store.hpp"
#include "vlaquant/toy_vla.hpp"

namespace vlaq {

inline constexpr const char* kToolVersion = "0.1.0";

enum class QuantMethod { rtn, gptq, skip };
enum class Policy { modality, uniform8, uniform4, budget };

const char* to_string(QuantMethod m);
const char* to_string(Policy p);
QuantMethod parse_method(const std::string& s);
Policy parse_policy(const std::string& s);

struct Assignment {
  std::string module;
  QuantMethod method = QuantMethod::skip;
  std::optional<QuantScheme> scheme;  // absent for skip

  void validate() const;
  friend bool operator==(const Assignment&, const Assignment&) = default;
};

struct PrecisionPlan {
  std::string policy;
  std::vector<Assignment> assignments;  // manifest order
  std::uint64_t projected_bytes = 0;
  std::uint64_t projected_fp16_bytes = 0;

  const Assignment& for_module(const std::string& module) const;
  friend bool operator==(const PrecisionPlan&, const PrecisionPlan&) = default;
};

// Storage implied by an assignment, for accounting.
Storage storage_of(const Assignment& a);

std::uint64_t module_bytes(const ModuleInfo& module, const Assignment& a);
std::uint64_t projected_bytes(const PrecisionPlan& plan, const ModuleManifest& manifest);
std::uint64_t fp16_bytes(const ModuleManifest& manifest);

// Every manifest module covered exactly once, no unknown modules,
// projected_bytes consistent. Throws PlanError.
void validate_plan(const PrecisionPlan& plan, const ModuleManifest& manifest);

/// Built-in policies. The projector module is skipped by all of them.
///   modality: vision 4-bit gptq, language 8-bit gptq, action head 8-bit rtn
///   uniform8 / uniform4: rtn at that width
///   budget: all 8-bit rtn, then demote modules to 4-bit by ascending
///           sensitivity (manifest order breaks ties) until the plan fits.
PrecisionPlan build_plan(Policy policy, const ModuleManifest& manifest, const SensitivityReport* sensitivity = nullptr,
                         std::optional<std::uint64_t> budget_bytes = std::nullopt);

// Forces assignments for named modules (e.g. gptq on the projector) and
// recomputes projected_bytes.
using PlanOverrides = std::map<std::string, Assignment>;
PrecisionPlan apply_overrides(PrecisionPlan plan, const PlanOverrides& overrides, const ModuleManifest& manifest);

struct LayerReport {
  std::string layer;
  std::string module;
  QuantMethod method = QuantMethod::skip;
  std::optional<QuantScheme> scheme;
  std::uint64_t bytes = 0;
  std::uint64_t fp16_bytes = 0;
  std::optional<double> proxy_loss_rtn;
  std::optional<double> proxy_loss_gptq;
  std::optional<double> damping_used;
  std::optional<int> retries;
};

struct QuantReport {
  PrecisionPlan plan;
  std::vector<LayerReport> layers;
  std::uint64_t fp16_bytes = 0;
  std::uint64_t quantized_bytes = 0;
  double ratio = 1.0;  // quantized_bytes / fp16_bytes
  std::optional<std::string> sensitivity_ref;
  std::optional<std::string> eval_ref;
  std::string tool_version = kToolVersion;
  // Seeds that produced the inputs, keyed by purpose. Quantization itself is
  // deterministic and draws none.
  std::map<std::string, std::uint64_t> seeds;
};

struct ApplyResult {
  TensorStore store;
  QuantReport report;
};

struct ApplyOptions {
  double percdamp = 0.01;
  std::size_t block_size = 32;
  int max_redamp_retries = 10;
};

/// Quantizes every module independently with its own calibration rows and
/// assembles the results into one store. `calib` may be null when no module
/// uses gptq.
ApplyResult apply_plan(const PrecisionPlan& plan, const TensorStore& weights, const TensorStore* calib,
                       const ModuleManifest& manifest, const ApplyOptions& options = {});

struct ProjectorConfiguration {
  std::string name;  // "skip", "rtn8", "gptq8"
  PrecisionPlan plan;
  EvalReport eval;
  std::uint64_t quantized_bytes = 0;
};

struct ProjectorComparison {
  std::vector<ProjectorConfiguration> configurations;
  std::size_t episodes = 0;
  double epsilon = 0.05;
};

// Runs the modality plan three times, changing only the projector's method.
// The quantized stores of the three runs are returned through `stores` when
// it is non-null.
ProjectorComparison compare_projector_methods(const TensorStore& weights, const TensorStore& calib,
                                              const ModuleManifest& manifest, const ToyModelSpec& spec,
                                              std::span<const Episode> episodes, double epsilon = 0.05,
                                              std::vector<TensorStore>* stores = nullptr);

// Gradient x activation scores for every manifest layer of the toy pipeline.
SensitivityReport analyze_sensitivity(const TensorStore& weights, const ModuleManifest& manifest,
                                      const ToyModelSpec& spec, std::span<const Episode> episodes);

}  // namespace vlaq
