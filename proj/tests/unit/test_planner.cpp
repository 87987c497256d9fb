#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "oracles.hpp"
#include "vlaquant/error.hpp"
#include "vlaquant/planner.hpp"

using namespace vlaq;

namespace {

QuantScheme bits(int b) {
  QuantScheme s;
  s.bits = b;
  return s;
}

// Two equally sized language modules plus a projector.
ModuleManifest twin_language_manifest() {
  ModuleManifest m;
  m.modules.push_back({"lm_a", Modality::language, Role::core, {{"lm_a.w", {10, 100}}}});
  m.modules.push_back({"proj", Modality::vision, Role::projector, {{"proj.w", {10, 10}}}});
  m.modules.push_back({"lm_b", Modality::language, Role::core, {{"lm_b.w", {10, 100}}}});
  return m;
}

SensitivityReport module_scores(const ModuleManifest& m, std::vector<double> aggregates) {
  SensitivityReport r;
  for (std::size_t i = 0; i < m.modules.size(); ++i)
    r.modules.push_back({m.modules[i].name, m.modules[i].modality, aggregates[i], m.modules[i].params()});
  return r;
}

std::set<std::string> demoted(const PrecisionPlan& p) {
  std::set<std::string> out;
  for (const auto& a : p.assignments)
    if (a.scheme && a.scheme->bits == 4) out.insert(a.module);
  return out;
}

struct Toy {
  ToyModelSpec spec;
  ToyModel model;
  std::vector<Episode> episodes;
  TensorStore calib;
  Toy() : model(gen_model(spec)), episodes(gen_episodes(spec, 11, 30)) {
    calib = collect_calibration(model.weights, spec, episodes);
  }
};

const Toy& toy() {
  static const Toy t;
  return t;
}

// codes + 4 bytes per output-channel scale, computed from the shape alone.
std::uint64_t per_channel_bytes(const Shape& s, int b) {
  const std::uint64_t n = s[0] * s[1];
  return (b == 4 ? (n + 1) / 2 : n) + 4 * s[0];
}

}  // namespace

TEST(BuildPlan, ModalityPolicyOnToyManifest) {
  const auto plan = build_plan(Policy::modality, toy().model.manifest);
  ASSERT_EQ(plan.assignments.size(), 5u);
  const Assignment want[] = {{"vit1", QuantMethod::gptq, bits(4)},
                             {"vit2", QuantMethod::gptq, bits(4)},
                             {"projector", QuantMethod::skip, std::nullopt},
                             {"language", QuantMethod::gptq, bits(8)},
                             {"action_head", QuantMethod::rtn, bits(8)}};
  for (const auto& a : want) EXPECT_EQ(plan.for_module(a.module), a) << a.module;
  EXPECT_EQ(plan.policy, "modality");
  EXPECT_NO_THROW(validate_plan(plan, toy().model.manifest));
}

TEST(BuildPlan, ProjectorIsSkippedByEveryPolicy) {
  const auto& m = toy().model.manifest;
  const auto sens = analyze_sensitivity(toy().model.weights, m, toy().spec, toy().episodes);
  for (auto p : {Policy::modality, Policy::uniform8, Policy::uniform4, Policy::budget}) {
    const auto plan = build_plan(p, m, &sens, std::uint64_t{1} << 40);
    EXPECT_EQ(plan.for_module("projector").method, QuantMethod::skip) << to_string(p);
    EXPECT_FALSE(plan.for_module("projector").scheme.has_value());
  }
}

TEST(BuildPlan, UniformPolicies) {
  for (auto [p, b] : {std::pair{Policy::uniform8, 8}, std::pair{Policy::uniform4, 4}}) {
    const auto plan = build_plan(p, toy().model.manifest);
    for (const auto& a : plan.assignments) {
      if (a.module == "projector") continue;
      EXPECT_EQ(a.method, QuantMethod::rtn);
      EXPECT_EQ(a.scheme->bits, b);
    }
  }
}

TEST(BuildPlan, TotalityAndRecomputedBytes) {
  const auto& m = toy().model.manifest;
  for (auto p : {Policy::modality, Policy::uniform8, Policy::uniform4}) {
    const auto plan = build_plan(p, m);
    std::set<std::string> seen;
    for (const auto& a : plan.assignments) EXPECT_TRUE(seen.insert(a.module).second);
    EXPECT_EQ(seen.size(), m.modules.size());
    EXPECT_EQ(plan.projected_bytes, projected_bytes(plan, m));
    EXPECT_EQ(plan.projected_fp16_bytes, 2 * m.total_params());
  }
}

TEST(BuildPlan, ModalityBytesFromShapes) {
  const auto& m = toy().model.manifest;
  std::uint64_t want = 0;
  for (const auto& mod : m.modules)
    for (const auto& l : mod.layers) {
      if (mod.role == Role::projector) want += 2 * l.params();
      else if (mod.modality == Modality::vision) want += per_channel_bytes(l.shape, 4);
      else want += per_channel_bytes(l.shape, 8);
    }
  EXPECT_EQ(build_plan(Policy::modality, m).projected_bytes, want);
}

TEST(BuildPlan, BudgetSlackKeepsEightBit) {
  const auto& m = toy().model.manifest;
  const auto sens = analyze_sensitivity(toy().model.weights, m, toy().spec, toy().episodes);
  const auto plan = build_plan(Policy::budget, m, &sens, fp16_bytes(m));
  EXPECT_TRUE(demoted(plan).empty());
  EXPECT_EQ(plan.projected_bytes, build_plan(Policy::uniform8, m).projected_bytes);
}

TEST(BuildPlan, BudgetDemotesLeastSensitiveFirst) {
  const auto m = twin_language_manifest();
  const auto sens = module_scores(m, {5.0, 0.0, 1.0});
  const std::uint64_t one_demotion = per_channel_bytes({10, 100}, 8) + per_channel_bytes({10, 100}, 4) + 200;
  const auto plan = build_plan(Policy::budget, m, &sens, one_demotion);
  EXPECT_EQ(demoted(plan), std::set<std::string>{"lm_b"});
  EXPECT_EQ(plan.projected_bytes, one_demotion);

  const auto tie = module_scores(m, {1.0, 0.0, 1.0});
  EXPECT_EQ(demoted(build_plan(Policy::budget, m, &tie, one_demotion)), std::set<std::string>{"lm_a"});
}

TEST(BuildPlan, BudgetErrors) {
  const auto m = twin_language_manifest();
  const auto sens = module_scores(m, {5.0, 0.0, 1.0});
  EXPECT_THROW(build_plan(Policy::budget, m, &sens, 10), PlanError);
  EXPECT_THROW(build_plan(Policy::budget, m, nullptr, 100000), PlanError);
  EXPECT_THROW(build_plan(Policy::budget, m, &sens, std::nullopt), PlanError);
}

TEST(BuildPlan, BudgetMonotonicity) {
  const auto& m = toy().model.manifest;
  const auto sens = analyze_sensitivity(toy().model.weights, m, toy().spec, toy().episodes);
  const auto lo = build_plan(Policy::uniform4, m).projected_bytes;
  const auto hi = build_plan(Policy::uniform8, m).projected_bytes;
  std::set<std::string> previous = demoted(build_plan(Policy::budget, m, &sens, lo));
  for (std::uint64_t b = lo; b <= hi + 100; b += 97) {
    const auto now = demoted(build_plan(Policy::budget, m, &sens, b));
    for (const auto& d : now) EXPECT_TRUE(previous.count(d)) << "budget " << b << " demotes " << d;
    previous = now;
  }
}

TEST(Plan, ValidateRejectsBrokenPlans) {
  const auto& m = toy().model.manifest;
  auto plan = build_plan(Policy::modality, m);
  auto missing = plan;
  missing.assignments.pop_back();
  EXPECT_THROW(validate_plan(missing, m), PlanError);
  auto dup = plan;
  dup.assignments.push_back(dup.assignments.front());
  EXPECT_THROW(validate_plan(dup, m), PlanError);
  auto stale = plan;
  stale.projected_bytes += 1;
  EXPECT_THROW(validate_plan(stale, m), PlanError);
  auto unknown = plan;
  unknown.assignments.back().module = "ghost";
  EXPECT_THROW(validate_plan(unknown, m), PlanError);
}

TEST(Plan, OverridesReplaceAndRecount) {
  const auto& m = toy().model.manifest;
  const auto base = build_plan(Policy::modality, m);
  const auto forced = apply_overrides(base, {{"projector", {"", QuantMethod::gptq, bits(8)}}}, m);
  EXPECT_EQ(forced.for_module("projector").method, QuantMethod::gptq);
  EXPECT_EQ(forced.projected_bytes, projected_bytes(forced, m));
  EXPECT_LT(forced.projected_bytes, base.projected_bytes);
  EXPECT_THROW(apply_overrides(base, {{"ghost", {"", QuantMethod::skip, std::nullopt}}}, m), PlanError);
  EXPECT_THROW(apply_overrides(base, {{"vit1", {"", QuantMethod::rtn, std::nullopt}}}, m), PlanError);
}

TEST(ApplyPlan, AllSkipIsIdentity) {
  const auto& t = toy();
  PrecisionPlan plan;
  plan.policy = "custom";
  for (const auto& mod : t.model.manifest.modules) plan.assignments.push_back({mod.name, QuantMethod::skip, std::nullopt});
  plan.projected_bytes = projected_bytes(plan, t.model.manifest);
  plan.projected_fp16_bytes = fp16_bytes(t.model.manifest);
  const auto r = apply_plan(plan, t.model.weights, nullptr, t.model.manifest);
  EXPECT_EQ(serialize_store(r.store), serialize_store(t.model.weights));
  EXPECT_EQ(r.report.quantized_bytes, r.report.fp16_bytes);
  EXPECT_EQ(r.report.ratio, 1.0);
}

TEST(ApplyPlan, ReportArithmetic) {
  const auto& t = toy();
  const auto plan = build_plan(Policy::modality, t.model.manifest);
  const auto r = apply_plan(plan, t.model.weights, &t.calib, t.model.manifest);
  std::uint64_t sum = 0, fp = 0;
  for (const auto& l : r.report.layers) {
    sum += l.bytes;
    fp += l.fp16_bytes;
    if (l.method != QuantMethod::skip) { EXPECT_EQ(l.bytes, quantized_payload_bytes(r.store, l.layer)); }
    if (l.method == QuantMethod::gptq) {
      ASSERT_TRUE(l.proxy_loss_gptq && l.proxy_loss_rtn && l.damping_used && l.retries);
      EXPECT_GE(*l.proxy_loss_gptq, 0.0);
    }
  }
  EXPECT_EQ(r.report.quantized_bytes, sum);
  EXPECT_EQ(r.report.quantized_bytes, plan.projected_bytes);
  EXPECT_EQ(r.report.fp16_bytes, fp);
  EXPECT_EQ(r.report.fp16_bytes, fp16_bytes(t.model.manifest));
  EXPECT_EQ(r.report.ratio, double(r.report.quantized_bytes) / double(r.report.fp16_bytes));
  EXPECT_EQ(r.report.tool_version, kToolVersion);
}

TEST(ApplyPlan, Deterministic) {
  const auto& t = toy();
  const auto plan = build_plan(Policy::modality, t.model.manifest);
  const auto a = apply_plan(plan, t.model.weights, &t.calib, t.model.manifest);
  const auto b = apply_plan(plan, t.model.weights, &t.calib, t.model.manifest);
  EXPECT_EQ(serialize_store(a.store), serialize_store(b.store));
}

TEST(ApplyPlan, ModulesAreIndependent) {
  const auto& t = toy();
  const auto& m = t.model.manifest;
  const auto full = build_plan(Policy::modality, m);
  const auto a = apply_plan(full, t.model.weights, &t.calib, m);
  for (const auto& target : m.modules) {
    PlanOverrides others;
    for (const auto& mod : m.modules)
      if (mod.name != target.name) others[mod.name] = {"", QuantMethod::skip, std::nullopt};
    const auto b = apply_plan(apply_overrides(full, others, m), t.model.weights, &t.calib, m);
    for (const auto& l : target.layers) {
      for (const char* suffix : {"", ".codes", ".scale", ".zp", ".scheme"}) {
        const std::string name = l.name + suffix;
        ASSERT_EQ(a.store.contains(name), b.store.contains(name)) << name;
        if (a.store.contains(name)) { EXPECT_EQ(a.store.entry(name), b.store.entry(name)) << name; }
      }
    }
  }
}

TEST(ApplyPlan, GptqWithoutCalibrationNamesTheLayer) {
  const auto& t = toy();
  const auto plan = build_plan(Policy::modality, t.model.manifest);
  try {
    apply_plan(plan, t.model.weights, nullptr, t.model.manifest);
    FAIL();
  } catch (const CalibrationError& e) {
    EXPECT_NE(std::string(e.what()).find("vit1.fc1"), std::string::npos) << e.what();
  }
}

TEST(ApplyPlan, UnplannedEntriesPassThrough) {
  const auto& t = toy();
  TensorStore w = t.model.weights;
  w.add("extra.bias", Tensor::from_rows({{1, 2}}));
  const auto r = apply_plan(build_plan(Policy::uniform8, t.model.manifest), w, nullptr, t.model.manifest);
  EXPECT_EQ(r.store.tensor("extra.bias"), w.tensor("extra.bias"));
}

TEST(CompareProjector, IsolatesTheProjector) {
  const auto& t = toy();
  std::vector<TensorStore> stores;
  const auto cmp = compare_projector_methods(t.model.weights, t.calib, t.model.manifest, t.spec, t.episodes, 0.05, &stores);
  ASSERT_EQ(cmp.configurations.size(), 3u);
  EXPECT_EQ(cmp.configurations[0].name, "skip");
  EXPECT_EQ(cmp.configurations[1].name, "rtn8");
  EXPECT_EQ(cmp.configurations[2].name, "gptq8");
  for (std::size_t i = 1; i < 3; ++i) {
    for (const auto& e : stores[0].entries()) {
      if (e.name.rfind("projector.", 0) == 0) continue;
      ASSERT_TRUE(stores[i].contains(e.name));
      EXPECT_EQ(stores[i].entry(e.name), e);
    }
  }
  const auto modality = apply_plan(build_plan(Policy::modality, t.model.manifest), t.model.weights, &t.calib, t.model.manifest);
  const auto ev = evaluate(t.model.weights, modality.store, t.spec, t.model.manifest, t.episodes, 0.05);
  EXPECT_EQ(cmp.configurations[0].eval.median_deviation, ev.median_deviation);
  EXPECT_EQ(cmp.configurations[0].eval.success_rate, ev.success_rate);
}

TEST(ReferenceManifest, MemoryShares) {
  const auto m = openvla_reference_manifest();
  EXPECT_EQ(m.module("language").params(), 7000000000ull);
  std::uint64_t lang = 0;
  for (const auto& l : m.module("language").layers) lang += quantized_bytes(l.shape, Fp16Storage{});
  EXPECT_EQ(lang, 14000000000ull);
  const double projector_share = double(m.module("projector").params()) / double(m.total_params());
  EXPECT_LT(projector_share, 0.01);
}
