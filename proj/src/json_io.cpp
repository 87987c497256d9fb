#include "vlaquant/json_io.hpp"

#include <cmath>
#include <fstream>
#include <initializer_list>
#include <limits>
#include <set>
#include <string_view>

#include "vlaquant/error.hpp"

namespace vlaq::json_io {

namespace {

void expect_object(const json& j, const char* ctx) {
  if (!j.is_object()) throw FormatError(std::string(ctx) + ": expected a JSON object");
}

// Rejects fields outside `allowed`, and requires every field in `required`.
void check_fields(const json& j, std::initializer_list<std::string_view> required,
                  std::initializer_list<std::string_view> optional, const char* ctx) {
  expect_object(j, ctx);
  std::set<std::string_view> allowed(required);
  allowed.insert(optional.begin(), optional.end());
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) throw FormatError(std::string(ctx) + ": unknown field '" + key + "'");
  }
  for (auto key : required) {
    if (!j.contains(key)) throw FormatError(std::string(ctx) + ": missing field '" + std::string(key) + "'");
  }
}

template <typename T>
T get(const json& j, const char* key, const char* ctx) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw FormatError(std::string(ctx) + ": field '" + key + "': " + e.what());
  }
}

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json ratio_json(double v) { return std::isinf(v) ? json("inf") : json(v); }

}  // namespace

json to_json(const QuantScheme& s) {
  return {{"bits", s.bits},
          {"mode", to_string(s.mode)},
          {"granularity", to_string(s.granularity)},
          {"group_size", s.group_size}};
}

QuantScheme scheme_from_json(const json& j) {
  constexpr const char* ctx = "scheme";
  check_fields(j, {"bits"}, {"mode", "granularity", "group_size"}, ctx);
  QuantScheme s;
  s.bits = get<int>(j, "bits", ctx);
  if (j.contains("mode")) s.mode = parse_quant_mode(get<std::string>(j, "mode", ctx));
  if (j.contains("granularity")) s.granularity = parse_granularity(get<std::string>(j, "granularity", ctx));
  if (j.contains("group_size")) s.group_size = get<std::size_t>(j, "group_size", ctx);
  s.validate();
  return s;
}

json to_json(const ModuleManifest& m) {
  json modules = json::array();
  for (const auto& mod : m.modules) {
    json layers = json::array();
    for (const auto& l : mod.layers) layers.push_back({{"name", l.name}, {"shape", l.shape}});
    modules.push_back(
        {{"name", mod.name}, {"modality", to_string(mod.modality)}, {"role", to_string(mod.role)}, {"layers", layers}});
  }
  return {{"modules", modules}};
}

ModuleManifest manifest_from_json(const json& j) {
  check_fields(j, {"modules"}, {}, "manifest");
  ModuleManifest m;
  for (const auto& jm : j.at("modules")) {
    check_fields(jm, {"name", "modality", "role", "layers"}, {}, "manifest module");
    ModuleInfo mod;
    mod.name = get<std::string>(jm, "name", "manifest module");
    mod.modality = parse_modality(get<std::string>(jm, "modality", "manifest module"));
    mod.role = parse_role(get<std::string>(jm, "role", "manifest module"));
    for (const auto& jl : jm.at("layers")) {
      check_fields(jl, {"name", "shape"}, {}, "manifest layer");
      mod.layers.push_back({get<std::string>(jl, "name", "manifest layer"), get<Shape>(jl, "shape", "manifest layer")});
    }
    m.modules.push_back(std::move(mod));
  }
  m.validate();
  return m;
}

namespace {

json assignment_json(const Assignment& a) {
  return {{"method", to_string(a.method)}, {"scheme", a.scheme ? to_json(*a.scheme) : json(nullptr)}};
}

Assignment assignment_from(const json& j, std::string module) {
  check_fields(j, {"method"}, {"module", "scheme"}, "assignment");
  Assignment a;
  a.module = std::move(module);
  a.method = parse_method(get<std::string>(j, "method", "assignment"));
  if (j.contains("scheme") && !j.at("scheme").is_null()) a.scheme = scheme_from_json(j.at("scheme"));
  a.validate();
  return a;
}

}  // namespace

json to_json(const PrecisionPlan& p) {
  json assignments = json::array();
  for (const auto& a : p.assignments) {
    json ja = assignment_json(a);
    ja["module"] = a.module;
    assignments.push_back(ja);
  }
  return {{"policy", p.policy},
          {"assignments", assignments},
          {"projected_bytes", p.projected_bytes},
          {"projected_fp16_bytes", p.projected_fp16_bytes}};
}

PrecisionPlan plan_from_json(const json& j) {
  constexpr const char* ctx = "plan";
  check_fields(j, {"policy", "assignments", "projected_bytes", "projected_fp16_bytes"}, {}, ctx);
  PrecisionPlan p;
  p.policy = get<std::string>(j, "policy", ctx);
  for (const auto& ja : j.at("assignments")) {
    expect_object(ja, "assignment");
    if (!ja.contains("module")) throw FormatError("assignment: missing field 'module'");
    p.assignments.push_back(assignment_from(ja, get<std::string>(ja, "module", "assignment")));
  }
  p.projected_bytes = get<std::uint64_t>(j, "projected_bytes", ctx);
  p.projected_fp16_bytes = get<std::uint64_t>(j, "projected_fp16_bytes", ctx);
  return p;
}

PlanOverrides overrides_from_json(const json& j) {
  expect_object(j, "overrides");
  PlanOverrides out;
  for (const auto& [module, ja] : j.items()) {
    if (ja.contains("module") && ja.at("module") != module) {
      throw FormatError("overrides: entry '" + module + "' names a different module");
    }
    out.emplace(module, assignment_from(ja, module));
  }
  return out;
}

json to_json(const SensitivityReport& r) {
  json layers = json::array();
  for (const auto& s : r.layers) {
    layers.push_back({{"name", s.layer},
                      {"grad_mean_abs", s.grad_mean_abs},
                      {"act_mean_abs", s.act_mean_abs},
                      {"combined", s.combined},
                      {"params", s.param_count}});
  }
  json modules = json::array();
  for (const auto& m : r.modules) {
    modules.push_back(
        {{"name", m.name}, {"modality", to_string(m.modality)}, {"aggregate", m.aggregate}, {"params", m.params}});
  }
  return {{"layers", layers},
          {"modules", modules},
          {"modalities",
           {{"vision", r.modalities.vision}, {"language", r.modalities.language}, {"other", r.modalities.other}}},
          {"modality_ratio", ratio_json(r.modality_ratio)}};
}

SensitivityReport sensitivity_from_json(const json& j) {
  constexpr const char* ctx = "sensitivity";
  check_fields(j, {"layers", "modules", "modalities", "modality_ratio"}, {}, ctx);
  SensitivityReport r;
  for (const auto& jl : j.at("layers")) {
    check_fields(jl, {"name", "grad_mean_abs", "act_mean_abs", "combined", "params"}, {}, "sensitivity layer");
    SensitivityScore s;
    s.layer = get<std::string>(jl, "name", ctx);
    s.grad_mean_abs = get<float>(jl, "grad_mean_abs", ctx);
    s.act_mean_abs = get<float>(jl, "act_mean_abs", ctx);
    s.combined = get<float>(jl, "combined", ctx);
    s.param_count = get<std::uint64_t>(jl, "params", ctx);
    r.layers.push_back(s);
  }
  for (const auto& jm : j.at("modules")) {
    check_fields(jm, {"name", "modality", "aggregate", "params"}, {}, "sensitivity module");
    r.modules.push_back({get<std::string>(jm, "name", ctx), parse_modality(get<std::string>(jm, "modality", ctx)),
                         get<double>(jm, "aggregate", ctx), get<std::uint64_t>(jm, "params", ctx)});
  }
  const auto& mods = j.at("modalities");
  check_fields(mods, {"vision", "language", "other"}, {}, "sensitivity modalities");
  r.modalities = {get<double>(mods, "vision", ctx), get<double>(mods, "language", ctx), get<double>(mods, "other", ctx)};
  const auto& ratio = j.at("modality_ratio");
  if (ratio.is_string()) {
    if (ratio.get<std::string>() != "inf") throw FormatError("sensitivity: modality_ratio must be a number or \"inf\"");
    r.modality_ratio = std::numeric_limits<double>::infinity();
  } else {
    r.modality_ratio = get<double>(j, "modality_ratio", ctx);
  }
  return r;
}

json to_json(const ToyModelSpec& s) {
  return {{"patch_count", s.patch_count}, {"patch_dim", s.patch_dim},     {"vision_hidden", s.vision_hidden},
          {"vision_out", s.vision_out},   {"lang_dim", s.lang_dim},       {"lang_blocks", s.lang_blocks},
          {"text_tokens", s.text_tokens}, {"vocab", s.vocab},             {"action_dim", s.action_dim},
          {"seed", s.seed}};
}

ToyModelSpec spec_from_json(const json& j) {
  constexpr const char* ctx = "toy spec";
  check_fields(j, {},
               {"patch_count", "patch_dim", "vision_hidden", "vision_out", "lang_dim", "lang_blocks", "text_tokens",
                "vocab", "action_dim", "seed"},
               ctx);
  ToyModelSpec s;
  auto field = [&](const char* key, std::size_t& dst) {
    if (j.contains(key)) dst = get<std::size_t>(j, key, ctx);
  };
  field("patch_count", s.patch_count);
  field("patch_dim", s.patch_dim);
  field("vision_hidden", s.vision_hidden);
  field("vision_out", s.vision_out);
  field("lang_dim", s.lang_dim);
  field("lang_blocks", s.lang_blocks);
  field("text_tokens", s.text_tokens);
  field("vocab", s.vocab);
  field("action_dim", s.action_dim);
  if (j.contains("seed")) s.seed = get<std::uint64_t>(j, "seed", ctx);
  s.validate();
  return s;
}

json to_json(const EvalReport& r) {
  json tasks = json::array();
  for (const auto& t : r.per_task) {
    tasks.push_back({{"task", t.task}, {"episodes", t.episodes}, {"success_rate", t.success_rate}});
  }
  return {{"episodes", r.episodes},
          {"epsilon", r.epsilon},
          {"success_rate", r.success_rate},
          {"mean_deviation", r.mean_deviation},
          {"median_deviation", r.median_deviation},
          {"max_deviation", r.max_deviation},
          {"per_task", tasks},
          {"seconds_per_forward", r.seconds_per_forward},
          {"fp_bytes", r.fp_bytes},
          {"q_bytes", r.q_bytes}};
}

json to_json(const QuantReport& r) {
  json layers = json::array();
  for (const auto& l : r.layers) {
    layers.push_back({{"name", l.layer},
                      {"module", l.module},
                      {"method", to_string(l.method)},
                      {"scheme", l.scheme ? to_json(*l.scheme) : json(nullptr)},
                      {"bytes", l.bytes},
                      {"fp16_bytes", l.fp16_bytes},
                      {"proxy_loss_rtn", opt(l.proxy_loss_rtn)},
                      {"proxy_loss_gptq", opt(l.proxy_loss_gptq)},
                      {"damping_used", opt(l.damping_used)},
                      {"retries", l.retries ? json(*l.retries) : json(nullptr)}});
  }
  return {{"tool_version", r.tool_version},
          {"plan", to_json(r.plan)},
          {"layers", layers},
          {"memory", {{"fp16_bytes", r.fp16_bytes}, {"quantized_bytes", r.quantized_bytes}, {"ratio", r.ratio}}},
          {"sensitivity", r.sensitivity_ref ? json(*r.sensitivity_ref) : json(nullptr)},
          {"eval", r.eval_ref ? json(*r.eval_ref) : json(nullptr)},
          {"seeds", r.seeds}};
}

json to_json(const ProjectorComparison& c) {
  json configs = json::array();
  for (const auto& cfg : c.configurations) {
    configs.push_back({{"name", cfg.name},
                       {"plan", to_json(cfg.plan)},
                       {"quantized_bytes", cfg.quantized_bytes},
                       {"eval", to_json(cfg.eval)}});
  }
  return {{"episodes", c.episodes}, {"epsilon", c.epsilon}, {"configurations", configs}};
}

json read_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open '" + path.string() + "' for reading");
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw FormatError("'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

void write_file(const json& j, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  os << j.dump(2) << '\n';
  if (!os) throw IoError("write failed for '" + path.string() + "'");
}

}  // namespace vlaq::json_io
