#include "vlaquant/cli.hpp"

#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "vlaquant/error.hpp"
#include "vlaquant/json_io.hpp"
#include "vlaquant/planner.hpp"
#include "vlaquant/store.hpp"
#include "vlaquant/toy_vla.hpp"

namespace vlaq {

namespace {

namespace jio = json_io;

ModuleManifest load_manifest(const std::string& path) { return jio::manifest_from_json(jio::read_file(path)); }

std::vector<Episode> load_episodes(const std::string& path) { return episodes_from_store(load_store(path)); }

ToyModelSpec spec_for(const ModuleManifest& manifest, const std::vector<Episode>& episodes) {
  if (episodes.empty()) throw FormatError("episode file holds no episodes");
  const auto& e = episodes.front();
  return infer_spec(manifest, e.patches.shape()[0], e.instruction.size());
}

struct GenToyArgs {
  std::uint64_t seed = 0;
  std::uint64_t teacher_seed = 0;
  std::size_t episodes = 0;
  std::string out, manifest_out, calib_out, episodes_out, spec, teacher_out;
};

void gen_toy(const GenToyArgs& a) {
  ToyModelSpec spec;
  if (!a.spec.empty()) spec = jio::spec_from_json(jio::read_file(a.spec));
  spec.seed = a.seed;
  if (a.episodes == 0) throw FormatError("gen-toy: --episodes must be >= 1");
  const ToyModel model = gen_model(spec);
  const auto episodes = gen_episodes(spec, a.teacher_seed, a.episodes);
  save_store(model.weights, a.out);
  jio::write_file(jio::to_json(model.manifest), a.manifest_out);
  save_store(episodes_to_store(episodes), a.episodes_out);
  save_store(collect_calibration(model.weights, spec, episodes), a.calib_out);
  if (!a.teacher_out.empty()) save_store(gen_teacher(spec, a.teacher_seed), a.teacher_out);
}

struct AnalyzeArgs {
  std::string model, manifest, episodes, out;
};

void analyze(const AnalyzeArgs& a) {
  const auto manifest = load_manifest(a.manifest);
  const auto episodes = load_episodes(a.episodes);
  const auto spec = spec_for(manifest, episodes);
  const auto report = analyze_sensitivity(load_store(a.model), manifest, spec, episodes);
  jio::write_file(jio::to_json(report), a.out);
}

struct PlanArgs {
  std::string manifest, policy, sensitivity, out;
  std::optional<std::uint64_t> budget_bytes;
};

void plan(const PlanArgs& a) {
  const auto manifest = load_manifest(a.manifest);
  std::optional<SensitivityReport> sens;
  if (!a.sensitivity.empty()) sens = jio::sensitivity_from_json(jio::read_file(a.sensitivity));
  const auto p = build_plan(parse_policy(a.policy), manifest, sens ? &*sens : nullptr, a.budget_bytes);
  jio::write_file(jio::to_json(p), a.out);
}

struct QuantizeArgs {
  std::string model, manifest, plan, calib, out, report, overrides;
};

void quantize(const QuantizeArgs& a) {
  const auto manifest = load_manifest(a.manifest);
  PrecisionPlan p = jio::plan_from_json(jio::read_file(a.plan));
  validate_plan(p, manifest);
  if (!a.overrides.empty()) p = apply_overrides(p, jio::overrides_from_json(jio::read_file(a.overrides)), manifest);
  std::optional<TensorStore> calib;
  if (!a.calib.empty()) calib = load_store(a.calib);
  const auto result = apply_plan(p, load_store(a.model), calib ? &*calib : nullptr, manifest);
  save_store(result.store, a.out);
  jio::write_file(jio::to_json(result.report), a.report);
}

struct EvalArgs {
  std::string fp, quantized, manifest, episodes, out;
  double epsilon = 0.05;
};

void eval(const EvalArgs& a) {
  const auto manifest = load_manifest(a.manifest);
  const auto episodes = load_episodes(a.episodes);
  const auto spec = spec_for(manifest, episodes);
  const auto report = evaluate(load_store(a.fp), load_store(a.quantized), spec, manifest, episodes, a.epsilon);
  jio::write_file(jio::to_json(report), a.out);
}

struct CompareArgs {
  std::string model, manifest, calib, episodes, out;
  double epsilon = 0.05;
};

void compare(const CompareArgs& a) {
  const auto manifest = load_manifest(a.manifest);
  const auto episodes = load_episodes(a.episodes);
  const auto spec = spec_for(manifest, episodes);
  const auto cmp = compare_projector_methods(load_store(a.model), load_store(a.calib), manifest, spec, episodes, a.epsilon);
  jio::write_file(jio::to_json(cmp), a.out);
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Post-training quantization toolkit for modular vision-language-action pipelines", "vlaquant"};
  app.require_subcommand(1);

  GenToyArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-toy", "Generate the seeded toy pipeline, episodes and calibration rows");
  gen_cmd->add_option("--seed", gen.seed, "Model seed")->required();
  gen_cmd->add_option("--teacher-seed", gen.teacher_seed, "Teacher network and episode seed")->required();
  gen_cmd->add_option("--episodes", gen.episodes, "Number of episodes")->required();
  gen_cmd->add_option("--out", gen.out, "Model weights (EAQT)")->required();
  gen_cmd->add_option("--manifest-out", gen.manifest_out, "Module manifest (JSON)")->required();
  gen_cmd->add_option("--calib-out", gen.calib_out, "Per-layer calibration activations (EAQT)")->required();
  gen_cmd->add_option("--episodes-out", gen.episodes_out, "Episodes (EAQT)")->required();
  gen_cmd->add_option("--spec", gen.spec, "Toy architecture overrides (JSON)");
  gen_cmd->add_option("--teacher-out", gen.teacher_out, "Teacher weights (EAQT)");

  AnalyzeArgs an;
  auto* an_cmd = app.add_subcommand("analyze", "Score gradient x activation sensitivity per layer, module and modality");
  an_cmd->add_option("--model", an.model)->required();
  an_cmd->add_option("--manifest", an.manifest)->required();
  an_cmd->add_option("--episodes", an.episodes)->required();
  an_cmd->add_option("--out", an.out)->required();

  PlanArgs pl;
  auto* pl_cmd = app.add_subcommand("plan", "Build a per-module precision plan");
  pl_cmd->add_option("--manifest", pl.manifest)->required();
  pl_cmd->add_option("--policy", pl.policy)
      ->required()
      ->check(CLI::IsMember({"modality", "uniform8", "uniform4", "budget"}));
  pl_cmd->add_option("--sensitivity", pl.sensitivity);
  pl_cmd->add_option("--budget-bytes", pl.budget_bytes);
  pl_cmd->add_option("--out", pl.out)->required();

  QuantizeArgs qa;
  auto* q_cmd = app.add_subcommand("quantize", "Apply a precision plan module by module");
  q_cmd->add_option("--model", qa.model)->required();
  q_cmd->add_option("--manifest", qa.manifest)->required();
  q_cmd->add_option("--plan", qa.plan)->required();
  q_cmd->add_option("--calib", qa.calib, "Calibration activations; required when the plan uses gptq");
  q_cmd->add_option("--out", qa.out)->required();
  q_cmd->add_option("--report", qa.report)->required();
  q_cmd->add_option("--overrides", qa.overrides, "Per-module assignment overrides (JSON)");

  EvalArgs ev;
  auto* ev_cmd = app.add_subcommand("eval", "Compare quantized and full-precision actions");
  ev_cmd->add_option("--fp", ev.fp)->required();
  ev_cmd->add_option("--quantized", ev.quantized)->required();
  ev_cmd->add_option("--manifest", ev.manifest)->required();
  ev_cmd->add_option("--episodes", ev.episodes)->required();
  ev_cmd->add_option("--epsilon", ev.epsilon, "Max-norm action deviation counted as success")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  ev_cmd->add_option("--out", ev.out)->required();

  CompareArgs cp;
  auto* cp_cmd = app.add_subcommand("compare-projector", "Evaluate skip / rtn8 / gptq8 on the projector");
  cp_cmd->add_option("--model", cp.model)->required();
  cp_cmd->add_option("--manifest", cp.manifest)->required();
  cp_cmd->add_option("--calib", cp.calib)->required();
  cp_cmd->add_option("--episodes", cp.episodes)->required();
  cp_cmd->add_option("--epsilon", cp.epsilon)->capture_default_str()->check(CLI::PositiveNumber);
  cp_cmd->add_option("--out", cp.out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*gen_cmd) gen_toy(gen);
    else if (*an_cmd) analyze(an);
    else if (*pl_cmd) plan(pl);
    else if (*q_cmd) quantize(qa);
    else if (*ev_cmd) eval(ev);
    else if (*cp_cmd) compare(cp);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: malformed JSON: " << e.what() << '\n';
    return 2;
  }
  return 0;
}

int run_cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  argv.reserve(args.size() + 1);
  argv.push_back("vlaquant");
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace vlaq
