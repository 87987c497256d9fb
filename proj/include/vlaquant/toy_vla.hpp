#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "vlaquant/manifest.hpp"
#include "vlaquant/store.hpp"
#include "vlaquant/tensor.hpp"

namespace vlaq {

// Desk-scale stand-in for a vision-language-action model: two patch encoders
// (vit1, vit2), a linear projector into the language width, a stack of
// pre-RMS-normalized single-head transformer blocks, and a linear action head
// reading the last token.
struct ToyModelSpec {
  std::size_t patch_count = 8;
  std::size_t patch_dim = 16;
  std::size_t vision_hidden = 32;
  std::size_t vision_out = 24;
  std::size_t lang_dim = 32;
  std::size_t lang_blocks = 2;
  std::size_t text_tokens = 4;
  std::size_t vocab = 16;
  std::size_t action_dim = 7;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t mlp_hidden() const { return 2 * lang_dim; }
  std::size_t token_count() const { return patch_count + text_tokens; }

  friend bool operator==(const ToyModelSpec&, const ToyModelSpec&) = default;
};

// Episodes are split into this many tasks; every episode of a task shares
// the same instruction.
inline constexpr std::size_t kTaskCount = 10;

struct Episode {
  Tensor patches;  // [patch_count, patch_dim]
  std::vector<std::uint32_t> instruction;
  Tensor target_action;  // [action_dim]
  std::size_t task = 0;
};

struct ForwardTrace {
  Tensor action;
  // Input rows seen by every linear layer, keyed by layer name.
  std::map<std::string, Tensor> layer_inputs;
};

struct ToyModel {
  TensorStore weights;
  ModuleManifest manifest;
};

ModuleManifest toy_manifest(const ToyModelSpec& spec);
// Weights for every manifest layer drawn from the (seed, tag/layer) streams and
// scaled by 1/sqrt(fan_in).
TensorStore gen_weights(const ToyModelSpec& spec, std::string_view tag);
ToyModel gen_model(const ToyModelSpec& spec);
TensorStore gen_teacher(const ToyModelSpec& spec, std::uint64_t teacher_seed);

std::vector<Episode> gen_episodes(const ToyModelSpec& spec, std::uint64_t teacher_seed, std::size_t count);

ForwardTrace forward(const TensorStore& weights, const ToyModelSpec& spec, const Episode& episode);

/// Gradients of mean-over-batch MSE(action, target) for every weight, in a
/// store laid out like the weight store.
TensorStore backward(const TensorStore& weights, const ToyModelSpec& spec, std::span<const Episode> episodes);

// The loss backward differentiates, evaluated in double precision and without
// the final f32 rounding of the action so that it is smooth in the weights.
double task_loss(const TensorStore& weights, const ToyModelSpec& spec, std::span<const Episode> episodes);

// Plain f32 store with one entry per manifest layer; quantized layers are
// dequantized.
TensorStore resolve_weights(const TensorStore& store, const ModuleManifest& manifest);

// Stacked per-layer input activations over all episodes, one entry per layer.
TensorStore collect_calibration(const TensorStore& weights, const ToyModelSpec& spec,
                                std::span<const Episode> episodes);

// Recovers the architecture from the manifest's layer shapes.
ToyModelSpec infer_spec(const ModuleManifest& manifest, std::size_t patch_count, std::size_t text_tokens);

TensorStore episodes_to_store(std::span<const Episode> episodes);
std::vector<Episode> episodes_from_store(const TensorStore& store);

struct TaskSuccess {
  std::size_t task = 0;
  std::size_t episodes = 0;
  double success_rate = 0.0;
};

struct EvalReport {
  std::size_t episodes = 0;
  double epsilon = 0.05;
  double success_rate = 0.0;
  double mean_deviation = 0.0;
  double median_deviation = 0.0;
  double max_deviation = 0.0;
  std::vector<TaskSuccess> per_task;
  double seconds_per_forward = 0.0;  // wall clock, excluded from determinism checks
  std::uint64_t fp_bytes = 0;
  std::uint64_t q_bytes = 0;
};

/// Per episode, deviation = max_i |action_q[i] - action_fp[i]|; an episode
/// succeeds when deviation <= epsilon.
EvalReport evaluate(const TensorStore& fp_weights, const TensorStore& q_weights, const ToyModelSpec& spec,
                    const ModuleManifest& manifest, std::span<const Episode> episodes, double epsilon = 0.05);

}  // namespace vlaq
