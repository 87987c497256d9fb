#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "oracles.hpp"
#include "vlaquant/error.hpp"
#include "vlaquant/planner.hpp"
#include "vlaquant/sensitivity.hpp"
#include "vlaquant/toy_vla.hpp"

using namespace vlaq;

namespace {

ModuleManifest two_module_manifest() {
  ModuleManifest m;
  m.modules.push_back({"enc", Modality::vision, Role::encoder, {{"enc.a", {10, 10}}, {"enc.b", {30, 10}}}});
  m.modules.push_back({"lm", Modality::language, Role::core, {{"lm.a", {4, 5}}}});
  return m;
}

SensitivityScore score(const std::string& layer, float combined, std::uint64_t params) {
  SensitivityScore s;
  s.layer = layer;
  s.grad_mean_abs = combined;
  s.act_mean_abs = 1.0f;
  s.combined = combined;
  s.param_count = params;
  return s;
}

}  // namespace

TEST(LayerScore, ZeroGradient) {
  const auto s = layer_score(Tensor::zeros({2, 3}), oracle::random_tensor(1, {4, 3}), "l");
  EXPECT_EQ(s.combined, 0.0f);
  EXPECT_EQ(s.param_count, 6u);
}

TEST(LayerScore, MeanAbsArithmetic) {
  const auto grad = Tensor::from_rows({{2, -2}, {-2, 2}});
  const auto act = Tensor::from_rows({{3, -3}, {-3, 3}, {3, 3}});
  const auto s = layer_score(grad, act, "l");
  EXPECT_EQ(s.grad_mean_abs, 2.0f);
  EXPECT_EQ(s.act_mean_abs, 3.0f);
  EXPECT_EQ(s.combined, 6.0f);
}

TEST(LayerScore, LinearInActivation) {
  const auto grad = oracle::random_tensor(2, {3, 4});
  const auto act = oracle::random_tensor(3, {5, 4});
  Tensor act10 = act;
  for (auto& v : act10.data()) v *= 10.0f;
  const auto a = layer_score(grad, act, "l"), b = layer_score(grad, act10, "l");
  EXPECT_NEAR(b.combined, 10.0f * a.combined, 1e-5f * b.combined);
  EXPECT_EQ(a.combined, a.grad_mean_abs * a.act_mean_abs);
}

TEST(LayerScore, ShapeChecksAgainstManifest) {
  const LayerInfo info{"l", {3, 4}};
  EXPECT_THROW(layer_score(Tensor::zeros({4, 3}), Tensor::zeros({2, 4}), info), ShapeError);
  EXPECT_THROW(layer_score(Tensor::zeros({3, 4}), Tensor::zeros({2, 3}), info), ShapeError);
  EXPECT_NO_THROW(layer_score(Tensor::zeros({3, 4}), Tensor::zeros({2, 4}), info));
}

TEST(Aggregate, SingletonAndWeightedMean) {
  const auto m = two_module_manifest();
  const std::vector<SensitivityScore> scores{score("enc.a", 1, 100), score("enc.b", 3, 300), score("lm.a", 7, 20)};
  const auto r = aggregate(scores, m);
  EXPECT_DOUBLE_EQ(r.find_module("enc")->aggregate, 2.5);
  EXPECT_DOUBLE_EQ(r.find_module("lm")->aggregate, 7.0);
  EXPECT_DOUBLE_EQ(r.modalities.vision, 2.5);
  EXPECT_DOUBLE_EQ(r.modalities.language, 7.0);
  EXPECT_DOUBLE_EQ(r.modality_ratio, 7.0 / 2.5);
}

TEST(Aggregate, RatioConventions) {
  const auto m = two_module_manifest();
  const auto zero = aggregate(std::vector{score("enc.a", 0, 100), score("enc.b", 0, 300), score("lm.a", 0, 20)}, m);
  EXPECT_EQ(zero.modality_ratio, 1.0);
  const auto inf = aggregate(std::vector{score("enc.a", 0, 100), score("enc.b", 0, 300), score("lm.a", 2, 20)}, m);
  EXPECT_TRUE(std::isinf(inf.modality_ratio));
}

TEST(Aggregate, UnknownOrDuplicateLayer) {
  const auto m = two_module_manifest();
  EXPECT_THROW(aggregate(std::vector{score("ghost", 1, 1)}, m), ManifestError);
  EXPECT_THROW(aggregate(std::vector{score("lm.a", 1, 20), score("lm.a", 1, 20)}, m), ManifestError);
}

TEST(Aggregate, PermutationInvariantAndBounded) {
  const auto m = two_module_manifest();
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    SplitMix64 rng(seed, "perm");
    std::vector<SensitivityScore> scores{score("enc.a", float(rng.uniform() * 5), 100),
                                         score("enc.b", float(rng.uniform() * 5), 300),
                                         score("lm.a", float(rng.uniform() * 5), 20)};
    const auto base = aggregate(scores, m);
    for (std::size_t i = scores.size(); i > 1; --i) std::swap(scores[i - 1], scores[rng.below(i)]);
    const auto shuffled = aggregate(scores, m);
    for (std::size_t k = 0; k < base.modules.size(); ++k)
      EXPECT_EQ(base.modules[k].aggregate, shuffled.modules[k].aggregate);
    EXPECT_EQ(base.modality_ratio, shuffled.modality_ratio);
    double enc_lo = 1e9, enc_hi = -1e9;
    for (const auto& s : scores)
      if (s.layer.rfind("enc.", 0) == 0) {
        enc_lo = std::min(enc_lo, double(s.combined));
        enc_hi = std::max(enc_hi, double(s.combined));
      }
    EXPECT_GE(base.find_module("enc")->aggregate, enc_lo - 1e-12);
    EXPECT_LE(base.find_module("enc")->aggregate, enc_hi + 1e-12);
  }
}

TEST(Aggregate, UniformGradientScalingKeepsRanking) {
  ToyModelSpec spec;
  spec.patch_count = 3;
  const auto model = gen_model(spec);
  const auto episodes = gen_episodes(spec, 5, 12);
  const auto grads = backward(model.weights, spec, episodes);
  const auto calib = collect_calibration(model.weights, spec, episodes);
  for (float c : {0.5f, 4.0f}) {
    std::vector<SensitivityScore> base, scaled;
    for (const auto* layer : model.manifest.all_layers()) {
      const auto g = grads.tensor(layer->name);
      Tensor gc = g;
      for (auto& v : gc.data()) v *= c;
      base.push_back(layer_score(g, calib.tensor(layer->name), *layer));
      scaled.push_back(layer_score(gc, calib.tensor(layer->name), *layer));
      EXPECT_NEAR(scaled.back().combined, c * base.back().combined, 1e-5 * scaled.back().combined);
    }
    const auto a = aggregate(base, model.manifest), b = aggregate(scaled, model.manifest);
    EXPECT_NEAR(a.modality_ratio, b.modality_ratio, 1e-5 * a.modality_ratio);
    auto order = [](const SensitivityReport& r) {
      std::vector<std::size_t> idx(r.modules.size());
      for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
      std::stable_sort(idx.begin(), idx.end(),
                       [&](std::size_t x, std::size_t y) { return r.modules[x].aggregate < r.modules[y].aggregate; });
      return idx;
    };
    EXPECT_EQ(order(a), order(b));
  }
}

TEST(Analyze, DeterministicOnToyPipeline) {
  ToyModelSpec spec;
  spec.patch_count = 3;
  const auto model = gen_model(spec);
  const auto episodes = gen_episodes(spec, 9, 20);
  const auto a = analyze_sensitivity(model.weights, model.manifest, spec, episodes);
  const auto b = analyze_sensitivity(model.weights, model.manifest, spec, episodes);
  ASSERT_EQ(a.layers.size(), model.manifest.all_layers().size());
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    EXPECT_EQ(a.layers[i].combined, b.layers[i].combined);
    EXPECT_GE(a.layers[i].combined, 0.0f);
    EXPECT_TRUE(std::isfinite(a.layers[i].combined));
  }
  EXPECT_EQ(a.modality_ratio, b.modality_ratio);
}
