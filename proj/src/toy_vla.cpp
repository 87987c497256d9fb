#include "vlaquant/toy_vla.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <numbers>

#include "vlaquant/error.hpp"
#include "vlaquant/quant.hpp"
#include "vlaquant/rng.hpp"

namespace vlaq {

void ToyModelSpec::validate() const {
  const std::size_t dims[] = {patch_count, patch_dim, vision_hidden, vision_out, lang_dim,
                              lang_blocks, text_tokens, vocab, action_dim};
  for (auto d : dims) {
    if (d < 1) throw FormatError("toy spec: every dimension must be >= 1");
  }
}

namespace {

constexpr double kRmsEps = 1e-6;

std::string block_layer(std::size_t b, const char* part) {
  return "language.block" + std::to_string(b) + "." + part;
}

// ---------------------------------------------------------------------------
// Small dense double matrix used for the forward and backward passes.

struct Mat {
  std::size_t r = 0, c = 0;
  std::vector<double> v;

  Mat() = default;
  Mat(std::size_t rows, std::size_t cols) : r(rows), c(cols), v(rows * cols, 0.0) {}

  double& operator()(std::size_t i, std::size_t j) { return v[i * c + j]; }
  double operator()(std::size_t i, std::size_t j) const { return v[i * c + j]; }
  const double* row(std::size_t i) const { return v.data() + i * c; }
  double* row(std::size_t i) { return v.data() + i * c; }
};

Mat from_tensor(const Tensor& t) {
  Mat m(t.rows(), t.cols());
  std::copy(t.data().begin(), t.data().end(), m.v.begin());
  return m;
}

Tensor to_tensor(const Mat& m, const std::string& name) {
  std::vector<float> data(m.v.begin(), m.v.end());
  return Tensor(name, {m.r, m.c}, std::move(data));
}

// a [n x k] times b^T with b [m x k]: the y = W x layer applied row-wise.
Mat mul_nt(const Mat& a, const Mat& b) {
  Mat out(a.r, b.r);
  for (std::size_t i = 0; i < a.r; ++i) {
    const double* ai = a.row(i);
    for (std::size_t j = 0; j < b.r; ++j) {
      const double* bj = b.row(j);
      double s = 0.0;
      for (std::size_t k = 0; k < a.c; ++k) s += ai[k] * bj[k];
      out(i, j) = s;
    }
  }
  return out;
}

// a [n x k] times b [k x m]
Mat mul_nn(const Mat& a, const Mat& b) {
  Mat out(a.r, b.c);
  for (std::size_t i = 0; i < a.r; ++i) {
    double* oi = out.row(i);
    for (std::size_t k = 0; k < a.c; ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const double* bk = b.row(k);
      for (std::size_t j = 0; j < b.c; ++j) oi[j] += aik * bk[j];
    }
  }
  return out;
}

// a^T b with a [k x n], b [k x m]; accumulates into out [n x m].
void add_mul_tn(const Mat& a, const Mat& b, Mat& out) {
  for (std::size_t k = 0; k < a.r; ++k) {
    const double* ak = a.row(k);
    const double* bk = b.row(k);
    for (std::size_t i = 0; i < a.c; ++i) {
      const double aki = ak[i];
      if (aki == 0.0) continue;
      double* oi = out.row(i);
      for (std::size_t j = 0; j < b.c; ++j) oi[j] += aki * bk[j];
    }
  }
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_grad(double x) {
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2)) + x * pdf;
}

Mat map(const Mat& m, double (*f)(double)) {
  Mat out(m.r, m.c);
  for (std::size_t i = 0; i < m.v.size(); ++i) out.v[i] = f(m.v[i]);
  return out;
}

// Row-wise x / (rms(x) + eps); `rms` receives the un-shifted root mean square.
Mat rms_norm(const Mat& x, std::vector<double>& rms) {
  Mat u(x.r, x.c);
  rms.assign(x.r, 0.0);
  for (std::size_t i = 0; i < x.r; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < x.c; ++j) ss += x(i, j) * x(i, j);
    rms[i] = std::sqrt(ss / static_cast<double>(x.c));
    const double denom = rms[i] + kRmsEps;
    for (std::size_t j = 0; j < x.c; ++j) u(i, j) = x(i, j) / denom;
  }
  return u;
}

Mat rms_norm_backward(const Mat& x, const std::vector<double>& rms, const Mat& du) {
  Mat dx(x.r, x.c);
  const double d = static_cast<double>(x.c);
  for (std::size_t i = 0; i < x.r; ++i) {
    const double denom = rms[i] + kRmsEps;
    double dot = 0.0;
    for (std::size_t j = 0; j < x.c; ++j) dot += du(i, j) * x(i, j);
    const double coef = rms[i] > 0.0 ? dot / (denom * denom * d * rms[i]) : 0.0;
    for (std::size_t j = 0; j < x.c; ++j) dx(i, j) = du(i, j) / denom - coef * x(i, j);
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Parameters

struct VitParams {
  Mat fc1, fc2;
};

struct BlockParams {
  Mat q, k, v, o, mlp1, mlp2;
};

struct Params {
  VitParams vit[2];
  Mat proj, embed;
  std::vector<BlockParams> blocks;
  Mat head;

  // Visits every parameter matrix with its layer name, in manifest order.
  template <typename Self, typename F>
  static void each(Self& self, F&& f) {
    for (int v = 0; v < 2; ++v) {
      const std::string p = "vit" + std::to_string(v + 1);
      f(p + ".fc1", self.vit[v].fc1);
      f(p + ".fc2", self.vit[v].fc2);
    }
    f(std::string("projector.proj"), self.proj);
    f(std::string("language.embed"), self.embed);
    for (std::size_t b = 0; b < self.blocks.size(); ++b) {
      auto& blk = self.blocks[b];
      f(block_layer(b, "q"), blk.q);
      f(block_layer(b, "k"), blk.k);
      f(block_layer(b, "v"), blk.v);
      f(block_layer(b, "o"), blk.o);
      f(block_layer(b, "mlp1"), blk.mlp1);
      f(block_layer(b, "mlp2"), blk.mlp2);
    }
    f(std::string("action_head.out"), self.head);
  }
};

Params zero_params(const ToyModelSpec& spec) {
  const auto manifest = toy_manifest(spec);
  Params p;
  p.blocks.resize(spec.lang_blocks);
  Params::each(p, [&](const std::string& name, Mat& m) {
    const auto* layer = manifest.find_layer(name);
    m = Mat(layer->shape[0], layer->shape[1]);
  });
  return p;
}

Params load_params(const TensorStore& weights, const ToyModelSpec& spec) {
  spec.validate();
  Params p = zero_params(spec);
  Params::each(p, [&](const std::string& name, Mat& m) {
    if (!weights.contains(name)) throw ManifestError("toy model: missing weight '" + name + "'");
    const Tensor t = weights.tensor(name);
    if (t.shape() != Shape{m.r, m.c}) {
      throw ShapeError("toy model: weight '" + name + "' has shape " + shape_string(t.shape()) + ", expected " +
                       shape_string({m.r, m.c}));
    }
    m = from_tensor(t);
  });
  return p;
}

// ---------------------------------------------------------------------------
// Forward with everything the backward pass needs.

struct VitCache {
  Mat h1, a1, out;
};

struct BlockCache {
  Mat x_in;
  std::vector<double> rms_in;
  Mat u, q, k, v, attn, ctx;
  Mat x_mid;
  std::vector<double> rms_mid;
  Mat u2, m1, g;
};

struct Cache {
  Mat patches;
  VitCache vit[2];
  Mat feat;
  Mat onehot;
  std::vector<BlockCache> blocks;
  Mat x_final;
  Mat last;  // 1 x d
  std::vector<double> action;
};

void check_episode(const ToyModelSpec& spec, const Episode& e) {
  if (e.patches.shape() != Shape{spec.patch_count, spec.patch_dim}) {
    throw ShapeError("episode patches have shape " + shape_string(e.patches.shape()) + ", expected " +
                     shape_string({spec.patch_count, spec.patch_dim}));
  }
  if (e.instruction.size() != spec.text_tokens) throw ShapeError("episode instruction has the wrong length");
  for (auto t : e.instruction) {
    if (t >= spec.vocab) throw ShapeError("episode token id " + std::to_string(t) + " out of vocabulary");
  }
}

Cache run_forward(const Params& p, const ToyModelSpec& spec, const Episode& e) {
  check_episode(spec, e);
  Cache c;
  c.patches = from_tensor(e.patches);
  const std::size_t np = spec.patch_count, d = spec.lang_dim, n = spec.token_count();

  c.feat = Mat(np, 2 * spec.vision_out);
  for (int v = 0; v < 2; ++v) {
    auto& vc = c.vit[v];
    vc.h1 = mul_nt(c.patches, p.vit[v].fc1);
    vc.a1 = map(vc.h1, gelu);
    vc.out = mul_nt(vc.a1, p.vit[v].fc2);
    for (std::size_t i = 0; i < np; ++i)
      for (std::size_t j = 0; j < spec.vision_out; ++j) c.feat(i, v * spec.vision_out + j) = vc.out(i, j);
  }
  const Mat z = mul_nt(c.feat, p.proj);

  c.onehot = Mat(spec.text_tokens, spec.vocab);
  for (std::size_t t = 0; t < spec.text_tokens; ++t) c.onehot(t, e.instruction[t]) = 1.0;
  const Mat txt = mul_nt(c.onehot, p.embed);

  Mat x(n, d);
  std::copy(z.v.begin(), z.v.end(), x.v.begin());
  std::copy(txt.v.begin(), txt.v.end(), x.v.begin() + static_cast<std::ptrdiff_t>(np * d));

  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  c.blocks.resize(p.blocks.size());
  for (std::size_t b = 0; b < p.blocks.size(); ++b) {
    const auto& w = p.blocks[b];
    auto& bc = c.blocks[b];
    bc.x_in = x;
    bc.u = rms_norm(x, bc.rms_in);
    bc.q = mul_nt(bc.u, w.q);
    bc.k = mul_nt(bc.u, w.k);
    bc.v = mul_nt(bc.u, w.v);
    bc.attn = mul_nt(bc.q, bc.k);
    for (std::size_t i = 0; i < n; ++i) {
      double* row = bc.attn.row(i);
      double mx = -INFINITY;
      for (std::size_t j = 0; j < n; ++j) {
        row[j] *= inv_sqrt_d;
        mx = std::max(mx, row[j]);
      }
      double sum = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        row[j] = std::exp(row[j] - mx);
        sum += row[j];
      }
      for (std::size_t j = 0; j < n; ++j) row[j] /= sum;
    }
    bc.ctx = mul_nn(bc.attn, bc.v);
    const Mat o = mul_nt(bc.ctx, w.o);
    for (std::size_t i = 0; i < x.v.size(); ++i) x.v[i] += o.v[i];
    bc.x_mid = x;
    bc.u2 = rms_norm(x, bc.rms_mid);
    bc.m1 = mul_nt(bc.u2, w.mlp1);
    bc.g = map(bc.m1, gelu);
    const Mat m2 = mul_nt(bc.g, w.mlp2);
    for (std::size_t i = 0; i < x.v.size(); ++i) x.v[i] += m2.v[i];
  }
  c.x_final = x;
  c.last = Mat(1, d);
  std::copy(x.row(n - 1), x.row(n - 1) + d, c.last.v.begin());
  const Mat a = mul_nt(c.last, p.head);
  c.action = a.v;
  return c;
}

// Accumulates dL/dW for one episode given dL/daction.
void run_backward(const Params& p, const ToyModelSpec& spec, const Cache& c, const std::vector<double>& da,
                  Params& g) {
  const std::size_t np = spec.patch_count, d = spec.lang_dim, n = spec.token_count();
  Mat da_m(1, spec.action_dim);
  da_m.v = da;
  add_mul_tn(da_m, c.last, g.head);
  Mat dx(n, d);
  {
    const Mat dlast = mul_nn(da_m, p.head);
    std::copy(dlast.v.begin(), dlast.v.end(), dx.row(n - 1));
  }

  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  for (std::size_t bi = p.blocks.size(); bi-- > 0;) {
    const auto& w = p.blocks[bi];
    const auto& bc = c.blocks[bi];
    auto& gw = g.blocks[bi];

    // MLP branch: x_out = x_mid + mlp2(gelu(mlp1(rms(x_mid))))
    add_mul_tn(dx, bc.g, gw.mlp2);
    Mat dm1 = mul_nn(dx, w.mlp2);
    for (std::size_t i = 0; i < dm1.v.size(); ++i) dm1.v[i] *= gelu_grad(bc.m1.v[i]);
    add_mul_tn(dm1, bc.u2, gw.mlp1);
    const Mat du2 = mul_nn(dm1, w.mlp1);
    const Mat dmid = rms_norm_backward(bc.x_mid, bc.rms_mid, du2);
    for (std::size_t i = 0; i < dx.v.size(); ++i) dx.v[i] += dmid.v[i];

    // Attention branch: x_mid = x_in + o(softmax(q k^T / sqrt d) v)
    add_mul_tn(dx, bc.ctx, gw.o);
    const Mat dctx = mul_nn(dx, w.o);
    const Mat dattn = mul_nt(dctx, bc.v);
    Mat dv(n, d);
    add_mul_tn(bc.attn, dctx, dv);
    Mat ds(n, n);
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += bc.attn(i, j) * dattn(i, j);
      for (std::size_t j = 0; j < n; ++j) ds(i, j) = bc.attn(i, j) * (dattn(i, j) - dot) * inv_sqrt_d;
    }
    const Mat dq = mul_nn(ds, bc.k);
    Mat dk(n, d);
    add_mul_tn(ds, bc.q, dk);
    add_mul_tn(dq, bc.u, gw.q);
    add_mul_tn(dk, bc.u, gw.k);
    add_mul_tn(dv, bc.u, gw.v);
    Mat du = mul_nn(dq, w.q);
    const Mat du_k = mul_nn(dk, w.k);
    const Mat du_v = mul_nn(dv, w.v);
    for (std::size_t i = 0; i < du.v.size(); ++i) du.v[i] += du_k.v[i] + du_v.v[i];
    const Mat din = rms_norm_backward(bc.x_in, bc.rms_in, du);
    for (std::size_t i = 0; i < dx.v.size(); ++i) dx.v[i] += din.v[i];
  }

  Mat dz(np, d), dtxt(spec.text_tokens, d);
  std::copy(dx.v.begin(), dx.v.begin() + static_cast<std::ptrdiff_t>(np * d), dz.v.begin());
  std::copy(dx.v.begin() + static_cast<std::ptrdiff_t>(np * d), dx.v.end(), dtxt.v.begin());
  add_mul_tn(dtxt, c.onehot, g.embed);
  add_mul_tn(dz, c.feat, g.proj);
  const Mat dfeat = mul_nn(dz, p.proj);
  for (int v = 0; v < 2; ++v) {
    const auto& vc = c.vit[v];
    Mat dout(np, spec.vision_out);
    for (std::size_t i = 0; i < np; ++i)
      for (std::size_t j = 0; j < spec.vision_out; ++j) dout(i, j) = dfeat(i, v * spec.vision_out + j);
    add_mul_tn(dout, vc.a1, g.vit[v].fc2);
    Mat dh1 = mul_nn(dout, p.vit[v].fc2);
    for (std::size_t i = 0; i < dh1.v.size(); ++i) dh1.v[i] *= gelu_grad(vc.h1.v[i]);
    add_mul_tn(dh1, c.patches, g.vit[v].fc1);
  }
}

ForwardTrace trace_of(const Cache& c, const ToyModelSpec& spec) {
  ForwardTrace t;
  std::vector<float> action(c.action.begin(), c.action.end());
  t.action = Tensor("action", {spec.action_dim}, std::move(action));
  for (int v = 0; v < 2; ++v) {
    const std::string pre = "vit" + std::to_string(v + 1);
    t.layer_inputs[pre + ".fc1"] = to_tensor(c.patches, pre + ".fc1");
    t.layer_inputs[pre + ".fc2"] = to_tensor(c.vit[v].a1, pre + ".fc2");
  }
  t.layer_inputs["projector.proj"] = to_tensor(c.feat, "projector.proj");
  t.layer_inputs["language.embed"] = to_tensor(c.onehot, "language.embed");
  for (std::size_t b = 0; b < c.blocks.size(); ++b) {
    const auto& bc = c.blocks[b];
    for (const char* part : {"q", "k", "v"}) t.layer_inputs[block_layer(b, part)] = to_tensor(bc.u, block_layer(b, part));
    t.layer_inputs[block_layer(b, "o")] = to_tensor(bc.ctx, block_layer(b, "o"));
    t.layer_inputs[block_layer(b, "mlp1")] = to_tensor(bc.u2, block_layer(b, "mlp1"));
    t.layer_inputs[block_layer(b, "mlp2")] = to_tensor(bc.g, block_layer(b, "mlp2"));
  }
  t.layer_inputs["action_head.out"] = to_tensor(c.last, "action_head.out");
  return t;
}

Episode make_episode(const ToyModelSpec& spec, std::uint64_t teacher_seed, std::size_t index) {
  Episode e;
  SplitMix64 rng(teacher_seed, "episode/patches", index);
  std::vector<float> patches(spec.patch_count * spec.patch_dim);
  for (auto& v : patches) v = static_cast<float>(rng.normal());
  e.patches = Tensor("patches", {spec.patch_count, spec.patch_dim}, std::move(patches));
  e.task = index % kTaskCount;
  SplitMix64 tok(teacher_seed, "episode/instruction", e.task);
  for (std::size_t t = 0; t < spec.text_tokens; ++t) e.instruction.push_back(static_cast<std::uint32_t>(tok.below(spec.vocab)));
  return e;
}

void require_nonempty(std::span<const Episode> episodes, const char* what) {
  if (episodes.empty()) throw ShapeError(std::string(what) + ": episode batch is empty");
}

}  // namespace

// ---------------------------------------------------------------------------

ModuleManifest toy_manifest(const ToyModelSpec& spec) {
  spec.validate();
  ModuleManifest m;
  for (int v = 1; v <= 2; ++v) {
    const std::string p = "vit" + std::to_string(v);
    m.modules.push_back({p,
                         Modality::vision,
                         Role::encoder,
                         {{p + ".fc1", {spec.vision_hidden, spec.patch_dim}},
                          {p + ".fc2", {spec.vision_out, spec.vision_hidden}}}});
  }
  m.modules.push_back(
      {"projector", Modality::vision, Role::projector, {{"projector.proj", {spec.lang_dim, 2 * spec.vision_out}}}});
  ModuleInfo lang{"language", Modality::language, Role::core, {{"language.embed", {spec.lang_dim, spec.vocab}}}};
  const std::size_t d = spec.lang_dim, h = spec.mlp_hidden();
  for (std::size_t b = 0; b < spec.lang_blocks; ++b) {
    for (const char* part : {"q", "k", "v", "o"}) lang.layers.push_back({block_layer(b, part), {d, d}});
    lang.layers.push_back({block_layer(b, "mlp1"), {h, d}});
    lang.layers.push_back({block_layer(b, "mlp2"), {d, h}});
  }
  m.modules.push_back(std::move(lang));
  m.modules.push_back(
      {"action_head", Modality::language, Role::action_head, {{"action_head.out", {spec.action_dim, spec.lang_dim}}}});
  return m;
}

TensorStore gen_weights(const ToyModelSpec& spec, std::string_view tag) {
  const auto manifest = toy_manifest(spec);
  TensorStore store;
  for (const auto* layer : manifest.all_layers()) {
    SplitMix64 rng(spec.seed, std::string(tag) + "/" + layer->name);
    const double scale = 1.0 / std::sqrt(static_cast<double>(layer->shape[1]));
    std::vector<float> data(layer->params());
    for (auto& v : data) v = static_cast<float>(rng.normal() * scale);
    store.add(Tensor(layer->name, layer->shape, std::move(data)));
  }
  return store;
}

ToyModel gen_model(const ToyModelSpec& spec) { return {gen_weights(spec, "model"), toy_manifest(spec)}; }

TensorStore gen_teacher(const ToyModelSpec& spec, std::uint64_t teacher_seed) {
  ToyModelSpec t = spec;
  t.seed = teacher_seed;
  return gen_weights(t, "teacher");
}

std::vector<Episode> gen_episodes(const ToyModelSpec& spec, std::uint64_t teacher_seed, std::size_t count) {
  spec.validate();
  std::vector<Episode> out;
  if (count == 0) return out;
  const Params teacher = load_params(gen_teacher(spec, teacher_seed), spec);
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Episode e = make_episode(spec, teacher_seed, i);
    const Cache c = run_forward(teacher, spec, e);
    std::vector<float> target(c.action.begin(), c.action.end());
    e.target_action = Tensor("target_action", {spec.action_dim}, std::move(target));
    out.push_back(std::move(e));
  }
  return out;
}

ForwardTrace forward(const TensorStore& weights, const ToyModelSpec& spec, const Episode& episode) {
  const Params p = load_params(weights, spec);
  return trace_of(run_forward(p, spec, episode), spec);
}

TensorStore backward(const TensorStore& weights, const ToyModelSpec& spec, std::span<const Episode> episodes) {
  require_nonempty(episodes, "backward");
  const Params p = load_params(weights, spec);
  Params g = zero_params(spec);
  const double norm = 2.0 / static_cast<double>(spec.action_dim * episodes.size());
  for (const auto& e : episodes) {
    if (e.target_action.shape() != Shape{spec.action_dim}) throw ShapeError("episode target has the wrong shape");
    const Cache c = run_forward(p, spec, e);
    std::vector<double> da(spec.action_dim);
    // The residual uses the emitted f32 action, so a target equal to the
    // model's own output gives exactly zero gradient.
    for (std::size_t i = 0; i < da.size(); ++i) {
      da[i] = norm * (double(static_cast<float>(c.action[i])) - double(e.target_action[i]));
    }
    run_backward(p, spec, c, da, g);
  }
  TensorStore out;
  Params::each(g, [&](const std::string& name, const Mat& m) { out.add(to_tensor(m, name)); });
  return out;
}

double task_loss(const TensorStore& weights, const ToyModelSpec& spec, std::span<const Episode> episodes) {
  require_nonempty(episodes, "task_loss");
  const Params p = load_params(weights, spec);
  double total = 0.0;
  for (const auto& e : episodes) {
    const Cache c = run_forward(p, spec, e);
    for (std::size_t i = 0; i < spec.action_dim; ++i) {
      const double r = c.action[i] - double(e.target_action[i]);
      total += r * r;
    }
  }
  return total / static_cast<double>(spec.action_dim * episodes.size());
}

TensorStore resolve_weights(const TensorStore& store, const ModuleManifest& manifest) {
  TensorStore out;
  for (const auto* layer : manifest.all_layers()) {
    Tensor t;
    if (store.contains(layer->name)) {
      t = store.tensor(layer->name);
    } else if (has_quantized(store, layer->name)) {
      t = dequantize(read_quantized(store, layer->name));
    } else {
      throw ManifestError("store has no weight for layer '" + layer->name + "'");
    }
    if (t.shape() != layer->shape) {
      throw ShapeError("layer '" + layer->name + "' has shape " + shape_string(t.shape()) + ", manifest says " +
                       shape_string(layer->shape));
    }
    out.add(layer->name, t);
  }
  return out;
}

TensorStore collect_calibration(const TensorStore& weights, const ToyModelSpec& spec,
                                std::span<const Episode> episodes) {
  require_nonempty(episodes, "collect_calibration");
  std::map<std::string, std::vector<float>> rows;
  std::map<std::string, std::size_t> widths;
  const Params p = load_params(weights, spec);
  const auto manifest = toy_manifest(spec);
  for (const auto& e : episodes) {
    const ForwardTrace t = trace_of(run_forward(p, spec, e), spec);
    for (const auto& [name, x] : t.layer_inputs) {
      auto& buf = rows[name];
      buf.insert(buf.end(), x.data().begin(), x.data().end());
      widths[name] = x.cols();
    }
  }
  TensorStore out;
  for (const auto* layer : manifest.all_layers()) {
    auto& buf = rows.at(layer->name);
    const std::size_t w = widths.at(layer->name);
    const std::size_t n = buf.size() / w;
    out.add(Tensor(layer->name, {n, w}, std::move(buf)));
  }
  return out;
}

ToyModelSpec infer_spec(const ModuleManifest& manifest, std::size_t patch_count, std::size_t text_tokens) {
  auto shape_of = [&](const std::string& name) -> const Shape& {
    const auto* l = manifest.find_layer(name);
    if (!l || l->shape.size() != 2) throw ManifestError("manifest is not a toy pipeline: missing layer '" + name + "'");
    return l->shape;
  };
  ToyModelSpec s;
  s.patch_count = patch_count;
  s.text_tokens = text_tokens;
  s.patch_dim = shape_of("vit1.fc1")[1];
  s.vision_hidden = shape_of("vit1.fc1")[0];
  s.vision_out = shape_of("vit1.fc2")[0];
  s.lang_dim = shape_of("projector.proj")[0];
  s.vocab = shape_of("language.embed")[1];
  s.action_dim = shape_of("action_head.out")[0];
  s.lang_blocks = 0;
  while (manifest.find_layer(block_layer(s.lang_blocks, "q"))) ++s.lang_blocks;
  s.validate();
  const auto expected = toy_manifest(s);
  for (const auto* layer : expected.all_layers()) {
    if (shape_of(layer->name) != layer->shape) {
      throw ManifestError("manifest layer '" + layer->name + "' does not fit the toy architecture");
    }
  }
  return s;
}

TensorStore episodes_to_store(std::span<const Episode> episodes) {
  require_nonempty(episodes, "episodes_to_store");
  const std::size_t n = episodes.size();
  const Shape ps = episodes.front().patches.shape();
  const std::size_t tokens = episodes.front().instruction.size();
  const std::size_t adim = episodes.front().target_action.size();
  std::vector<float> patches, instr, target, task;
  for (const auto& e : episodes) {
    if (e.patches.shape() != ps || e.instruction.size() != tokens || e.target_action.size() != adim) {
      throw ShapeError("episodes_to_store: episodes have inconsistent shapes");
    }
    patches.insert(patches.end(), e.patches.data().begin(), e.patches.data().end());
    for (auto t : e.instruction) instr.push_back(static_cast<float>(t));
    target.insert(target.end(), e.target_action.data().begin(), e.target_action.data().end());
    task.push_back(static_cast<float>(e.task));
  }
  TensorStore s;
  s.add(Tensor("episodes.patches", {n, ps[0], ps[1]}, std::move(patches)));
  s.add(Tensor("episodes.instruction", {n, tokens}, std::move(instr)));
  s.add(Tensor("episodes.target", {n, adim}, std::move(target)));
  s.add(Tensor("episodes.task", {n}, std::move(task)));
  return s;
}

std::vector<Episode> episodes_from_store(const TensorStore& store) {
  const Tensor patches = store.tensor("episodes.patches");
  const Tensor instr = store.tensor("episodes.instruction");
  const Tensor target = store.tensor("episodes.target");
  const Tensor task = store.tensor("episodes.task");
  if (patches.rank() != 3 || instr.rank() != 2 || target.rank() != 2 || task.rank() != 1) {
    throw FormatError("episode store: unexpected entry ranks");
  }
  const std::size_t n = patches.shape()[0];
  if (instr.shape()[0] != n || target.shape()[0] != n || task.shape()[0] != n) {
    throw FormatError("episode store: entries disagree on the episode count");
  }
  const std::size_t pc = patches.shape()[1], pd = patches.shape()[2];
  const std::size_t tokens = instr.shape()[1], adim = target.shape()[1];
  std::vector<Episode> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& e = out[i];
    const auto* p = patches.data().data() + i * pc * pd;
    e.patches = Tensor("patches", {pc, pd}, std::vector<float>(p, p + pc * pd));
    for (std::size_t t = 0; t < tokens; ++t) {
      const float v = instr[i * tokens + t];
      if (v < 0 || v != std::floor(v)) throw FormatError("episode store: token ids must be non-negative integers");
      e.instruction.push_back(static_cast<std::uint32_t>(v));
    }
    const auto* a = target.data().data() + i * adim;
    e.target_action = Tensor("target_action", {adim}, std::vector<float>(a, a + adim));
    if (task[i] < 0 || task[i] != std::floor(task[i])) throw FormatError("episode store: bad task id");
    e.task = static_cast<std::size_t>(task[i]);
  }
  return out;
}

EvalReport evaluate(const TensorStore& fp_weights, const TensorStore& q_weights, const ToyModelSpec& spec,
                    const ModuleManifest& manifest, std::span<const Episode> episodes, double epsilon) {
  if (!(epsilon >= 0.0)) throw FormatError("evaluate: epsilon must be >= 0");
  require_nonempty(episodes, "evaluate");
  const Params fp = load_params(resolve_weights(fp_weights, manifest), spec);
  const Params qp = load_params(resolve_weights(q_weights, manifest), spec);

  EvalReport r;
  r.episodes = episodes.size();
  r.epsilon = epsilon;
  for (const auto* layer : manifest.all_layers()) {
    r.fp_bytes += 2 * layer->params();
    r.q_bytes += has_quantized(q_weights, layer->name) ? quantized_payload_bytes(q_weights, layer->name)
                                                       : 2 * layer->params();
  }

  std::vector<double> dev(episodes.size());
  std::map<std::size_t, std::pair<std::size_t, std::size_t>> tasks;  // task -> (successes, total)
  std::chrono::steady_clock::duration q_time{};
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    const auto& e = episodes[i];
    const Cache a = run_forward(fp, spec, e);
    const auto t0 = std::chrono::steady_clock::now();
    const Cache b = run_forward(qp, spec, e);
    q_time += std::chrono::steady_clock::now() - t0;
    double d = 0.0;
    for (std::size_t k = 0; k < a.action.size(); ++k) d = std::max(d, std::abs(b.action[k] - a.action[k]));
    dev[i] = d;
    auto& [ok, total] = tasks[e.task];
    ok += d <= epsilon ? 1 : 0;
    ++total;
  }

  std::size_t successes = 0;
  double sum = 0.0;
  for (double d : dev) {
    successes += d <= epsilon ? 1 : 0;
    sum += d;
    r.max_deviation = std::max(r.max_deviation, d);
  }
  r.success_rate = static_cast<double>(successes) / static_cast<double>(dev.size());
  r.mean_deviation = sum / static_cast<double>(dev.size());
  std::vector<double> sorted = dev;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t m = sorted.size();
  r.median_deviation = m % 2 ? sorted[m / 2] : 0.5 * (sorted[m / 2 - 1] + sorted[m / 2]);
  for (const auto& [task, counts] : tasks) {
    r.per_task.push_back({task, counts.second, static_cast<double>(counts.first) / static_cast<double>(counts.second)});
  }
  r.seconds_per_forward = std::chrono::duration<double>(q_time).count() / static_cast<double>(episodes.size());
  return r;
}

}  // namespace vlaq
