#include "densedit/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <mutex>
#include <random>
#include <set>
#include <sstream>
#include <tuple>

#include "densedit/kernels.hpp"

namespace densedit {
namespace {

constexpr double kLnEps = 1e-6;

using Rng = std::mt19937_64;

Param make_param(std::string name, std::size_t rows, std::size_t cols) {
  return Param{std::move(name), Matrix(rows, cols), Matrix(), false};
}

void fill_normal(Matrix& m, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : m.data) v = dist(rng);
}

Linear make_linear(const std::string& name, std::size_t in, std::size_t out, double stddev, Rng& rng) {
  Linear l{make_param(name + ".weight", in, out), make_param(name + ".bias", 1, out), std::nullopt};
  fill_normal(l.weight.value, stddev, rng);
  return l;
}

void visit_linear(Linear& l, const std::function<void(Param&)>& fn) {
  fn(l.weight);
  fn(l.bias);
  if (l.lora) {
    fn(l.lora->a);
    fn(l.lora->b);
  }
}

std::vector<std::pair<std::string, Linear*>> block_linears(Block& b) {
  return {{"attn.q", &b.q}, {"attn.k", &b.k}, {"attn.v", &b.v}, {"attn.o", &b.o},
          {"ffn.in", &b.ffn_in}, {"ffn.out", &b.ffn_out}};
}

void linear_forward(const Linear& l, const Matrix& x, Matrix& y, LinearTrace* trace) {
  kernels::matmul(x, l.weight.value, y);
  kernels::add_row_vector(y, l.bias.value.data);
  if (l.lora) {
    Matrix hidden;
    kernels::matmul(x, l.lora->a.value, hidden);
    Matrix delta;
    kernels::matmul(hidden, l.lora->b.value, delta);
    const double s = l.lora->scale;
    for (std::size_t i = 0; i < y.size(); ++i) y.data[i] += s * delta.data[i];
    if (trace) trace->lora_hidden = std::move(hidden);
  }
}

void accumulate_grad(Param& p, const Matrix& g) {
  if (!p.grad.same_shape(p.value)) p.grad = Matrix(p.value.rows, p.value.cols);
  for (std::size_t i = 0; i < g.size(); ++i) p.grad.data[i] += g.data[i];
}

/// dx (= or +=) dy W^T [+ LoRA path]; parameter gradients for trainable parts.
void linear_backward(Linear& l, const Matrix& x, const LinearTrace& trace, const Matrix& dy, Matrix& dx,
                     bool accumulate_dx) {
  kernels::matmul_nt(dy, l.weight.value, dx, accumulate_dx);
  if (l.weight.trainable) {
    Matrix gw;
    kernels::matmul_tn(x, dy, gw);
    accumulate_grad(l.weight, gw);
  }
  if (l.bias.trainable) {
    if (!l.bias.grad.same_shape(l.bias.value)) l.bias.grad = Matrix(1, l.bias.value.cols);
    kernels::accumulate_column_sums(dy, l.bias.grad.data);
  }
  if (l.lora) {
    Matrix sdy = dy;
    for (double& v : sdy.data) v *= l.lora->scale;
    Matrix du;
    kernels::matmul_nt(sdy, l.lora->b.value, du);
    if (l.lora->b.trainable) {
      Matrix gb;
      kernels::matmul_tn(trace.lora_hidden, sdy, gb);
      accumulate_grad(l.lora->b, gb);
    }
    if (l.lora->a.trainable) {
      Matrix ga;
      kernels::matmul_tn(x, du, ga);
      accumulate_grad(l.lora->a, ga);
    }
    kernels::matmul_nt(du, l.lora->a.value, dx, true);
  }
}

Matrix row_matrix(std::span<const double> v) {
  Matrix m(1, v.size());
  std::copy(v.begin(), v.end(), m.data.begin());
  return m;
}

/// h = n * (1 + scale) + shift, with shift/scale taken from mod at the given
/// chunk offsets.
void modulate(const Matrix& n, const std::vector<double>& mod, std::size_t shift_off, std::size_t scale_off,
              Matrix& h) {
  if (!h.same_shape(n)) h = Matrix(n.rows, n.cols);
  const std::size_t d = n.cols;
  for (std::size_t i = 0; i < n.rows; ++i) {
    for (std::size_t j = 0; j < d; ++j) h(i, j) = n(i, j) * (1.0 + mod[scale_off + j]) + mod[shift_off + j];
  }
}

void scale_columns(const Matrix& in, const std::vector<double>& mod, std::size_t off, bool plus_one, Matrix& out) {
  if (!out.same_shape(in)) out = Matrix(in.rows, in.cols);
  for (std::size_t i = 0; i < in.rows; ++i) {
    for (std::size_t j = 0; j < in.cols; ++j) out(i, j) = in(i, j) * ((plus_one ? 1.0 : 0.0) + mod[off + j]);
  }
}

double silu(double x) { return x / (1.0 + std::exp(-x)); }

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x))); }

double gelu_grad(double x) {
  const double u = kGeluC * (x + 0.044715 * x * x * x);
  const double th = std::tanh(u);
  return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
}

std::vector<double> timestep_condition(const ModelState& s, double t) {
  const Matrix feat = row_matrix(timestep_features(t, s.config.dim));
  Matrix h;
  linear_forward(s.t_embed1, feat, h, nullptr);
  for (double& v : h.data) v = silu(v);
  Matrix temb;
  linear_forward(s.t_embed2, h, temb, nullptr);
  for (double& v : temb.data) v = silu(v);
  return temb.data;
}

std::vector<double> modulation_vector(const Linear& l, const std::vector<double>& cond) {
  Matrix out;
  linear_forward(l, row_matrix(cond), out, nullptr);
  return out.data;
}

void block_forward(const Block& b, int heads, const std::vector<double>& cond, Matrix& x, BlockTrace& tr) {
  const std::size_t d = x.cols;
  tr.x_in = x;
  tr.mod = modulation_vector(b.modulation, cond);
  kernels::layer_norm(x, tr.n1, tr.inv1, kLnEps);
  modulate(tr.n1, tr.mod, 0, d, tr.h1);
  linear_forward(b.q, tr.h1, tr.q, &tr.tq);
  linear_forward(b.k, tr.h1, tr.k, &tr.tk);
  linear_forward(b.v, tr.h1, tr.v, &tr.tv);
  kernels::attention(tr.q, tr.k, tr.v, heads, tr.attn, &tr.probs);
  linear_forward(b.o, tr.attn, tr.attn_out, &tr.to);
  for (std::size_t i = 0; i < x.rows; ++i) {
    for (std::size_t j = 0; j < d; ++j) x(i, j) += tr.mod[2 * d + j] * tr.attn_out(i, j);
  }
  tr.x_mid = x;
  kernels::layer_norm(x, tr.n2, tr.inv2, kLnEps);
  modulate(tr.n2, tr.mod, 3 * d, 4 * d, tr.h2);
  linear_forward(b.ffn_in, tr.h2, tr.ffn_pre, &tr.tffn_in);
  tr.ffn_act = tr.ffn_pre;
  for (double& v : tr.ffn_act.data) v = gelu(v);
  linear_forward(b.ffn_out, tr.ffn_act, tr.ffn_out, &tr.tffn_out);
  for (std::size_t i = 0; i < x.rows; ++i) {
    for (std::size_t j = 0; j < d; ++j) x(i, j) += tr.mod[5 * d + j] * tr.ffn_out(i, j);
  }
}

/// dx: gradient w.r.t. block output on entry, w.r.t. block input on exit.
void block_backward(Block& b, int heads, const BlockTrace& tr, Matrix& dx) {
  const std::size_t d = dx.cols;
  Matrix d_ffn_out, d_act, dh2, dn2, dln;
  scale_columns(dx, tr.mod, 5 * d, false, d_ffn_out);
  linear_backward(b.ffn_out, tr.ffn_act, tr.tffn_out, d_ffn_out, d_act, false);
  for (std::size_t i = 0; i < d_act.size(); ++i) d_act.data[i] *= gelu_grad(tr.ffn_pre.data[i]);
  linear_backward(b.ffn_in, tr.h2, tr.tffn_in, d_act, dh2, false);
  scale_columns(dh2, tr.mod, 4 * d, true, dn2);
  kernels::layer_norm_backward(tr.n2, tr.inv2, dn2, dln);
  for (std::size_t i = 0; i < dx.size(); ++i) dx.data[i] += dln.data[i];

  Matrix d_attn_out, d_attn, dq, dk, dv, dh1, dn1;
  scale_columns(dx, tr.mod, 2 * d, false, d_attn_out);
  linear_backward(b.o, tr.attn, tr.to, d_attn_out, d_attn, false);
  kernels::attention_backward(tr.q, tr.k, tr.v, tr.probs, heads, d_attn, dq, dk, dv);
  linear_backward(b.q, tr.h1, tr.tq, dq, dh1, false);
  linear_backward(b.k, tr.h1, tr.tk, dk, dh1, true);
  linear_backward(b.v, tr.h1, tr.tv, dv, dh1, true);
  scale_columns(dh1, tr.mod, d, true, dn1);
  kernels::layer_norm_backward(tr.n1, tr.inv1, dn1, dln);
  for (std::size_t i = 0; i < dx.size(); ++i) dx.data[i] += dln.data[i];
}

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 1469598103934665603ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

std::string to_string(StreamTag tag) {
  switch (tag) {
    case StreamTag::noisy: return "noisy";
    case StreamTag::query: return "query";
    case StreamTag::demo: return "demo";
    case StreamTag::prompt: return "prompt";
  }
  return "noisy";
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"patch", c.patch},       {"channels", c.channels},     {"dim", c.dim},
          {"blocks", c.blocks},     {"heads", c.heads},           {"ffn_mult", c.ffn_mult},
          {"prompt_len", c.prompt_len}, {"vocab", c.vocab},       {"seed", c.seed}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.patch = j.value("patch", c.patch);
  c.channels = j.value("channels", c.channels);
  c.dim = j.value("dim", c.dim);
  c.blocks = j.value("blocks", c.blocks);
  c.heads = j.value("heads", c.heads);
  c.ffn_mult = j.value("ffn_mult", c.ffn_mult);
  c.prompt_len = j.value("prompt_len", c.prompt_len);
  c.vocab = j.value("vocab", c.vocab);
  c.seed = j.value("seed", c.seed);
  return c;
}

LatentGrid LatentCodec::encode(const ImageTensor& img, StreamTag tag) const {
  const int p = patch;
  if (p <= 0 || img.height % p != 0 || img.width % p != 0) {
    throw Error("encode_latent: image " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                " is not divisible by patch " + std::to_string(p));
  }
  const int ld = p * p * ImageTensor::kChannels;
  require_shape(projection.value, static_cast<std::size_t>(ld), static_cast<std::size_t>(ld), "codec projection");
  const int h = img.height / p, w = img.width / p;
  Matrix s2d(static_cast<std::size_t>(h) * w, ld);
  for (int gy = 0; gy < h; ++gy) {
    for (int gx = 0; gx < w; ++gx) {
      double* row = s2d.data.data() + (static_cast<std::size_t>(gy) * w + gx) * ld;
      for (int dy = 0; dy < p; ++dy) {
        for (int dx = 0; dx < p; ++dx) {
          for (int c = 0; c < ImageTensor::kChannels; ++c) {
            row[(dy * p + dx) * ImageTensor::kChannels + c] = img.at(gy * p + dy, gx * p + dx, c);
          }
        }
      }
    }
  }
  LatentGrid grid(h, w, ld, tag);
  kernels::matmul(s2d, projection.value, grid.data);
  return grid;
}

ImageTensor LatentCodec::decode(const LatentGrid& grid, std::size_t* clamped) const {
  const int p = patch;
  const int ld = p * p * ImageTensor::kChannels;
  if (grid.dim != ld || grid.data.cols != static_cast<std::size_t>(ld)) {
    throw Error("decode_latent: grid width " + std::to_string(grid.dim) + " does not match codec width " +
                std::to_string(ld));
  }
  Matrix s2d;
  kernels::matmul_nt(grid.data, projection.value, s2d);
  ImageTensor img(grid.h * p, grid.w * p);
  std::size_t count = 0;
  for (int gy = 0; gy < grid.h; ++gy) {
    for (int gx = 0; gx < grid.w; ++gx) {
      const double* row = s2d.data.data() + (static_cast<std::size_t>(gy) * grid.w + gx) * ld;
      for (int dy = 0; dy < p; ++dy) {
        for (int dx = 0; dx < p; ++dx) {
          for (int c = 0; c < ImageTensor::kChannels; ++c) {
            double v = row[(dy * p + dx) * ImageTensor::kChannels + c];
            if (v < -1.0 || v > 1.0 || std::isnan(v)) {
              ++count;
              v = std::isnan(v) ? 0.0 : std::clamp(v, -1.0, 1.0);
            }
            img.at(gy * p + dy, gx * p + dx, c) = v;
          }
        }
      }
    }
  }
  if (clamped) *clamped = count;
  return img;
}

void ModelState::for_each_param(const std::function<void(Param&)>& fn) {
  fn(codec.projection);
  visit_linear(x_embed, fn);
  fn(stream_embed);
  fn(prompt_table);
  fn(prompt_pos);
  fn(pos_lift);
  visit_linear(t_embed1, fn);
  visit_linear(t_embed2, fn);
  for (Block& b : blocks) {
    visit_linear(b.modulation, fn);
    for (auto& [name, l] : block_linears(b)) visit_linear(*l, fn);
  }
  visit_linear(final_modulation, fn);
  visit_linear(out_proj, fn);
}

void ModelState::for_each_param(const std::function<void(const Param&)>& fn) const {
  const_cast<ModelState*>(this)->for_each_param([&](Param& p) { fn(p); });
}

Param* ModelState::find_param(const std::string& name) {
  Param* found = nullptr;
  for_each_param([&](Param& p) {
    if (p.name == name) found = &p;
  });
  return found;
}

namespace {

// Layout of the frozen base when the width allows it (see backbone.hpp).
constexpr int kPositionCodeDim = 12;
constexpr double kPositionBase = 4.0;
constexpr double kPositionScale = 3.0;
constexpr int kPositionHeads = 2;
constexpr double kPositionSharpness = 3.0;
constexpr double kAttnGate = 1.0;
constexpr double kFfnGate = 0.1;

bool structured_layout(const ModelConfig& c) {
  return c.dim >= 1 + c.latent_dim() + kPositionCodeDim && c.heads >= kPositionHeads;
}

// Random orthonormal rows; row 0 is the constant direction that layer norm
// removes, so every other row survives normalization untouched.
Matrix orthonormal_basis(std::size_t d, Rng& rng) {
  Matrix u(d, d);
  fill_normal(u, 1.0, rng);
  for (std::size_t j = 0; j < d; ++j) u(0, j) = 1.0;
  for (std::size_t r = 0; r < d; ++r) {
    for (std::size_t q = 0; q < r; ++q) {
      double dot = 0;
      for (std::size_t j = 0; j < d; ++j) dot += u(r, j) * u(q, j);
      for (std::size_t j = 0; j < d; ++j) u(r, j) -= dot * u(q, j);
    }
    double n = 0;
    for (std::size_t j = 0; j < d; ++j) n += u(r, j) * u(r, j);
    n = std::sqrt(n);
    for (std::size_t j = 0; j < d; ++j) u(r, j) /= n;
  }
  return u;
}

}  // namespace

ModelState make_model(const ModelConfig& c) {
  if (c.patch <= 0 || c.dim <= 0 || c.blocks <= 0 || c.heads <= 0) throw Error("model config: sizes must be positive");
  if (c.dim % c.heads != 0) throw Error("model config: dim must be divisible by heads");
  if (c.channels != ImageTensor::kChannels) throw Error("model config: channels must be 3");
  if (c.vocab <= 0 || c.prompt_len <= 0) throw Error("model config: prompt sizes must be positive");

  Rng rng(c.seed);
  const std::size_t d = static_cast<std::size_t>(c.dim);
  const std::size_t ld = static_cast<std::size_t>(c.latent_dim());
  const std::size_t pd = kPositionCodeDim;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

  ModelState s;
  s.config = c;
  s.codec.patch = c.patch;
  s.codec.projection = make_param("codec.projection", ld, ld);
  for (std::size_t i = 0; i < ld; ++i) s.codec.projection.value(i, i) = 1.0;

  s.x_embed = make_linear("x_embed", ld, d, 1.0 / std::sqrt(static_cast<double>(ld)), rng);
  s.stream_embed = make_param("stream_embed", kStreamCount, d);
  fill_normal(s.stream_embed.value, 0.5, rng);
  s.prompt_table = make_param("prompt_table", static_cast<std::size_t>(c.vocab), d);
  fill_normal(s.prompt_table.value, 0.5, rng);
  s.prompt_pos = make_param("prompt_pos", static_cast<std::size_t>(c.prompt_len), d);
  fill_normal(s.prompt_pos.value, 0.1, rng);
  s.t_embed1 = make_linear("t_embed1", d, d, inv_sqrt_d, rng);
  s.t_embed2 = make_linear("t_embed2", d, d, inv_sqrt_d, rng);

  const std::size_t hidden = d * static_cast<std::size_t>(c.ffn_mult);
  for (int i = 0; i < c.blocks; ++i) {
    const std::string pre = "blocks." + std::to_string(i) + ".";
    Block b;
    b.modulation = make_linear(pre + "modulation", d, 6 * d, 0.02, rng);
    for (std::size_t j = 0; j < d; ++j) {
      b.modulation.bias.value(0, 2 * d + j) = kAttnGate;
      b.modulation.bias.value(0, 5 * d + j) = kFfnGate;
    }
    b.q = make_linear(pre + "attn.q", d, d, inv_sqrt_d, rng);
    b.k = make_linear(pre + "attn.k", d, d, inv_sqrt_d, rng);
    b.v = make_linear(pre + "attn.v", d, d, inv_sqrt_d, rng);
    b.o = make_linear(pre + "attn.o", d, d, inv_sqrt_d, rng);
    b.ffn_in = make_linear(pre + "ffn.in", d, hidden, inv_sqrt_d, rng);
    b.ffn_out = make_linear(pre + "ffn.out", hidden, d, 1.0 / std::sqrt(static_cast<double>(hidden)), rng);
    s.blocks.push_back(std::move(b));
  }
  s.final_modulation = make_linear("final_modulation", d, 2 * d, 0.02, rng);
  s.out_proj = make_linear("out_proj", d, ld, inv_sqrt_d, rng);
  s.pos_lift = make_param("pos_lift", pd, d);

  if (!structured_layout(c)) {
    fill_normal(s.pos_lift.value, 1.0 / std::sqrt(static_cast<double>(pd)), rng);
    return s;
  }

  // Content rows 1..ld, position rows ld+1..ld+pd, the rest unused.
  const Matrix u = orthonormal_basis(d, rng);
  for (std::size_t r = 0; r < ld; ++r) {
    for (std::size_t j = 0; j < d; ++j) s.x_embed.weight.value(r, j) = u(1 + r, j);
  }
  s.x_embed.bias.value.fill(0.0);
  for (std::size_t r = 0; r < pd; ++r) {
    for (std::size_t j = 0; j < d; ++j) s.pos_lift.value(r, j) = kPositionScale * u(1 + ld + r, j);
  }

  // Positional heads: shared query/key map that reads only the position
  // subspace, so a token attends to tokens at its own grid cell.
  const std::size_t hd = d / static_cast<std::size_t>(c.heads);
  for (Block& b : s.blocks) {
    for (std::size_t h = 0; h < static_cast<std::size_t>(kPositionHeads); ++h) {
      Matrix r(pd, hd);
      fill_normal(r, 1.0 / std::sqrt(static_cast<double>(pd)), rng);
      for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t o = 0; o < hd; ++o) {
          double v = 0;
          for (std::size_t k = 0; k < pd; ++k) v += u(1 + ld + k, i) * r(k, o);
          b.q.weight.value(i, h * hd + o) = b.k.weight.value(i, h * hd + o) = kPositionSharpness * v;
        }
      }
      for (std::size_t o = 0; o < hd; ++o) b.q.bias.value(0, h * hd + o) = b.k.bias.value(0, h * hd + o) = 0.0;
    }
  }

  // Readout tied to the content embedding.
  const double gain = std::sqrt(2.0 * static_cast<double>(ld) / static_cast<double>(d));
  for (std::size_t r = 0; r < ld; ++r) {
    for (std::size_t j = 0; j < d; ++j) s.out_proj.weight.value(j, r) = gain * u(1 + r, j);
  }
  s.out_proj.bias.value.fill(0.0);
  return s;
}

std::vector<std::string> available_lora_targets() {
  return {"attn.q", "attn.k", "attn.v", "attn.o", "ffn.in", "ffn.out"};
}

void apply_lora(ModelState& state, int rank, double alpha, const std::vector<std::string>& targets,
                std::uint64_t seed) {
  if (rank <= 0) throw Error("apply_lora: rank must be positive");
  if (!state.lora_targets.empty()) throw Error("apply_lora: adapters already applied");
  const auto known = available_lora_targets();
  std::set<std::string> wanted;
  for (const std::string& t : targets) {
    if (std::find(known.begin(), known.end(), t) == known.end()) throw Error("apply_lora: unknown target '" + t + "'");
    wanted.insert(t);
  }
  Rng rng(seed);
  for (std::size_t i = 0; i < state.blocks.size(); ++i) {
    for (auto& [name, l] : block_linears(state.blocks[i])) {
      if (!wanted.count(name)) continue;
      const std::string pre = "blocks." + std::to_string(i) + "." + name;
      LoraAdapter a{make_param(pre + ".lora_a", l->in(), static_cast<std::size_t>(rank)),
                    make_param(pre + ".lora_b", static_cast<std::size_t>(rank), l->out()), rank,
                    alpha / static_cast<double>(rank)};
      fill_normal(a.a.value, 1.0 / std::sqrt(static_cast<double>(l->in())), rng);
      l->lora = std::move(a);
    }
  }
  state.lora_targets.assign(wanted.begin(), wanted.end());
  train_mask(state);
}

void apply_lora(ModelState& state, int rank, double alpha, const std::vector<std::string>& targets) {
  apply_lora(state, rank, alpha, targets, state.config.seed ^ 0x9e3779b97f4a7c15ULL);
}

std::vector<std::string> train_mask(ModelState& state) {
  state.for_each_param([](Param& p) { p.trainable = false; });
  std::vector<std::string> names;
  const auto mark = [&](Param& p) {
    p.trainable = true;
    names.push_back(p.name);
  };
  mark(state.stream_embed);
  mark(state.prompt_table);
  mark(state.prompt_pos);
  for (Block& b : state.blocks) {
    for (auto& [name, l] : block_linears(b)) {
      if (l->lora) {
        mark(l->lora->a);
        mark(l->lora->b);
      }
    }
  }
  return names;
}

ParamCounts count_params(const ModelState& state) {
  ParamCounts c;
  state.for_each_param([&](const Param& p) {
    const std::string& n = p.name;
    if (n.ends_with(".lora_a") || n.ends_with(".lora_b")) {
      c.lora += p.value.size();
    } else if (n == "stream_embed" || n == "prompt_table" || n == "prompt_pos") {
      c.embeddings += p.value.size();
    } else if (n != "codec.projection" && n != "pos_lift") {
      c.base += p.value.size();
    }
  });
  return c;
}

std::uint64_t frozen_checksum(const ModelState& state) {
  std::uint64_t h = 1469598103934665603ULL;
  state.for_each_param([&](const Param& p) {
    if (p.trainable) return;
    h = fnv1a(p.name.data(), p.name.size(), h);
    h = fnv1a(p.value.data.data(), p.value.data.size() * sizeof(double), h);
  });
  return h;
}

void zero_grads(ModelState& state) {
  state.for_each_param([](Param& p) {
    if (!p.trainable) {
      p.grad = Matrix();
      return;
    }
    if (!p.grad.same_shape(p.value)) p.grad = Matrix(p.value.rows, p.value.cols);
    p.grad.fill(0.0);
  });
}

TokenSequence embed_latent(const ModelState& state, const LatentGrid& grid) {
  if (grid.dim != state.config.latent_dim()) {
    throw Error("embed_latent: grid width " + std::to_string(grid.dim) + " != latent width " +
                std::to_string(state.config.latent_dim()));
  }
  TokenSequence seq;
  linear_forward(state.x_embed, grid.data, seq.data, nullptr);
  seq.tag = grid.tag;
  seq.grid_h = grid.h;
  seq.grid_w = grid.w;
  return seq;
}

std::vector<std::string> tokenize_prompt(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::vector<std::string> out;
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

int prompt_token_id(std::string_view token, int vocab) {
  return static_cast<int>(fnv1a(token.data(), token.size()) % static_cast<std::uint64_t>(vocab));
}

TokenSequence embed_prompt(const ModelState& state, std::string_view text) {
  std::vector<std::string> tokens = tokenize_prompt(text);
  if (tokens.size() > static_cast<std::size_t>(state.config.prompt_len)) tokens.resize(state.config.prompt_len);
  TokenSequence seq;
  seq.tag = StreamTag::prompt;
  seq.data = Matrix(tokens.size(), static_cast<std::size_t>(state.config.dim));
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const int id = prompt_token_id(tokens[i], state.config.vocab);
    seq.token_ids.push_back(id);
    const auto src = state.prompt_table.value.row(static_cast<std::size_t>(id));
    std::copy(src.begin(), src.end(), seq.data.row(i).begin());
  }
  return seq;
}

const Matrix& grid_position_table(int h, int w, int dim, double base) {
  static std::mutex mu;
  static std::map<std::tuple<int, int, int, double>, Matrix> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto it = cache.find({h, w, dim, base});
  if (it != cache.end()) return it->second;
  if (dim % 4 != 0) throw Error("grid_position_table: dim must be a multiple of 4");
  if (!(base > 1.0)) throw Error("grid_position_table: base must exceed 1");
  Matrix m(static_cast<std::size_t>(h) * w, static_cast<std::size_t>(dim));
  const int quarter = dim / 4;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double* row = m.data.data() + (static_cast<std::size_t>(y) * w + x) * dim;
      for (int k = 0; k < quarter; ++k) {
        const double omega = std::pow(base, -static_cast<double>(k) / quarter);
        row[k] = std::sin(y * omega);
        row[quarter + k] = std::cos(y * omega);
        row[2 * quarter + k] = std::sin(x * omega);
        row[3 * quarter + k] = std::cos(x * omega);
      }
    }
  }
  return cache.emplace(std::tuple{h, w, dim, base}, std::move(m)).first->second;
}

std::vector<double> timestep_features(double t, int dim) {
  const int half = dim / 2;
  std::vector<double> f(static_cast<std::size_t>(dim), 0.0);
  for (int k = 0; k < half; ++k) {
    const double freq = std::exp(-std::log(10000.0) * k / half);
    const double arg = 1000.0 * t * freq;
    f[k] = std::cos(arg);
    f[half + k] = std::sin(arg);
  }
  return f;
}

std::size_t attended_length(std::span<const TokenSequence> streams) {
  std::size_t n = 0;
  for (const TokenSequence& s : streams) n += s.length();
  return n;
}

std::vector<TokenSequence> mma_forward(const ModelState& state, std::span<const TokenSequence> streams, double t,
                                       MmaTrace* trace) {
  const std::size_t d = static_cast<std::size_t>(state.config.dim);
  if (!(t >= 0.0 && t <= 1.0)) throw Error("mma_forward: timestep outside [0, 1]");
  bool has_noisy = false;
  for (const TokenSequence& s : streams) {
    if (s.length() > 0 && s.dim() != d) {
      throw Error("mma_forward: stream '" + to_string(s.tag) + "' has width " + std::to_string(s.dim()) +
                  ", model width is " + std::to_string(d));
    }
    has_noisy = has_noisy || s.tag == StreamTag::noisy;
  }
  if (!has_noisy) throw Error("mma_forward: no noisy stream");

  MmaTrace local;
  MmaTrace& tr = trace ? *trace : local;
  tr.tags.clear();
  tr.lengths.clear();
  tr.token_ids.clear();

  // Concatenate with stream and positional embeddings.
  Matrix x(attended_length(streams), d);
  std::size_t row = 0;
  for (const TokenSequence& s : streams) {
    tr.tags.push_back(s.tag);
    tr.lengths.push_back(s.length());
    tr.token_ids.push_back(s.token_ids);
    if (s.length() == 0) continue;
    const auto se = state.stream_embed.value.row(static_cast<std::size_t>(s.tag));
    Matrix pe;
    if (s.tag == StreamTag::prompt) {
      if (s.length() > static_cast<std::size_t>(state.config.prompt_len)) throw Error("mma_forward: prompt too long");
    } else {
      if (static_cast<std::size_t>(s.grid_h) * s.grid_w != s.length()) {
        throw Error("mma_forward: image stream '" + to_string(s.tag) + "' lacks a consistent grid size");
      }
      kernels::matmul(grid_position_table(s.grid_h, s.grid_w, kPositionCodeDim, kPositionBase), state.pos_lift.value,
                      pe);
    }
    for (std::size_t r = 0; r < s.length(); ++r, ++row) {
      const auto p = s.tag == StreamTag::prompt ? state.prompt_pos.value.row(r) : pe.row(r);
      for (std::size_t j = 0; j < d; ++j) x(row, j) = s.data(r, j) + se[j] + p[j];
    }
  }

  tr.cond = timestep_condition(state, t);
  tr.blocks.resize(state.blocks.size());
  for (std::size_t b = 0; b < state.blocks.size(); ++b) {
    block_forward(state.blocks[b], state.config.heads, tr.cond, x, tr.blocks[b]);
  }

  std::vector<TokenSequence> out;
  row = 0;
  for (const TokenSequence& s : streams) {
    TokenSequence o;
    o.tag = s.tag;
    o.grid_h = s.grid_h;
    o.grid_w = s.grid_w;
    o.token_ids = s.token_ids;
    o.data = Matrix(s.length(), d);
    std::copy(x.data.begin() + static_cast<std::ptrdiff_t>(row * d),
              x.data.begin() + static_cast<std::ptrdiff_t>((row + s.length()) * d), o.data.data.begin());
    row += s.length();
    out.push_back(std::move(o));
  }
  if (trace) tr.x_out = std::move(x);
  return out;
}

LatentGrid forward_velocity(const ModelState& state, const LatentGrid& z_t, const LatentGrid& query,
                            const std::optional<TokenSequence>& demo, const TokenSequence& prompt, double t,
                            VelocityTrace* trace) {
  if (!z_t.same_shape(query)) throw Error("forward_velocity: noisy and query latents differ in shape");
  std::vector<TokenSequence> streams;
  streams.push_back(embed_latent(state, z_t));
  streams.back().tag = StreamTag::noisy;
  streams.push_back(embed_latent(state, query));
  streams.back().tag = StreamTag::query;
  if (demo) {
    streams.push_back(*demo);
    streams.back().tag = StreamTag::demo;
  }
  streams.push_back(prompt);
  streams.back().tag = StreamTag::prompt;

  VelocityTrace local;
  VelocityTrace& tr = trace ? *trace : local;
  const std::vector<TokenSequence> out = mma_forward(state, streams, t, &tr.mma);
  tr.noisy_offset = 0;
  tr.noisy_len = out[0].length();
  tr.grid_h = z_t.h;
  tr.grid_w = z_t.w;

  const std::size_t d = static_cast<std::size_t>(state.config.dim);
  tr.final_mod = modulation_vector(state.final_modulation, tr.mma.cond);
  kernels::layer_norm(out[0].data, tr.nf, tr.invf, kLnEps);
  modulate(tr.nf, tr.final_mod, 0, d, tr.hf);
  LatentGrid v(z_t.h, z_t.w, z_t.dim, StreamTag::noisy);
  linear_forward(state.out_proj, tr.hf, v.data, &tr.tout);
  return v;
}

void backward_velocity(ModelState& state, const VelocityTrace& trace, const LatentGrid& d_velocity) {
  for (const Param* p : {&state.codec.projection, &state.pos_lift, &state.x_embed.weight, &state.x_embed.bias, &state.t_embed1.weight,
                         &state.t_embed2.weight, &state.final_modulation.weight}) {
    if (p->trainable) throw Error("backward_velocity: '" + p->name + "' is not on the trainable path");
  }
  for (const Block& b : state.blocks) {
    if (b.modulation.weight.trainable || b.modulation.bias.trainable) {
      throw Error("backward_velocity: block modulation is not on the trainable path");
    }
  }
  const std::size_t d = static_cast<std::size_t>(state.config.dim);
  if (d_velocity.data.rows != trace.noisy_len) throw Error("backward_velocity: gradient shape mismatch");

  Matrix dhf, dnf, dnoisy;
  linear_backward(state.out_proj, trace.hf, trace.tout, d_velocity.data, dhf, false);
  scale_columns(dhf, trace.final_mod, d, true, dnf);
  kernels::layer_norm_backward(trace.nf, trace.invf, dnf, dnoisy);

  const std::size_t total = trace.mma.x_out.rows;
  Matrix dx(total, d);
  std::copy(dnoisy.data.begin(), dnoisy.data.end(),
            dx.data.begin() + static_cast<std::ptrdiff_t>(trace.noisy_offset * d));
  for (std::size_t b = state.blocks.size(); b-- > 0;) {
    block_backward(state.blocks[b], state.config.heads, trace.mma.blocks[b], dx);
  }

  // Scatter into the embedding tables.
  std::size_t row = 0;
  for (std::size_t s = 0; s < trace.mma.tags.size(); ++s) {
    const StreamTag tag = trace.mma.tags[s];
    for (std::size_t r = 0; r < trace.mma.lengths[s]; ++r, ++row) {
      const auto g = dx.row(row);
      if (state.stream_embed.trainable) {
        if (!state.stream_embed.grad.same_shape(state.stream_embed.value)) zero_grads(state);
        auto dst = state.stream_embed.grad.row(static_cast<std::size_t>(tag));
        for (std::size_t j = 0; j < d; ++j) dst[j] += g[j];
      }
      if (tag != StreamTag::prompt) continue;
      if (state.prompt_pos.trainable) {
        if (!state.prompt_pos.grad.same_shape(state.prompt_pos.value)) zero_grads(state);
        auto dst = state.prompt_pos.grad.row(r);
        for (std::size_t j = 0; j < d; ++j) dst[j] += g[j];
      }
      if (state.prompt_table.trainable && !trace.mma.token_ids[s].empty()) {
        if (!state.prompt_table.grad.same_shape(state.prompt_table.value)) zero_grads(state);
        auto dst = state.prompt_table.grad.row(static_cast<std::size_t>(trace.mma.token_ids[s][r]));
        for (std::size_t j = 0; j < d; ++j) dst[j] += g[j];
      }
    }
  }
}

}  // namespace densedit
