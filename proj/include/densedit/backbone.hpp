#pragma once

// Toy diffusion-transformer backbone.
//
// Images enter through a lossless latent codec (space-to-depth followed by an
// orthogonal projection). Every token stream (noisy latent, query latent,
// demonstration latent, prompt) is concatenated into one sequence and
// processed by stacked joint-attention blocks, each modulated by the timestep
// embedding through adaptive layer norm. Only the noisy stream's output tokens
// are projected back to velocity space.
//
// Base weights are frozen after apply_lora(); gradients flow into the LoRA
// factors and the trainable embedding tables (stream, prompt vocabulary,
// prompt positions).
//
// There are no pretrained weights at this scale, so when the width leaves room
// (dim >= latent_dim + 13) the frozen base is given the structure a pretrained
// editing backbone would bring: an orthonormal split of the model width into
// content, position and spare directions; image positions as a fixed 12-wide
// 2-D sin-cos code lifted into the position directions; two heads per block
// whose shared query/key map reads only position, so every token attends to
// the tokens at its own grid cell in all image streams; and a readout tied to
// the content embedding. Narrower models use a plain random base.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "densedit/matrix.hpp"
#include "densedit/task_codec.hpp"

namespace densedit {

enum class StreamTag { noisy = 0, query = 1, demo = 2, prompt = 3 };
inline constexpr int kStreamCount = 4;
std::string to_string(StreamTag tag);

/// h x w grid of latent tokens, stored row-major as (h*w) x dim.
struct LatentGrid {
  int h = 0;
  int w = 0;
  int dim = 0;
  Matrix data;
  StreamTag tag = StreamTag::noisy;

  LatentGrid() = default;
  LatentGrid(int h_, int w_, int dim_, StreamTag tag_ = StreamTag::noisy)
      : h(h_), w(w_), dim(dim_), data(static_cast<std::size_t>(h_) * w_, dim_), tag(tag_) {}
  bool same_shape(const LatentGrid& o) const { return h == o.h && w == o.w && dim == o.dim; }
};

/// Model-width tokens of one stream. Image streams keep their grid size for
/// 2-D positions; prompt streams keep their vocabulary ids.
struct TokenSequence {
  Matrix data;
  StreamTag tag = StreamTag::prompt;
  int grid_h = 0;
  int grid_w = 0;
  std::vector<int> token_ids;

  std::size_t length() const { return data.rows; }
  std::size_t dim() const { return data.cols; }
};

struct ModelConfig {
  int patch = 4;
  int channels = 3;
  int dim = 64;
  int blocks = 2;
  int heads = 4;
  int ffn_mult = 4;
  int prompt_len = 16;
  int vocab = 4096;
  std::uint64_t seed = 0;

  int latent_dim() const { return patch * patch * channels; }
  bool operator==(const ModelConfig&) const = default;
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

struct Param {
  std::string name;
  Matrix value;
  Matrix grad;
  bool trainable = false;
};

struct LoraAdapter {
  Param a;  // in x rank
  Param b;  // rank x out
  int rank = 0;
  double scale = 1.0;  // alpha / rank
};

/// y = x W + b [+ scale * (x A) B]
struct Linear {
  Param weight;  // in x out
  Param bias;    // 1 x out
  std::optional<LoraAdapter> lora;

  std::size_t in() const { return weight.value.rows; }
  std::size_t out() const { return weight.value.cols; }
};

struct Block {
  Linear modulation;  // dim -> 6*dim: shift1, scale1, gate1, shift2, scale2, gate2
  Linear q, k, v, o;
  Linear ffn_in, ffn_out;
};

/// Space-to-depth by `patch` followed by an orthogonal projection; the same
/// codec encodes targets, queries and demonstrations.
struct LatentCodec {
  int patch = 4;
  Param projection;  // latent_dim x latent_dim, orthogonal

  LatentGrid encode(const ImageTensor& img, StreamTag tag) const;
  /// Output is clamped to [-1, +1]; `clamped` receives the clamp count.
  ImageTensor decode(const LatentGrid& grid, std::size_t* clamped = nullptr) const;
};

struct ModelState {
  ModelConfig config;
  LatentCodec codec;
  Linear x_embed;       // latent_dim -> dim, shared by all image streams
  Param stream_embed;   // kStreamCount x dim
  Param prompt_table;   // vocab x dim
  Param prompt_pos;     // prompt_len x dim
  Param pos_lift;       // 2-D sin-cos code -> dim for image streams, frozen
  Linear t_embed1, t_embed2;
  std::vector<Block> blocks;
  Linear final_modulation;  // dim -> 2*dim: shift, scale
  Linear out_proj;          // dim -> latent_dim
  std::vector<std::string> lora_targets;

  void for_each_param(const std::function<void(Param&)>& fn);
  void for_each_param(const std::function<void(const Param&)>& fn) const;
  Param* find_param(const std::string& name);
};

/// Deterministic base initialization from config.seed; no adapters.
ModelState make_model(const ModelConfig& config);

inline const std::vector<std::string> kDefaultLoraTargets{"attn.q", "attn.k", "attn.v", "attn.o"};
std::vector<std::string> available_lora_targets();

/// Adds adapters (A random-normal, B zero) to the named projection of every
/// block and freezes the base. Throws on an unknown target.
void apply_lora(ModelState& state, int rank, double alpha, const std::vector<std::string>& targets,
                std::uint64_t seed);
void apply_lora(ModelState& state, int rank = 4, double alpha = 4.0,
                const std::vector<std::string>& targets = kDefaultLoraTargets);

/// Marks LoRA factors and embedding tables trainable, everything else frozen.
/// Returns the names of the trainable parameters.
std::vector<std::string> train_mask(ModelState& state);

struct ParamCounts {
  std::size_t lora = 0;
  std::size_t base = 0;        // frozen backbone weights (codec and embedding tables excluded)
  std::size_t embeddings = 0;  // stream / prompt tables
  double lora_fraction() const { return base == 0 ? 0.0 : static_cast<double>(lora) / static_cast<double>(base); }
};
ParamCounts count_params(const ModelState& state);

/// FNV-1a over the bytes of every frozen tensor.
std::uint64_t frozen_checksum(const ModelState& state);

void zero_grads(ModelState& state);

TokenSequence embed_latent(const ModelState& state, const LatentGrid& grid);

std::vector<std::string> tokenize_prompt(std::string_view text);
int prompt_token_id(std::string_view token, int vocab);
/// Whitespace tokens, hashed into the vocabulary, truncated to prompt_len.
TokenSequence embed_prompt(const ModelState& state, std::string_view text);

/// Activations kept for the backward pass.
struct LinearTrace {
  Matrix lora_hidden;  // x A
};

struct BlockTrace {
  Matrix x_in;
  std::vector<double> mod;  // 6*dim
  Matrix n1;
  std::vector<double> inv1;
  Matrix h1;
  Matrix q, k, v;
  std::vector<Matrix> probs;
  Matrix attn;
  Matrix attn_out;
  Matrix x_mid;
  Matrix n2;
  std::vector<double> inv2;
  Matrix h2;
  Matrix ffn_pre;
  Matrix ffn_act;
  Matrix ffn_out;
  LinearTrace tq, tk, tv, to, tffn_in, tffn_out;
};

struct MmaTrace {
  std::vector<StreamTag> tags;
  std::vector<std::size_t> lengths;
  std::vector<std::vector<int>> token_ids;
  std::vector<BlockTrace> blocks;
  std::vector<double> cond;  // SiLU(timestep embedding)
  Matrix x_out;
};

struct VelocityTrace {
  MmaTrace mma;
  std::size_t noisy_offset = 0;
  std::size_t noisy_len = 0;
  int grid_h = 0, grid_w = 0;
  Matrix nf;
  std::vector<double> invf;
  Matrix hf;
  std::vector<double> final_mod;
  LinearTrace tout;
};

/// Number of tokens attended jointly for the given streams.
std::size_t attended_length(std::span<const TokenSequence> streams);

/// Joint attention over the concatenation of `streams`; returns per-stream
/// outputs in the input order. Requires equal widths and a noisy stream.
std::vector<TokenSequence> mma_forward(const ModelState& state, std::span<const TokenSequence> streams, double t,
                                       MmaTrace* trace = nullptr);

/// v(z_t, z', t, C_d, C_p): shape of z_t.
LatentGrid forward_velocity(const ModelState& state, const LatentGrid& z_t, const LatentGrid& query,
                            const std::optional<TokenSequence>& demo, const TokenSequence& prompt, double t,
                            VelocityTrace* trace = nullptr);

/// Accumulates d(loss)/d(param) into Param::grad for trainable parameters,
/// given d(loss)/d(velocity).
void backward_velocity(ModelState& state, const VelocityTrace& trace, const LatentGrid& d_velocity);

/// Fixed 2-D sin-cos table for an h x w grid, (h*w) x dim; frequencies
/// base^(-k / (dim/4)) per axis.
const Matrix& grid_position_table(int h, int w, int dim, double base = 10000.0);
std::vector<double> timestep_features(double t, int dim);

}  // namespace densedit
