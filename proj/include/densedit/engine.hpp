#pragma once

// Flow-matching training and sampling.
//
// The noised quantity is the latent of the standardized label image; the
// query latent is clean conditioning. Path: z_t = (1 - t) z_0 + t eps with
// target velocity u = eps - z_0, t ~ U(0, 1), eps ~ N(0, I).

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "densedit/backbone.hpp"
#include "densedit/registry.hpp"

namespace densedit {

using Rng = std::mt19937_64;

enum class LossMode { l2, l1 };
enum class DemoGating { by_dai, force_on, force_off };

std::string to_string(LossMode m);
LossMode loss_mode_from_string(const std::string& s);
std::string to_string(DemoGating g);
/// Accepts "by-dai"/"by_dai", "on"/"force_on", "off"/"force_off".
DemoGating demo_gating_from_string(const std::string& s);

struct TrainConfig {
  /// One id trains a single task; several ids train one mixed model.
  std::vector<std::string> tasks;
  std::uint64_t steps = 2000;
  double learning_rate = 1e-3;
  int batch_size = 1;
  int accumulation = 8;
  LossMode loss = LossMode::l2;
  std::uint64_t seed = 0;
  PromptMode prompt_mode = PromptMode::with;
  DemoGating demo_gating = DemoGating::by_dai;
  std::size_t n_train = kDefaultTrainSamples;
  /// Restrict each task's training pool to its first k samples (0 = all).
  std::size_t max_train_samples = 0;
  std::uint64_t checkpoint_every = 0;
  std::filesystem::path checkpoint_dir;
};

nlohmann::json to_json(const TrainConfig& c);
/// Missing keys keep their defaults; validates the result.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});
void validate(const TrainConfig& c);

struct FlowPair {
  LatentGrid z0;
  LatentGrid eps;
  double t = 0.0;
  LatentGrid zt;
  LatentGrid u;
};

/// Draws eps and t from rng (eps first, then t).
FlowPair make_flow_pair(const LatentGrid& z0, Rng& rng);
FlowPair make_flow_pair(const LatentGrid& z0, const LatentGrid& eps, double t);
FlowPair make_flow_pair(const ImageTensor& target, const LatentCodec& codec, Rng& rng);

struct DemoPair {
  ImageTensor query;   // I_Q
  ImageTensor target;  // I_T, standardized label
  ImageTensor composite;
};

DemoPair make_demo_pair(const ImageTensor& query, const ImageTensor& target);

bool demo_enabled(const TaskSpec& task, DemoGating gating);

struct Conditioning {
  LatentGrid query;  // z'
  std::optional<TokenSequence> demo;
  TokenSequence prompt;
};

/// Throws when the demo branch is enabled but no pair is given, or when the
/// pair's query image equals `query`.
Conditioning assemble_conditioning(const ModelState& state, const TaskSpec& task, const ImageTensor& query,
                                   const std::optional<DemoPair>& demo, PromptMode prompt_mode,
                                   DemoGating gating = DemoGating::by_dai);

struct LossResult {
  double loss = 0.0;
  LatentGrid grad;  // d loss / d prediction
};

/// Mean squared (L2) or mean absolute (L1) residual over all elements.
LossResult training_loss(const LatentGrid& prediction, const LatentGrid& target, LossMode mode);

/// Forward + loss + backward for one pair; gradients are scaled by
/// `grad_scale` and accumulated into the trainable parameters.
double micro_step(ModelState& state, const FlowPair& pair, const Conditioning& cond, LossMode mode,
                  double grad_scale);

class AdamOptimizer {
 public:
  explicit AdamOptimizer(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}
  void step(ModelState& state);
  std::uint64_t steps() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::uint64_t t_ = 0;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments_;
};

struct DemoChoice {
  std::size_t index = 0;
  DemoPair pair;
};

/// The task's fixed demonstration pair, drawn by `seed` from the training
/// split; empty when the gating disables the branch.
std::optional<DemoChoice> choose_demo(const Registry& registry, const TaskSpec& task, const SplitSpec& split,
                                      std::uint64_t seed, DemoGating gating);

/// Per-task training data: encoded latents for the query pool plus the fixed
/// demonstration pair (when the branch is enabled).
struct TaskData {
  const TaskSpec* task = nullptr;
  SplitSpec split;
  std::vector<std::size_t> pool;  // sample indices usable as queries
  std::vector<ImageTensor> queries;
  std::vector<LatentGrid> query_latents;
  std::vector<LatentGrid> target_latents;
  std::optional<DemoPair> demo;
  std::optional<std::size_t> demo_index;
};

/// The demo pair is drawn by `seed` from the training split and removed from
/// the query pool.
TaskData prepare_task(const Registry& registry, const TaskSpec& task, const ModelState& state, std::uint64_t seed,
                      std::size_t n_train, DemoGating gating, std::size_t max_train_samples = 0);

struct TrainResult {
  std::vector<double> loss_history;  // one entry per optimizer step
  std::uint64_t steps = 0;
  std::vector<std::filesystem::path> checkpoints;
};

using ProgressFn = std::function<void(std::uint64_t step, double loss)>;

/// Deterministic for a fixed config. Throws Error on a non-finite loss; when
/// checkpointing is enabled the last periodic checkpoint stays valid.
TrainResult train(const TrainConfig& config, const Registry& registry, ModelState& state,
                  const ProgressFn& progress = {});

class VelocityModel {
 public:
  virtual ~VelocityModel() = default;
  virtual LatentGrid velocity(const LatentGrid& z_t, double t) = 0;
};

/// Velocity of the backbone under fixed conditioning.
class BackboneVelocity : public VelocityModel {
 public:
  BackboneVelocity(const ModelState& state, Conditioning cond) : state_(state), cond_(std::move(cond)) {}
  LatentGrid velocity(const LatentGrid& z_t, double t) override;

 private:
  const ModelState& state_;
  Conditioning cond_;
};

/// Euler integration from t = 1 (z_1 = eps(seed)) to t = 0 with uniform
/// step 1/steps.
LatentGrid sample_flow(VelocityModel& model, int h, int w, int dim, int steps, std::uint64_t seed);

struct InferOptions {
  int steps = 20;
  std::uint64_t seed = 0;
  PromptMode prompt_mode = PromptMode::with;
  DemoGating demo_gating = DemoGating::by_dai;
  std::optional<DemoPair> demo;
};

/// Samples a label for `query` and converts it according to the task kind.
DenseLabel infer(const ModelState& state, const TaskSpec& task, const ImageTensor& query,
                 const InferOptions& options = {});

}  // namespace densedit
