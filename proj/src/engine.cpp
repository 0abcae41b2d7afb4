#include "densedit/engine.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "densedit/checkpoint.hpp"

namespace densedit {

std::string to_string(LossMode m) { return m == LossMode::l2 ? "l2" : "l1"; }

LossMode loss_mode_from_string(const std::string& s) {
  if (s == "l2" || s == "L2") return LossMode::l2;
  if (s == "l1" || s == "L1") return LossMode::l1;
  throw Error("unknown loss mode '" + s + "' (expected l2 or l1)");
}

std::string to_string(DemoGating g) {
  switch (g) {
    case DemoGating::by_dai: return "by-dai";
    case DemoGating::force_on: return "on";
    case DemoGating::force_off: return "off";
  }
  return "by-dai";
}

DemoGating demo_gating_from_string(const std::string& s) {
  if (s == "by-dai" || s == "by_dai") return DemoGating::by_dai;
  if (s == "on" || s == "force_on") return DemoGating::force_on;
  if (s == "off" || s == "force_off") return DemoGating::force_off;
  throw Error("unknown demo gating '" + s + "' (expected by-dai, on or off)");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"tasks", c.tasks},
          {"steps", c.steps},
          {"learning_rate", c.learning_rate},
          {"batch_size", c.batch_size},
          {"accumulation", c.accumulation},
          {"loss", to_string(c.loss)},
          {"seed", c.seed},
          {"prompt_mode", to_string(c.prompt_mode)},
          {"demo_gating", to_string(c.demo_gating)},
          {"n_train", c.n_train},
          {"max_train_samples", c.max_train_samples},
          {"checkpoint_every", c.checkpoint_every}};
}

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c) {
  try {
    if (j.contains("tasks")) c.tasks = j.at("tasks").get<std::vector<std::string>>();
    c.steps = j.value("steps", c.steps);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.accumulation = j.value("accumulation", c.accumulation);
    if (j.contains("loss")) c.loss = loss_mode_from_string(j.at("loss").get<std::string>());
    c.seed = j.value("seed", c.seed);
    if (j.contains("prompt_mode")) c.prompt_mode = prompt_mode_from_string(j.at("prompt_mode").get<std::string>());
    if (j.contains("demo_gating")) c.demo_gating = demo_gating_from_string(j.at("demo_gating").get<std::string>());
    c.n_train = j.value("n_train", c.n_train);
    c.max_train_samples = j.value("max_train_samples", c.max_train_samples);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("train config: ") + e.what());
  }
  validate(c);
  return c;
}

void validate(const TrainConfig& c) {
  if (c.steps < 1) throw Error("train config: steps must be >= 1");
  if (c.batch_size < 1 || c.accumulation < 1) throw Error("train config: batch size and accumulation must be >= 1");
  if (!(c.learning_rate > 0.0)) throw Error("train config: learning rate must be positive");
  if (c.n_train < 1) throw Error("train config: n_train must be >= 1");
}

FlowPair make_flow_pair(const LatentGrid& z0, const LatentGrid& eps, double t) {
  if (!z0.same_shape(eps)) throw Error("make_flow_pair: noise shape differs from target");
  FlowPair p{z0, eps, t, LatentGrid(z0.h, z0.w, z0.dim, StreamTag::noisy), LatentGrid(z0.h, z0.w, z0.dim)};
  for (std::size_t i = 0; i < z0.data.size(); ++i) {
    p.zt.data.data[i] = (1.0 - t) * z0.data.data[i] + t * eps.data.data[i];
    p.u.data.data[i] = eps.data.data[i] - z0.data.data[i];
  }
  return p;
}

FlowPair make_flow_pair(const LatentGrid& z0, Rng& rng) {
  LatentGrid eps(z0.h, z0.w, z0.dim, StreamTag::noisy);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (double& v : eps.data.data) v = normal(rng);
  const double t = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  return make_flow_pair(z0, eps, t);
}

FlowPair make_flow_pair(const ImageTensor& target, const LatentCodec& codec, Rng& rng) {
  return make_flow_pair(codec.encode(target, StreamTag::noisy), rng);
}

DemoPair make_demo_pair(const ImageTensor& query, const ImageTensor& target) {
  return DemoPair{query, target, concat_width(query, target)};
}

bool demo_enabled(const TaskSpec& task, DemoGating gating) {
  switch (gating) {
    case DemoGating::by_dai: return task.dai == Dai::no;
    case DemoGating::force_on: return true;
    case DemoGating::force_off: return false;
  }
  return false;
}

Conditioning assemble_conditioning(const ModelState& state, const TaskSpec& task, const ImageTensor& query,
                                   const std::optional<DemoPair>& demo, PromptMode prompt_mode,
                                   DemoGating gating) {
  Conditioning c;
  c.query = state.codec.encode(query, StreamTag::query);
  if (demo_enabled(task, gating)) {
    if (!demo) throw Error("task '" + task.task_id + "': demonstration branch enabled but no demo pair given");
    if (demo->query == query) throw Error("task '" + task.task_id + "': demo pair equals the query sample");
    c.demo = embed_latent(state, state.codec.encode(demo->composite, StreamTag::demo));
    c.demo->tag = StreamTag::demo;
  }
  c.prompt = embed_prompt(state, render_prompt(task, prompt_mode));
  return c;
}

LossResult training_loss(const LatentGrid& prediction, const LatentGrid& target, LossMode mode) {
  if (!prediction.same_shape(target)) throw Error("training_loss: prediction and target shapes differ");
  const std::size_t n = prediction.data.size();
  if (n == 0) throw Error("training_loss: empty batch");
  LossResult r{0.0, LatentGrid(prediction.h, prediction.w, prediction.dim, prediction.tag)};
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double res = prediction.data.data[i] - target.data.data[i];
    if (mode == LossMode::l2) {
      r.loss += res * res;
      r.grad.data.data[i] = 2.0 * res * inv_n;
    } else {
      r.loss += std::abs(res);
      r.grad.data.data[i] = (res > 0.0 ? 1.0 : res < 0.0 ? -1.0 : 0.0) * inv_n;
    }
  }
  r.loss *= inv_n;
  if (!std::isfinite(r.loss)) throw Error("training_loss: non-finite loss");
  return r;
}

double micro_step(ModelState& state, const FlowPair& pair, const Conditioning& cond, LossMode mode,
                  double grad_scale) {
  VelocityTrace trace;
  const LatentGrid v = forward_velocity(state, pair.zt, cond.query, cond.demo, cond.prompt, pair.t, &trace);
  LossResult r = training_loss(v, pair.u, mode);
  for (double& g : r.grad.data.data) g *= grad_scale;
  backward_velocity(state, trace, r.grad);
  return r.loss;
}

void AdamOptimizer::step(ModelState& state) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  state.for_each_param([&](Param& p) {
    if (!p.trainable || !p.grad.same_shape(p.value)) return;
    auto& [m, v] = moments_[p.name];
    if (m.size() != p.value.size()) {
      m.assign(p.value.size(), 0.0);
      v.assign(p.value.size(), 0.0);
    }
    for (std::size_t i = 0; i < m.size(); ++i) {
      const double g = p.grad.data[i];
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
      p.value.data[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  });
}

std::optional<DemoChoice> choose_demo(const Registry& registry, const TaskSpec& task, const SplitSpec& split,
                                      std::uint64_t seed, DemoGating gating) {
  if (!demo_enabled(task, gating)) return std::nullopt;
  if (split.train.size() < 2) {
    throw Error("task '" + task.task_id + "': demo branch needs at least two training samples");
  }
  Rng rng(seed ^ 0xd3e0ULL);
  const std::size_t pick = std::uniform_int_distribution<std::size_t>(0, split.train.size() - 1)(rng);
  DemoChoice c;
  c.index = split.train[pick];
  const DenseSample s = registry.load_sample(task, c.index);
  c.pair = make_demo_pair(s.query, standardize_label(s.label));
  return c;
}

TaskData prepare_task(const Registry& registry, const TaskSpec& task, const ModelState& state, std::uint64_t seed,
                      std::size_t n_train, DemoGating gating, std::size_t max_train_samples) {
  TaskData d;
  d.task = &task;
  d.split = split(task, seed, n_train);
  d.pool = d.split.train;
  if (auto choice = choose_demo(registry, task, d.split, seed, gating)) {
    d.demo_index = choice->index;
    d.demo = std::move(choice->pair);
    d.pool.erase(std::find(d.pool.begin(), d.pool.end(), choice->index));
  }
  if (max_train_samples > 0 && d.pool.size() > max_train_samples) d.pool.resize(max_train_samples);
  for (std::size_t idx : d.pool) {
    const DenseSample s = registry.load_sample(task, idx);
    d.queries.push_back(s.query);
    d.target_latents.push_back(state.codec.encode(standardize_label(s.label), StreamTag::noisy));
  }
  return d;
}

TrainResult train(const TrainConfig& config, const Registry& registry, ModelState& state,
                  const ProgressFn& progress) {
  validate(config);
  if (config.tasks.empty()) throw Error("train: no tasks configured");
  std::vector<TaskData> data;
  for (const std::string& id : config.tasks) {
    data.push_back(prepare_task(registry, registry.task(id), state, config.seed, config.n_train, config.demo_gating,
                                config.max_train_samples));
  }

  Rng rng(config.seed);
  AdamOptimizer optimizer(config.learning_rate);
  TrainResult result;
  const int micro = config.batch_size * config.accumulation;
  const double grad_scale = 1.0 / micro;
  std::uniform_int_distribution<std::size_t> pick_task(0, data.size() - 1);

  zero_grads(state);
  for (std::uint64_t step = 1; step <= config.steps; ++step) {
    double total = 0.0;
    for (int m = 0; m < micro; ++m) {
      TaskData& td = data.size() > 1 ? data[pick_task(rng)] : data.front();
      const std::size_t k = std::uniform_int_distribution<std::size_t>(0, td.pool.size() - 1)(rng);
      const FlowPair pair = make_flow_pair(td.target_latents[k], rng);
      const Conditioning cond =
          assemble_conditioning(state, *td.task, td.queries[k], td.demo, config.prompt_mode, config.demo_gating);
      total += micro_step(state, pair, cond, config.loss, grad_scale);
    }
    const double loss = total / micro;
    if (!std::isfinite(loss)) {
      throw Error("training diverged at step " + std::to_string(step) + ": loss is " + std::to_string(loss));
    }
    optimizer.step(state);
    zero_grads(state);
    result.loss_history.push_back(loss);
    result.steps = step;
    if (progress) progress(step, loss);
    if (config.checkpoint_every > 0 && !config.checkpoint_dir.empty() &&
        (step % config.checkpoint_every == 0 || step == config.steps)) {
      const auto path = config.checkpoint_dir / ("step_" + std::to_string(step));
      save_checkpoint(path, state, CheckpointMeta{step, config.seed, {{"train", to_json(config)}}});
      result.checkpoints.push_back(path);
    }
  }
  return result;
}

LatentGrid BackboneVelocity::velocity(const LatentGrid& z_t, double t) {
  return forward_velocity(state_, z_t, cond_.query, cond_.demo, cond_.prompt, t);
}

LatentGrid sample_flow(VelocityModel& model, int h, int w, int dim, int steps, std::uint64_t seed) {
  if (steps < 1) throw Error("sampler: steps must be >= 1");
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  LatentGrid z(h, w, dim, StreamTag::noisy);
  for (double& v : z.data.data) v = normal(rng);
  const double dt = 1.0 / steps;
  for (int i = 0; i < steps; ++i) {
    const double t = 1.0 - static_cast<double>(i) / steps;
    const LatentGrid v = model.velocity(z, t);
    if (!v.same_shape(z)) throw Error("sampler: velocity shape differs from latent");
    for (std::size_t j = 0; j < z.data.size(); ++j) z.data.data[j] -= dt * v.data.data[j];
  }
  return z;
}

DenseLabel infer(const ModelState& state, const TaskSpec& task, const ImageTensor& query,
                 const InferOptions& options) {
  Conditioning cond =
      assemble_conditioning(state, task, query, options.demo, options.prompt_mode, options.demo_gating);
  const int h = cond.query.h, w = cond.query.w, dim = cond.query.dim;
  BackboneVelocity model(state, std::move(cond));
  const LatentGrid z0 = sample_flow(model, h, w, dim, options.steps, options.seed);
  const ImageTensor img = state.codec.decode(z0);
  if (task.kind == LabelKind::binary_mask) return binarize_prediction(img);
  if (!task.range) throw Error("task '" + task.task_id + "': regression task without range");
  return denormalize_regression(img, *task.range).label;
}

}  // namespace densedit
