#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "densedit/engine.hpp"
#include "oracles/oracles.hpp"
#include "test_util.hpp"

namespace densedit {
namespace {

LatentGrid random_grid(int h, int w, int dim, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  LatentGrid g(h, w, dim);
  for (double& v : g.data.data) v = n(rng);
  return g;
}

const Registry& suite() {
  static const Registry r = generate_synthetic_suite(5, test::scratch_dir("engine_suite"), {32, 20});
  return r;
}

TEST(FlowPair, EndpointsAndRecomputation) {
  Rng rng(1);
  const LatentGrid z0 = random_grid(2, 3, 5, rng), eps = random_grid(2, 3, 5, rng);
  const FlowPair at0 = make_flow_pair(z0, eps, 0.0);
  EXPECT_EQ(at0.zt.data, z0.data);
  const FlowPair at1 = make_flow_pair(z0, eps, 1.0);
  EXPECT_EQ(at1.zt.data, eps.data);
  for (std::size_t i = 0; i < z0.data.size(); ++i) EXPECT_EQ(at0.u.data.data[i], eps.data.data[i] - z0.data.data[i]);

  for (int draw = 0; draw < 100; ++draw) {
    const FlowPair p = make_flow_pair(z0, rng);
    ASSERT_GE(p.t, 0.0);
    ASSERT_LT(p.t, 1.0);
    for (std::size_t i = 0; i < z0.data.size(); ++i) {
      const double z = z0.data.data[i], e = p.eps.data.data[i];
      ASSERT_EQ(p.zt.data.data[i], (1 - p.t) * z + p.t * e);
      ASSERT_EQ(p.u.data.data[i], e - z);
    }
  }
}

TEST(FlowPair, FromImageUsesCodec) {
  const ModelState s = make_model({});
  Rng a(7), b(7);
  const ImageTensor target(8, 8, 0.25);
  const FlowPair p = make_flow_pair(target, s.codec, a);
  EXPECT_EQ(p.z0.data, s.codec.encode(target, StreamTag::noisy).data);
  EXPECT_EQ(make_flow_pair(target, s.codec, b).zt.data, p.zt.data);
}

TEST(Loss, ClosedFormsAndHomogeneity) {
  Rng rng(2);
  const LatentGrid target = random_grid(2, 2, 4, rng);
  EXPECT_EQ(training_loss(target, target, LossMode::l2).loss, 0.0);
  EXPECT_EQ(training_loss(target, target, LossMode::l1).loss, 0.0);

  LatentGrid shifted = target;
  for (double& v : shifted.data.data) v += 0.5;
  EXPECT_NEAR(training_loss(shifted, target, LossMode::l2).loss, 0.25, 1e-12);
  EXPECT_NEAR(training_loss(shifted, target, LossMode::l1).loss, 0.5, 1e-12);

  const LatentGrid other = random_grid(2, 2, 4, rng);
  LatentGrid doubled = target;
  for (std::size_t i = 0; i < doubled.data.size(); ++i)
    doubled.data.data[i] += 2 * (other.data.data[i] - target.data.data[i]);
  const double l2 = training_loss(other, target, LossMode::l2).loss;
  const double l1 = training_loss(other, target, LossMode::l1).loss;
  EXPECT_NEAR(training_loss(doubled, target, LossMode::l2).loss, 4 * l2, 1e-12);
  EXPECT_NEAR(training_loss(doubled, target, LossMode::l1).loss, 2 * l1, 1e-12);

  LatentGrid bad = target;
  bad.data.data[0] = std::nan("");
  EXPECT_THROW(training_loss(bad, target, LossMode::l2), Error);
}

TEST(Loss, GradientMatchesFiniteDifferences) {
  Rng rng(3);
  const LatentGrid target = random_grid(1, 2, 3, rng);
  const LatentGrid pred = random_grid(1, 2, 3, rng);
  for (LossMode mode : {LossMode::l2, LossMode::l1}) {
    const LossResult r = training_loss(pred, target, mode);
    const auto f = [&](const std::vector<double>& x) {
      LatentGrid p = pred;
      p.data.data = x;
      return training_loss(p, target, mode).loss;
    };
    const std::vector<double> g = oracle::fd_gradient(f, pred.data.data, 1e-6);
    for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(r.grad.data.data[i], g[i], 1e-6);
  }
}

TEST(Gating, DemoPresenceFollowsDai) {
  const ModelState s = make_model({});
  const Registry& r = suite();
  const TaskSpec& yes = r.task("shapes-mask");
  const TaskSpec& no = r.task("shapes-depth");
  const ImageTensor query = r.load_sample(yes, 0).query;
  const DenseSample other = r.load_sample(no, 1);
  const DemoPair demo = make_demo_pair(other.query, standardize_label(other.label));
  EXPECT_EQ(demo.composite.width, 64);

  const Conditioning c_yes = assemble_conditioning(s, yes, query, std::nullopt, PromptMode::with);
  EXPECT_FALSE(c_yes.demo.has_value());
  EXPECT_EQ(c_yes.prompt.length(), 7u);  // "A segmentation mask of synthetic shapes scene"
  const Conditioning c_no = assemble_conditioning(s, no, query, demo, PromptMode::without);
  ASSERT_TRUE(c_no.demo.has_value());
  // 32x64 composite at patch 4
  EXPECT_EQ(c_no.demo->length(), 8u * 16u);
  EXPECT_EQ(c_no.prompt.length(), 0u);
  EXPECT_EQ(c_no.query.data, s.codec.encode(query, StreamTag::query).data);

  EXPECT_THROW(assemble_conditioning(s, no, query, std::nullopt, PromptMode::with), Error);
  const DemoPair same = make_demo_pair(query, standardize_label(other.label));
  EXPECT_THROW(assemble_conditioning(s, no, query, same, PromptMode::with), Error);

  EXPECT_FALSE(assemble_conditioning(s, no, query, demo, PromptMode::with, DemoGating::force_off).demo);
  EXPECT_TRUE(assemble_conditioning(s, yes, query, demo, PromptMode::with, DemoGating::force_on).demo);
}

TEST(Gating, RandomAssembliesMatchEffectiveGating) {
  const ModelState s = make_model({});
  const Registry& r = suite();
  const ImageTensor query = r.load_sample(r.task("shapes-mask"), 2).query;
  const DenseSample other = r.load_sample(r.task("shapes-depth"), 3);
  const DemoPair demo = make_demo_pair(other.query, standardize_label(other.label));
  Rng rng(4);
  for (int draw = 0; draw < 100; ++draw) {
    const TaskSpec& task = r.tasks()[rng() % 2];
    const DemoGating gating = static_cast<DemoGating>(rng() % 3);
    const Conditioning c = assemble_conditioning(s, task, query, demo, PromptMode::with, gating);
    EXPECT_EQ(c.demo.has_value(), demo_enabled(task, gating));

    const TokenSequence noisy = embed_latent(s, LatentGrid(8, 8, 48, StreamTag::noisy));
    const TokenSequence q = embed_latent(s, c.query);
    std::vector<TokenSequence> streams{noisy, q, c.prompt};
    const std::size_t base_len = attended_length(streams);
    if (c.demo) streams.push_back(*c.demo);
    EXPECT_EQ(attended_length(streams) - base_len, c.demo ? c.demo->length() : 0u);
  }
}

struct Stub : VelocityModel {
  oracle::LinearFlowStub stub;
  LatentGrid velocity(const LatentGrid& z_t, double t) override {
    LatentGrid v = z_t;
    v.data.data = stub.velocity(z_t.data.data, t);
    return v;
  }
};

TEST(Sampler, StubLinearFlowRecoversTarget) {
  Rng rng(5);
  const LatentGrid target = random_grid(2, 2, 6, rng);
  Stub model;
  model.stub.target = target.data.data;
  for (int steps : {1, 4, 10, 20, 50}) {
    const LatentGrid z = sample_flow(model, 2, 2, 6, steps, 11);
    for (std::size_t i = 0; i < z.data.size(); ++i) EXPECT_NEAR(z.data.data[i], target.data.data[i], 1e-12) << steps;
  }
}

TEST(Sampler, InferShapesAndDeterminism) {
  ModelState s = make_model({});
  apply_lora(s);
  const Registry& r = suite();
  const TaskSpec& mask = r.task("shapes-mask");
  const ImageTensor query = r.load_sample(mask, 0).query;
  InferOptions o;
  o.seed = 3;
  for (int steps : {1, 4, 10, 20, 50}) {
    o.steps = steps;
    const DenseLabel l = infer(s, mask, query, o);
    EXPECT_EQ(l.height, query.height);
    EXPECT_EQ(l.width, query.width);
    EXPECT_EQ(l.kind, LabelKind::binary_mask);
  }
  o.steps = 4;
  EXPECT_EQ(infer(s, mask, query, o), infer(s, mask, query, o));

  const TaskSpec& depth = r.task("shapes-depth");
  const DenseSample d = r.load_sample(depth, 5);
  o.demo = make_demo_pair(d.query, standardize_label(d.label));
  const DenseLabel reg = infer(s, depth, query, o);
  EXPECT_EQ(reg.kind, LabelKind::regression);
  for (double v : reg.data) {
    EXPECT_GE(v, depth.range->r_min);
    EXPECT_LE(v, depth.range->r_max);
  }
}

TEST(Training, DemoChoiceIsExcludedFromQueries) {
  const ModelState s = make_model({});
  const Registry& r = suite();
  const TaskData depth = prepare_task(r, r.task("shapes-depth"), s, 9, 15, DemoGating::by_dai);
  ASSERT_TRUE(depth.demo_index.has_value());
  EXPECT_EQ(depth.pool.size(), 14u);
  for (std::size_t i : depth.pool) EXPECT_NE(i, *depth.demo_index);
  EXPECT_TRUE(std::binary_search(depth.split.train.begin(), depth.split.train.end(), *depth.demo_index));

  const TaskData mask = prepare_task(r, r.task("shapes-mask"), s, 9, 15, DemoGating::by_dai);
  EXPECT_FALSE(mask.demo.has_value());
  EXPECT_EQ(mask.pool.size(), 15u);
}

TrainConfig short_config(std::vector<std::string> tasks, std::uint64_t steps) {
  TrainConfig c;
  c.tasks = std::move(tasks);
  c.steps = steps;
  c.accumulation = 2;
  c.seed = 6;
  return c;
}

TEST(Training, DeterministicAndFreezesBase) {
  const Registry& r = suite();
  ModelState a = make_model({}), b = make_model({});
  apply_lora(a);
  apply_lora(b);
  const std::uint64_t before = frozen_checksum(a);
  const TrainConfig c = short_config({"shapes-mask", "shapes-depth"}, 4);
  const TrainResult ra = train(c, r, a);
  const TrainResult rb = train(c, r, b);
  EXPECT_EQ(ra.loss_history.size(), 4u);
  EXPECT_EQ(ra.loss_history, rb.loss_history);
  EXPECT_EQ(frozen_checksum(a), before);
  bool moved = false;
  for (double v : a.find_param("blocks.0.attn.q.lora_b")->value.data) moved = moved || v != 0.0;
  EXPECT_TRUE(moved);
}

TEST(Training, ConfigErrors) {
  const Registry& r = suite();
  ModelState s = make_model({});
  apply_lora(s);
  EXPECT_THROW(train(short_config({"nope"}, 1), r, s), Error);
  EXPECT_THROW(train(short_config({"shapes-mask"}, 0), r, s), Error);
  TrainConfig c = short_config({"shapes-mask"}, 1);
  c.n_train = 40;
  EXPECT_THROW(train(c, r, s), Error);
  EXPECT_EQ(train_config_from_json(to_json(c)).n_train, 40u);
  EXPECT_EQ(demo_gating_from_string("by-dai"), DemoGating::by_dai);
  EXPECT_EQ(loss_mode_from_string("l1"), LossMode::l1);
}

TEST(Training, OverfitsSingleSample) {
  const Registry& r = suite();
  ModelState s = make_model({});
  apply_lora(s);
  TrainConfig c;
  c.tasks = {"shapes-mask"};
  c.steps = 200;
  c.seed = 1;
  c.max_train_samples = 1;
  const TrainResult res = train(c, r, s);
  ASSERT_EQ(res.loss_history.size(), 200u);
  // Single optimizer steps are noisy; compare averages of the first and last ten.
  double first = 0, last = 0;
  for (int i = 0; i < 10; ++i) {
    first += res.loss_history[i] / 10;
    last += res.loss_history[res.loss_history.size() - 1 - i] / 10;
  }
  std::printf("overfit: initial %.4f final %.4f\n", first, last);
  EXPECT_LE(last, 0.5 * first);
}

}  // namespace
}  // namespace densedit
