#include <gtest/gtest.h>

#include <fstream>
#include <random>

#include "densedit/checkpoint.hpp"
#include "test_util.hpp"

namespace densedit {
namespace {

ModelState perturbed_model() {
  ModelConfig c;
  c.seed = 17;
  ModelState s = make_model(c);
  apply_lora(s, 2, 5.0, {"attn.q", "ffn.out"});
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 1.0);
  s.for_each_param([&](Param& p) {
    if (p.trainable) {
      for (double& v : p.value.data) v += n(rng);
    }
  });
  return s;
}

TEST(Checkpoint, RoundTripIsExact) {
  const auto dir = test::scratch_dir("ckpt_rt");
  const ModelState s = perturbed_model();
  save_checkpoint(dir / "m.ckpt", s, {12, 34, {{"note", "x"}}});
  const LoadedCheckpoint back = load_checkpoint(dir / "m.ckpt");
  EXPECT_EQ(back.meta.step, 12u);
  EXPECT_EQ(back.meta.seed, 34u);
  EXPECT_EQ(back.meta.extra.at("note"), "x");
  EXPECT_EQ(back.state.config, s.config);
  EXPECT_EQ(back.state.lora_targets, s.lora_targets);

  std::vector<const Param*> a, b;
  s.for_each_param([&](const Param& p) { a.push_back(&p); });
  back.state.for_each_param([&](const Param& p) { b.push_back(&p); });
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i]->name, b[i]->name);
    EXPECT_EQ(a[i]->value, b[i]->value) << a[i]->name;
    EXPECT_EQ(a[i]->trainable, b[i]->trainable) << a[i]->name;
  }
  EXPECT_EQ(frozen_checksum(back.state), frozen_checksum(s));
  EXPECT_EQ(back.state.blocks[0].q.lora->scale, 2.5);
}

TEST(Checkpoint, BaseModelWithoutAdapters) {
  const auto dir = test::scratch_dir("ckpt_base");
  const ModelState s = make_model({});
  save_checkpoint(dir / "base.ckpt", s, {});
  const LoadedCheckpoint back = load_checkpoint(dir / "base.ckpt", s.config);
  EXPECT_FALSE(back.state.blocks[0].q.lora.has_value());
  EXPECT_EQ(frozen_checksum(back.state), frozen_checksum(s));
}

TEST(Checkpoint, MismatchedConfigIsError) {
  const auto dir = test::scratch_dir("ckpt_mismatch");
  const ModelState s = perturbed_model();
  save_checkpoint(dir / "m.ckpt", s, {});
  ModelConfig other = s.config;
  other.blocks = 3;
  EXPECT_THROW(load_checkpoint(dir / "m.ckpt", other), Error);
  EXPECT_NO_THROW(load_checkpoint(dir / "m.ckpt", s.config));
}

TEST(Checkpoint, CorruptFilesAreErrors) {
  const auto dir = test::scratch_dir("ckpt_corrupt");
  EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), Error);
  std::ofstream(dir / "junk.ckpt") << "definitely not a checkpoint";
  EXPECT_THROW(load_checkpoint(dir / "junk.ckpt"), Error);

  save_checkpoint(dir / "good.ckpt", perturbed_model(), {});
  const auto size = std::filesystem::file_size(dir / "good.ckpt");
  std::filesystem::copy_file(dir / "good.ckpt", dir / "short.ckpt");
  std::filesystem::resize_file(dir / "short.ckpt", size - 100);
  EXPECT_THROW(load_checkpoint(dir / "short.ckpt"), Error);
}

TEST(Checkpoint, OverwriteLeavesNoTemporaries) {
  const auto dir = test::scratch_dir("ckpt_overwrite");
  save_checkpoint(dir / "m.ckpt", make_model({}), {1, 0, {}});
  save_checkpoint(dir / "m.ckpt", make_model({}), {2, 0, {}});
  EXPECT_EQ(load_checkpoint(dir / "m.ckpt").meta.step, 2u);
  std::size_t files = 0;
  for ([[maybe_unused]] const auto& e : std::filesystem::directory_iterator(dir)) ++files;
  EXPECT_EQ(files, 1u);
}

}  // namespace
}  // namespace densedit
