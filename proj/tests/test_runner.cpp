#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "densedit/checkpoint.hpp"
#include "densedit/image_io.hpp"
#include "densedit/runner.hpp"
#include "test_util.hpp"

namespace densedit::runner {
namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines(const fs::path& p) {
  std::vector<std::string> out;
  std::istringstream in(slurp(p));
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

// Tiny pipeline shared by the tests below.
struct Pipeline {
  fs::path root;
  fs::path manifest;
  TrainOutcome trained;

  static const Pipeline& get() {
    static const Pipeline p = [] {
      Pipeline p;
      p.root = test::scratch_dir("runner");
      cmd_synth(4, p.root / "data", {32, 18});
      p.manifest = p.root / "data" / "manifest.json";
      TrainCommand t;
      t.manifest = p.manifest;
      t.task = "shapes-mask";
      t.train.steps = 3;
      t.train.accumulation = 1;
      t.train.seed = 2;
      t.out_dir = p.root / "run";
      p.trained = cmd_train(t);
      return p;
    }();
    return p;
  }
};

TEST(Runner, TrainWritesRunDirectory) {
  const Pipeline& p = Pipeline::get();
  const fs::path run = p.root / "run";
  EXPECT_TRUE(fs::exists(run / "config.json"));
  EXPECT_TRUE(fs::exists(run / "run.json"));
  EXPECT_TRUE(fs::exists(run / "loss.png"));
  EXPECT_TRUE(fs::exists(p.trained.checkpoint));
  EXPECT_EQ(p.trained.checkpoint.parent_path(), run / "checkpoints");
  EXPECT_EQ(p.trained.loss_history.size(), 3u);

  const auto csv = lines(run / "loss.csv");
  ASSERT_EQ(csv.size(), 4u);
  EXPECT_EQ(csv[0], "step,loss");

  const nlohmann::json rec = read_json(run / "run.json");
  EXPECT_EQ(rec.at("command"), "train");
  EXPECT_EQ(rec.at("seed"), 2);
  EXPECT_FALSE(rec.at("artifacts").empty());
  const LoadedCheckpoint ck = load_checkpoint(p.trained.checkpoint);
  EXPECT_EQ(ck.meta.step, 3u);
}

TEST(Runner, PredictEvaluateReport) {
  const Pipeline& p = Pipeline::get();
  PredictCommand pc;
  pc.checkpoint = p.trained.checkpoint;
  pc.manifest = p.manifest;
  pc.task = "shapes-mask";
  pc.infer_steps = 2;
  pc.out_dir = p.root / "predict";
  const fs::path pred_dir = cmd_predict(pc);
  const nlohmann::json index = read_json(pred_dir / "index.json");
  EXPECT_EQ(index.at("samples").size(), 3u);  // 18 samples, 15 train

  const metrics::MetricReport r = cmd_evaluate({p.manifest, "shapes-mask", pred_dir, p.root / "predict"});
  EXPECT_EQ(r.sample_count, 3u);
  EXPECT_GE(r.score, 0.0);
  EXPECT_LE(r.score, 1.0);
  EXPECT_TRUE(fs::exists(p.root / "predict" / "reports" / "shapes-mask.json"));
  EXPECT_TRUE(fs::exists(p.root / "predict" / "reports" / "shapes-mask.csv"));

  const metrics::AggregateSummary s = cmd_report({p.root / "predict"}, p.manifest, p.root / "report");
  EXPECT_DOUBLE_EQ(s.overall_s->mean, r.score);
  EXPECT_TRUE(fs::exists(p.root / "report" / "summary.json"));
  EXPECT_EQ(lines(p.root / "report" / "summary.csv").front(), "category,population,mean,tasks");
  EXPECT_THROW(cmd_report({p.root / "predict", p.root / "predict" / "reports" / "shapes-mask.json"}, std::nullopt,
                          p.root / "dup"),
               Error);
}

TEST(Runner, GroundTruthPredictionsScorePerfect) {
  const Pipeline& p = Pipeline::get();
  const Registry reg = load_manifest(p.manifest);
  const fs::path dir = p.root / "gt_preds";
  fs::create_directories(dir);
  nlohmann::json samples = nlohmann::json::array();
  for (const char* task : {"shapes-mask", "shapes-depth"}) {
    const TaskSpec& t = reg.task(task);
    samples = nlohmann::json::array();
    for (std::size_t i = 0; i < 4; ++i) {
      const std::string file = std::string(task) + "_" + std::to_string(i) + ".png";
      const DenseLabel l = reg.load_sample(t, i).label;
      if (t.kind == LabelKind::binary_mask) {
        io::save_mask(dir / file, l);
      } else {
        io::save_regression(dir / file, l, *t.range);
      }
      samples.push_back({{"index", i}, {"file", file}});
    }
    write_text(dir / "index.json", nlohmann::json{{"task", task}, {"samples", samples}}.dump());
    const metrics::MetricReport r = cmd_evaluate({p.manifest, task, dir, p.root / ("gt_eval_" + std::string(task))});
    EXPECT_DOUBLE_EQ(r.score, 1.0) << task;
  }
}

TEST(Runner, SweepAndAblateCsvs) {
  const Pipeline& p = Pipeline::get();
  SweepCommand sc;
  sc.checkpoint = p.trained.checkpoint;
  sc.manifest = p.manifest;
  sc.task = "shapes-mask";
  sc.steps_list = {1, 2};
  sc.out_dir = p.root / "sweep";
  const auto rows = cmd_sweep_steps(sc);
  ASSERT_EQ(rows.size(), 2u);
  const auto csv = lines(sc.out_dir / "sweep_steps.csv");
  ASSERT_EQ(csv.size(), 3u);
  EXPECT_EQ(csv[0], "steps,score");
  EXPECT_TRUE(fs::exists(sc.out_dir / "sweep_steps.png"));

  AblateCommand ac;
  ac.checkpoint = p.trained.checkpoint;
  ac.manifest = p.manifest;
  ac.task = "shapes-mask";
  ac.infer_steps = 1;
  ac.out_dir = p.root / "ablate";
  const auto ab = cmd_ablate_prompt(ac);
  ASSERT_EQ(ab.size(), 3u);
  EXPECT_EQ(ab[0].prompt, "A segmentation mask of synthetic shapes scene");
  EXPECT_EQ(ab[1].prompt, "");
  EXPECT_EQ(ab[2].prompt, "#$%^&*!@");
  const auto acsv = lines(ac.out_dir / "ablate_prompt.csv");
  ASSERT_EQ(acsv.size(), 4u);
  EXPECT_EQ(acsv[0], "mode,prompt,score");
  for (const AblateRow& r : ab) {
    EXPECT_GE(r.score, 0.0);
    EXPECT_LE(r.score, 1.0);
  }
}

TEST(Runner, Errors) {
  const Pipeline& p = Pipeline::get();
  TrainCommand t;
  t.manifest = p.manifest;
  t.task = "no-such-task";
  t.train.steps = 1;
  t.out_dir = p.root / "bad";
  EXPECT_THROW(cmd_train(t), Error);
  PredictCommand pc;
  pc.checkpoint = p.root / "missing.ckpt";
  pc.manifest = p.manifest;
  pc.task = "shapes-mask";
  pc.out_dir = p.root / "bad";
  EXPECT_THROW(cmd_predict(pc), Error);
  EXPECT_THROW(cmd_evaluate({p.manifest, "shapes-mask", p.root / "nowhere", p.root / "bad"}), Error);
  EXPECT_THROW(cmd_report({}, std::nullopt, p.root / "bad"), Error);
}

}  // namespace
}  // namespace densedit::runner
