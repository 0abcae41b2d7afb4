// densedit command-line front end.

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "densedit/registry.hpp"
#include "densedit/runner.hpp"

namespace fs = std::filesystem;
using namespace densedit;

namespace {

/// Flags shared by train and ablate-prompt, applied on top of --config.
struct TrainFlags {
  std::string config;
  std::string manifest;
  std::string task;
  std::uint64_t seed = 0;
  std::uint64_t steps = 0;
  std::string loss;
  std::string prompt_mode;
  std::string demo;
  double lr = 0;
  int accumulation = 0;
  std::size_t n_train = 0;
  std::uint64_t checkpoint_every = 0;
  int lora_rank = 0;
  std::vector<std::string> lora_targets;
  std::string out;

  CLI::Option* seed_opt = nullptr;
  CLI::Option* steps_opt = nullptr;
  CLI::Option* lr_opt = nullptr;
  CLI::Option* accum_opt = nullptr;
  CLI::Option* n_train_opt = nullptr;
  CLI::Option* ckpt_opt = nullptr;
  CLI::Option* rank_opt = nullptr;
  CLI::Option* targets_opt = nullptr;

  void add(CLI::App* app, const std::string& steps_flag = "--steps") {
    app->add_option("--config", config, "JSON config (same layout as a run's config.json); flags override it");
    app->add_option("--manifest", manifest, "Task manifest");
    app->add_option("--task", task, "Task id, or \"mixed\"");
    seed_opt = app->add_option("--seed", seed, "Seed for the split, demo choice and training");
    steps_opt = app->add_option(steps_flag, steps, "Optimizer steps");
    app->add_option("--loss", loss, "Loss mode")->check(CLI::IsMember({"l2", "l1"}));
    app->add_option("--prompt-mode", prompt_mode, "Prompt mode")->check(CLI::IsMember({"with", "without", "random"}));
    app->add_option("--demo", demo, "Demonstration gating")->check(CLI::IsMember({"by-dai", "on", "off"}));
    lr_opt = app->add_option("--lr", lr, "Learning rate");
    accum_opt = app->add_option("--accumulation", accumulation, "Micro-batches per optimizer step");
    n_train_opt = app->add_option("--n-train", n_train, "Training samples per task");
    ckpt_opt = app->add_option("--checkpoint-every", checkpoint_every, "Checkpoint interval in optimizer steps");
    rank_opt = app->add_option("--lora-rank", lora_rank, "LoRA rank (alpha follows the rank)");
    targets_opt = app->add_option("--lora-targets", lora_targets, "Projections carrying adapters")->delimiter(',');
    app->add_option("--out", out, "Output run directory");
  }

  runner::TrainCommand resolve() const {
    runner::TrainCommand cmd;
    if (!config.empty()) {
      const nlohmann::json j = runner::read_json(config);
      cmd.manifest = j.value("manifest", std::string());
      cmd.task = j.value("task", std::string());
      if (j.contains("model")) cmd.model = model_config_from_json(j.at("model"));
      if (j.contains("lora")) cmd.lora = runner::lora_settings_from_json(j.at("lora"));
      if (j.contains("train")) cmd.train = train_config_from_json(j.at("train"));
      cmd.out_dir = j.value("out", std::string());
    }
    if (!manifest.empty()) cmd.manifest = manifest;
    if (!task.empty()) cmd.task = task;
    if (!out.empty()) cmd.out_dir = out;
    if (*seed_opt) {
      cmd.train.seed = seed;
      cmd.model.seed = seed;
    }
    if (*steps_opt) cmd.train.steps = steps;
    if (!loss.empty()) cmd.train.loss = loss_mode_from_string(loss);
    if (!prompt_mode.empty()) cmd.train.prompt_mode = prompt_mode_from_string(prompt_mode);
    if (!demo.empty()) cmd.train.demo_gating = demo_gating_from_string(demo);
    if (*lr_opt) cmd.train.learning_rate = lr;
    if (*accum_opt) cmd.train.accumulation = accumulation;
    if (*n_train_opt) cmd.train.n_train = n_train;
    if (*ckpt_opt) cmd.train.checkpoint_every = checkpoint_every;
    if (*rank_opt) {
      cmd.lora.rank = lora_rank;
      cmd.lora.alpha = lora_rank;
    }
    if (*targets_opt) cmd.lora.targets = lora_targets;
    if (cmd.manifest.empty()) throw Error("--manifest is required");
    if (cmd.task.empty()) throw Error("--task is required");
    if (cmd.out_dir.empty()) throw Error("--out is required");
    validate(cmd.train);
    return cmd;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"densedit: dense prediction as conditional image generation on a toy diffusion transformer"};
  app.require_subcommand(1);

  // synth
  std::uint64_t synth_seed = 0;
  std::string synth_out;
  SyntheticOptions synth_opts;
  auto* synth = app.add_subcommand("synth", "Generate the synthetic shapes suite and its manifest");
  synth->add_option("--seed", synth_seed, "Generator seed");
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--image-size", synth_opts.image_size, "Square image size in pixels");
  synth->add_option("--samples", synth_opts.samples_per_task, "Samples per task");

  // train
  TrainFlags train_flags;
  auto* train_cmd = app.add_subcommand("train", "Train adapters for one task or all tasks (mixed)");
  train_flags.add(train_cmd);

  // predict
  runner::PredictCommand predict;
  std::string predict_prompt, predict_demo;
  auto* predict_cmd = app.add_subcommand("predict", "Write predictions for the held-out split");
  predict_cmd->add_option("--checkpoint", predict.checkpoint, "Checkpoint file")->required();
  predict_cmd->add_option("--manifest", predict.manifest, "Task manifest")->required();
  predict_cmd->add_option("--task", predict.task, "Task id")->required();
  predict_cmd->add_option("--steps", predict.infer_steps, "Sampler steps");
  predict_cmd->add_option("--seed", predict.seed, "Sampler seed");
  predict_cmd->add_option("--prompt-mode", predict_prompt, "Prompt mode")
      ->check(CLI::IsMember({"with", "without", "random"}));
  predict_cmd->add_option("--demo", predict_demo, "Demonstration gating")->check(CLI::IsMember({"by-dai", "on", "off"}));
  predict_cmd->add_option("--out", predict.out_dir, "Output run directory")->required();

  // evaluate
  runner::EvaluateCommand evaluate;
  auto* evaluate_cmd = app.add_subcommand("evaluate", "Score predictions against ground truth");
  evaluate_cmd->add_option("--manifest", evaluate.manifest, "Task manifest")->required();
  evaluate_cmd->add_option("--task", evaluate.task, "Task id")->required();
  evaluate_cmd->add_option("--pred-dir", evaluate.pred_dir, "Directory written by predict")->required();
  evaluate_cmd->add_option("--out", evaluate.out_dir, "Output run directory")->required();

  // report
  std::vector<std::string> report_inputs;
  std::string report_manifest, report_out;
  auto* report_cmd = app.add_subcommand("report", "Aggregate per-task reports into category and overall means");
  report_cmd->add_option("inputs", report_inputs, "Run directories or report JSON files")->required();
  report_cmd->add_option("--manifest", report_manifest, "Manifest supplying task categories");
  report_cmd->add_option("--out", report_out, "Output directory")->required();

  // sweep-steps
  runner::SweepCommand sweep;
  auto* sweep_cmd = app.add_subcommand("sweep-steps", "Score a checkpoint at several sampler step counts");
  sweep_cmd->add_option("--checkpoint", sweep.checkpoint, "Checkpoint file")->required();
  sweep_cmd->add_option("--manifest", sweep.manifest, "Task manifest")->required();
  sweep_cmd->add_option("--task", sweep.task, "Task id")->required();
  sweep_cmd->add_option("--steps", sweep.steps_list, "Comma-separated step counts")->delimiter(',');
  sweep_cmd->add_option("--seed", sweep.seed, "Sampler seed");
  sweep_cmd->add_option("--out", sweep.out_dir, "Output directory")->required();

  // ablate-prompt
  TrainFlags ablate_flags;
  std::string ablate_checkpoint;
  std::vector<std::string> ablate_modes{"with", "without", "random"};
  int ablate_infer_steps = 20;
  auto* ablate_cmd = app.add_subcommand("ablate-prompt", "Compare prompt modes (with, without, random)");
  ablate_flags.add(ablate_cmd, "--train-steps");
  ablate_cmd->add_option("--checkpoint", ablate_checkpoint, "Apply modes at inference to this checkpoint");
  ablate_cmd->add_option("--modes", ablate_modes, "Comma-separated prompt modes")->delimiter(',');
  ablate_cmd->add_option("--steps", ablate_infer_steps, "Sampler steps");

  // dai
  std::string dai_description, dai_demo, dai_client;
  auto* dai_cmd = app.add_subcommand("dai", "Ask an external model for a task's DAI flag");
  dai_cmd->add_option("--description", dai_description, "Task description")->required();
  dai_cmd->add_option("--demo-image", dai_demo, "Demo image reference")->required();
  dai_cmd->add_option("--client", dai_client, "Shell command reading the prompt on stdin")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) {
      runner::cmd_synth(synth_seed, synth_out, synth_opts);
      std::cout << "wrote " << (fs::path(synth_out) / "manifest.json").string() << "\n";
    } else if (*train_cmd) {
      const runner::TrainOutcome r = runner::cmd_train(train_flags.resolve());
      std::cout << "final loss " << r.loss_history.back() << "\ncheckpoint " << r.checkpoint.string() << "\n";
    } else if (*predict_cmd) {
      if (!predict_prompt.empty()) predict.prompt_mode = prompt_mode_from_string(predict_prompt);
      if (!predict_demo.empty()) predict.demo_gating = demo_gating_from_string(predict_demo);
      std::cout << "predictions " << runner::cmd_predict(predict).string() << "\n";
    } else if (*evaluate_cmd) {
      const metrics::MetricReport r = runner::cmd_evaluate(evaluate);
      std::cout << r.task_id << " " << (r.kind == LabelKind::regression ? "D" : "S") << "-Score " << r.score << "\n";
    } else if (*report_cmd) {
      std::vector<fs::path> inputs(report_inputs.begin(), report_inputs.end());
      const auto manifest = report_manifest.empty() ? std::nullopt : std::optional<fs::path>(report_manifest);
      const metrics::AggregateSummary s = runner::cmd_report(inputs, manifest, report_out);
      if (s.overall_d) std::cout << "overall D " << s.overall_d->mean << " (" << s.overall_d->tasks << " tasks)\n";
      if (s.overall_s) std::cout << "overall S " << s.overall_s->mean << " (" << s.overall_s->tasks << " tasks)\n";
    } else if (*sweep_cmd) {
      for (const runner::SweepRow& r : runner::cmd_sweep_steps(sweep)) {
        std::cout << "steps " << r.steps << " score " << r.score << "\n";
      }
    } else if (*ablate_cmd) {
      runner::AblateCommand cmd;
      if (!ablate_checkpoint.empty()) {
        cmd.checkpoint = fs::path(ablate_checkpoint);
        if (ablate_flags.manifest.empty() || ablate_flags.task.empty() || ablate_flags.out.empty()) {
          throw Error("--manifest, --task and --out are required");
        }
        cmd.manifest = ablate_flags.manifest;
        cmd.task = ablate_flags.task;
        cmd.out_dir = ablate_flags.out;
        cmd.seed = ablate_flags.seed;
      } else {
        const runner::TrainCommand t = ablate_flags.resolve();
        cmd.manifest = t.manifest;
        cmd.task = t.task;
        cmd.train = t.train;
        cmd.model = t.model;
        cmd.lora = t.lora;
        cmd.out_dir = t.out_dir;
        cmd.seed = t.train.seed;
      }
      cmd.modes.clear();
      for (const std::string& m : ablate_modes) cmd.modes.push_back(prompt_mode_from_string(m));
      cmd.infer_steps = ablate_infer_steps;
      for (const runner::AblateRow& r : runner::cmd_ablate_prompt(cmd)) {
        std::cout << to_string(r.mode) << " score " << r.score << "\n";
      }
    } else if (*dai_cmd) {
      CommandLlmClient client(dai_client);
      std::cout << to_string(classify_dai(dai_description, dai_demo, client)) << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "densedit: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
