#pragma once

// Command implementations behind the densedit CLI. Every command writes its
// artifacts under an output directory together with run.json (command,
// config snapshot, seed, timestamps, artifact paths) and throws Error on any
// validation failure.
//
// Run directory layout:
//   config.json  run.json  loss.csv  loss.png
//   checkpoints/step_N
//   predictions/<task>/pred_NNNN.png + index.json
//   reports/<task>.json, reports/<task>.csv

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "densedit/backbone.hpp"
#include "densedit/engine.hpp"
#include "densedit/metrics.hpp"
#include "densedit/registry.hpp"

namespace densedit::runner {

namespace fs = std::filesystem;

/// Collects artifact paths and writes run.json when finished.
class RunRecord {
 public:
  RunRecord(std::string command, fs::path run_dir, nlohmann::json config, std::uint64_t seed);
  void add_artifact(const fs::path& path);
  /// Writes run.json; returns its path.
  fs::path finish();

 private:
  std::string command_;
  fs::path run_dir_;
  nlohmann::json config_;
  std::uint64_t seed_;
  std::string started_;
  std::vector<std::string> artifacts_;
};

void write_text(const fs::path& path, const std::string& text);
nlohmann::json read_json(const fs::path& path);

struct LoraSettings {
  int rank = 4;
  double alpha = 4.0;
  std::vector<std::string> targets = kDefaultLoraTargets;
};

nlohmann::json to_json(const LoraSettings& l);
LoraSettings lora_settings_from_json(const nlohmann::json& j, LoraSettings base = {});

void cmd_synth(std::uint64_t seed, const fs::path& out_dir, const SyntheticOptions& options = {});

struct TrainCommand {
  fs::path manifest;
  /// A task id, or "mixed" for every task in the manifest.
  std::string task;
  TrainConfig train;
  ModelConfig model;
  LoraSettings lora;
  fs::path out_dir;
};

struct TrainOutcome {
  fs::path checkpoint;
  std::vector<double> loss_history;
};

TrainOutcome cmd_train(const TrainCommand& cmd);

struct PredictCommand {
  fs::path checkpoint;
  fs::path manifest;
  std::string task;
  int infer_steps = 20;
  /// Sampler seed; the split and demo seed come from the checkpoint.
  std::uint64_t seed = 0;
  std::optional<PromptMode> prompt_mode;  // defaults to the training mode
  std::optional<DemoGating> demo_gating;  // defaults to the training gating
  fs::path out_dir;
};

/// Writes predictions for the held-out split; returns the prediction dir.
fs::path cmd_predict(const PredictCommand& cmd);

struct EvaluateCommand {
  fs::path manifest;
  std::string task;
  fs::path pred_dir;
  fs::path out_dir;
};

metrics::MetricReport cmd_evaluate(const EvaluateCommand& cmd);

/// Aggregates reports/<task>.json from each run directory (or report files
/// given directly). Categories come from the manifest when provided.
metrics::AggregateSummary cmd_report(const std::vector<fs::path>& inputs, const std::optional<fs::path>& manifest,
                                     const fs::path& out_dir);

struct SweepCommand {
  fs::path checkpoint;
  fs::path manifest;
  std::string task;
  std::vector<int> steps_list{1, 4, 10, 20, 50};
  std::uint64_t seed = 0;
  fs::path out_dir;
};

struct SweepRow {
  int steps = 0;
  double score = 0.0;
};

/// score-vs-steps CSV and plot.
std::vector<SweepRow> cmd_sweep_steps(const SweepCommand& cmd);

struct AblateCommand {
  /// With a checkpoint the modes are applied at inference; without one a
  /// model is trained per mode from `train`.
  std::optional<fs::path> checkpoint;
  fs::path manifest;
  std::string task;
  std::vector<PromptMode> modes{PromptMode::with, PromptMode::without, PromptMode::random};
  TrainConfig train;
  ModelConfig model;
  LoraSettings lora;
  int infer_steps = 20;
  std::uint64_t seed = 0;
  fs::path out_dir;
};

struct AblateRow {
  PromptMode mode = PromptMode::with;
  std::string prompt;
  double score = 0.0;
};

std::vector<AblateRow> cmd_ablate_prompt(const AblateCommand& cmd);

/// Held-out evaluation of a model in memory (no files written).
metrics::MetricReport evaluate_model(const ModelState& state, const Registry& registry, const TaskSpec& task,
                                     const SplitSpec& split, const InferOptions& options);

}  // namespace densedit::runner
