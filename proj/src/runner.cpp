#include "densedit/runner.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "densedit/checkpoint.hpp"
#include "densedit/image_io.hpp"
#include "densedit/plot.hpp"

namespace densedit::runner {
namespace {

std::string utc_now() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream out;
  out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return out.str();
}

std::string pred_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "pred_%04zu.png", index);
  return buf;
}

std::string csv_quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string fmt(double v) {
  std::ostringstream out;
  out << std::setprecision(10) << v;
  return out.str();
}

/// Training settings recorded in a checkpoint (defaults when absent).
TrainConfig checkpoint_train_config(const LoadedCheckpoint& ck) {
  TrainConfig base;
  base.seed = ck.meta.seed;
  if (ck.meta.extra.contains("train")) return train_config_from_json(ck.meta.extra.at("train"), base);
  return base;
}

struct HeldOut {
  LoadedCheckpoint ck;
  Registry registry;
  const TaskSpec* task = nullptr;
  TrainConfig train;
  SplitSpec split;
};

HeldOut open_held_out(const fs::path& checkpoint, const fs::path& manifest, const std::string& task_id) {
  HeldOut h{load_checkpoint(checkpoint), load_manifest(manifest), nullptr, {}, {}};
  h.task = &h.registry.task(task_id);
  h.train = checkpoint_train_config(h.ck);
  h.split = split(*h.task, h.train.seed, h.train.n_train);
  return h;
}

InferOptions infer_options(const HeldOut& h, int steps, std::uint64_t seed, PromptMode mode, DemoGating gating) {
  InferOptions o;
  o.steps = steps;
  o.seed = seed;
  o.prompt_mode = mode;
  o.demo_gating = gating;
  if (auto c = choose_demo(h.registry, *h.task, h.split, h.train.seed, gating)) o.demo = std::move(c->pair);
  return o;
}

void write_report_files(const fs::path& reports_dir, const metrics::MetricReport& report, RunRecord& record) {
  const fs::path json_path = reports_dir / (report.task_id + ".json");
  const fs::path csv_path = reports_dir / (report.task_id + ".csv");
  write_text(json_path, metrics::to_json(report).dump(2) + "\n");
  write_text(csv_path, metrics::reports_to_csv({report}));
  record.add_artifact(json_path);
  record.add_artifact(csv_path);
}

}  // namespace

RunRecord::RunRecord(std::string command, fs::path run_dir, nlohmann::json config, std::uint64_t seed)
    : command_(std::move(command)), run_dir_(std::move(run_dir)), config_(std::move(config)), seed_(seed),
      started_(utc_now()) {}

void RunRecord::add_artifact(const fs::path& path) {
  std::error_code ec;
  const fs::path rel = fs::relative(path, run_dir_, ec);
  artifacts_.push_back(ec || rel.empty() ? path.string() : rel.string());
}

fs::path RunRecord::finish() {
  const std::string stamp = started_;
  std::string run_id = command_ + "-" + stamp;
  for (char& c : run_id) {
    if (c == ':') c = '-';
  }
  const nlohmann::json j = {{"run_id", run_id},   {"command", command_}, {"config", config_},
                            {"seed", seed_},      {"start", started_},   {"end", utc_now()},
                            {"artifacts", artifacts_}};
  const fs::path path = run_dir_ / "run.json";
  write_text(path, j.dump(2) + "\n");
  return path;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw Error("error while writing '" + path.string() + "'");
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error("'" + path.string() + "': " + e.what());
  }
}

nlohmann::json to_json(const LoraSettings& l) {
  return {{"rank", l.rank}, {"alpha", l.alpha}, {"targets", l.targets}};
}

LoraSettings lora_settings_from_json(const nlohmann::json& j, LoraSettings l) {
  try {
    l.rank = j.value("rank", l.rank);
    l.alpha = j.value("alpha", l.alpha);
    if (j.contains("targets")) l.targets = j.at("targets").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("lora settings: ") + e.what());
  }
  return l;
}

void cmd_synth(std::uint64_t seed, const fs::path& out_dir, const SyntheticOptions& options) {
  RunRecord record("synth", out_dir,
                   {{"image_size", options.image_size}, {"samples_per_task", options.samples_per_task}}, seed);
  const Registry reg = generate_synthetic_suite(seed, out_dir, options);
  record.add_artifact(out_dir / "manifest.json");
  for (const TaskSpec& t : reg.tasks()) {
    for (const SampleRef& s : t.samples) record.add_artifact(reg.resolve(s.label_path));
  }
  record.finish();
}

TrainOutcome cmd_train(const TrainCommand& cmd) {
  const Registry reg = load_manifest(cmd.manifest);
  TrainConfig tc = cmd.train;
  if (cmd.task == "mixed") {
    tc.tasks.clear();
    for (const TaskSpec& t : reg.tasks()) tc.tasks.push_back(t.task_id);
  } else {
    reg.task(cmd.task);
    tc.tasks = {cmd.task};
  }
  validate(tc);
  if (tc.checkpoint_every == 0) tc.checkpoint_every = tc.steps;
  tc.checkpoint_dir = cmd.out_dir / "checkpoints";

  const nlohmann::json snapshot = {{"command", "train"},
                                   {"manifest", fs::absolute(cmd.manifest).string()},
                                   {"task", cmd.task},
                                   {"model", to_json(cmd.model)},
                                   {"lora", to_json(cmd.lora)},
                                   {"train", to_json(tc)}};
  fs::create_directories(cmd.out_dir);
  write_text(cmd.out_dir / "config.json", snapshot.dump(2) + "\n");
  RunRecord record("train", cmd.out_dir, snapshot, tc.seed);
  record.add_artifact(cmd.out_dir / "config.json");

  ModelState state = make_model(cmd.model);
  apply_lora(state, cmd.lora.rank, cmd.lora.alpha, cmd.lora.targets);
  const TrainResult result = train(tc, reg, state);

  std::string csv = "step,loss\n";
  PlotSeries series{"loss", {}, {}};
  for (std::size_t i = 0; i < result.loss_history.size(); ++i) {
    csv += std::to_string(i + 1) + "," + fmt(result.loss_history[i]) + "\n";
    series.x.push_back(static_cast<double>(i + 1));
    series.y.push_back(result.loss_history[i]);
  }
  write_text(cmd.out_dir / "loss.csv", csv);
  write_line_plot(cmd.out_dir / "loss.png", {series});
  record.add_artifact(cmd.out_dir / "loss.csv");
  record.add_artifact(cmd.out_dir / "loss.png");
  for (const fs::path& p : result.checkpoints) record.add_artifact(p);
  record.finish();
  return TrainOutcome{result.checkpoints.back(), result.loss_history};
}

fs::path cmd_predict(const PredictCommand& cmd) {
  if (cmd.infer_steps < 1) throw Error("predict: steps must be >= 1");
  const HeldOut h = open_held_out(cmd.checkpoint, cmd.manifest, cmd.task);
  const PromptMode mode = cmd.prompt_mode.value_or(h.train.prompt_mode);
  const DemoGating gating = cmd.demo_gating.value_or(h.train.demo_gating);
  const InferOptions base = infer_options(h, cmd.infer_steps, cmd.seed, mode, gating);

  const nlohmann::json snapshot = {{"command", "predict"},
                                   {"checkpoint", fs::absolute(cmd.checkpoint).string()},
                                   {"manifest", fs::absolute(cmd.manifest).string()},
                                   {"task", cmd.task},
                                   {"steps", cmd.infer_steps},
                                   {"prompt_mode", to_string(mode)},
                                   {"demo_gating", to_string(gating)}};
  RunRecord record("predict", cmd.out_dir, snapshot, cmd.seed);
  const fs::path dir = cmd.out_dir / "predictions" / cmd.task;
  fs::create_directories(dir);
  nlohmann::json samples = nlohmann::json::array();
  for (std::size_t idx : h.split.test) {
    const DenseSample s = h.registry.load_sample(*h.task, idx);
    InferOptions o = base;
    o.seed = cmd.seed + idx;
    const DenseLabel pred = infer(h.ck.state, *h.task, s.query, o);
    io::save_label(dir / pred_name(idx), pred, h.task->range);
    record.add_artifact(dir / pred_name(idx));
    samples.push_back({{"index", idx}, {"file", pred_name(idx)}});
  }
  const nlohmann::json index = {{"task", cmd.task},
                                {"split_seed", h.train.seed},
                                {"n_train", h.train.n_train},
                                {"steps", cmd.infer_steps},
                                {"samples", samples}};
  write_text(dir / "index.json", index.dump(2) + "\n");
  record.add_artifact(dir / "index.json");
  record.finish();
  return dir;
}

metrics::MetricReport cmd_evaluate(const EvaluateCommand& cmd) {
  const Registry reg = load_manifest(cmd.manifest);
  const TaskSpec& task = reg.task(cmd.task);
  const nlohmann::json index = read_json(cmd.pred_dir / "index.json");
  std::vector<DenseLabel> preds, gts;
  try {
    for (const auto& e : index.at("samples")) {
      const std::size_t idx = e.at("index").get<std::size_t>();
      preds.push_back(io::load_label(cmd.pred_dir / e.at("file").get<std::string>(), task.kind, task.range));
      gts.push_back(reg.load_sample(task, idx).label);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error("prediction index '" + (cmd.pred_dir / "index.json").string() + "': " + e.what());
  }
  if (preds.empty()) throw Error("no predictions found in '" + cmd.pred_dir.string() + "'");
  const metrics::MetricReport report = metrics::evaluate_task(task.task_id, task.kind, preds, gts, task.range);

  RunRecord record("evaluate", cmd.out_dir,
                   {{"command", "evaluate"},
                    {"manifest", fs::absolute(cmd.manifest).string()},
                    {"task", cmd.task},
                    {"pred_dir", fs::absolute(cmd.pred_dir).string()}},
                   0);
  write_report_files(cmd.out_dir / "reports", report, record);
  record.finish();
  return report;
}

metrics::AggregateSummary cmd_report(const std::vector<fs::path>& inputs, const std::optional<fs::path>& manifest,
                                     const fs::path& out_dir) {
  if (inputs.empty()) throw Error("report: no inputs");
  std::vector<fs::path> files;
  for (const fs::path& in : inputs) {
    if (fs::is_regular_file(in)) {
      files.push_back(in);
    } else if (fs::is_directory(in)) {
      const fs::path dir = fs::is_directory(in / "reports") ? in / "reports" : in;
      std::set<fs::path> found;
      for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().extension() == ".json") found.insert(e.path());
      }
      if (found.empty()) throw Error("report: no report files in '" + dir.string() + "'");
      files.insert(files.end(), found.begin(), found.end());
    } else {
      throw Error("report: '" + in.string() + "' does not exist");
    }
  }
  std::vector<metrics::MetricReport> reports;
  std::set<std::string> seen;
  for (const fs::path& f : files) {
    metrics::MetricReport r;
    try {
      r = metrics::report_from_json(read_json(f));
    } catch (const nlohmann::json::exception& e) {
      throw Error("report file '" + f.string() + "': " + e.what());
    }
    if (!seen.insert(r.task_id).second) throw Error("report: task '" + r.task_id + "' appears twice");
    reports.push_back(std::move(r));
  }
  std::map<std::string, std::string> categories;
  if (manifest) categories = load_manifest(*manifest).categories();
  const metrics::AggregateSummary summary = metrics::aggregate(reports, categories);

  std::string csv = "category,population,mean,tasks\n";
  for (const auto& [cat, pops] : summary.categories) {
    for (const auto& [pop, p] : pops) csv += cat + "," + pop + "," + fmt(p.mean) + "," + std::to_string(p.tasks) + "\n";
  }
  if (summary.overall_d) {
    csv += "overall,D," + fmt(summary.overall_d->mean) + "," + std::to_string(summary.overall_d->tasks) + "\n";
  }
  if (summary.overall_s) {
    csv += "overall,S," + fmt(summary.overall_s->mean) + "," + std::to_string(summary.overall_s->tasks) + "\n";
  }

  nlohmann::json inputs_json = nlohmann::json::array();
  for (const fs::path& f : files) inputs_json.push_back(fs::absolute(f).string());
  RunRecord record("report", out_dir, {{"command", "report"}, {"inputs", inputs_json}}, 0);
  write_text(out_dir / "summary.json", metrics::to_json(summary).dump(2) + "\n");
  write_text(out_dir / "summary.csv", csv);
  write_text(out_dir / "tasks.csv", metrics::reports_to_csv(reports));
  record.add_artifact(out_dir / "summary.json");
  record.add_artifact(out_dir / "summary.csv");
  record.add_artifact(out_dir / "tasks.csv");
  record.finish();
  return summary;
}

metrics::MetricReport evaluate_model(const ModelState& state, const Registry& registry, const TaskSpec& task,
                                     const SplitSpec& split, const InferOptions& options) {
  std::vector<DenseLabel> preds, gts;
  for (std::size_t idx : split.test) {
    const DenseSample s = registry.load_sample(task, idx);
    InferOptions o = options;
    o.seed = options.seed + idx;
    preds.push_back(infer(state, task, s.query, o));
    gts.push_back(s.label);
  }
  return metrics::evaluate_task(task.task_id, task.kind, preds, gts, task.range);
}

std::vector<SweepRow> cmd_sweep_steps(const SweepCommand& cmd) {
  if (cmd.steps_list.empty()) throw Error("sweep-steps: empty steps list");
  for (int k : cmd.steps_list) {
    if (k < 1) throw Error("sweep-steps: step counts must be >= 1");
  }
  const HeldOut h = open_held_out(cmd.checkpoint, cmd.manifest, cmd.task);
  nlohmann::json steps_json = cmd.steps_list;
  RunRecord record("sweep-steps", cmd.out_dir,
                   {{"command", "sweep-steps"},
                    {"checkpoint", fs::absolute(cmd.checkpoint).string()},
                    {"manifest", fs::absolute(cmd.manifest).string()},
                    {"task", cmd.task},
                    {"steps", steps_json}},
                   cmd.seed);
  std::vector<SweepRow> rows;
  std::string csv = "steps,score\n";
  PlotSeries series{"score", {}, {}};
  for (int k : cmd.steps_list) {
    const InferOptions o = infer_options(h, k, cmd.seed, h.train.prompt_mode, h.train.demo_gating);
    const double score = evaluate_model(h.ck.state, h.registry, *h.task, h.split, o).score;
    rows.push_back({k, score});
    csv += std::to_string(k) + "," + fmt(score) + "\n";
    series.x.push_back(k);
    series.y.push_back(score);
  }
  write_text(cmd.out_dir / "sweep_steps.csv", csv);
  write_line_plot(cmd.out_dir / "sweep_steps.png", {series});
  record.add_artifact(cmd.out_dir / "sweep_steps.csv");
  record.add_artifact(cmd.out_dir / "sweep_steps.png");
  record.finish();
  return rows;
}

std::vector<AblateRow> cmd_ablate_prompt(const AblateCommand& cmd) {
  if (cmd.modes.empty()) throw Error("ablate-prompt: no prompt modes");
  nlohmann::json modes_json = nlohmann::json::array();
  for (PromptMode m : cmd.modes) modes_json.push_back(to_string(m));
  RunRecord record("ablate-prompt", cmd.out_dir,
                   {{"command", "ablate-prompt"},
                    {"checkpoint", cmd.checkpoint ? fs::absolute(*cmd.checkpoint).string() : ""},
                    {"manifest", fs::absolute(cmd.manifest).string()},
                    {"task", cmd.task},
                    {"modes", modes_json},
                    {"train", to_json(cmd.train)}},
                   cmd.seed);
  std::vector<AblateRow> rows;
  for (PromptMode mode : cmd.modes) {
    fs::path checkpoint;
    if (cmd.checkpoint) {
      checkpoint = *cmd.checkpoint;
    } else {
      TrainCommand tc{cmd.manifest, cmd.task, cmd.train, cmd.model, cmd.lora, cmd.out_dir / ("train_" + to_string(mode))};
      tc.train.prompt_mode = mode;
      checkpoint = cmd_train(tc).checkpoint;
      record.add_artifact(checkpoint);
    }
    const HeldOut h = open_held_out(checkpoint, cmd.manifest, cmd.task);
    const InferOptions o = infer_options(h, cmd.infer_steps, cmd.seed, mode, h.train.demo_gating);
    const double score = evaluate_model(h.ck.state, h.registry, *h.task, h.split, o).score;
    rows.push_back({mode, render_prompt(*h.task, mode), score});
  }
  std::string csv = "mode,prompt,score\n";
  for (const AblateRow& r : rows) csv += to_string(r.mode) + "," + csv_quote(r.prompt) + "," + fmt(r.score) + "\n";
  write_text(cmd.out_dir / "ablate_prompt.csv", csv);
  record.add_artifact(cmd.out_dir / "ablate_prompt.csv");
  record.finish();
  return rows;
}

}  // namespace densedit::runner
