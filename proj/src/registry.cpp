#include "densedit/registry.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <random>
#include <set>

#include "densedit/image_io.hpp"

namespace densedit {
namespace {

constexpr std::array<std::pair<Category, const char*>, 5> kCategories{{
    {Category::adverse_env, "adverse_env"},
    {Category::smart_city, "smart_city"},
    {Category::medical_assist, "medical_assist"},
    {Category::ecological_mon, "ecological_mon"},
    {Category::safety_ctrl, "safety_ctrl"},
}};

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

TaskSpec parse_task(const nlohmann::json& j, std::size_t position) {
  std::string id = "#" + std::to_string(position);
  try {
    TaskSpec t;
    t.task_id = j.at("task_id").get<std::string>();
    id = "'" + t.task_id + "'";
    if (t.task_id.empty()) throw Error("empty task_id");
    t.category = category_from_string(j.at("category").get<std::string>());
    t.kind = label_kind_from_string(j.at("kind").get<std::string>());
    t.output_format = j.at("output_format").get<std::string>();
    t.scene = j.at("scene").get<std::string>();
    t.dai = dai_from_string(j.at("dai").get<std::string>());
    if (j.contains("range") && !j.at("range").is_null()) {
      const auto& r = j.at("range");
      t.range = LabelRange{r.at("r_min").get<double>(), r.at("r_max").get<double>()};
      validate_range(*t.range);
    }
    if (t.kind == LabelKind::regression && !t.range) throw Error("regression task without range");
    if (t.kind == LabelKind::binary_mask && t.range) throw Error("mask task must not carry a range");
    for (const auto& s : j.at("samples")) {
      SampleRef ref{s.at("query_path").get<std::string>(), s.at("label_path").get<std::string>(), std::nullopt};
      if (s.contains("range") && !s.at("range").is_null()) {
        ref.range = LabelRange{s.at("range").at("r_min").get<double>(), s.at("range").at("r_max").get<double>()};
        validate_range(*ref.range);
      }
      t.samples.push_back(std::move(ref));
    }
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw Error("manifest task " + id + ": " + e.what());
  } catch (const Error& e) {
    throw Error("manifest task " + id + ": " + e.what());
  }
}

}  // namespace

std::string to_string(Category c) {
  for (const auto& [value, name] : kCategories) {
    if (value == c) return name;
  }
  return "unknown";
}

Category category_from_string(const std::string& s) {
  for (const auto& [value, name] : kCategories) {
    if (s == name) return value;
  }
  throw Error("unknown category '" + s + "'");
}

std::string to_string(Dai d) { return d == Dai::yes ? "Yes" : "No"; }

Dai dai_from_string(const std::string& s) {
  if (s == "Yes") return Dai::yes;
  if (s == "No") return Dai::no;
  throw Error("DAI must be \"Yes\" or \"No\", got '" + s + "'");
}

std::string to_string(PromptMode m) {
  switch (m) {
    case PromptMode::with: return "with";
    case PromptMode::without: return "without";
    case PromptMode::random: return "random";
  }
  return "with";
}

PromptMode prompt_mode_from_string(const std::string& s) {
  if (s == "with") return PromptMode::with;
  if (s == "without") return PromptMode::without;
  if (s == "random") return PromptMode::random;
  throw Error("unknown prompt mode '" + s + "'");
}

Registry::Registry(std::filesystem::path base_dir, std::vector<TaskSpec> tasks)
    : base_dir_(std::move(base_dir)), tasks_(std::move(tasks)) {
  for (std::size_t i = 0; i < tasks_.size(); ++i) {
    if (!index_.emplace(tasks_[i].task_id, i).second) {
      throw Error("manifest task '" + tasks_[i].task_id + "': duplicate task_id");
    }
  }
}

const TaskSpec& Registry::task(const std::string& task_id) const {
  const auto it = index_.find(task_id);
  if (it == index_.end()) throw Error("unknown task '" + task_id + "'");
  return tasks_[it->second];
}

DenseSample Registry::load_sample(const TaskSpec& task, std::size_t index) const {
  if (index >= task.samples.size()) throw Error("task '" + task.task_id + "': sample index out of range");
  const SampleRef& ref = task.samples[index];
  DenseSample s;
  s.query = io::load_rgb(resolve(ref.query_path));
  s.label = io::load_label(resolve(ref.label_path), task.kind, ref.range ? ref.range : task.range);
  if (task.kind == LabelKind::regression) s.label.range = task.range;
  return s;
}

std::map<std::string, std::string> Registry::categories() const {
  std::map<std::string, std::string> out;
  for (const TaskSpec& t : tasks_) out[t.task_id] = to_string(t.category);
  return out;
}

Registry parse_manifest(const nlohmann::json& doc, std::filesystem::path base_dir) {
  if (!doc.contains("tasks") || !doc.at("tasks").is_array()) throw Error("manifest: missing \"tasks\" array");
  std::vector<TaskSpec> tasks;
  std::size_t position = 0;
  for (const auto& j : doc.at("tasks")) tasks.push_back(parse_task(j, position++));
  return Registry(std::move(base_dir), std::move(tasks));
}

Registry load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open manifest '" + path.string() + "'");
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw Error("manifest '" + path.string() + "': " + e.what());
  }
  return parse_manifest(doc, path.parent_path());
}

nlohmann::json manifest_to_json(const std::vector<TaskSpec>& tasks) {
  nlohmann::json arr = nlohmann::json::array();
  for (const TaskSpec& t : tasks) {
    nlohmann::json samples = nlohmann::json::array();
    for (const SampleRef& s : t.samples) {
      nlohmann::json e = {{"query_path", s.query_path}, {"label_path", s.label_path}};
      if (s.range) e["range"] = {{"r_min", s.range->r_min}, {"r_max", s.range->r_max}};
      samples.push_back(std::move(e));
    }
    nlohmann::json j = {{"task_id", t.task_id},
                        {"category", to_string(t.category)},
                        {"kind", to_string(t.kind)},
                        {"output_format", t.output_format},
                        {"scene", t.scene},
                        {"dai", to_string(t.dai)},
                        {"samples", samples}};
    if (t.range) j["range"] = {{"r_min", t.range->r_min}, {"r_max", t.range->r_max}};
    arr.push_back(std::move(j));
  }
  return {{"tasks", arr}};
}

void save_manifest(const std::filesystem::path& path, const std::vector<TaskSpec>& tasks) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write manifest '" + path.string() + "'");
  out << manifest_to_json(tasks).dump(2) << '\n';
}

std::string render_prompt(const TaskSpec& task, PromptMode mode) {
  switch (mode) {
    case PromptMode::with: return "A " + task.output_format + " of " + task.scene;
    case PromptMode::without: return "";
    case PromptMode::random: return kRandomPrompt;
  }
  return "";
}

SplitSpec split(const TaskSpec& task, std::uint64_t seed, std::size_t n_train) {
  if (task.samples.size() < n_train + 1) {
    throw Error("task '" + task.task_id + "' has " + std::to_string(task.samples.size()) +
                " samples; a split needs at least " + std::to_string(n_train + 1));
  }
  std::vector<std::size_t> order(task.samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  SplitSpec s;
  s.seed = seed;
  s.n_train = n_train;
  s.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

const char* const kDaiInstruction =
    "You are given a description  and a demo image of a dense prediction task. Please determine whether the "
    "images involved in this task are well-aligned with the training distribution of DiT (e.g., images from "
    "LAION-5B), or if they represent a significant distribution shift (e.g., medical scans, satellite imagery).\n"
    "Please respond with Yes if the task aligns with DiT's training distribution, and No otherwise.";

std::string dai_prompt(const std::string& description, const std::string& demo_image_ref) {
  return std::string(kDaiInstruction) + "\n\nTask description: " + description + "\nDemo image: " + demo_image_ref +
         "\n";
}

Dai parse_dai_response(const std::string& response) {
  std::string s = response;
  const auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  while (!s.empty() && (s.back() == '.' || s.back() == '!')) s.pop_back();
  const std::string l = lower(s);
  if (l == "yes") return Dai::yes;
  if (l == "no") return Dai::no;
  throw Error("unparseable DAI response: '" + response + "'");
}

Dai classify_dai(const std::string& description, const std::string& demo_image_ref, LlmClient& client) {
  std::string answer;
  try {
    answer = client.complete(dai_prompt(description, demo_image_ref));
  } catch (const std::exception& e) {
    throw Error(std::string("DAI client failed: ") + e.what());
  }
  return parse_dai_response(answer);
}

std::string CommandLlmClient::complete(const std::string& prompt) {
  const std::filesystem::path tmp =
      std::filesystem::temp_directory_path() / ("densedit_dai_" + std::to_string(std::random_device{}()) + ".txt");
  {
    std::ofstream out(tmp);
    out << prompt;
  }
  const std::string cmd = command_ + " < '" + tmp.string() + "'";
  std::FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) {
    std::filesystem::remove(tmp);
    throw Error("cannot run DAI client command");
  }
  std::string out;
  std::array<char, 256> buf{};
  while (std::fgets(buf.data(), static_cast<int>(buf.size()), pipe)) out += buf.data();
  const int status = pclose(pipe);
  std::filesystem::remove(tmp);
  if (status != 0) throw Error("DAI client command exited with status " + std::to_string(status));
  return out;
}

}  // namespace densedit
