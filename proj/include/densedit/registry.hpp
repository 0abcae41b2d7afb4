#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "densedit/task_codec.hpp"

namespace densedit {

enum class Category { adverse_env, smart_city, medical_assist, ecological_mon, safety_ctrl };
enum class Dai { yes, no };
enum class PromptMode { with, without, random };

std::string to_string(Category c);
Category category_from_string(const std::string& s);
std::string to_string(Dai d);
Dai dai_from_string(const std::string& s);
std::string to_string(PromptMode m);
PromptMode prompt_mode_from_string(const std::string& s);

struct SampleRef {
  std::string query_path;
  std::string label_path;
  /// Encoding range of a 16-bit regression PNG; defaults to the task range.
  std::optional<LabelRange> range;
  bool operator==(const SampleRef&) const = default;
};

struct TaskSpec {
  std::string task_id;
  Category category = Category::smart_city;
  LabelKind kind = LabelKind::binary_mask;
  std::string output_format;
  std::string scene;
  Dai dai = Dai::yes;
  std::optional<LabelRange> range;
  std::vector<SampleRef> samples;

  bool operator==(const TaskSpec&) const = default;
};

/// One (query, label) pair loaded from disk.
struct DenseSample {
  ImageTensor query;
  DenseLabel label;
};

/// Immutable after construction.
class Registry {
 public:
  Registry() = default;
  Registry(std::filesystem::path base_dir, std::vector<TaskSpec> tasks);

  const std::vector<TaskSpec>& tasks() const { return tasks_; }
  std::size_t size() const { return tasks_.size(); }
  const TaskSpec& task(const std::string& task_id) const;
  bool contains(const std::string& task_id) const { return index_.count(task_id) != 0; }
  const std::filesystem::path& base_dir() const { return base_dir_; }

  std::filesystem::path resolve(const std::string& relative) const { return base_dir_ / relative; }
  DenseSample load_sample(const TaskSpec& task, std::size_t index) const;
  std::map<std::string, std::string> categories() const;

 private:
  std::filesystem::path base_dir_;
  std::vector<TaskSpec> tasks_;
  std::map<std::string, std::size_t> index_;
};

/// Throws Error naming the offending task on any schema or invariant
/// violation. Sample paths are relative to the manifest's directory.
Registry load_manifest(const std::filesystem::path& path);
Registry parse_manifest(const nlohmann::json& doc, std::filesystem::path base_dir);
nlohmann::json manifest_to_json(const std::vector<TaskSpec>& tasks);
void save_manifest(const std::filesystem::path& path, const std::vector<TaskSpec>& tasks);

inline constexpr const char* kRandomPrompt = "#$%^&*!@";

/// "A <output format> of <scene>", "" or the fixed junk string.
std::string render_prompt(const TaskSpec& task, PromptMode mode);

struct SplitSpec {
  std::uint64_t seed = 0;
  std::size_t n_train = 15;
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

inline constexpr std::size_t kDefaultTrainSamples = 15;

/// Seeded uniform shuffle; the first n_train indices train, the rest test.
/// Both lists are returned sorted.
SplitSpec split(const TaskSpec& task, std::uint64_t seed, std::size_t n_train = kDefaultTrainSamples);

/// Text exchange with an external language model. Implementations are
/// injected by the host program.
class LlmClient {
 public:
  virtual ~LlmClient() = default;
  virtual std::string complete(const std::string& prompt) = 0;
};

/// Runs a shell command with the prompt on stdin and reads the answer from
/// stdout.
class CommandLlmClient : public LlmClient {
 public:
  explicit CommandLlmClient(std::string command) : command_(std::move(command)) {}
  std::string complete(const std::string& prompt) override;

 private:
  std::string command_;
};

extern const char* const kDaiInstruction;

std::string dai_prompt(const std::string& description, const std::string& demo_image_ref);
/// Maps "Yes"/"No" (case-insensitive, trailing punctuation allowed) to Dai;
/// anything else is an error.
Dai parse_dai_response(const std::string& response);
Dai classify_dai(const std::string& description, const std::string& demo_image_ref, LlmClient& client);

struct SyntheticOptions {
  int image_size = 32;
  int samples_per_task = 48;
};

inline constexpr LabelRange kSyntheticDepthRange{1.0, 20.0};

/// Depth of the empty ground plane (sky above the horizon) at a pixel row.
double synthetic_ground_depth(int row, int image_size);

/// Writes shapes-depth and shapes-mask tasks (shared query images) plus
/// manifest.json into out_dir and returns the loaded registry.
Registry generate_synthetic_suite(std::uint64_t seed, const std::filesystem::path& out_dir,
                                  const SyntheticOptions& options = {});

}  // namespace densedit
