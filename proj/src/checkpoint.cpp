#include "densedit/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace densedit {
namespace {

constexpr char kMagic[8] = {'D', 'D', 'I', 'T', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const std::string& what) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw Error("checkpoint: truncated " + what);
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelState& state, const CheckpointMeta& meta) {
  nlohmann::json tensors = nlohmann::json::array();
  state.for_each_param([&](const Param& p) {
    tensors.push_back({{"name", p.name}, {"rows", p.value.rows}, {"cols", p.value.cols}, {"trainable", p.trainable}});
  });
  nlohmann::json lora = nullptr;
  for (const Block& b : state.blocks) {
    for (const Linear* l : {&b.q, &b.k, &b.v, &b.o, &b.ffn_in, &b.ffn_out}) {
      if (l->lora && lora.is_null()) {
        lora = {{"rank", l->lora->rank}, {"alpha", l->lora->scale * l->lora->rank}, {"targets", state.lora_targets}};
      }
    }
  }
  const nlohmann::json header = {{"config", to_json(state.config)},
                                 {"seed", meta.seed},
                                 {"step", meta.step},
                                 {"lora", lora},
                                 {"tensors", tensors},
                                 {"extra", meta.extra}};
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write checkpoint '" + tmp.string() + "'");
    out.write(kMagic, sizeof(kMagic));
    write_pod(out, kVersion);
    write_pod(out, static_cast<std::uint64_t>(text.size()));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    state.for_each_param([&](const Param& p) {
      out.write(reinterpret_cast<const char*>(p.value.data.data()),
                static_cast<std::streamsize>(p.value.data.size() * sizeof(double)));
    });
    out.flush();
    if (!out) throw Error("error while writing checkpoint '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint '" + path.string() + "'");
  char magic[sizeof(kMagic)];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw Error("'" + path.string() + "' is not a checkpoint");
  }
  const auto version = read_pod<std::uint32_t>(in, "version");
  if (version != kVersion) throw Error("checkpoint: unsupported version " + std::to_string(version));
  const auto len = read_pod<std::uint64_t>(in, "header length");
  if (len > (1u << 26)) throw Error("checkpoint: implausible header length");
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len))) throw Error("checkpoint: truncated header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("checkpoint: bad header: ") + e.what());
  }

  LoadedCheckpoint out;
  try {
    out.state = make_model(model_config_from_json(header.at("config")));
    if (!header.at("lora").is_null()) {
      const auto& l = header.at("lora");
      apply_lora(out.state, l.at("rank").get<int>(), l.at("alpha").get<double>(),
                 l.at("targets").get<std::vector<std::string>>());
    }
    out.meta.step = header.at("step").get<std::uint64_t>();
    out.meta.seed = header.at("seed").get<std::uint64_t>();
    out.meta.extra = header.value("extra", nlohmann::json::object());

    const auto& tensors = header.at("tensors");
    std::size_t i = 0;
    out.state.for_each_param([&](Param& p) {
      if (i >= tensors.size()) throw Error("checkpoint: missing tensor '" + p.name + "'");
      const auto& t = tensors[i++];
      if (t.at("name").get<std::string>() != p.name || t.at("rows").get<std::size_t>() != p.value.rows ||
          t.at("cols").get<std::size_t>() != p.value.cols) {
        throw Error("checkpoint: tensor layout mismatch at '" + p.name + "'");
      }
      p.trainable = t.at("trainable").get<bool>();
      if (!in.read(reinterpret_cast<char*>(p.value.data.data()),
                   static_cast<std::streamsize>(p.value.data.size() * sizeof(double)))) {
        throw Error("checkpoint: truncated tensor '" + p.name + "'");
      }
    });
    if (i != tensors.size()) throw Error("checkpoint: unexpected extra tensors");
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("checkpoint: bad header: ") + e.what());
  }
  return out;
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected) {
  LoadedCheckpoint ck = load_checkpoint(path);
  if (!(ck.state.config == expected)) {
    throw Error("checkpoint '" + path.string() + "' was saved with model config " + to_json(ck.state.config).dump() +
                ", expected " + to_json(expected).dump());
  }
  return ck;
}

}  // namespace densedit
