#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "moembed/datapipe/curation.hpp"
#include "moembed/encoder/config.hpp"
#include "moembed/error.hpp"
#include "moembed/moe/upcycle.hpp"
#include "moembed/trainer/ablation.hpp"
#include "moembed/trainer/config.hpp"

namespace moembed {

struct DataSection {
  std::optional<std::filesystem::path> pairs;  // PairRecord JSONL
  std::optional<std::filesystem::path> texts;  // {"text"} JSONL for MLM
  std::optional<std::filesystem::path> task;   // directory with queries/corpus/qrels
  std::optional<std::filesystem::path> init;   // checkpoint to start from
  std::size_t max_vocab = 4096;
};

struct UpcycleSection {
  std::string layers = "alternate-from-second";  // or "all", or "1,3,5"
  UpcycleOptions options;
};

/// Embedder used by mining (teacher) and filtering.
struct EmbedderSection {
  std::string kind = "hashing";  // "hashing" or "model" (the init checkpoint)
  std::size_t hashing_dim = 1024;
  std::size_t max_len = 64;
};

struct MiningSection {
  MiningConfig config;
  EmbedderSection teacher;
};

struct FilterSection {
  std::size_t top_k = 2;
  std::size_t shard_size = kDefaultShardSize;
  EmbedderSection embedder;
};

struct EvalSection {
  std::size_t dim = 0;  // 0 means the model's full width
  std::size_t k = 10;
};

/// One experiment: model layout, training overrides, data paths and the
/// settings of each curation/eval step. Paths are relative to the file.
struct RunConfig {
  EncoderConfig encoder;
  nlohmann::json train = nlohmann::json::object();  // overrides applied to each stage preset
  DataSection data;
  UpcycleSection upcycle;
  MiningSection mining;
  FilterSection filter;
  EvalSection eval;
  AblationConfig ablation;
  std::optional<std::uint64_t> seed;

  /// Stage preset with the `train` overrides and the seed applied.
  TrainConfig train_config(Stage stage) const {
    TrainConfig c = stage == Stage::MLM ? TrainConfig::mlm()
                    : stage == Stage::ContrastivePretrain ? TrainConfig::pretrain()
                                                          : TrainConfig::finetune();
    update_from_json(c, train);
    if (c.stage != stage) {
      throw ConfigError("train.stage is '" + to_string(c.stage) + "' but the command runs '" + to_string(stage) + "'");
    }
    if (seed) c.seed = *seed;
    c.validate();
    return c;
  }
};

namespace detail {

inline void check_keys(const nlohmann::json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw ConfigError("'" + where + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    bool known = false;
    for (const char* k : keys) known = known || key == k;
    if (!known) throw ConfigError("unknown key '" + where + "." + key + "'");
  }
}

template <class T>
void read_key(const nlohmann::json& j, const char* key, T& field, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    field = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("invalid value for '" + where + "." + key + "'");
  }
}

inline void read_path(const nlohmann::json& j, const char* key, std::optional<std::filesystem::path>& field,
                      const std::filesystem::path& base, const std::string& where) {
  std::string s;
  read_key(j, key, s, where);
  if (s.empty()) return;
  std::filesystem::path p(s);
  field = p.is_absolute() ? p : base / p;
}

inline void read_embedder(const nlohmann::json& j, EmbedderSection& e, const std::string& where) {
  check_keys(j, {"kind", "hashing_dim", "max_len"}, where);
  read_key(j, "kind", e.kind, where);
  read_key(j, "hashing_dim", e.hashing_dim, where);
  read_key(j, "max_len", e.max_len, where);
  if (e.kind != "hashing" && e.kind != "model") {
    throw ConfigError("invalid value for '" + where + ".kind' (expected hashing or model)");
  }
  if (e.hashing_dim == 0) throw ConfigError("invalid value for '" + where + ".hashing_dim'");
}

}  // namespace detail

/// Layer list for "alternate-from-second", "all" or comma-separated indices.
inline std::vector<std::size_t> parse_layer_spec(const std::string& text, std::size_t num_layers) {
  if (text == "alternate-from-second") return alternate_layers_from_second(num_layers);
  if (text == "all") return all_layers(num_layers);
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size()) throw ConfigError("invalid layer list '" + text + "'");
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError("invalid layer list '" + text + "'");
  return out;
}

inline RunConfig parse_run_config(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  using detail::read_key;
  RunConfig c;
  detail::check_keys(j, {"encoder", "train", "data", "upcycle", "mining", "filter", "eval", "ablation", "seed"}, "config");
  if (j.contains("encoder")) {
    try {
      c.encoder = j["encoder"].get<EncoderConfig>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("invalid value in 'encoder': ") + e.what());
    }
  }
  if (j.contains("train")) {
    c.train = j["train"];
    TrainConfig probe;
    update_from_json(probe, c.train);
  }
  if (j.contains("seed")) {
    std::uint64_t s = 0;
    read_key(j, "seed", s, "config");
    c.seed = s;
  }
  if (j.contains("data")) {
    const auto& d = j["data"];
    detail::check_keys(d, {"pairs", "texts", "task", "init", "max_vocab"}, "data");
    detail::read_path(d, "pairs", c.data.pairs, base_dir, "data");
    detail::read_path(d, "texts", c.data.texts, base_dir, "data");
    detail::read_path(d, "task", c.data.task, base_dir, "data");
    detail::read_path(d, "init", c.data.init, base_dir, "data");
    read_key(d, "max_vocab", c.data.max_vocab, "data");
  }
  if (j.contains("upcycle")) {
    const auto& u = j["upcycle"];
    detail::check_keys(u, {"layers", "experts", "top_k", "router_noise"}, "upcycle");
    if (u.contains("layers") && u["layers"].is_array()) {
      std::vector<std::size_t> v;
      read_key(u, "layers", v, "upcycle");
      c.upcycle.layers.clear();
      for (auto l : v) c.upcycle.layers += (c.upcycle.layers.empty() ? "" : ",") + std::to_string(l);
    } else {
      read_key(u, "layers", c.upcycle.layers, "upcycle");
    }
    read_key(u, "experts", c.upcycle.options.experts, "upcycle");
    read_key(u, "top_k", c.upcycle.options.top_k, "upcycle");
    read_key(u, "router_noise", c.upcycle.options.router_noise, "upcycle");
  }
  if (j.contains("mining")) {
    const auto& m = j["mining"];
    detail::check_keys(m, {"margin", "num_negatives", "candidate_pool", "teacher"}, "mining");
    if (m.contains("margin")) {
      if (m["margin"].is_null()) {
        c.mining.config.margin.reset();
      } else {
        double v = 0.0;
        read_key(m, "margin", v, "mining");
        c.mining.config.margin = v;
      }
    }
    read_key(m, "num_negatives", c.mining.config.num_negatives, "mining");
    read_key(m, "candidate_pool", c.mining.config.candidate_pool, "mining");
    if (m.contains("teacher")) detail::read_embedder(m["teacher"], c.mining.teacher, "mining.teacher");
  }
  if (c.mining.config.margin && !(*c.mining.config.margin > 0.0 && *c.mining.config.margin <= 1.0)) {
    throw ConfigError("invalid value for 'mining.margin' (must lie in (0, 1] or be null)");
  }
  if (c.mining.config.num_negatives == 0) throw ConfigError("invalid value for 'mining.num_negatives'");
  if (j.contains("filter")) {
    const auto& f = j["filter"];
    detail::check_keys(f, {"top_k", "shard_size", "embedder"}, "filter");
    read_key(f, "top_k", c.filter.top_k, "filter");
    read_key(f, "shard_size", c.filter.shard_size, "filter");
    if (f.contains("embedder")) detail::read_embedder(f["embedder"], c.filter.embedder, "filter.embedder");
    if (c.filter.top_k == 0) throw ConfigError("invalid value for 'filter.top_k'");
    if (c.filter.shard_size == 0) throw ConfigError("invalid value for 'filter.shard_size'");
  }
  if (j.contains("eval")) {
    const auto& e = j["eval"];
    detail::check_keys(e, {"dim", "k"}, "eval");
    read_key(e, "dim", c.eval.dim, "eval");
    read_key(e, "k", c.eval.k, "eval");
    if (c.eval.k == 0) throw ConfigError("invalid value for 'eval.k'");
  }
  if (j.contains("ablation")) {
    const auto& a = j["ablation"];
    detail::check_keys(a, {"large_hidden", "large_mlp", "large_heads", "experts", "top_k", "router_noise",
                           "batch_sizes", "seeds", "pairs_per_run"},
                       "ablation");
    read_key(a, "large_hidden", c.ablation.large_hidden, "ablation");
    read_key(a, "large_mlp", c.ablation.large_mlp, "ablation");
    read_key(a, "large_heads", c.ablation.large_heads, "ablation");
    read_key(a, "experts", c.ablation.experts, "ablation");
    read_key(a, "top_k", c.ablation.top_k, "ablation");
    read_key(a, "router_noise", c.ablation.router_noise, "ablation");
    read_key(a, "batch_sizes", c.ablation.batch_sizes, "ablation");
    read_key(a, "seeds", c.ablation.seeds, "ablation");
    read_key(a, "pairs_per_run", c.ablation.pairs_per_run, "ablation");
  }
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw InputError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_run_config(j, path.parent_path());
}

}  // namespace moembed
