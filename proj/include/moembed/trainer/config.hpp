#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "moembed/error.hpp"
#include "moembed/objectives/losses.hpp"
#include "moembed/objectives/masking.hpp"

namespace moembed {

enum class Stage { MLM, ContrastivePretrain, ContrastiveFinetune };
enum class Schedule { Linear, Cosine };

inline std::string to_string(Stage s) {
  switch (s) {
    case Stage::MLM: return "mlm";
    case Stage::ContrastivePretrain: return "pretrain";
    case Stage::ContrastiveFinetune: return "finetune";
  }
  return "?";
}

inline Stage parse_stage(const std::string& s) {
  if (s == "mlm") return Stage::MLM;
  if (s == "pretrain") return Stage::ContrastivePretrain;
  if (s == "finetune") return Stage::ContrastiveFinetune;
  throw ConfigError("unknown stage '" + s + "'");
}

inline std::string to_string(Schedule s) { return s == Schedule::Linear ? "linear" : "cosine"; }

inline Schedule parse_schedule(const std::string& s) {
  if (s == "linear") return Schedule::Linear;
  if (s == "cosine") return Schedule::Cosine;
  throw ConfigError("unknown schedule '" + s + "'");
}

struct TrainConfig {
  Stage stage = Stage::ContrastivePretrain;
  std::size_t batch_size = 64;
  double peak_lr = 8e-5;
  std::size_t warmup_steps = 1000;
  std::size_t total_steps = 10000;
  // When positive, total_steps is derived from the data: epochs * batches per epoch.
  std::size_t epochs = 0;
  Schedule schedule = Schedule::Cosine;
  double max_grad_norm = 1.0;
  double temperature = kDefaultTemperature;
  double balance_alpha = 1.0;
  std::size_t max_len_query = 32;
  std::size_t max_len_doc = 256;
  std::vector<std::size_t> mrl_dims;  // finetuning only; empty trains the full width
  std::size_t num_hard_negatives = 0;
  std::size_t grad_accumulation = 1;  // micro-batches per step (MLM only)
  double mlm_probability = kDefaultMlmProbability;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;

  /// Stage presets at full scale.
  static TrainConfig mlm() {
    TrainConfig c;
    c.stage = Stage::MLM;
    c.peak_lr = 4e-4;
    c.warmup_steps = 500;
    c.total_steps = 10000;
    c.schedule = Schedule::Linear;
    c.grad_accumulation = 8;
    c.max_len_doc = 512;
    return c;
  }
  static TrainConfig pretrain() {
    TrainConfig c;
    c.stage = Stage::ContrastivePretrain;
    c.batch_size = 16384;
    return c;
  }
  static TrainConfig finetune() {
    TrainConfig c;
    c.stage = Stage::ContrastiveFinetune;
    c.batch_size = 256;
    c.peak_lr = 2e-5;
    c.warmup_steps = 400;
    c.epochs = 1;
    c.schedule = Schedule::Linear;
    c.max_len_query = 512;
    c.max_len_doc = 512;
    c.num_hard_negatives = 10;
    c.mrl_dims = {768, 256};
    return c;
  }

  void validate() const {
    if (!(peak_lr > 0.0)) throw ConfigError("peak_lr must be positive");
    if (epochs == 0 && warmup_steps > total_steps) throw ConfigError("warmup_steps exceeds total_steps");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (grad_accumulation == 0) throw ConfigError("grad_accumulation must be positive");
    if (grad_accumulation > 1 && stage != Stage::MLM) {
      throw ConfigError("grad_accumulation is only supported for the mlm stage");
    }
    if (batch_size % grad_accumulation != 0) throw ConfigError("batch_size must be divisible by grad_accumulation");
    if (!(max_grad_norm > 0.0)) throw ConfigError("max_grad_norm must be positive");
    if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
    if (balance_alpha < 0.0) throw ConfigError("balance_alpha must be non-negative");
    if (max_len_query == 0 || max_len_doc == 0) throw ConfigError("max lengths must be positive");
  }
};

NLOHMANN_JSON_SERIALIZE_ENUM(Stage, {{Stage::MLM, "mlm"},
                                     {Stage::ContrastivePretrain, "pretrain"},
                                     {Stage::ContrastiveFinetune, "finetune"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Schedule, {{Schedule::Linear, "linear"}, {Schedule::Cosine, "cosine"}})

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"stage", c.stage},
       {"batch_size", c.batch_size},
       {"peak_lr", c.peak_lr},
       {"warmup_steps", c.warmup_steps},
       {"total_steps", c.total_steps},
       {"epochs", c.epochs},
       {"schedule", c.schedule},
       {"max_grad_norm", c.max_grad_norm},
       {"temperature", c.temperature},
       {"balance_alpha", c.balance_alpha},
       {"max_len_query", c.max_len_query},
       {"max_len_doc", c.max_len_doc},
       {"mrl_dims", c.mrl_dims},
       {"num_hard_negatives", c.num_hard_negatives},
       {"grad_accumulation", c.grad_accumulation},
       {"mlm_probability", c.mlm_probability},
       {"weight_decay", c.weight_decay},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"adam_eps", c.adam_eps},
       {"seed", c.seed}};
}

/// Missing keys keep their current values; unknown keys are rejected.
inline void update_from_json(TrainConfig& c, const nlohmann::json& j, const std::string& where = "train") {
  nlohmann::json current = c;
  for (const auto& [key, value] : j.items()) {
    if (!current.contains(key)) throw ConfigError("unknown key '" + where + "." + key + "'");
    current[key] = value;
  }
  auto get = [&](const char* key, auto& field) {
    try {
      field = current[key].get<std::remove_reference_t<decltype(field)>>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("invalid value for '" + where + "." + key + "'");
    }
  };
  std::string stage, schedule;
  get("stage", stage);
  get("schedule", schedule);
  c.stage = parse_stage(stage);
  c.schedule = parse_schedule(schedule);
  get("batch_size", c.batch_size);
  get("peak_lr", c.peak_lr);
  get("warmup_steps", c.warmup_steps);
  get("total_steps", c.total_steps);
  get("epochs", c.epochs);
  get("max_grad_norm", c.max_grad_norm);
  get("temperature", c.temperature);
  get("balance_alpha", c.balance_alpha);
  get("max_len_query", c.max_len_query);
  get("max_len_doc", c.max_len_doc);
  get("mrl_dims", c.mrl_dims);
  get("num_hard_negatives", c.num_hard_negatives);
  get("grad_accumulation", c.grad_accumulation);
  get("mlm_probability", c.mlm_probability);
  get("weight_decay", c.weight_decay);
  get("beta1", c.beta1);
  get("beta2", c.beta2);
  get("adam_eps", c.adam_eps);
  get("seed", c.seed);
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c = TrainConfig{};
  update_from_json(c, j);
}

}  // namespace moembed
