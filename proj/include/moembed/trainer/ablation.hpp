#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "moembed/datapipe/synthetic.hpp"
#include "moembed/eval/retrieval.hpp"
#include "moembed/moe/upcycle.hpp"
#include "moembed/trainer/trainer.hpp"

namespace moembed {

/// Dense vs upcycled-MoE vs larger-dense sweep over batch sizes and seeds.
/// Every run sees the same number of training pairs, so smaller batches take
/// more steps.
struct AblationConfig {
  EncoderConfig dense;             // baseline; vocab_size is set from the data
  std::size_t large_hidden = 0;    // larger dense model; 0 skips it
  std::size_t large_mlp = 0;
  std::size_t large_heads = 0;     // 0 keeps dense.num_heads
  std::size_t experts = 4;
  std::size_t top_k = 1;           // 1 keeps active parameters equal to the baseline
  double router_noise = 0.01;
  std::vector<std::size_t> batch_sizes = {64, 256, 1024};
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  std::size_t pairs_per_run = 32768;
  TrainConfig train;               // stage, lr, temperature, ...; steps are derived
};

struct AblationModel {
  std::string name;
  double active_parameters = 0.0;
  std::size_t total_parameters = 0;
};

struct AblationResult {
  std::vector<RunScore> scores;
  std::vector<AblationModel> models;
  Comparison comparison;
};

/// Builds the three model variants for one seed.
inline std::vector<std::pair<std::string, EncoderModel>> ablation_models(const AblationConfig& cfg,
                                                                         const Tokenizer& tok, std::uint64_t seed) {
  EncoderConfig base = cfg.dense;
  base.vocab_size = tok.size();
  std::vector<std::pair<std::string, EncoderModel>> out;
  EncoderModel dense = init_encoder(base, seed, tok);
  out.emplace_back("moe", upcycle(dense, alternate_layers_from_second(base.num_layers),
                                  {.experts = cfg.experts, .top_k = cfg.top_k, .router_noise = cfg.router_noise, .seed = seed}));
  out.emplace(out.begin(), "dense", std::move(dense));
  if (cfg.large_hidden > 0) {
    EncoderConfig big = base;
    big.hidden_dim = cfg.large_hidden;
    big.mlp_dim = cfg.large_mlp > 0 ? cfg.large_mlp : 4 * cfg.large_hidden;
    if (cfg.large_heads > 0) big.num_heads = cfg.large_heads;
    big.output_dims.clear();
    out.emplace_back("dense_large", init_encoder(big, seed, tok));
  }
  return out;
}

/// Runs the sweep. `progress` (optional) receives one line per finished run.
inline AblationResult run_ablation(const AblationConfig& cfg, const std::vector<PairRecord>& pairs,
                                   const RetrievalTask& task, const Tokenizer& tok,
                                   const std::function<void(const RunScore&)>& progress = {}) {
  if (cfg.pairs_per_run == 0) throw ConfigError("pairs_per_run must be positive");
  AblationResult result;
  for (auto seed : cfg.seeds) {
    const auto variants = ablation_models(cfg, tok, seed);
    if (result.models.empty())
      for (const auto& [name, m] : variants) result.models.push_back({name, active_parameter_count(m), parameter_count(m)});
    for (auto batch : cfg.batch_sizes) {
      TrainConfig tc = cfg.train;
      tc.batch_size = batch;
      tc.epochs = 0;
      tc.total_steps = std::max<std::size_t>(1, cfg.pairs_per_run / batch);
      tc.warmup_steps = std::min(tc.warmup_steps, tc.total_steps / 10);
      tc.seed = seed;
      for (const auto& [name, init] : variants) {
        TrainState st = run_stage(tc, {{}, pairs}, init.clone());
        const std::size_t dim = st.model.config.hidden_dim;
        RunScore s{name, batch, dim, seed, ndcg_at_k(retrieve(st.model, task, dim, 10), task.qrels, 10)};
        if (progress) progress(s);
        result.scores.push_back(s);
      }
    }
  }
  // Models have different widths; compare at each model's full width.
  std::vector<RunScore> flat = result.scores;
  for (auto& s : flat) s.dim = 0;
  result.comparison = compare_runs(flat);
  result.comparison.json["models"] = nlohmann::json::array();
  for (const auto& m : result.models)
    result.comparison.json["models"].push_back(
        {{"name", m.name}, {"active_parameters", m.active_parameters}, {"total_parameters", m.total_parameters}});
  return result;
}

}  // namespace moembed
