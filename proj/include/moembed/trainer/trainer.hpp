#pragma once

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "moembed/datapipe/records.hpp"
#include "moembed/datapipe/sampler.hpp"
#include "moembed/encoder/checkpoint.hpp"
#include "moembed/encoder/encoder.hpp"
#include "moembed/objectives/losses.hpp"
#include "moembed/objectives/masking.hpp"
#include "moembed/trainer/config.hpp"
#include "moembed/trainer/optimizer.hpp"

namespace moembed {

struct TrainState {
  EncoderModel model;
  AdamW optimizer;
  std::size_t step = 0;  // completed updates
  std::vector<double> loss_history;
  // All sampling (batch order, masks) is derived from (seed, step), so the
  // step counter doubles as the random state.

  static TrainState start(EncoderModel model) {
    TrainState s;
    s.optimizer = AdamW(model.named_parameters());
    s.model = std::move(model);
    return s;
  }
};

struct LayerMetrics {
  std::size_t layer = 0;
  std::vector<double> r;
  std::vector<double> p;
  double balance = 0.0;
};

struct StepMetrics {
  std::size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double contrastive = 0.0;  // the MLM loss in the mlm stage
  std::vector<double> balance_per_layer;
  double grad_norm = 0.0;
  std::vector<LayerMetrics> routing;
};

inline void to_json(nlohmann::json& j, const StepMetrics& m) {
  j = {{"step", m.step},
       {"lr", m.lr},
       {"loss", m.loss},
       {"contrastive", m.contrastive},
       {"balance_per_layer", m.balance_per_layer},
       {"grad_norm", m.grad_norm}};
}

/// Training inputs. MLM reads `texts`; the contrastive stages read `pairs`.
struct StageData {
  std::vector<std::string> texts;
  std::vector<PairRecord> pairs;
};

namespace detail {

inline std::vector<LayerMetrics> summarize_routing(const std::vector<LayerRouting>& routing) {
  std::vector<LayerMetrics> out;
  for (const auto& lr : routing) out.push_back({lr.layer, lr.stats.r, lr.stats.p.to_vector(), lr.balance.item()});
  return out;
}

inline std::string routing_dump(const std::vector<LayerMetrics>& routing) {
  std::ostringstream os;
  for (const auto& l : routing) {
    os << "\n  layer " << l.layer << " balance " << l.balance << " r=[";
    for (std::size_t i = 0; i < l.r.size(); ++i) os << (i ? " " : "") << l.r[i];
    os << "] p=[";
    for (std::size_t i = 0; i < l.p.size(); ++i) os << (i ? " " : "") << l.p[i];
    os << "]";
  }
  return os.str();
}

inline void require_finite(double loss, const std::vector<LayerMetrics>& routing, std::size_t step) {
  if (!std::isfinite(loss)) {
    throw NumericError("non-finite loss at step " + std::to_string(step) + "; routing stats:" + routing_dump(routing));
  }
}

/// Rows [begin, end) of a token batch, keeping its sequence length.
inline TokenBatch slice_rows(const TokenBatch& b, std::size_t begin, std::size_t end) {
  TokenBatch out;
  out.batch = end - begin;
  out.seq = b.seq;
  out.role = b.role;
  out.token_ids.assign(b.token_ids.begin() + static_cast<std::ptrdiff_t>(begin * b.seq),
                       b.token_ids.begin() + static_cast<std::ptrdiff_t>(end * b.seq));
  out.attention_mask.assign(b.attention_mask.begin() + static_cast<std::ptrdiff_t>(begin * b.seq),
                            b.attention_mask.begin() + static_cast<std::ptrdiff_t>(end * b.seq));
  return out;
}

inline std::vector<LayerMetrics> average_routing(const std::vector<std::vector<LayerMetrics>>& parts) {
  std::vector<LayerMetrics> out = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i)
    for (std::size_t l = 0; l < out.size(); ++l) {
      for (std::size_t e = 0; e < out[l].r.size(); ++e) {
        out[l].r[e] += parts[i][l].r[e];
        out[l].p[e] += parts[i][l].p[e];
      }
      out[l].balance += parts[i][l].balance;
    }
  const double n = static_cast<double>(parts.size());
  for (auto& l : out) {
    for (auto& v : l.r) v /= n;
    for (auto& v : l.p) v /= n;
    l.balance /= n;
  }
  return out;
}

}  // namespace detail

/// Computes the stage loss, backpropagates and fills `m` (except lr and
/// grad_norm). Gradients accumulate into the model parameters.
inline void mlm_backward(const EncoderModel& model, const std::vector<std::string>& texts, const TrainConfig& cfg,
                         std::size_t step, StepMetrics& m) {
  const std::size_t max_len = std::min(cfg.max_len_doc, model.config.max_seq_len);
  const TokenBatch full = tokenize_batch(model.tokenizer, texts, Role::Document, max_len);
  const std::size_t chunks = cfg.grad_accumulation;
  const std::size_t rows = full.batch / chunks;
  const std::uint64_t seed = mix_seed(cfg.seed ^ 0x6d6c6dULL, step);
  std::vector<MaskedBatch> masked;
  std::size_t total = 0;
  for (std::size_t c = 0; c < chunks; ++c) {
    masked.push_back(mask_tokens(detail::slice_rows(full, c * rows, (c + 1) * rows), cfg.mlm_probability, seed,
                                 model.config.vocab_size, c * rows));
    total += masked.back().mask_positions.size();
  }
  std::vector<std::vector<LayerMetrics>> routing;
  double mlm_total = 0.0;
  for (const auto& mb : masked) {
    MlmLoss l = mlm_loss_sum(model, mb);
    std::vector<Tensor> terms;
    if (l.count > 0) {
      Tensor part = scale(l.loss_sum, 1.0 / static_cast<double>(total));
      mlm_total += part.item();
      terms.push_back(part);
    }
    if (!l.routing.empty()) {
      std::vector<Tensor> bal;
      for (const auto& r : l.routing) bal.push_back(r.balance);
      terms.push_back(scale(add_n(bal), cfg.balance_alpha / static_cast<double>(bal.size() * chunks)));
      routing.push_back(detail::summarize_routing(l.routing));
    }
    if (!terms.empty()) backward(terms.size() == 1 ? terms[0] : add_n(terms));
  }
  m.contrastive = mlm_total;
  m.routing = routing.empty() ? std::vector<LayerMetrics>{} : detail::average_routing(routing);
  m.loss = mlm_total;
  for (const auto& l : m.routing) {
    m.balance_per_layer.push_back(l.balance);
  }
  if (!m.balance_per_layer.empty()) {
    const double mean = std::accumulate(m.balance_per_layer.begin(), m.balance_per_layer.end(), 0.0) /
                        static_cast<double>(m.balance_per_layer.size());
    m.loss += cfg.balance_alpha * mean;
  }
}

inline void contrastive_backward(const EncoderModel& model, const std::vector<const PairRecord*>& batch,
                                 const TrainConfig& cfg, StepMetrics& m) {
  std::vector<std::string> queries, docs;
  for (const auto* r : batch) {
    queries.push_back(r->query);
    docs.push_back(r->document);
  }
  const auto& tok = model.tokenizer;
  const std::size_t qlen = std::min(cfg.max_len_query, model.config.max_seq_len);
  const std::size_t dlen = std::min(cfg.max_len_doc, model.config.max_seq_len);
  EncodeOutput q = encode(model, tokenize_batch(tok, queries, Role::Query, qlen));
  EncodeOutput d = encode(model, tokenize_batch(tok, docs, Role::Document, dlen));
  std::vector<const std::vector<LayerRouting>*> passes = {&q.routing, &d.routing};

  std::optional<Tensor> hard;
  EncodeOutput h;
  if (cfg.stage == Stage::ContrastiveFinetune && cfg.num_hard_negatives > 0) {
    std::size_t H = cfg.num_hard_negatives;
    for (const auto* r : batch) H = std::min(H, r->hard_negatives.size());
    if (H > 0) {
      std::vector<std::string> negs;
      for (const auto* r : batch) negs.insert(negs.end(), r->hard_negatives.begin(), r->hard_negatives.begin() + static_cast<std::ptrdiff_t>(H));
      h = encode(model, tokenize_batch(tok, negs, Role::Document, dlen));
      hard = h.embeddings;
      passes.push_back(&h.routing);
    }
  }
  Tensor contrastive;
  if (cfg.stage == Stage::ContrastiveFinetune) {
    std::vector<std::size_t> dims = cfg.mrl_dims;
    if (dims.empty()) dims = {model.config.hidden_dim};
    contrastive = mrl_loss(q.embeddings, d.embeddings, hard, dims, cfg.temperature, model.config);
  } else {
    contrastive = infonce(make_score_matrix(q.embeddings, d.embeddings, std::nullopt, cfg.temperature));
  }
  const auto balances = balance_per_layer(passes);
  Tensor loss = total_loss(contrastive, balances, cfg.balance_alpha);
  m.contrastive = contrastive.item();
  m.loss = loss.item();
  for (const auto& b : balances) m.balance_per_layer.push_back(b.item());
  std::vector<std::vector<LayerMetrics>> routing;
  for (const auto* p : passes)
    if (!p->empty()) routing.push_back(detail::summarize_routing(*p));
  if (!routing.empty()) m.routing = detail::average_routing(routing);
  backward(loss);
}

/// Draws the batch for the next step from a deterministic stream.
class BatchStream {
 public:
  BatchStream(const TrainConfig& cfg, const StageData& data) : cfg_(cfg) {
    if (cfg.stage == Stage::MLM) {
      texts_ = &data.texts;
      if (data.texts.size() < cfg.batch_size) {
        throw ConfigError("mlm stage needs at least batch_size (" + std::to_string(cfg.batch_size) + ") texts, got " +
                          std::to_string(data.texts.size()));
      }
      per_epoch_ = data.texts.size() / cfg.batch_size;
    } else {
      if (data.pairs.empty()) throw ConfigError(to_string(cfg.stage) + " stage needs pair records");
      if (cfg.stage == Stage::ContrastiveFinetune && cfg.num_hard_negatives > 0) {
        for (const auto& r : data.pairs)
          if (r.hard_negatives.empty()) {
            throw ConfigError("finetune stage needs mined hard_negatives on every record (query '" + r.query + "')");
          }
      }
      sampler_.emplace(group_by_dataset(data.pairs), cfg.batch_size, cfg.seed);
      per_epoch_ = sampler_->batches_per_epoch();
    }
  }

  // Keeps pointers into `data`, so temporaries are rejected.
  BatchStream(const TrainConfig&, StageData&&) = delete;

  std::size_t batches_per_epoch() const { return per_epoch_; }

  std::vector<std::string> texts(std::size_t step) const {
    const std::size_t e = step / per_epoch_, b = step % per_epoch_;
    if (e != epoch_) {
      order_.resize(texts_->size());
      std::iota(order_.begin(), order_.end(), 0);
      std::mt19937_64 rng(mix_seed(cfg_.seed, e));
      std::shuffle(order_.begin(), order_.end(), rng);
      epoch_ = e;
    }
    std::vector<std::string> out;
    for (std::size_t i = b * cfg_.batch_size; i < (b + 1) * cfg_.batch_size; ++i) out.push_back((*texts_)[order_[i]]);
    return out;
  }

  PairBatch pairs(std::size_t step) const { return sampler_->at(step); }

 private:
  TrainConfig cfg_;
  const std::vector<std::string>* texts_ = nullptr;
  std::optional<BatchSampler> sampler_;
  std::size_t per_epoch_ = 0;
  mutable std::size_t epoch_ = static_cast<std::size_t>(-1);
  mutable std::vector<std::size_t> order_;
};

namespace detail {

/// Routing stats of a no-grad forward pass over the step's inputs.
inline std::string diagnostic_routing(const EncoderModel& model, const BatchStream& stream, const TrainConfig& cfg,
                                      std::size_t step) {
  try {
    NoGradGuard no_grad;
    std::vector<std::string> texts;
    if (cfg.stage == Stage::MLM) {
      texts = stream.texts(step);
    } else {
      for (const auto* r : stream.pairs(step).records) texts.push_back(r->document);
    }
    const auto batch = tokenize_batch(model.tokenizer, texts, Role::Document,
                                      std::min(cfg.max_len_doc, model.config.max_seq_len));
    const auto routing = summarize_routing(encode_hidden(model, batch).routing);
    return routing.empty() ? std::string(" none (dense model)") : routing_dump(routing);
  } catch (const Error& e) {
    return std::string(" unavailable (") + e.what() + ")";
  }
}

}  // namespace detail

/// Total optimizer steps implied by the config and data.
inline TrainConfig resolve_steps(TrainConfig cfg, const BatchStream& stream) {
  if (cfg.epochs > 0) {
    cfg.total_steps = cfg.epochs * stream.batches_per_epoch();
    cfg.warmup_steps = std::min(cfg.warmup_steps, cfg.total_steps);
  }
  return cfg;
}

/// One optimizer update at state.step using the stream's batch for that step.
inline StepMetrics train_step(TrainState& state, const BatchStream& stream, const TrainConfig& cfg) {
  StepMetrics m;
  m.step = state.step;
  m.lr = lr_at(state.step, cfg);
  state.model.zero_grad();
  try {
    if (cfg.stage == Stage::MLM) {
      mlm_backward(state.model, stream.texts(state.step), cfg, state.step, m);
    } else {
      contrastive_backward(state.model, stream.pairs(state.step).records, cfg, m);
    }
  } catch (const NumericError& e) {
    state.model.zero_grad();
    throw NumericError(std::string(e.what()) + " at step " + std::to_string(state.step) + "; routing stats:" +
                       detail::diagnostic_routing(state.model, stream, cfg, state.step));
  }
  detail::require_finite(m.loss, m.routing, state.step);
  const auto params = state.model.named_parameters();
  m.grad_norm = clip_grad_norm(params, cfg.max_grad_norm);
  state.optimizer.step(params, m.lr, cfg);
  state.model.zero_grad();
  state.loss_history.push_back(m.loss);
  ++state.step;
  return m;
}

/// Optional JSONL sinks for per-step metrics and per-layer routing stats.
struct TrainLogs {
  std::ostream* metrics = nullptr;
  std::ostream* routing = nullptr;
};

/// Runs train_step until state.step reaches `until` (capped at total steps).
inline void train_until(TrainState& state, const TrainConfig& cfg_in, const StageData& data, std::size_t until,
                        const TrainLogs& logs = {}) {
  cfg_in.validate();
  if (state.model.tokenizer.empty()) throw ConfigError("model has no tokenizer");
  const BatchStream stream(cfg_in, data);
  const TrainConfig cfg = resolve_steps(cfg_in, stream);
  until = std::min(until, cfg.total_steps);
  while (state.step < until) {
    StepMetrics m = train_step(state, stream, cfg);
    if (logs.metrics) *logs.metrics << nlohmann::json(m).dump() << '\n';
    if (logs.routing)
      for (const auto& l : m.routing)
        *logs.routing << nlohmann::json{{"step", m.step}, {"layer", l.layer}, {"r", l.r}, {"p", l.p},
                                        {"balance_loss", l.balance}}.dump()
                      << '\n';
  }
}

// --- checkpoints with optimizer state -----------------------------------------------

inline void save_train_state(const std::filesystem::path& path, const TrainState& state, const TrainConfig& cfg,
                             nlohmann::json metadata = nlohmann::json::object()) {
  metadata["step"] = state.step;
  metadata["optimizer_steps"] = state.optimizer.steps();
  metadata["loss_history"] = state.loss_history;
  metadata["train_config"] = cfg;
  write_checkpoint(path, state.model, metadata, state.optimizer.state_tensors());
}

/// Restores a training state. Checkpoints without optimizer moments (plain
/// model files) start a fresh optimizer at step 0.
inline TrainState load_train_state(const std::filesystem::path& path) {
  Checkpoint ck = read_checkpoint(path);
  TrainState s;
  s.model = std::move(ck.model);
  const auto params = s.model.named_parameters();
  if (ck.extra_tensors.empty()) {
    s.optimizer = AdamW(params);
    return s;
  }
  s.step = ck.metadata.value("step", std::size_t{0});
  s.loss_history = ck.metadata.value("loss_history", std::vector<double>{});
  s.optimizer = AdamW::from_state(params, ck.extra_tensors, ck.metadata.value("optimizer_steps", s.step));
  return s;
}

/// Trains a stage to completion from `init` and returns the final state.
inline TrainState run_stage(const TrainConfig& cfg, const StageData& data, EncoderModel init,
                            const TrainLogs& logs = {}) {
  cfg.validate();
  TrainState state = TrainState::start(std::move(init));
  train_until(state, cfg, data, static_cast<std::size_t>(-1), logs);
  return state;
}

}  // namespace moembed
