#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "moembed/encoder/model.hpp"
#include "moembed/encoder/rope.hpp"
#include "moembed/encoder/tokenizer.hpp"
#include "moembed/moe/moe.hpp"
#include "moembed/numeric/ops.hpp"

namespace moembed {

/// Routing outcome of one MoE layer during a forward pass.
struct LayerRouting {
  std::size_t layer = 0;
  LoadStats stats;
  Tensor balance;  // sum_i r_i p_i, differentiable through p
  std::vector<std::size_t> expert_indices;  // [tokens x k], as in RouterOutput
};

struct HiddenStates {
  Tensor hidden;  // [batch*seq x hidden], after the final norm
  std::vector<LayerRouting> routing;
};

struct EncodeOutput {
  Tensor embeddings;  // [batch x hidden], unit rows
  std::vector<LayerRouting> routing;
};

namespace detail {

inline void check_ids(const EncoderModel& model, const TokenBatch& batch) {
  if (batch.token_ids.size() != batch.batch * batch.seq || batch.attention_mask.size() != batch.batch * batch.seq) {
    throw InputError("token batch storage does not match its shape");
  }
  if (batch.seq > model.config.max_seq_len) {
    throw InputError("sequence length " + std::to_string(batch.seq) + " exceeds max_seq_len " +
                     std::to_string(model.config.max_seq_len));
  }
  for (auto id : batch.token_ids) {
    if (id >= model.config.vocab_size) {
      throw InputError("token id " + std::to_string(id) + " out of range for vocabulary of " +
                       std::to_string(model.config.vocab_size));
    }
  }
  for (std::size_t b = 0; b < batch.batch; ++b) {
    bool any = false;
    for (std::size_t t = 0; t < batch.seq; ++t) any = any || batch.attention_mask[b * batch.seq + t];
    if (!any) throw InputError("token batch row " + std::to_string(b) + " has no valid position");
  }
}

}  // namespace detail

/// Pre-norm transformer forward pass up to the final layer norm.
inline HiddenStates encode_hidden(const EncoderModel& model, const TokenBatch& batch) {
  detail::check_ids(model, batch);
  const auto& cfg = model.config;
  const AttentionShape shp{batch.batch, batch.seq, cfg.num_heads, cfg.head_dim()};
  HiddenStates out;
  Tensor x = gather_rows(model.token_embedding, batch.token_ids);
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const auto& L = model.layers[l];
    Tensor a = layer_norm(x, L.norm1_gain, L.norm1_bias);
    Tensor q = linear(a, L.attn.wq, L.attn.bq);
    Tensor k = linear(a, L.attn.wk, L.attn.bk);
    Tensor v = linear(a, L.attn.wv, L.attn.bv);
    Tensor att = rotary_self_attention(q, k, v, batch.attention_mask, shp, cfg.rope_base);
    x = add(x, linear(att, L.attn.wo, L.attn.bo));
    Tensor m = layer_norm(x, L.norm2_gain, L.norm2_bias);
    if (L.moe) {
      MoeOutput mo = moe_forward(m, *L.moe, batch.attention_mask);
      Tensor balance = load_balance_loss(mo.stats, 1.0);
      out.routing.push_back({l, std::move(mo.stats), std::move(balance), std::move(mo.routing.expert_indices)});
      x = add(x, mo.output);
    } else {
      x = add(x, mlp_forward(m, *L.mlp));
    }
  }
  out.hidden = layer_norm(x, model.final_norm_gain, model.final_norm_bias);
  return out;
}

/// Mask-aware mean pooling of the final hidden states, L2-normalized.
inline EncodeOutput encode(const EncoderModel& model, const TokenBatch& batch) {
  HiddenStates h = encode_hidden(model, batch);
  EncodeOutput out;
  out.embeddings = l2_normalize(masked_mean_pool(h.hidden, batch.attention_mask, batch.batch, batch.seq));
  out.routing = std::move(h.routing);
  return out;
}

/// Leading `dim` coordinates, re-normalized. The full width is returned as is.
inline Tensor truncate_embedding(const Tensor& embeddings, std::size_t dim, const EncoderConfig& config) {
  if (!config.allows_dim(dim)) {
    throw ConfigError("embedding dimension " + std::to_string(dim) + " is not configured");
  }
  if (dim == embeddings.cols()) return embeddings;
  return l2_normalize(slice_cols(embeddings, 0, dim));
}

/// Corrupted input for masked language modeling.
struct MaskedBatch {
  TokenBatch original;
  TokenBatch corrupted;
  std::vector<std::size_t> mask_positions;  // flat indices into batch*seq
  double mlm_probability = 0.0;
};

struct MlmOutput {
  Tensor logits;  // [batch x seq x vocab]
  HiddenStates states;
};

/// Vocabulary logits at every position of the corrupted batch.
inline MlmOutput mlm_forward(const EncoderModel& model, const MaskedBatch& masked) {
  MlmOutput out;
  out.states = encode_hidden(model, masked.corrupted);
  const auto& b = masked.corrupted;
  out.logits = reshape(linear(out.states.hidden, model.mlm_weight, model.mlm_bias),
                       {b.batch, b.seq, model.config.vocab_size});
  return out;
}

/// Summed cross-entropy over the masked positions only, plus the count.
/// Only masked rows go through the output head.
struct MlmLoss {
  Tensor loss_sum;  // undefined when nothing is masked
  std::size_t count = 0;
  std::vector<LayerRouting> routing;
};

inline MlmLoss mlm_loss_sum(const EncoderModel& model, const MaskedBatch& masked) {
  MlmLoss out;
  HiddenStates h = encode_hidden(model, masked.corrupted);
  out.routing = std::move(h.routing);
  out.count = masked.mask_positions.size();
  if (out.count == 0) return out;
  std::vector<std::size_t> targets;
  targets.reserve(out.count);
  for (auto pos : masked.mask_positions) targets.push_back(masked.original.token_ids[pos]);
  Tensor logits = linear(gather_rows(h.hidden, masked.mask_positions), model.mlm_weight, model.mlm_bias);
  out.loss_sum = cross_entropy(logits, std::move(targets), Reduction::Sum);
  return out;
}

/// Mean masked-token cross-entropy; zero when no position is masked.
inline Tensor mlm_loss(const EncoderModel& model, const MaskedBatch& masked) {
  MlmLoss l = mlm_loss_sum(model, masked);
  if (l.count == 0) return Tensor::scalar(0.0);
  return scale(l.loss_sum, 1.0 / static_cast<double>(l.count));
}

/// Embeds raw texts with the model's tokenizer (inference only).
inline Tensor embed_texts(const EncoderModel& model, const std::vector<std::string>& texts, Role role,
                          std::size_t max_len, std::size_t chunk = 256) {
  if (model.tokenizer.empty()) throw ConfigError("model has no tokenizer");
  if (texts.empty()) throw InputError("nothing to embed");
  NoGradGuard no_grad;
  const std::size_t H = model.config.hidden_dim;
  std::vector<double> all;
  all.reserve(texts.size() * H);
  for (std::size_t begin = 0; begin < texts.size(); begin += chunk) {
    const std::size_t end = std::min(texts.size(), begin + chunk);
    std::vector<std::string> part(texts.begin() + static_cast<std::ptrdiff_t>(begin),
                                  texts.begin() + static_cast<std::ptrdiff_t>(end));
    auto batch = tokenize_batch(model.tokenizer, part, role, std::min(max_len, model.config.max_seq_len));
    auto e = encode(model, batch).embeddings;
    all.insert(all.end(), e.data().begin(), e.data().end());
  }
  return Tensor({texts.size(), H}, std::move(all));
}

}  // namespace moembed
