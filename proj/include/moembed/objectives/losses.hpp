#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "moembed/encoder/config.hpp"
#include "moembed/encoder/encoder.hpp"
#include "moembed/error.hpp"
#include "moembed/numeric/ops.hpp"

namespace moembed {

/// Temperature used for contrastive pretraining and finetuning.
inline constexpr double kDefaultTemperature = 0.02;

/// Query-by-candidate similarities for one contrastive batch.
///
/// Column j < n holds s(q_i, d_j); columns n .. n+H-1 hold s(q_i, hn_{i,m})
/// for query i's own hard negatives.
struct ScoreMatrix {
  Tensor scores;  // [n x (n + H)]
  std::size_t n = 0;
  std::size_t hard = 0;
  double temperature = kDefaultTemperature;
};

/// Cosine similarity of unit rows: queries [n x d] against documents [m x d].
inline Tensor score(const Tensor& queries, const Tensor& documents) {
  if (queries.rank() != 2 || documents.rank() != 2 || queries.dim(1) != documents.dim(1)) {
    throw InputError("score: embedding dimensions differ (" + shape_str(queries.shape()) + " vs " +
                     shape_str(documents.shape()) + ")");
  }
  return matmul_nt(queries, documents);
}

/// Scores of n queries against the n in-batch documents and, optionally,
/// H hard negatives per query stored consecutively ([n*H x d]).
inline ScoreMatrix make_score_matrix(const Tensor& queries, const Tensor& documents,
                                     const std::optional<Tensor>& hard_negatives, double temperature) {
  if (queries.dim(0) != documents.dim(0)) {
    throw InputError("score matrix: " + std::to_string(queries.dim(0)) + " queries but " +
                     std::to_string(documents.dim(0)) + " documents");
  }
  ScoreMatrix sm;
  sm.n = queries.dim(0);
  sm.temperature = temperature;
  sm.scores = score(queries, documents);
  if (hard_negatives && hard_negatives->defined()) {
    if (hard_negatives->dim(0) % sm.n != 0 || hard_negatives->dim(1) != queries.dim(1)) {
      throw InputError("score matrix: hard negatives must be [n*H x d]");
    }
    sm.hard = hard_negatives->dim(0) / sm.n;
    sm.scores = concat_cols(sm.scores, rowwise_block_dot(queries, *hard_negatives, sm.hard));
  }
  return sm;
}

namespace detail {

inline Tensor contrastive_cross_entropy(const ScoreMatrix& sm) {
  if (!(sm.temperature > 0.0)) throw ConfigError("temperature must be positive");
  if (sm.scores.rank() != 2 || sm.scores.dim(0) != sm.n || sm.scores.dim(1) != sm.n + sm.hard) {
    throw DimensionError("score matrix shape " + shape_str(sm.scores.shape()) + " does not match n=" +
                         std::to_string(sm.n) + ", H=" + std::to_string(sm.hard));
  }
  std::vector<std::size_t> targets(sm.n);
  for (std::size_t i = 0; i < sm.n; ++i) targets[i] = i;
  return cross_entropy(scale(sm.scores, 1.0 / sm.temperature), std::move(targets), Reduction::Mean);
}

}  // namespace detail

/// In-batch InfoNCE, query-to-document direction:
/// mean_i -log( exp(s_ii/t) / sum_j exp(s_ij/t) ).
inline Tensor infonce(const ScoreMatrix& sm) {
  if (sm.hard != 0) throw ConfigError("infonce expects no hard-negative columns; use infonce_hard");
  return detail::contrastive_cross_entropy(sm);
}

/// InfoNCE whose partition Z_i also sums over query i's own hard negatives.
/// With H = 0 this is the same computation as infonce().
inline Tensor infonce_hard(const ScoreMatrix& sm) { return detail::contrastive_cross_entropy(sm); }

/// Matryoshka loss: unweighted mean of infonce_hard over truncated and
/// re-normalized embeddings, one term per requested dimension.
inline Tensor mrl_loss(const Tensor& query_emb, const Tensor& doc_emb, const std::optional<Tensor>& hard_emb,
                       const std::vector<std::size_t>& dims, double temperature, const EncoderConfig& config) {
  if (dims.empty()) throw ConfigError("mrl_loss needs at least one dimension");
  std::vector<Tensor> terms;
  terms.reserve(dims.size());
  for (auto dim : dims) {
    std::optional<Tensor> hard;
    if (hard_emb && hard_emb->defined()) hard = truncate_embedding(*hard_emb, dim, config);
    auto sm = make_score_matrix(truncate_embedding(query_emb, dim, config),
                                truncate_embedding(doc_emb, dim, config), hard, temperature);
    terms.push_back(infonce_hard(sm));
  }
  return scale(add_n(terms), 1.0 / static_cast<double>(terms.size()));
}

/// contrastive + alpha * mean(balance_per_layer); just `contrastive` for a
/// model without MoE layers.
inline Tensor total_loss(const Tensor& contrastive, const std::vector<Tensor>& balance_per_layer, double alpha) {
  if (balance_per_layer.empty()) return contrastive;
  Tensor mean_balance = scale(add_n(balance_per_layer), 1.0 / static_cast<double>(balance_per_layer.size()));
  return add(contrastive, scale(mean_balance, alpha));
}

/// Unscaled balance terms (sum r_i p_i) gathered from several forward
/// passes, averaged per layer.
inline std::vector<Tensor> balance_per_layer(const std::vector<const std::vector<LayerRouting>*>& passes) {
  std::vector<Tensor> out;
  if (passes.empty()) return out;
  const std::size_t layers = passes.front()->size();
  for (std::size_t l = 0; l < layers; ++l) {
    std::vector<Tensor> terms;
    for (const auto* p : passes) terms.push_back(p->at(l).balance);
    out.push_back(terms.size() == 1 ? terms[0] : scale(add_n(terms), 1.0 / static_cast<double>(terms.size())));
  }
  return out;
}

}  // namespace moembed
