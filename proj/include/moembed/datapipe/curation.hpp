#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <limits>
#include <optional>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "moembed/datapipe/records.hpp"
#include "moembed/encoder/encoder.hpp"
#include "moembed/objectives/losses.hpp"

namespace moembed {

/// Maps texts to unit-norm row embeddings [texts x dim].
using Embedder = std::function<Tensor(const std::vector<std::string>&, Role)>;

/// Hashed bag-of-words teacher: word counts folded into `dim` buckets,
/// L2-normalized. Role prefixes are ignored.
inline Embedder hashing_embedder(std::size_t dim) {
  if (dim == 0) throw ConfigError("hashing embedder needs a positive dimension");
  return [dim](const std::vector<std::string>& texts, Role) {
    std::vector<double> out(texts.size() * dim, 0.0);
    for (std::size_t i = 0; i < texts.size(); ++i) {
      double* row = out.data() + i * dim;
      for (const auto& w : Tokenizer::split(texts[i])) {
        std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
        for (unsigned char c : w) h = (h ^ c) * 1099511628211ULL;
        row[h % dim] += 1.0;
      }
      double n = 0.0;
      for (std::size_t c = 0; c < dim; ++c) n += row[c] * row[c];
      n = std::sqrt(n);
      if (n > 0.0)
        for (std::size_t c = 0; c < dim; ++c) row[c] /= n;
    }
    return Tensor({texts.size(), dim}, std::move(out));
  };
}

/// Uses a trained encoder as the embedder.
inline Embedder model_embedder(const EncoderModel& model, std::size_t max_len) {
  return [&model, max_len](const std::vector<std::string>& texts, Role role) {
    return embed_texts(model, texts, role, max_len);
  };
}

// --- consistency filtering ---------------------------------------------------

/// Indices i whose own document ranks within the top_k of row i of `scores`
/// ([n x n], queries by documents). Ties go to the lower document index.
inline std::vector<std::size_t> consistency_keep(const Tensor& scores, std::size_t top_k) {
  if (top_k < 1) throw ConfigError("consistency filter top_k must be at least 1");
  const std::size_t n = scores.rows();
  if (scores.cols() != n) throw DimensionError("consistency filter needs a square score matrix");
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < n; ++i) {
    const double own = scores.at(i, i);
    std::size_t ahead = 0;
    for (std::size_t j = 0; j < n && ahead < top_k; ++j) {
      if (j == i) continue;
      const double s = scores.at(i, j);
      if (s > own || (s == own && j < i)) ++ahead;
    }
    if (ahead < top_k) keep.push_back(i);
  }
  return keep;
}

/// Keeps the pairs whose document is among the top_k documents of the shard
/// retrieved for their own query.
inline Shard consistency_filter(const Shard& shard, const Embedder& embed, std::size_t top_k) {
  if (top_k < 1) throw ConfigError("consistency filter top_k must be at least 1");
  if (shard.empty()) return {};
  std::vector<std::string> queries, docs;
  for (const auto& r : shard) {
    queries.push_back(r.query);
    docs.push_back(r.document);
  }
  NoGradGuard no_grad;
  const Tensor scores = score(embed(queries, Role::Query), embed(docs, Role::Document));
  Shard out;
  for (auto i : consistency_keep(scores, top_k)) out.push_back(shard[i]);
  return out;
}

// --- hard-negative mining ------------------------------------------------------

struct MiningConfig {
  // Negatives must score below pos_sim * margin. nullopt disables the
  // threshold (plain top-k mining).
  std::optional<double> margin = 0.95;
  std::size_t num_negatives = 10;
  // Highest-ranked documents scanned per query; 0 scans the whole corpus.
  std::size_t candidate_pool = 0;

  void validate() const {
    if (margin && !(*margin > 0.0 && *margin <= 1.0)) throw ConfigError("mining margin must lie in (0, 1]");
    if (num_negatives == 0) throw ConfigError("num_negatives must be positive");
  }
};

struct MinedNegatives {
  std::vector<std::size_t> indices;  // into the corpus, best first
  double threshold = 0.0;
  bool underfull = false;
};

/// Mining on precomputed teacher similarities. `sims[j]` is s(query, corpus_j);
/// corpus entries equal to `positive` (by text) are never returned.
inline MinedNegatives mine_from_scores(const std::vector<double>& sims, double pos_sim,
                                       const std::vector<std::string>& corpus, const std::string& positive,
                                       const MiningConfig& cfg) {
  cfg.validate();
  if (sims.size() != corpus.size()) throw DimensionError("mining: one similarity per corpus entry required");
  MinedNegatives out;
  out.threshold = cfg.margin ? pos_sim * *cfg.margin : std::numeric_limits<double>::infinity();
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sims[a] > sims[b]; });
  const std::size_t pool = cfg.candidate_pool == 0 ? order.size() : std::min(order.size(), cfg.candidate_pool);
  for (std::size_t r = 0; r < pool && out.indices.size() < cfg.num_negatives; ++r) {
    const std::size_t j = order[r];
    if (corpus[j] == positive) continue;
    if (!(sims[j] < out.threshold)) continue;
    out.indices.push_back(j);
  }
  out.underfull = out.indices.size() < cfg.num_negatives;
  return out;
}

/// Mines negatives for one query against a corpus with the teacher embedder.
inline MinedNegatives mine_hard_negatives(const std::string& query, const std::string& positive,
                                          const std::vector<std::string>& corpus, const Embedder& teacher,
                                          const MiningConfig& cfg) {
  NoGradGuard no_grad;
  const Tensor q = teacher({query}, Role::Query);
  const Tensor p = teacher({positive}, Role::Document);
  const Tensor s = score(q, teacher(corpus, Role::Document));
  const double pos_sim = score(q, p).item();
  return mine_from_scores(s.to_vector(), pos_sim, corpus, positive, cfg);
}

struct MiningReport {
  std::size_t input_count = 0;
  std::size_t underfull = 0;
  double mean_negatives = 0.0;
};

inline void to_json(nlohmann::json& j, const MiningReport& r) {
  j = {{"input_count", r.input_count}, {"underfull", r.underfull}, {"mean_negatives", r.mean_negatives}};
}

/// Fills hard_negatives for every record, mining from the set of all
/// documents in `records`. Embeddings are computed once.
inline std::vector<PairRecord> mine_corpus(const std::vector<PairRecord>& records, const Embedder& teacher,
                                           const MiningConfig& cfg, MiningReport* report = nullptr) {
  cfg.validate();
  std::vector<std::string> corpus;
  std::vector<std::string> queries;
  std::map<std::string, std::size_t> doc_index;
  for (const auto& r : records) {
    queries.push_back(r.query);
    if (doc_index.emplace(r.document, corpus.size()).second) corpus.push_back(r.document);
  }
  if (corpus.size() < cfg.num_negatives) throw ConfigError("corpus is smaller than num_negatives");
  NoGradGuard no_grad;
  const Tensor qe = teacher(queries, Role::Query);
  const Tensor de = teacher(corpus, Role::Document);
  const Tensor sims = score(qe, de);
  std::vector<PairRecord> out = records;
  MiningReport rep;
  rep.input_count = records.size();
  double total = 0.0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    std::vector<double> row(sims.data().begin() + static_cast<std::ptrdiff_t>(i * corpus.size()),
                            sims.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * corpus.size()));
    const double pos = row[doc_index.at(records[i].document)];
    auto mined = mine_from_scores(row, pos, corpus, records[i].document, cfg);
    out[i].hard_negatives.clear();
    for (auto j : mined.indices) out[i].hard_negatives.push_back(corpus[j]);
    rep.underfull += mined.underfull;
    total += static_cast<double>(mined.indices.size());
  }
  rep.mean_negatives = records.empty() ? 0.0 : total / static_cast<double>(records.size());
  if (report) *report = rep;
  return out;
}

struct FilterReport {
  std::size_t input_count = 0;
  std::size_t retained_count = 0;
  std::vector<std::pair<std::size_t, std::size_t>> per_shard;  // (input, retained)
};

inline void to_json(nlohmann::json& j, const FilterReport& r) {
  j = {{"input_count", r.input_count}, {"retained_count", r.retained_count}, {"per_shard", nlohmann::json::array()}};
  for (const auto& [in, kept] : r.per_shard) j["per_shard"].push_back({{"input_count", in}, {"retained_count", kept}});
}

/// Shards the records and filters each shard independently.
inline std::vector<PairRecord> filter_corpus(const std::vector<PairRecord>& records, const Embedder& embed,
                                             std::size_t top_k, std::size_t shard_size,
                                             FilterReport* report = nullptr) {
  FilterReport rep;
  rep.input_count = records.size();
  std::vector<PairRecord> out;
  for (const auto& shard : split_shards(records, shard_size)) {
    auto kept = consistency_filter(shard, embed, top_k);
    rep.per_shard.emplace_back(shard.size(), kept.size());
    out.insert(out.end(), kept.begin(), kept.end());
  }
  rep.retained_count = out.size();
  if (report) *report = rep;
  return out;
}

}  // namespace moembed
