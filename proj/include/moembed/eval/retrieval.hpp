#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <map>
#include <numeric>
#include <tuple>
#include <cstdio>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "moembed/datapipe/records.hpp"
#include "moembed/encoder/encoder.hpp"
#include "moembed/objectives/losses.hpp"

namespace moembed {

using Qrels = std::map<std::string, std::map<std::string, int>>;

struct RetrievalTask {
  std::map<std::string, std::string> queries;
  std::map<std::string, std::string> corpus;
  Qrels qrels;

  void validate() const {
    for (const auto& [qid, docs] : qrels) {
      for (const auto& [did, rel] : docs) {
        if (!corpus.count(did)) throw InputError("qrels for '" + qid + "' name unknown document '" + did + "'");
        if (rel < 0) throw InputError("relevance grades must be non-negative");
      }
    }
  }
};

struct ScoredDoc {
  std::string doc_id;
  double score = 0.0;
};

/// Ranked documents per query id.
using RetrievalRun = std::map<std::string, std::vector<ScoredDoc>>;

/// Brute-force ranking of precomputed embeddings: cosine score descending,
/// then doc id ascending. Keeps the top k per query.
inline RetrievalRun rank_embeddings(const std::vector<std::string>& query_ids, const Tensor& query_emb,
                                    const std::vector<std::string>& doc_ids, const Tensor& doc_emb, std::size_t k) {
  if (doc_ids.empty()) throw InputError("retrieval corpus is empty");
  if (k == 0) throw ConfigError("k must be at least 1");
  const Tensor s = score(query_emb, doc_emb);
  RetrievalRun run;
  std::vector<std::size_t> order(doc_ids.size());
  for (std::size_t i = 0; i < query_ids.size(); ++i) {
    std::iota(order.begin(), order.end(), 0);
    const double* row = s.data().data() + i * doc_ids.size();
    const std::size_t keep = std::min(k, order.size());
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(),
                      [&](std::size_t a, std::size_t b) {
                        if (row[a] != row[b]) return row[a] > row[b];
                        return doc_ids[a] < doc_ids[b];
                      });
    auto& ranked = run[query_ids[i]];
    for (std::size_t r = 0; r < keep; ++r) ranked.push_back({doc_ids[order[r]], row[order[r]]});
  }
  return run;
}

/// Embeds queries (query role) and corpus (document role) at `dim` and ranks.
inline RetrievalRun retrieve(const EncoderModel& model, const RetrievalTask& task, std::size_t dim, std::size_t k) {
  if (task.corpus.empty()) throw InputError("retrieval corpus is empty");
  if (!model.config.allows_dim(dim)) throw ConfigError("embedding dimension " + std::to_string(dim) + " is not configured");
  std::vector<std::string> qids, qtext, dids, dtext;
  for (const auto& [id, t] : task.queries) {
    qids.push_back(id);
    qtext.push_back(t);
  }
  for (const auto& [id, t] : task.corpus) {
    dids.push_back(id);
    dtext.push_back(t);
  }
  if (qids.empty()) return {};
  const std::size_t len = model.config.max_seq_len;
  const Tensor q = truncate_embedding(embed_texts(model, qtext, Role::Query, len), dim, model.config);
  const Tensor d = truncate_embedding(embed_texts(model, dtext, Role::Document, len), dim, model.config);
  return rank_embeddings(qids, q, dids, d, k);
}

/// Mean nDCG@k with gain 2^rel - 1 and discount log2(rank + 1). Queries
/// without a relevant document are left out of the mean.
inline double ndcg_at_k(const RetrievalRun& run, const Qrels& qrels, std::size_t k = 10) {
  if (k == 0) throw ConfigError("k must be at least 1");
  double total = 0.0;
  std::size_t counted = 0;
  for (const auto& [qid, judged] : qrels) {
    std::vector<int> grades;
    for (const auto& [did, rel] : judged)
      if (rel > 0) grades.push_back(rel);
    if (grades.empty()) continue;
    std::sort(grades.rbegin(), grades.rend());
    double ideal = 0.0;
    for (std::size_t r = 0; r < std::min(k, grades.size()); ++r)
      ideal += (std::exp2(grades[r]) - 1.0) / std::log2(static_cast<double>(r) + 2.0);
    double dcg = 0.0;
    if (auto it = run.find(qid); it != run.end()) {
      for (std::size_t r = 0; r < std::min(k, it->second.size()); ++r) {
        auto g = judged.find(it->second[r].doc_id);
        if (g != judged.end() && g->second > 0) dcg += (std::exp2(g->second) - 1.0) / std::log2(static_cast<double>(r) + 2.0);
      }
    }
    total += dcg / ideal;
    ++counted;
  }
  if (counted == 0) throw InputError("nDCG undefined: no query has a relevant document");
  return total / static_cast<double>(counted);
}

// --- comparison tables ---------------------------------------------------------

struct RunScore {
  std::string model;
  std::size_t batch_size = 0;
  std::size_t dim = 0;
  std::uint64_t seed = 0;
  double ndcg = 0.0;
};

inline void to_json(nlohmann::json& j, const RunScore& r) {
  j = {{"model", r.model}, {"batch_size", r.batch_size}, {"dim", r.dim}, {"seed", r.seed}, {"ndcg_at_10", r.ndcg}};
}

struct ComparisonRow {
  std::string model;
  std::size_t batch_size = 0;
  std::size_t dim = 0;
  std::size_t runs = 0;
  double mean = 0.0;
  double stddev = 0.0;
  bool tied = false;  // another model has the same mean at this (batch, dim)
};

struct Comparison {
  std::vector<ComparisonRow> rows;
  nlohmann::json json;
  std::string table;

  /// Mean score of a model at (batch_size, dim); throws if absent.
  double mean(const std::string& model, std::size_t batch_size, std::size_t dim) const {
    for (const auto& r : rows)
      if (r.model == model && r.batch_size == batch_size && r.dim == dim) return r.mean;
    throw InputError("no runs for " + model + " at batch " + std::to_string(batch_size));
  }
};

/// Aggregates scores over seeds into one row per (model, batch size, dim).
inline Comparison compare_runs(const std::vector<RunScore>& scores) {
  std::map<std::tuple<std::size_t, std::size_t, std::string>, std::vector<double>> groups;
  for (const auto& s : scores) groups[{s.batch_size, s.dim, s.model}].push_back(s.ndcg);
  Comparison out;
  for (const auto& [key, vals] : groups) {
    ComparisonRow row{std::get<2>(key), std::get<0>(key), std::get<1>(key), vals.size(), 0.0, 0.0, false};
    row.mean = std::accumulate(vals.begin(), vals.end(), 0.0) / static_cast<double>(vals.size());
    double var = 0.0;
    for (double v : vals) var += (v - row.mean) * (v - row.mean);
    row.stddev = vals.size() > 1 ? std::sqrt(var / static_cast<double>(vals.size() - 1)) : 0.0;
    out.rows.push_back(row);
  }
  for (auto& a : out.rows)
    for (const auto& b : out.rows)
      if (&a != &b && a.batch_size == b.batch_size && a.dim == b.dim && a.mean == b.mean) a.tied = true;

  out.json = {{"rows", nlohmann::json::array()}, {"runs", scores}};
  char line[160];
  std::snprintf(line, sizeof line, "%-16s %8s %6s %5s %10s %10s\n", "model", "batch", "dim", "runs", "ndcg@10", "std");
  out.table = line;
  for (const auto& r : out.rows) {
    out.json["rows"].push_back({{"model", r.model}, {"batch_size", r.batch_size}, {"dim", r.dim}, {"runs", r.runs},
                                {"mean_ndcg_at_10", r.mean}, {"std", r.stddev}, {"tied", r.tied}});
    std::snprintf(line, sizeof line, "%-16s %8zu %6zu %5zu %10.4f %10.4f%s\n", r.model.c_str(), r.batch_size, r.dim,
                  r.runs, r.mean, r.stddev, r.tied ? "  (tie)" : "");
    out.table += line;
  }
  return out;
}

// --- task files ------------------------------------------------------------------

/// Reads queries.jsonl and corpus.jsonl ({"_id", "text"}, optional "title")
/// and qrels.jsonl ({"query_id", "doc_id", "score"}) from a directory.
inline RetrievalTask load_task(const std::filesystem::path& dir) {
  RetrievalTask task;
  auto read_texts = [](const std::filesystem::path& p, std::map<std::string, std::string>& into) {
    for (const auto& j : read_jsonl(p)) {
      std::string text = j.at("text").get<std::string>();
      if (j.contains("title") && !j["title"].get<std::string>().empty()) text = j["title"].get<std::string>() + " " + text;
      if (!into.emplace(j.at("_id").get<std::string>(), std::move(text)).second) {
        throw InputError(p.string() + ": duplicate id " + j.at("_id").get<std::string>());
      }
    }
  };
  try {
    read_texts(dir / "queries.jsonl", task.queries);
    read_texts(dir / "corpus.jsonl", task.corpus);
    for (const auto& j : read_jsonl(dir / "qrels.jsonl")) {
      task.qrels[j.at("query_id").get<std::string>()][j.at("doc_id").get<std::string>()] = j.at("score").get<int>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw InputError("task " + dir.string() + ": " + e.what());
  }
  task.validate();
  return task;
}

inline void save_task(const std::filesystem::path& dir, const RetrievalTask& task) {
  std::vector<nlohmann::json> q, c, r;
  for (const auto& [id, t] : task.queries) q.push_back({{"_id", id}, {"text", t}});
  for (const auto& [id, t] : task.corpus) c.push_back({{"_id", id}, {"text", t}});
  for (const auto& [qid, docs] : task.qrels)
    for (const auto& [did, rel] : docs) r.push_back({{"query_id", qid}, {"doc_id", did}, {"score", rel}});
  write_jsonl(dir / "queries.jsonl", q);
  write_jsonl(dir / "corpus.jsonl", c);
  write_jsonl(dir / "qrels.jsonl", r);
}

inline void write_run(const std::filesystem::path& path, const RetrievalRun& run) {
  std::vector<nlohmann::json> rows;
  for (const auto& [qid, docs] : run)
    for (std::size_t r = 0; r < docs.size(); ++r)
      rows.push_back({{"query_id", qid}, {"doc_id", docs[r].doc_id}, {"rank", r + 1}, {"score", docs[r].score}});
  write_jsonl(path, rows);
}

}  // namespace moembed
