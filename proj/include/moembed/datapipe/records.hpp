#pragma once

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "moembed/error.hpp"

namespace moembed {

/// One weakly supervised (query, document) pair.
struct PairRecord {
  std::string query;
  std::string document;
  std::string dataset;
  std::string language;
  std::vector<std::string> hard_negatives;

  bool operator==(const PairRecord&) const = default;
};

inline void validate(const PairRecord& r) {
  if (r.query.empty() || r.document.empty()) throw InputError("pair record needs a non-empty query and document");
}

inline void to_json(nlohmann::json& j, const PairRecord& r) {
  j = {{"query", r.query}, {"document", r.document}, {"dataset", r.dataset}, {"language", r.language}};
  if (!r.hard_negatives.empty()) j["hard_negatives"] = r.hard_negatives;
}

inline void from_json(const nlohmann::json& j, PairRecord& r) {
  if (!j.is_object()) throw InputError("pair record must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (key != "query" && key != "document" && key != "dataset" && key != "language" && key != "hard_negatives") {
      throw InputError("pair record has unknown field '" + key + "'");
    }
  }
  r.query = j.at("query").get<std::string>();
  r.document = j.at("document").get<std::string>();
  r.dataset = j.value("dataset", std::string("default"));
  r.language = j.value("language", std::string("en"));
  r.hard_negatives = j.value("hard_negatives", std::vector<std::string>{});
  validate(r);
}

/// Reads one JSON value per non-blank line.
inline std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw InputError("cannot open " + path.string());
  std::vector<nlohmann::json> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::parse_error& e) {
      throw InputError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

template <class T>
void write_jsonl(const std::filesystem::path& path, const std::vector<T>& rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw InputError("cannot open " + path.string() + " for writing");
  for (const auto& r : rows) os << nlohmann::json(r).dump() << '\n';
}

inline std::vector<PairRecord> read_pairs(const std::filesystem::path& path) {
  std::vector<PairRecord> out;
  std::size_t lineno = 0;
  for (const auto& j : read_jsonl(path)) {
    ++lineno;
    try {
      out.push_back(j.get<PairRecord>());
    } catch (const Error& e) {
      throw InputError(path.string() + ": record " + std::to_string(lineno) + ": " + e.what());
    } catch (const nlohmann::json::exception& e) {
      throw InputError(path.string() + ": record " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

/// Default number of records per shard at desk scale.
inline constexpr std::size_t kDefaultShardSize = 1000;

using Shard = std::vector<PairRecord>;

/// Consecutive shards of at most shard_size records.
inline std::vector<Shard> split_shards(const std::vector<PairRecord>& records, std::size_t shard_size) {
  if (shard_size == 0) throw ConfigError("shard_size must be positive");
  std::vector<Shard> out;
  for (std::size_t i = 0; i < records.size(); i += shard_size) {
    const std::size_t end = std::min(records.size(), i + shard_size);
    out.emplace_back(records.begin() + static_cast<std::ptrdiff_t>(i), records.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

/// Groups records by dataset tag.
inline std::map<std::string, std::vector<PairRecord>> group_by_dataset(const std::vector<PairRecord>& records) {
  std::map<std::string, std::vector<PairRecord>> out;
  for (const auto& r : records) out[r.dataset].push_back(r);
  return out;
}

/// Multinomial temperature sampling: p_l proportional to (n_l / N)^alpha.
inline std::map<std::string, double> language_weights(const std::map<std::string, double>& counts, double alpha) {
  if (!(alpha > 0.0)) throw ConfigError("language sampling alpha must be positive");
  double total = 0.0;
  for (const auto& [lang, n] : counts) {
    if (!(n > 0.0)) throw ConfigError("language count for '" + lang + "' must be positive");
    total += n;
  }
  std::map<std::string, double> out;
  double z = 0.0;
  for (const auto& [lang, n] : counts) z += out[lang] = std::pow(n / total, alpha);
  for (auto& [lang, p] : out) p /= z;
  return out;
}

}  // namespace moembed
