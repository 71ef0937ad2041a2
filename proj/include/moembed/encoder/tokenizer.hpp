#pragma once

#include <algorithm>
#include <cctype>
#include <cstddef>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "moembed/error.hpp"

namespace moembed {

enum class Role { Query, Document };

inline const char* role_prefix(Role role) {
  return role == Role::Query ? "search_query: " : "search_document: ";
}

inline Role parse_role(std::string_view s) {
  if (s == "query") return Role::Query;
  if (s == "document" || s == "doc") return Role::Document;
  throw InputError("unknown role '" + std::string(s) + "' (expected query or document)");
}

using TokenIds = std::vector<std::size_t>;

/// Lowercasing word/punctuation tokenizer over a closed vocabulary.
///
/// Words are maximal runs of ASCII alphanumerics, '_' and non-ASCII bytes;
/// every other non-space character is a token of its own.
class Tokenizer {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kUnk = 1;
  static constexpr std::size_t kMask = 2;
  static constexpr std::size_t kQueryPrefix = 3;
  static constexpr std::size_t kDocumentPrefix = 4;
  static constexpr std::size_t kColon = 5;
  /// Ids below this are never selected for masking.
  static constexpr std::size_t kNumSpecial = 5;

  Tokenizer() = default;

  explicit Tokenizer(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    static const char* kReserved[] = {"[pad]", "[unk]", "[mask]", "search_query", "search_document", ":"};
    if (tokens_.size() < 6) throw ConfigError("tokenizer vocabulary misses reserved tokens");
    for (std::size_t i = 0; i < 6; ++i) {
      if (tokens_[i] != kReserved[i]) throw ConfigError("tokenizer reserved token mismatch at " + std::to_string(i));
    }
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (!index_.emplace(tokens_[i], i).second) throw ConfigError("duplicate token '" + tokens_[i] + "'");
    }
  }

  /// Vocabulary of reserved tokens followed by corpus words, most frequent
  /// first (ties alphabetical), capped at max_vocab entries.
  static Tokenizer build(const std::vector<std::string>& corpus, std::size_t max_vocab) {
    std::vector<std::string> tokens = {"[pad]", "[unk]", "[mask]", "search_query", "search_document", ":"};
    std::map<std::string, std::size_t> counts;
    for (const auto& text : corpus)
      for (auto& w : split(text)) ++counts[w];
    for (const auto& t : tokens) counts.erase(t);
    std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    for (const auto& [w, n] : ranked) {
      if (tokens.size() >= max_vocab) break;
      tokens.push_back(w);
    }
    return Tokenizer(std::move(tokens));
  }

  static std::vector<std::string> split(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&] {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    };
    for (char ch : text) {
      const auto u = static_cast<unsigned char>(ch);
      if (u >= 0x80 || std::isalnum(u) || ch == '_') {
        cur.push_back(static_cast<char>(std::tolower(u)));
      } else {
        flush();
        if (!std::isspace(u)) out.emplace_back(1, ch);
      }
    }
    flush();
    return out;
  }

  std::size_t size() const { return tokens_.size(); }
  bool empty() const { return tokens_.empty(); }
  const std::string& token(std::size_t id) const { return tokens_.at(id); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::size_t id(const std::string& word) const {
    auto it = index_.find(word);
    return it == index_.end() ? kUnk : it->second;
  }

  /// Ids of `text` with the role prefix prepended, truncated to max_len.
  TokenIds encode(std::string_view text, Role role, std::size_t max_len) const {
    require_text(text);
    std::string full = role_prefix(role);
    full.append(text);
    return encode_words(full, max_len);
  }

  /// Ids of `text` without a prefix (masked-language-model input).
  TokenIds encode_raw(std::string_view text, std::size_t max_len) const {
    require_text(text);
    return encode_words(text, max_len);
  }

  static bool is_special(std::size_t id) { return id < kNumSpecial; }

  friend void to_json(nlohmann::json& j, const Tokenizer& t) { j = t.tokens_; }
  friend void from_json(const nlohmann::json& j, Tokenizer& t) {
    t = Tokenizer(j.get<std::vector<std::string>>());
  }

 private:
  static void require_text(std::string_view text) {
    const bool blank = std::all_of(text.begin(), text.end(),
                                   [](char c) { return std::isspace(static_cast<unsigned char>(c)); });
    if (blank) throw InputError("cannot tokenize empty text");
  }

  TokenIds encode_words(std::string_view text, std::size_t max_len) const {
    if (tokens_.empty()) throw ConfigError("tokenizer has no vocabulary");
    TokenIds ids;
    for (const auto& w : split(text)) {
      if (ids.size() >= max_len) break;
      ids.push_back(id(w));
    }
    return ids;
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Padded [batch x seq] token matrix with its attention mask.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::size_t> token_ids;  // batch*seq, row-major
  std::vector<bool> attention_mask;    // batch*seq
  Role role = Role::Document;

  static TokenBatch from_sequences(const std::vector<TokenIds>& seqs, Role role) {
    if (seqs.empty()) throw InputError("token batch needs at least one sequence");
    TokenBatch b;
    b.batch = seqs.size();
    b.role = role;
    for (const auto& s : seqs) {
      if (s.empty()) throw InputError("token batch rows need at least one token");
      b.seq = std::max(b.seq, s.size());
    }
    b.token_ids.assign(b.batch * b.seq, Tokenizer::kPad);
    b.attention_mask.assign(b.batch * b.seq, false);
    for (std::size_t r = 0; r < seqs.size(); ++r)
      for (std::size_t t = 0; t < seqs[r].size(); ++t) {
        b.token_ids[r * b.seq + t] = seqs[r][t];
        b.attention_mask[r * b.seq + t] = true;
      }
    return b;
  }
};

/// Tokenizes and pads a list of texts for one role.
inline TokenBatch tokenize_batch(const Tokenizer& tok, const std::vector<std::string>& texts, Role role,
                                 std::size_t max_len) {
  std::vector<TokenIds> seqs;
  seqs.reserve(texts.size());
  for (const auto& t : texts) seqs.push_back(tok.encode(t, role, max_len));
  return TokenBatch::from_sequences(seqs, role);
}

}  // namespace moembed
