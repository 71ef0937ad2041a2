#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "moembed/datapipe/records.hpp"
#include "moembed/eval/retrieval.hpp"

namespace moembed {

/// Clustered pair generator. Each entity belongs to a topic and owns a few
/// attribute words of that topic; its documents list all attributes plus
/// filler, and its queries name a subset. Some entities get a second,
/// near-duplicate document with its own query, which makes it a false
/// negative for the first query.
struct SyntheticConfig {
  std::size_t train_entities = 5000;
  std::size_t test_entities = 300;
  std::vector<std::string> datasets = {"wiki", "forum", "news", "qa"};
  std::map<std::string, double> languages = {{"en", 0.9}, {"sw", 0.1}};
  std::size_t topics = 32;
  std::size_t words_per_topic = 24;
  std::size_t attributes = 4;
  std::size_t query_attributes = 2;
  std::size_t filler_words = 6;
  std::size_t common_words = 160;
  double duplicate_rate = 0.3;
  std::uint64_t seed = 0;
};

struct SyntheticCorpus {
  std::vector<PairRecord> train;
  RetrievalTask test;
  std::vector<std::string> texts;  // every query and document, for vocabularies and MLM
};

namespace detail {

struct SyntheticEntity {
  std::size_t topic = 0;
  std::string dataset;
  std::string language;
  std::vector<std::size_t> attributes;
};

inline std::string attribute_word(std::size_t topic, std::size_t k, const std::string& lang) {
  return "t" + std::to_string(topic) + "a" + std::to_string(k) + (lang == "en" ? "" : lang);
}

}  // namespace detail

inline SyntheticCorpus make_synthetic_corpus(const SyntheticConfig& cfg) {
  if (cfg.attributes > cfg.words_per_topic || cfg.query_attributes > cfg.attributes || cfg.query_attributes == 0) {
    throw ConfigError("synthetic corpus: need 0 < query_attributes <= attributes <= words_per_topic");
  }
  if (cfg.datasets.empty() || cfg.languages.empty() || cfg.topics == 0) throw ConfigError("synthetic corpus: empty config");
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::string> langs;
  std::vector<double> lang_p;
  for (const auto& [l, p] : cfg.languages) {
    langs.push_back(l);
    lang_p.push_back(p);
  }
  std::discrete_distribution<std::size_t> pick_lang(lang_p.begin(), lang_p.end());
  std::uniform_int_distribution<std::size_t> pick_topic(0, cfg.topics - 1);
  std::uniform_int_distribution<std::size_t> pick_dataset(0, cfg.datasets.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_common(0, cfg.common_words - 1);
  std::bernoulli_distribution duplicate(cfg.duplicate_rate);

  std::vector<std::size_t> word_ids(cfg.words_per_topic);
  auto make_entity = [&] {
    detail::SyntheticEntity e;
    e.topic = pick_topic(rng);
    e.dataset = cfg.datasets[pick_dataset(rng)];
    e.language = langs[pick_lang(rng)];
    std::iota(word_ids.begin(), word_ids.end(), 0);
    std::shuffle(word_ids.begin(), word_ids.end(), rng);
    e.attributes.assign(word_ids.begin(), word_ids.begin() + static_cast<std::ptrdiff_t>(cfg.attributes));
    return e;
  };
  auto make_document = [&](const detail::SyntheticEntity& e) {
    std::vector<std::string> words;
    for (auto a : e.attributes) words.push_back(detail::attribute_word(e.topic, a, e.language));
    for (std::size_t f = 0; f < cfg.filler_words; ++f) words.push_back("c" + std::to_string(pick_common(rng)));
    std::shuffle(words.begin(), words.end(), rng);
    std::string text = e.dataset;
    for (const auto& w : words) text += " " + w;
    return text;
  };
  auto make_query = [&](const detail::SyntheticEntity& e) {
    std::vector<std::size_t> pick = e.attributes;
    std::shuffle(pick.begin(), pick.end(), rng);
    std::string text = "c" + std::to_string(pick_common(rng));
    for (std::size_t i = 0; i < cfg.query_attributes; ++i) text += " " + detail::attribute_word(e.topic, pick[i], e.language);
    return text;
  };

  SyntheticCorpus out;
  for (std::size_t i = 0; i < cfg.train_entities; ++i) {
    const auto e = make_entity();
    const std::size_t copies = duplicate(rng) ? 2 : 1;
    for (std::size_t c = 0; c < copies; ++c) {
      out.train.push_back({make_query(e), make_document(e), e.dataset, e.language, {}});
    }
  }
  for (std::size_t i = 0; i < cfg.test_entities; ++i) {
    const auto e = make_entity();
    const std::size_t copies = duplicate(rng) ? 2 : 1;
    const std::string qid = "q" + std::to_string(i);
    out.test.queries[qid] = make_query(e);
    for (std::size_t c = 0; c < copies; ++c) {
      const std::string did = "d" + std::to_string(i) + "_" + std::to_string(c);
      out.test.corpus[did] = make_document(e);
      out.test.qrels[qid][did] = 1;
    }
  }
  for (const auto& r : out.train) {
    out.texts.push_back(r.query);
    out.texts.push_back(r.document);
  }
  for (const auto& [id, t] : out.test.corpus) out.texts.push_back(t);
  for (const auto& [id, t] : out.test.queries) out.texts.push_back(t);
  return out;
}

}  // namespace moembed
