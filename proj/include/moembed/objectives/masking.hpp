#pragma once

#include <cstddef>
#include <cstdint>
#include <random>

#include "moembed/encoder/encoder.hpp"
#include "moembed/encoder/tokenizer.hpp"
#include "moembed/error.hpp"

namespace moembed {

/// Masking probability used for masked-language-model training.
inline constexpr double kDefaultMlmProbability = 0.3;

/// SplitMix64 finalizer; derives independent stream seeds from (seed, index).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Selects each valid non-special token with probability `mlm_probability`.
/// A selected token becomes [mask] 80% of the time, a random vocabulary
/// token 10%, and stays unchanged 10%.
///
/// Row r draws from its own stream seeded by (seed, row_offset + r), so a
/// batch split into micro-batches is masked exactly like the whole batch.
inline MaskedBatch mask_tokens(const TokenBatch& ids, double mlm_probability, std::uint64_t seed,
                               std::size_t vocab_size, std::size_t row_offset = 0) {
  if (!(mlm_probability > 0.0 && mlm_probability < 1.0)) {
    throw ConfigError("mlm_probability must lie strictly between 0 and 1");
  }
  if (vocab_size <= Tokenizer::kNumSpecial) throw ConfigError("vocabulary too small for masking");
  MaskedBatch out;
  out.original = ids;
  out.corrupted = ids;
  out.mlm_probability = mlm_probability;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> random_token(Tokenizer::kNumSpecial, vocab_size - 1);
  for (std::size_t r = 0; r < ids.batch; ++r) {
    std::mt19937_64 rng(mix_seed(seed, row_offset + r));
    for (std::size_t t = 0; t < ids.seq; ++t) {
      const std::size_t pos = r * ids.seq + t;
      if (!ids.attention_mask[pos] || Tokenizer::is_special(ids.token_ids[pos])) continue;
      if (unit(rng) >= mlm_probability) continue;
      out.mask_positions.push_back(pos);
      const double action = unit(rng);
      if (action < 0.8) {
        out.corrupted.token_ids[pos] = Tokenizer::kMask;
      } else if (action < 0.9) {
        out.corrupted.token_ids[pos] = random_token(rng);
      }
    }
  }
  return out;
}

}  // namespace moembed
