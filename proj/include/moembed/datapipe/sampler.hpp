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
#include "moembed/objectives/masking.hpp"

namespace moembed {

/// Records drawn from a single dataset.
struct PairBatch {
  std::string dataset;
  std::vector<const PairRecord*> records;

  std::size_t size() const { return records.size(); }
};

/// One-dataset-per-batch sampler. Each epoch shuffles every dataset, cuts it
/// into full batches (the short remainder is dropped) and shuffles the batch
/// order. Epoch e is a pure function of (seed, e).
class BatchSampler {
 public:
  BatchSampler(std::map<std::string, std::vector<PairRecord>> datasets, std::size_t batch_size, std::uint64_t seed)
      : datasets_(std::move(datasets)), batch_size_(batch_size), seed_(seed) {
    if (batch_size_ == 0) throw ConfigError("batch_size must be positive");
    std::size_t largest = 0;
    for (const auto& [tag, recs] : datasets_) {
      if (recs.empty()) throw ConfigError("dataset '" + tag + "' is empty");
      largest = std::max(largest, recs.size());
      batches_per_epoch_ += recs.size() / batch_size_;
    }
    if (datasets_.empty()) throw ConfigError("no datasets to sample from");
    if (batch_size_ > largest) {
      throw ConfigError("batch_size " + std::to_string(batch_size_) + " exceeds the largest dataset (" +
                        std::to_string(largest) + " records)");
    }
  }

  // Batches point into datasets_, so copies would dangle.
  BatchSampler(const BatchSampler&) = delete;
  BatchSampler& operator=(const BatchSampler&) = delete;

  std::size_t batches_per_epoch() const { return batches_per_epoch_; }
  std::size_t batch_size() const { return batch_size_; }

  std::vector<PairBatch> epoch(std::size_t e) const {
    std::mt19937_64 rng(mix_seed(seed_, e));
    std::vector<PairBatch> out;
    for (const auto& [tag, recs] : datasets_) {
      std::vector<std::size_t> order(recs.size());
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t b = 0; b + batch_size_ <= recs.size(); b += batch_size_) {
        PairBatch batch{tag, {}};
        for (std::size_t i = b; i < b + batch_size_; ++i) batch.records.push_back(&recs[order[i]]);
        out.push_back(std::move(batch));
      }
    }
    std::shuffle(out.begin(), out.end(), rng);
    return out;
  }

  /// The batch at a global step, counting across epochs.
  PairBatch at(std::size_t step) const {
    const std::size_t e = step / batches_per_epoch_;
    if (e != cached_epoch_) {
      cache_ = epoch(e);
      cached_epoch_ = e;
    }
    return cache_[step % batches_per_epoch_];
  }

 private:
  std::map<std::string, std::vector<PairRecord>> datasets_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  std::size_t batches_per_epoch_ = 0;
  mutable std::size_t cached_epoch_ = static_cast<std::size_t>(-1);
  mutable std::vector<PairBatch> cache_;
};

}  // namespace moembed
