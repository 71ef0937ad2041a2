#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "moembed/numeric/grad_check.hpp"
#include "moembed/objectives/losses.hpp"
#include "moembed/objectives/masking.hpp"
#include "test_util.hpp"

using namespace moembed;
using moembed::testing::random_batch;
using moembed::testing::random_tensor;
using moembed::testing::random_unit_rows;
using moembed::testing::tiny_config;

namespace {

// Direct -log softmax oracle with a long double log-sum-exp.
double infonce_oracle(const std::vector<std::vector<double>>& s, double tau) {
  long double total = 0.0L;
  for (std::size_t i = 0; i < s.size(); ++i) {
    long double m = -1e300L;
    for (double v : s[i]) m = std::max<long double>(m, v / tau);
    long double z = 0.0L;
    for (double v : s[i]) z += std::exp(static_cast<long double>(v / tau) - m);
    total += m + std::log(z) - s[i][i] / tau;
  }
  return static_cast<double>(total / s.size());
}

std::vector<std::vector<double>> dense_scores(const Tensor& q, const Tensor& d, const Tensor* hard, std::size_t H) {
  std::vector<std::vector<double>> s(q.rows());
  for (std::size_t i = 0; i < q.rows(); ++i) {
    for (std::size_t j = 0; j < d.rows(); ++j) {
      double v = 0.0;
      for (std::size_t c = 0; c < q.cols(); ++c) v += q.at(i, c) * d.at(j, c);
      s[i].push_back(v);
    }
    for (std::size_t m = 0; m < H; ++m) {
      double v = 0.0;
      for (std::size_t c = 0; c < q.cols(); ++c) v += q.at(i, c) * hard->at(i * H + m, c);
      s[i].push_back(v);
    }
  }
  return s;
}

}  // namespace

TEST(InfoNce, SinglePairIsZero) {
  auto q = random_unit_rows(1, 4, 1);
  auto d = random_unit_rows(1, 4, 2);
  EXPECT_EQ(infonce(make_score_matrix(q, d, std::nullopt, 0.02)).item(), 0.0);
}

TEST(InfoNce, OrthogonalPairsGiveTinyLoss) {
  Tensor q({2, 2}, {1.0, 0.0, 0.0, 1.0});
  auto loss = infonce(make_score_matrix(q, q, std::nullopt, 0.02)).item();
  EXPECT_NEAR(loss, std::log1p(std::exp(-50.0)), 1e-30);
  EXPECT_NEAR(loss, 1.93e-22, 1e-24);
}

TEST(InfoNce, MatchesOracle) {
  auto q = random_unit_rows(6, 5, 3);
  auto d = random_unit_rows(6, 5, 4);
  auto loss = infonce(make_score_matrix(q, d, std::nullopt, 0.05)).item();
  EXPECT_NEAR(loss, infonce_oracle(dense_scores(q, d, nullptr, 0), 0.05), 1e-12);
}

TEST(InfoNce, HardNegativesMatchOracleAndRaiseLoss) {
  auto q = random_unit_rows(4, 6, 5);
  auto d = random_unit_rows(4, 6, 6);
  auto h = random_unit_rows(8, 6, 7);
  auto plain = infonce(make_score_matrix(q, d, std::nullopt, 0.1)).item();
  auto hard = infonce_hard(make_score_matrix(q, d, h, 0.1)).item();
  EXPECT_NEAR(hard, infonce_oracle(dense_scores(q, d, &h, 2), 0.1), 1e-12);
  EXPECT_GT(hard, plain);
}

TEST(InfoNce, ZeroHardNegativesIsBitIdentical) {
  auto q = random_unit_rows(5, 4, 8);
  auto d = random_unit_rows(5, 4, 9);
  auto sm = make_score_matrix(q, d, std::nullopt, 0.02);
  const double a = infonce(sm).item(), b = infonce_hard(sm).item();
  EXPECT_EQ(std::memcmp(&a, &b, sizeof a), 0);
}

TEST(InfoNce, RejectsMismatchedInputs) {
  auto q = random_unit_rows(3, 4, 10);
  auto d = random_unit_rows(3, 5, 11);
  EXPECT_THROW(make_score_matrix(q, d, std::nullopt, 0.02), InputError);
  EXPECT_THROW(infonce(make_score_matrix(q, q, random_unit_rows(3, 4, 12), 0.02)), ConfigError);
  EXPECT_THROW(infonce(make_score_matrix(q, q, std::nullopt, 0.0)), ConfigError);
}

TEST(InfoNce, GradientMatchesFiniteDifferences) {
  auto q = random_tensor({3, 4}, 13);
  auto d = random_tensor({3, 4}, 14);
  auto h = random_tensor({6, 4}, 15);
  auto r = grad_check(
      [&] { return infonce_hard(make_score_matrix(l2_normalize(q), l2_normalize(d), l2_normalize(h), 0.1)); },
      {{"q", q}, {"d", d}, {"h", h}}, {.tolerance = 1e-6});
  EXPECT_TRUE(r.passed()) << r.max_rel_error();
}

TEST(Mrl, SingleFullDimensionIsExactlyInfoNce) {
  auto cfg = tiny_config();
  auto q = random_unit_rows(4, 8, 16);
  auto d = random_unit_rows(4, 8, 17);
  auto h = random_unit_rows(4, 8, 18);
  const double a = mrl_loss(q, d, h, {8}, 0.02, cfg).item();
  const double b = infonce_hard(make_score_matrix(q, d, h, 0.02)).item();
  EXPECT_EQ(std::memcmp(&a, &b, sizeof a), 0);
}

TEST(Mrl, IsMeanOverDimensions) {
  auto cfg = tiny_config();
  auto q = random_unit_rows(4, 8, 19);
  auto d = random_unit_rows(4, 8, 20);
  const double full = infonce(make_score_matrix(q, d, std::nullopt, 0.05)).item();
  const double half = infonce(make_score_matrix(truncate_embedding(q, 4, cfg), truncate_embedding(d, 4, cfg),
                                                std::nullopt, 0.05)).item();
  EXPECT_NEAR(mrl_loss(q, d, std::nullopt, {8, 4}, 0.05, cfg).item(), 0.5 * (full + half), 1e-12);
  EXPECT_THROW(mrl_loss(q, d, std::nullopt, {8, 3}, 0.05, cfg), ConfigError);
  EXPECT_THROW(mrl_loss(q, d, std::nullopt, {}, 0.05, cfg), ConfigError);
}

TEST(TotalLoss, AddsAlphaTimesMeanBalance) {
  auto c = Tensor::scalar(2.0);
  EXPECT_EQ(total_loss(c, {}, 1.0).item(), 2.0);
  EXPECT_NEAR(total_loss(c, {Tensor::scalar(0.125), Tensor::scalar(0.375)}, 0.5).item(), 2.125, 1e-15);
}

// --- masking ------------------------------------------------------------------

TEST(Masking, RateAndSplitMatchProbabilities) {
  auto batch = random_batch(400, 64, 1000, 21);
  std::size_t valid = 0;
  for (bool m : batch.attention_mask) valid += m;
  auto masked = mask_tokens(batch, 0.3, 7, 1000);
  const double rate = static_cast<double>(masked.mask_positions.size()) / static_cast<double>(valid);
  EXPECT_NEAR(rate, 0.3, 0.01);
  std::size_t to_mask = 0, unchanged = 0;
  for (auto pos : masked.mask_positions) {
    if (masked.corrupted.token_ids[pos] == Tokenizer::kMask) ++to_mask;
    else if (masked.corrupted.token_ids[pos] == batch.token_ids[pos]) ++unchanged;
  }
  const double n = static_cast<double>(masked.mask_positions.size());
  EXPECT_NEAR(to_mask / n, 0.8, 0.02);
  EXPECT_NEAR(unchanged / n, 0.1 + 0.1 / 995.0, 0.02);
}

TEST(Masking, NeverTouchesPaddingOrSpecialTokens) {
  std::vector<TokenIds> seqs = {{3, 5, 6, 7, 8, 9}, {4, 5, 10}};
  auto batch = TokenBatch::from_sequences(seqs, Role::Query);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto m = mask_tokens(batch, 0.9, seed, 20);
    for (auto pos : m.mask_positions) {
      EXPECT_TRUE(batch.attention_mask[pos]);
      EXPECT_FALSE(Tokenizer::is_special(batch.token_ids[pos]));
    }
    for (std::size_t i = 0; i < batch.token_ids.size(); ++i) {
      if (!batch.attention_mask[i] || Tokenizer::is_special(batch.token_ids[i])) {
        EXPECT_EQ(m.corrupted.token_ids[i], batch.token_ids[i]);
      }
    }
  }
}

TEST(Masking, MicroBatchesMaskLikeTheWholeBatch) {
  auto whole = random_batch(6, 10, 50, 22);
  auto full = mask_tokens(whole, 0.3, 9, 50);
  std::vector<TokenIds> rows;
  for (std::size_t r = 0; r < 6; ++r) rows.emplace_back(whole.token_ids.begin() + r * whole.seq,
                                                        whole.token_ids.begin() + (r + 1) * whole.seq);
  auto part = TokenBatch::from_sequences({rows[3], rows[4], rows[5]}, Role::Document);
  part.attention_mask.assign(whole.attention_mask.begin() + 3 * whole.seq, whole.attention_mask.end());
  auto m = mask_tokens(part, 0.3, 9, 50, 3);
  for (std::size_t i = 0; i < part.token_ids.size(); ++i)
    EXPECT_EQ(m.corrupted.token_ids[i], full.corrupted.token_ids[3 * whole.seq + i]);
}

TEST(Masking, ProbabilityMustBeInOpenUnitInterval) {
  auto batch = random_batch(2, 4, 20, 23);
  EXPECT_THROW(mask_tokens(batch, 0.0, 1, 20), ConfigError);
  EXPECT_THROW(mask_tokens(batch, 1.0, 1, 20), ConfigError);
  EXPECT_NO_THROW(mask_tokens(batch, 0.3, 1, 20));
}
