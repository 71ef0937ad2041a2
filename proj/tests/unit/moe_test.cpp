#include <gtest/gtest.h>

#include <cmath>

#include "moembed/encoder/encoder.hpp"
#include "moembed/moe/moe.hpp"
#include "moembed/moe/upcycle.hpp"
#include "moembed/numeric/grad_check.hpp"
#include "test_util.hpp"

using namespace moembed;
using moembed::testing::random_batch;
using moembed::testing::random_tensor;
using moembed::testing::tiny_config;

namespace {

MlpParams random_mlp(std::size_t hidden, std::size_t inner, std::uint64_t seed) {
  return {random_tensor({hidden, inner}, seed, 0.5), random_tensor({inner}, seed + 1, 0.1),
          random_tensor({inner, hidden}, seed + 2, 0.5), random_tensor({hidden}, seed + 3, 0.1)};
}

MoeParams random_moe(std::size_t hidden, std::size_t experts, std::size_t k, std::uint64_t seed) {
  MoeParams p;
  p.router = random_tensor({hidden, experts}, seed, 1.0);
  p.top_k = k;
  for (std::size_t e = 0; e < experts; ++e) p.experts.push_back(random_mlp(hidden, 6, seed + 10 * (e + 1)));
  return p;
}

}  // namespace

TEST(Route, TopOneAndTopTwoExamples) {
  Tensor probs({1, 3}, {0.5, 0.3, 0.2});
  auto r1 = route_probabilities(probs, 1);
  EXPECT_EQ(r1.index(0, 0), 0u);
  EXPECT_DOUBLE_EQ(r1.combine_weights[0], 1.0);
  auto r2 = route_probabilities(probs, 2);
  EXPECT_EQ(r2.index(0, 0), 0u);
  EXPECT_EQ(r2.index(0, 1), 1u);
  EXPECT_NEAR(r2.combine_weights[0], 0.625, 1e-15);
  EXPECT_NEAR(r2.combine_weights[1], 0.375, 1e-15);
}

TEST(Route, TiesGoToLowerIndex) {
  Tensor probs({1, 4}, {0.25, 0.25, 0.25, 0.25});
  auto r = route_probabilities(probs, 2);
  EXPECT_EQ(r.index(0, 0), 0u);
  EXPECT_EQ(r.index(0, 1), 1u);
  EXPECT_DOUBLE_EQ(r.combine_weights[0], 0.5);
}

TEST(Route, WeightsMatchRenormalizedSoftmaxOracle) {
  auto h = random_tensor({7, 5}, 1, 1.0, false);
  auto p = random_moe(5, 6, 2, 2);
  auto r = route(h, p);
  for (std::size_t t = 0; t < 7; ++t) {
    std::vector<double> logits(6, 0.0);
    for (std::size_t e = 0; e < 6; ++e)
      for (std::size_t c = 0; c < 5; ++c) logits[e] += h.at(t, c) * p.router.at(c, e);
    std::vector<std::size_t> order(6);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return logits[a] > logits[b]; });
    const double a = std::exp(logits[order[0]]), b = std::exp(logits[order[1]]);
    EXPECT_EQ(r.index(t, 0), order[0]);
    EXPECT_EQ(r.index(t, 1), order[1]);
    EXPECT_NEAR(r.combine_weights.at(t, 0), a / (a + b), 1e-12);
    EXPECT_NEAR(r.combine_weights.at(t, 0) + r.combine_weights.at(t, 1), 1.0, 1e-12);
  }
}

TEST(Route, TopKAboveExpertCountIsConfigError) {
  auto p = random_moe(4, 3, 4, 3);
  EXPECT_THROW(route(random_tensor({2, 4}, 4, 1.0, false), p), ConfigError);
}

TEST(MoeForward, TopOneUsesArgmaxExpert) {
  auto h = random_tensor({9, 4}, 5, 1.0, false);
  auto p = random_moe(4, 3, 1, 6);
  auto out = moe_forward(h, p, std::vector<bool>(9, true));
  for (std::size_t t = 0; t < 9; ++t) {
    auto row = gather_rows(h, {t});
    auto expect = mlp_forward(row, p.experts[out.routing.index(t, 0)]);
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(out.output.at(t, c), expect[c], 1e-12);
  }
}

TEST(MoeForward, IdenticalExpertsReproduceTheDenseMlp) {
  auto h = random_tensor({6, 4}, 7, 1.0, false);
  auto mlp = random_mlp(4, 6, 8);
  MoeParams p;
  p.router = random_tensor({4, 5}, 9, 1.0);
  p.top_k = 2;
  for (int e = 0; e < 5; ++e) p.experts.push_back(mlp.clone());
  auto out = moe_forward(h, p, std::vector<bool>(6, true)).output;
  auto dense = mlp_forward(h, mlp);
  for (std::size_t i = 0; i < dense.numel(); ++i) EXPECT_NEAR(out[i], dense[i], 1e-12);
}

TEST(MoeForward, GradientMatchesFiniteDifferences) {
  auto h = random_tensor({6, 4}, 10);
  auto p = random_moe(4, 4, 2, 11);
  auto w = random_tensor({6, 4}, 12, 1.0, false);
  std::vector<NamedTensor> params = {{"h", h}, {"router", p.router}};
  for (std::size_t e = 0; e < 4; ++e) params.emplace_back("w_in" + std::to_string(e), p.experts[e].w_in);
  const std::vector<bool> mask = {true, true, true, true, false, true};
  auto r = grad_check(
      [&] {
        auto o = moe_forward(h, p, mask);
        return add(sum(mul(o.output, w)), load_balance_loss(o.stats, 0.7));
      },
      params, {.step = 1e-6, .tolerance = 1e-4});
  EXPECT_TRUE(r.passed()) << r.max_rel_error() << " " << r.failure;
}

TEST(LoadBalance, UniformRoutingGivesOneOverExperts) {
  // 8 tokens, 8 experts, top-2, each expert chosen exactly twice, flat probabilities.
  RouterOutput r;
  r.tokens = 8;
  r.top_k = 2;
  r.num_experts = 8;
  for (std::size_t t = 0; t < 8; ++t) {
    r.expert_indices.push_back(t);
    r.expert_indices.push_back((t + 1) % 8);
  }
  r.full_probs = Tensor::full({8, 8}, 1.0 / 8.0);
  auto stats = compute_load_stats(r, std::vector<bool>(8, true));
  EXPECT_NEAR(load_balance_loss(stats, 1.0).item(), 0.125, 1e-15);
  EXPECT_NEAR(load_balance_loss(stats, 0.5).item(), 0.0625, 1e-15);
}

TEST(LoadBalance, CollapsedRoutingApproachesOne) {
  RouterOutput r;
  r.tokens = 4;
  r.top_k = 1;
  r.num_experts = 4;
  r.expert_indices = {0, 0, 0, 0};
  r.full_probs = Tensor({4, 4}, std::vector<double>{0.97, 0.01, 0.01, 0.01, 0.97, 0.01, 0.01, 0.01,
                                                    0.97, 0.01, 0.01, 0.01, 0.97, 0.01, 0.01, 0.01});
  auto stats = compute_load_stats(r, std::vector<bool>(4, true));
  EXPECT_NEAR(load_balance_loss(stats, 1.0).item(), 0.97, 1e-15);
}

TEST(LoadBalance, PaddingDoesNotCount) {
  RouterOutput r;
  r.tokens = 3;
  r.top_k = 1;
  r.num_experts = 2;
  r.expert_indices = {0, 1, 1};
  r.full_probs = Tensor({3, 2}, std::vector<double>{0.6, 0.4, 0.2, 0.8, 0.1, 0.9});
  auto stats = compute_load_stats(r, {true, true, false});
  EXPECT_EQ(stats.token_count, 2u);
  EXPECT_DOUBLE_EQ(stats.r[0], 0.5);
  EXPECT_DOUBLE_EQ(stats.p[0], 0.4);
  EXPECT_DOUBLE_EQ(stats.p[1], 0.6);
}

TEST(LoadBalance, GradientFlowsOnlyThroughProbabilities) {
  auto logits = random_tensor({5, 3}, 13);
  auto mask = std::vector<bool>(5, true);
  auto r = grad_check(
      [&] {
        auto routing = route_probabilities(softmax(logits, 1), 2);
        return load_balance_loss(compute_load_stats(routing, mask), 1.0);
      },
      {{"logits", logits}}, {.tolerance = 1e-6});
  EXPECT_TRUE(r.passed()) << r.max_rel_error();
}

// --- upcycling ----------------------------------------------------------------

TEST(Upcycle, AlternateLayersFromSecond) {
  EXPECT_EQ(alternate_layers_from_second(12), (std::vector<std::size_t>{1, 3, 5, 7, 9, 11}));
  EXPECT_EQ(alternate_layers_from_second(4), (std::vector<std::size_t>{1, 3}));
  EXPECT_EQ(all_layers(3), (std::vector<std::size_t>{0, 1, 2}));
}

TEST(Upcycle, PreservesEmbeddingsForTopOneAndTopTwo) {
  auto dense = init_encoder(tiny_config(4), 14);
  auto batch = random_batch(4, 9, 24, 15);
  auto before = encode(dense, batch).embeddings;
  for (std::size_t k : {1u, 2u}) {
    auto moe = upcycle(dense, alternate_layers_from_second(4), {.experts = 4, .top_k = k});
    auto after = encode(moe, batch);
    EXPECT_EQ(after.routing.size(), 2u);
    for (std::size_t i = 0; i < before.numel(); ++i) EXPECT_NEAR(after.embeddings[i], before[i], 1e-12);
  }
}

TEST(Upcycle, ConfigSelectsLayersAndCopiesExperts) {
  auto dense = init_encoder(tiny_config(4), 16);
  auto six = upcycle(dense, {1, 3}, {.experts = 8, .top_k = 2});
  auto all = upcycle(dense, all_layers(4), {.experts = 8, .top_k = 2});
  EXPECT_EQ(six.config.moe_layer_count(), 2u);
  EXPECT_EQ(all.config.moe_layer_count(), 4u);
  EXPECT_FALSE(six.config.kind(0).is_moe());
  EXPECT_TRUE(six.config.kind(1).is_moe());
  const auto& bank = six.layers[1].moe->experts;
  EXPECT_EQ(bank.size(), 8u);
  EXPECT_EQ(bank[7].w_in.to_vector(), dense.layers[1].mlp->w_in.to_vector());
  for (double v : six.layers[1].moe->router.data()) EXPECT_EQ(v, 0.0);
  // Experts are independent copies.
  EXPECT_NE(bank[0].w_in.node(), bank[1].w_in.node());
}

TEST(Upcycle, RejectsInvalidRequests) {
  auto dense = init_encoder(tiny_config(4), 17);
  auto moe = upcycle(dense, {1}, {.experts = 4, .top_k = 2});
  EXPECT_THROW(upcycle(moe, {1}, {.experts = 4, .top_k = 2}), ConfigError);
  EXPECT_THROW(upcycle(dense, {4}, {.experts = 4, .top_k = 2}), ConfigError);
  EXPECT_THROW(upcycle(dense, {1, 1}, {.experts = 4, .top_k = 2}), ConfigError);
  EXPECT_THROW(upcycle(dense, {1}, {.experts = 2, .top_k = 3}), ConfigError);
}

TEST(Upcycle, ActiveParameterCount) {
  auto dense = init_encoder(tiny_config(4), 18);
  auto moe = upcycle(dense, {1, 3}, {.experts = 8, .top_k = 2});
  const double mlp = static_cast<double>(dense.layers[1].mlp->parameter_count());
  const double router = 8.0 * 8.0;
  const double head = static_cast<double>(dense.mlm_weight.numel() + dense.mlm_bias.numel());
  EXPECT_DOUBLE_EQ(active_parameter_count(dense), static_cast<double>(parameter_count(dense)) - head);
  EXPECT_DOUBLE_EQ(active_parameter_count(moe), active_parameter_count(dense) + 2 * (router + mlp));
  EXPECT_EQ(parameter_count(moe), parameter_count(dense) + 2 * (7 * static_cast<std::size_t>(mlp) + 64));
}

TEST(Upcycle, RouterNoiseBreaksSymmetryDeterministically) {
  auto dense = init_encoder(tiny_config(2), 19);
  auto a = upcycle(dense, {1}, {.experts = 4, .top_k = 2, .router_noise = 0.01, .seed = 3});
  auto b = upcycle(dense, {1}, {.experts = 4, .top_k = 2, .router_noise = 0.01, .seed = 3});
  EXPECT_EQ(a.layers[1].moe->router.to_vector(), b.layers[1].moe->router.to_vector());
  EXPECT_NE(a.layers[1].moe->router[0], 0.0);
}
