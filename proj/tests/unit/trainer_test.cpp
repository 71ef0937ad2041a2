#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <sstream>

#include "moembed/datapipe/curation.hpp"
#include "moembed/datapipe/synthetic.hpp"
#include "moembed/eval/retrieval.hpp"
#include "moembed/moe/upcycle.hpp"
#include "moembed/trainer/trainer.hpp"
#include "test_util.hpp"

using namespace moembed;

namespace {

struct Fixture {
  SyntheticCorpus corpus;
  EncoderModel model;
};

Fixture make_fixture(std::size_t entities, std::uint64_t seed, std::size_t moe_experts = 0) {
  SyntheticConfig sc;
  sc.train_entities = entities;
  sc.test_entities = 40;
  sc.topics = 6;
  sc.words_per_topic = 10;
  sc.common_words = 20;
  sc.seed = seed;
  Fixture f;
  f.corpus = make_synthetic_corpus(sc);
  auto tok = Tokenizer::build(f.corpus.texts, 1000);
  EncoderConfig c;
  c.vocab_size = tok.size();
  c.hidden_dim = 8;
  c.num_layers = 2;
  c.num_heads = 2;
  c.mlp_dim = 16;
  c.max_seq_len = 32;
  c.output_dims = {8, 4};
  f.model = init_encoder(c, seed, tok);
  if (moe_experts) f.model = upcycle(f.model, {1}, {.experts = moe_experts, .top_k = 2, .router_noise = 0.1, .seed = 1});
  return f;
}

TrainConfig small(Stage stage) {
  TrainConfig c;
  c.stage = stage;
  c.batch_size = 8;
  c.peak_lr = 1e-2;
  c.warmup_steps = 5;
  c.total_steps = 60;
  c.schedule = Schedule::Linear;
  c.temperature = 0.05;
  return c;
}

StageData pairs_of(const Fixture& f) { return {{}, f.corpus.train}; }

}  // namespace

TEST(Schedule, EndpointsAndMidpoints) {
  TrainConfig c;
  c.peak_lr = 1.0;
  c.warmup_steps = 10;
  c.total_steps = 110;
  c.schedule = Schedule::Cosine;
  EXPECT_EQ(lr_at(0, c), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(5, c), 0.5);
  EXPECT_DOUBLE_EQ(lr_at(10, c), 1.0);
  EXPECT_NEAR(lr_at(60, c), 0.5, 1e-15);
  EXPECT_NEAR(lr_at(110, c), 0.0, 1e-15);
  EXPECT_EQ(lr_at(111, c), 0.0);
  c.schedule = Schedule::Linear;
  EXPECT_DOUBLE_EQ(lr_at(60, c), 0.5);
  EXPECT_DOUBLE_EQ(lr_at(85, c), 0.25);
}

TEST(Schedule, StagePresets) {
  auto ft = TrainConfig::finetune();
  EXPECT_EQ(ft.peak_lr, 2e-5);
  EXPECT_EQ(ft.warmup_steps, 400u);
  EXPECT_EQ(ft.schedule, Schedule::Linear);
  EXPECT_EQ(ft.max_len_query, 512u);
  EXPECT_EQ(ft.max_len_doc, 512u);
  EXPECT_EQ(ft.num_hard_negatives, 10u);
  auto pt = TrainConfig::pretrain();
  EXPECT_EQ(pt.peak_lr, 8e-5);
  EXPECT_EQ(pt.warmup_steps, 1000u);
  EXPECT_EQ(pt.schedule, Schedule::Cosine);
  EXPECT_EQ(pt.max_len_query, 32u);
  EXPECT_EQ(pt.max_len_doc, 256u);
  auto mlm = TrainConfig::mlm();
  EXPECT_EQ(mlm.max_grad_norm, 1.0);
  EXPECT_EQ(mlm.peak_lr, 4e-4);
  EXPECT_EQ(mlm.grad_accumulation, 8u);
  EXPECT_EQ(mlm.mlm_probability, 0.3);
}

TEST(TrainConfigJson, RoundTripAndUnknownKeys) {
  auto c = TrainConfig::finetune();
  EXPECT_EQ(nlohmann::json(nlohmann::json(c).get<TrainConfig>()), nlohmann::json(c));
  try {
    update_from_json(c, {{"peak_lrr", 1.0}});
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("peak_lrr"), std::string::npos);
  }
  EXPECT_THROW(update_from_json(c, {{"schedule", "step"}}), ConfigError);
  EXPECT_THROW(update_from_json(c, {{"batch_size", "big"}}), ConfigError);
}

TEST(AdamW, OneStepMatchesHandComputation) {
  Tensor w({2}, {1.0, -2.0}, true);
  Tensor m({2, 1}, {1.0, 1.0}, true);
  w.mutable_grad()[0] = 0.5;
  w.mutable_grad()[1] = -0.25;
  m.mutable_grad()[0] = 0.0;
  m.mutable_grad()[1] = 1.0;
  std::vector<NamedTensor> params = {{"w", w}, {"m", m}};
  AdamW opt(params);
  TrainConfig cfg;
  opt.step(params, 0.1, cfg);
  // Bias-corrected first step: update = g / (|g| + eps).
  EXPECT_NEAR(w[0], 1.0 - 0.1 * 0.5 / (0.5 + 1e-8), 1e-15);
  EXPECT_NEAR(w[1], -2.0 + 0.1 * 0.25 / (0.25 + 1e-8), 1e-15);
  // Matrices also decay: 0.1 * 0.01 * w.
  EXPECT_NEAR(m[0], 1.0 - 0.1 * 0.01, 1e-15);
  EXPECT_NEAR(m[1], 1.0 - 0.1 * (1.0 / (1.0 + 1e-8) + 0.01), 1e-15);
}

TEST(Clip, NormBoundAfterClipping) {
  Tensor a({3}, {0, 0, 0}, true), b({2}, {0, 0}, true);
  for (auto& g : a.mutable_grad()) g = 3.0;
  for (auto& g : b.mutable_grad()) g = -4.0;
  std::vector<NamedTensor> p = {{"a", a}, {"b", b}};
  const double pre = clip_grad_norm(p, 1.0);
  EXPECT_NEAR(pre, std::sqrt(27.0 + 32.0), 1e-12);
  EXPECT_LE(global_grad_norm(p), 1.0 + 1e-9);
  EXPECT_NEAR(clip_grad_norm(p, 5.0), 1.0, 1e-12);
}

TEST(TrainStep, ZeroLearningRateLeavesParametersUnchanged) {
  auto f = make_fixture(60, 1, 4);
  auto before = f.model.clone();
  auto cfg = small(Stage::ContrastivePretrain);
  auto state = TrainState::start(f.model);
  train_until(state, cfg, pairs_of(f), 1);  // step 0 is inside warmup: lr 0
  auto a = before.named_parameters(), b = state.model.named_parameters();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].second.to_vector(), b[i].second.to_vector()) << a[i].first;
}

TEST(TrainStep, SameSeedGivesIdenticalLossTraces) {
  auto f = make_fixture(80, 2, 4);
  auto cfg = small(Stage::ContrastivePretrain);
  auto s1 = TrainState::start(f.model.clone());
  auto s2 = TrainState::start(f.model.clone());
  train_until(s1, cfg, pairs_of(f), 50);
  train_until(s2, cfg, pairs_of(f), 50);
  ASSERT_EQ(s1.loss_history.size(), 50u);
  EXPECT_EQ(std::memcmp(s1.loss_history.data(), s2.loss_history.data(), 50 * sizeof(double)), 0);
  EXPECT_LT(s1.loss_history.back(), s1.loss_history.front());
}

TEST(TrainStep, CheckpointResumeIsBitExact) {
  auto f = make_fixture(80, 3, 4);
  auto cfg = small(Stage::ContrastivePretrain);
  auto whole = TrainState::start(f.model.clone());
  train_until(whole, cfg, pairs_of(f), 30);
  auto part = TrainState::start(f.model.clone());
  train_until(part, cfg, pairs_of(f), 12);
  auto path = std::filesystem::temp_directory_path() / "moembed_resume.ckpt";
  save_train_state(path, part, cfg);
  auto resumed = load_train_state(path);
  EXPECT_EQ(resumed.step, 12u);
  train_until(resumed, cfg, pairs_of(f), 30);
  ASSERT_EQ(resumed.loss_history.size(), 30u);
  EXPECT_EQ(std::memcmp(resumed.loss_history.data(), whole.loss_history.data(), 30 * sizeof(double)), 0);
  std::filesystem::remove(path);
}

TEST(TrainStep, GradientAccumulationMatchesLargeBatch) {
  auto f = make_fixture(100, 4);
  auto cfg = small(Stage::MLM);
  cfg.batch_size = 16;
  cfg.total_steps = 10;
  cfg.max_grad_norm = 1e9;
  StageData data{f.corpus.texts, {}};
  auto big = TrainState::start(f.model.clone());
  train_until(big, cfg, data, 10);
  cfg.grad_accumulation = 8;
  auto acc = TrainState::start(f.model.clone());
  train_until(acc, cfg, data, 10);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_NEAR(acc.loss_history[i], big.loss_history[i], 1e-10);
}

TEST(TrainStep, FinetuneUsesHardNegativesAndMrl) {
  auto f = make_fixture(80, 5, 4);
  auto mined = mine_corpus(f.corpus.train, hashing_embedder(128), {.margin = 0.95, .num_negatives = 3});
  auto cfg = small(Stage::ContrastiveFinetune);
  cfg.num_hard_negatives = 3;
  cfg.mrl_dims = {8, 4};
  cfg.total_steps = 20;
  std::ostringstream metrics, routing;
  auto state = run_stage(cfg, {{}, mined}, f.model, {&metrics, &routing});
  EXPECT_EQ(state.step, 20u);
  std::istringstream in(metrics.str());
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    auto j = nlohmann::json::parse(line);
    for (const char* key : {"step", "lr", "loss", "contrastive", "balance_per_layer", "grad_norm"}) EXPECT_TRUE(j.contains(key));
    EXPECT_EQ(j["balance_per_layer"].size(), 1u);
    ++n;
  }
  EXPECT_EQ(n, 20u);
  EXPECT_NE(routing.str().find("\"balance_loss\""), std::string::npos);
}

TEST(TrainStep, SchemaMismatchFailsBeforeAnyStep) {
  auto f = make_fixture(40, 6);
  auto state = TrainState::start(f.model);
  auto cfg = small(Stage::ContrastiveFinetune);
  cfg.num_hard_negatives = 2;
  EXPECT_THROW(train_until(state, cfg, pairs_of(f), 5), ConfigError);
  EXPECT_THROW(train_until(state, small(Stage::MLM), StageData{{"too few"}, {}}, 5), ConfigError);
  EXPECT_THROW(train_until(state, small(Stage::ContrastivePretrain), StageData{}, 5), ConfigError);
  EXPECT_EQ(state.step, 0u);
}

TEST(TrainStep, NonFiniteLossDumpsRoutingStats) {
  auto f = make_fixture(40, 7, 4);
  Tensor head = f.model.mlm_weight;
  head.mutable_data()[0] = std::numeric_limits<double>::infinity();
  head.mutable_data()[1] = -std::numeric_limits<double>::infinity();
  auto state = TrainState::start(f.model);
  auto cfg = small(Stage::MLM);
  try {
    train_until(state, cfg, StageData{f.corpus.texts, {}}, 3);
    FAIL() << "expected a numeric error";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("routing"), std::string::npos) << e.what();
  }
}

TEST(Pipeline, StagesImproveRetrievalOverUntrainedModel) {
  auto f = make_fixture(300, 8);
  const double untrained = ndcg_at_k(retrieve(f.model, f.corpus.test, 8, 10), f.corpus.test.qrels);
  auto mlm = small(Stage::MLM);
  mlm.total_steps = 20;
  auto s1 = run_stage(mlm, {f.corpus.texts, {}}, f.model);
  auto moe = upcycle(s1.model, alternate_layers_from_second(2), {.experts = 4, .top_k = 2, .router_noise = 0.01});
  auto pre = small(Stage::ContrastivePretrain);
  pre.batch_size = 16;
  pre.epochs = 4;
  auto s2 = run_stage(pre, {{}, f.corpus.train}, moe);
  auto mined = mine_corpus(f.corpus.train, model_embedder(s2.model, 32), {.margin = 0.95, .num_negatives = 2});
  auto ft = small(Stage::ContrastiveFinetune);
  ft.batch_size = 16;
  ft.epochs = 1;
  ft.peak_lr = 3e-3;
  ft.num_hard_negatives = 2;
  ft.mrl_dims = {8, 4};
  auto s3 = run_stage(ft, {{}, mined}, s2.model);
  const double trained = ndcg_at_k(retrieve(s3.model, f.corpus.test, 8, 10), f.corpus.test.qrels);
  EXPECT_GT(trained, untrained + 0.1) << untrained << " -> " << trained;
}
