#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "moembed/cli/run_config.hpp"
#include "moembed/encoder/checkpoint.hpp"
#include "moembed/eval/retrieval.hpp"
#include "test_util.hpp"

using namespace moembed;
namespace fs = std::filesystem;

namespace {

const fs::path kCli = MOEMBED_CLI_PATH;
const fs::path kBundledTask = fs::path(MOEMBED_SOURCE_DIR) / "data" / "synthetic" / "task";

struct Result {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("moembed_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  Result run(const std::string& args) const {
    const auto out = dir_ / "stdout.txt", err = dir_ / "stderr.txt";
    const std::string cmd = kCli.string() + " " + args + " >" + out.string() + " 2>" + err.string();
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
  }

  fs::path write(const std::string& name, const std::string& text) const {
    const auto p = dir_ / name;
    std::ofstream(p) << text;
    return p;
  }

  // Small model whose vocabulary covers the bundled task.
  EncoderModel task_model(const RetrievalTask& task, std::uint64_t seed, std::size_t layers = 2) const {
    std::vector<std::string> texts;
    for (const auto& [id, t] : task.queries) texts.push_back(t);
    for (const auto& [id, t] : task.corpus) texts.push_back(t);
    auto tok = Tokenizer::build(texts, 4096);
    auto cfg = moembed::testing::tiny_config(layers, tok.size());
    cfg.max_seq_len = 32;
    return init_encoder(cfg, seed, std::move(tok));
  }

  fs::path dir_;
};

// Brute-force ranking by dot product and nDCG@10 with natural logs.
double ndcg_oracle(const EncoderModel& m, const RetrievalTask& task) {
  std::vector<std::string> qids, qtexts, dids, dtexts;
  for (const auto& [id, t] : task.queries) qids.push_back(id), qtexts.push_back(t);
  for (const auto& [id, t] : task.corpus) dids.push_back(id), dtexts.push_back(t);
  const auto Q = embed_texts(m, qtexts, Role::Query, m.config.max_seq_len);
  const auto D = embed_texts(m, dtexts, Role::Document, m.config.max_seq_len);
  const std::size_t h = m.config.hidden_dim;
  double total = 0.0;
  int counted = 0;
  for (std::size_t i = 0; i < qids.size(); ++i) {
    const auto& rel = task.qrels.at(qids[i]);
    std::vector<std::pair<double, std::string>> scored;
    for (std::size_t j = 0; j < dids.size(); ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < h; ++c) s += Q.data()[i * h + c] * D.data()[j * h + c];
      scored.emplace_back(-s, dids[j]);
    }
    std::sort(scored.begin(), scored.end());
    double dcg = 0.0, idcg = 0.0;
    for (std::size_t r = 0; r < 10 && r < scored.size(); ++r) {
      auto it = rel.find(scored[r].second);
      if (it != rel.end()) dcg += (std::pow(2.0, it->second) - 1.0) * std::log(2.0) / std::log(r + 2.0);
    }
    std::size_t r = 0;
    for (const auto& [d, g] : rel) {
      if (r < 10) idcg += (std::pow(2.0, g) - 1.0) * std::log(2.0) / std::log(r + 2.0);
      ++r;
    }
    total += dcg / idcg;
    ++counted;
  }
  return total / counted;
}

}  // namespace

TEST(RunConfig, ResolvesPathsRelativeToTheFile) {
  const auto c = parse_run_config(
      {{"data", {{"pairs", "p.jsonl"}, {"task", "/abs/task"}}}, {"seed", 7}, {"mining", {{"margin", nullptr}}}},
      "/cfg/dir");
  EXPECT_EQ(*c.data.pairs, fs::path("/cfg/dir/p.jsonl"));
  EXPECT_EQ(*c.data.task, fs::path("/abs/task"));
  EXPECT_FALSE(c.data.init.has_value());
  EXPECT_FALSE(c.mining.config.margin.has_value());
  EXPECT_EQ(c.train_config(Stage::ContrastivePretrain).seed, 7u);
}

TEST(RunConfig, RejectsUnknownKeysNamingThePath) {
  auto message = [](const nlohmann::json& j) {
    try {
      parse_run_config(j, ".");
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  EXPECT_NE(message({{"trian", nlohmann::json::object()}}).find("'config.trian'"), std::string::npos);
  EXPECT_NE(message({{"data", {{"pair", "x"}}}}).find("'data.pair'"), std::string::npos);
  EXPECT_NE(message({{"train", {{"lr", 1}}}}).find("'train.lr'"), std::string::npos);
  EXPECT_NE(message({{"encoder", {{"hidden", 1}}}}).find("'encoder.hidden'"), std::string::npos);
  EXPECT_NE(message({{"mining", {{"teacher", {{"dim", 3}}}}}}).find("'mining.teacher.dim'"), std::string::npos);
  EXPECT_NE(message({{"train", {{"batch_size", "many"}}}}).find("'train.batch_size'"), std::string::npos);
  EXPECT_NE(message({{"mining", {{"margin", 1.5}}}}).find("'mining.margin'"), std::string::npos);
  EXPECT_NE(message({{"ablation", {{"seeds", "0"}}}}).find("'ablation.seeds'"), std::string::npos);
}

TEST(RunConfig, StagePresetsAndOverrides) {
  const auto c = parse_run_config({{"train", {{"batch_size", 32}, {"peak_lr", 1e-3}}}}, ".");
  const auto ft = c.train_config(Stage::ContrastiveFinetune);
  EXPECT_EQ(ft.batch_size, 32u);
  EXPECT_EQ(ft.peak_lr, 1e-3);
  EXPECT_EQ(ft.num_hard_negatives, TrainConfig::finetune().num_hard_negatives);
  const auto mismatch = parse_run_config({{"train", {{"stage", "mlm"}}}}, ".");
  EXPECT_THROW(mismatch.train_config(Stage::ContrastivePretrain), ConfigError);
  EXPECT_NO_THROW(mismatch.train_config(Stage::MLM));
}

TEST(RunConfig, LayerSpecs) {
  EXPECT_EQ(parse_layer_spec("alternate-from-second", 6), (std::vector<std::size_t>{1, 3, 5}));
  EXPECT_EQ(parse_layer_spec("all", 3), (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_EQ(parse_layer_spec("0,2", 3), (std::vector<std::size_t>{0, 2}));
  EXPECT_THROW(parse_layer_spec("1,x", 3), ConfigError);
  EXPECT_THROW(parse_layer_spec("", 3), ConfigError);
}

TEST_F(Cli, EvalOnBundledTaskMatchesOracle) {
  const auto task = load_task(kBundledTask);
  const auto model = task_model(task, 11);
  write_checkpoint(dir_ / "m.ckpt", model);
  const auto r = run("eval --task " + kBundledTask.string() + " --init " + (dir_ / "m.ckpt").string() + " --out " +
                     (dir_ / "eval").string());
  ASSERT_EQ(r.code, 0) << r.err;
  ASSERT_EQ(r.out.rfind("ndcg@10 ", 0), 0u) << r.out;
  const double printed = std::stod(r.out.substr(8));
  EXPECT_EQ(printed, ndcg_at_k(retrieve(model, task, model.config.hidden_dim, 10), task.qrels, 10));
  EXPECT_NEAR(printed, ndcg_oracle(model, task), 1e-12);
  EXPECT_TRUE(fs::exists(dir_ / "eval" / "run.jsonl"));
}

TEST_F(Cli, EmbedWritesIdsAndTruncatedVectors) {
  const auto task = load_task(kBundledTask);
  const auto model = task_model(task, 3);
  write_checkpoint(dir_ / "m.ckpt", model);
  const auto input = write("texts.jsonl", "{\"id\": \"a\", \"text\": \"c1 t0a1\"}\n{\"id\": 7, \"text\": \"t3a2 c9 c2\"}\n");
  const auto r = run("embed --init " + (dir_ / "m.ckpt").string() + " --input " + input.string() +
                     " --role query --dim 4 --out " + dir_.string());
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = read_jsonl(dir_ / "embeddings.jsonl");
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0]["id"], "a");
  EXPECT_EQ(rows[1]["id"], "7");
  const auto expect = truncate_embedding(
      embed_texts(model, {"c1 t0a1", "t3a2 c9 c2"}, Role::Query, model.config.max_seq_len), 4, model.config);
  for (std::size_t i = 0; i < 2; ++i) {
    const auto v = rows[i]["vector"].get<std::vector<double>>();
    ASSERT_EQ(v.size(), 4u);
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(v[c], expect.data()[i * 4 + c]);
  }
  EXPECT_EQ(run("embed --init " + (dir_ / "m.ckpt").string() + " --input " + input.string() + " --dim 5 --out " +
                dir_.string())
                .code,
            1);
}

TEST_F(Cli, UpcycleFlagsBuildAlternateEightExpertTopTwo) {
  const auto task = load_task(kBundledTask);
  const auto dense = task_model(task, 5, 4);
  write_checkpoint(dir_ / "dense.ckpt", dense);
  const auto r = run("upcycle --init " + (dir_ / "dense.ckpt").string() +
                     " --layers alternate-from-second --experts 8 --topk 2 --out " + (dir_ / "up").string());
  ASSERT_EQ(r.code, 0) << r.err;
  const auto moe = read_checkpoint(dir_ / "up" / "model.ckpt").model;
  const std::vector<LayerKind> expect = {LayerKind::dense(), LayerKind::moe(8, 2), LayerKind::dense(),
                                         LayerKind::moe(8, 2)};
  EXPECT_EQ(moe.config.layer_kinds, expect);
  const std::vector<std::string> texts = {"c1 t0a1 t0a2", "t3a2 c9"};
  const auto a = embed_texts(dense, texts, Role::Document, 32);
  const auto b = embed_texts(moe, texts, Role::Document, 32);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.data()[i], b.data()[i], 1e-12);
}

TEST_F(Cli, ExitCodes) {
  const auto bad_key = write("bad.json", R"({"train": {"batch_sise": 4}})");
  auto r = run("pretrain --config " + bad_key.string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("train.batch_sise"), std::string::npos) << r.err;
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("eval --bogus").code, 1);
  EXPECT_EQ(run("eval --help").code, 0);
  EXPECT_EQ(run("eval --init " + (dir_ / "missing.ckpt").string() + " --task " + kBundledTask.string()).code, 1);

  // Non-finite weights make the first training step fail at run time.
  const auto task = load_task(kBundledTask);
  auto model = task_model(task, 1);
  for (auto& v : model.token_embedding.mutable_data()) v = std::nan("");
  write_checkpoint(dir_ / "nan.ckpt", model);
  std::vector<PairRecord> pairs;
  for (const auto& [qid, q] : task.queries) {
    pairs.push_back({q, task.corpus.at(task.qrels.at(qid).begin()->first), "default", "en", {}});
    if (pairs.size() == 8) break;
  }
  write_jsonl(dir_ / "pairs.jsonl", pairs);
  const auto cfg = write("nan.json", R"({"data": {"pairs": "pairs.jsonl", "init": "nan.ckpt"},
      "train": {"batch_size": 4, "total_steps": 2, "warmup_steps": 1}})");
  r = run("pretrain --config " + cfg.string() + " --out " + (dir_ / "nan_out").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("routing"), std::string::npos) << r.err;
}

TEST_F(Cli, TrainingIsReproducibleFromConfigAndSeed) {
  const auto task = load_task(kBundledTask);
  write_checkpoint(dir_ / "m.ckpt", task_model(task, 2));
  std::vector<PairRecord> pairs;
  for (const auto& [qid, q] : task.queries) {
    pairs.push_back({q, task.corpus.at(task.qrels.at(qid).begin()->first), "default", "en", {}});
    if (pairs.size() == 32) break;
  }
  write_jsonl(dir_ / "pairs.jsonl", pairs);
  const auto cfg = write("c.json", R"({"data": {"pairs": "pairs.jsonl", "init": "m.ckpt"},
      "train": {"batch_size": 8, "total_steps": 6, "warmup_steps": 2, "peak_lr": 1e-3,
                "max_len_query": 32, "max_len_doc": 32}})");
  for (const char* out : {"a", "b"}) {
    ASSERT_EQ(run("pretrain --config " + cfg.string() + " --seed 4 --out " + (dir_ / out).string()).code, 0);
  }
  EXPECT_EQ(slurp(dir_ / "a" / "model.ckpt"), slurp(dir_ / "b" / "model.ckpt"));
  EXPECT_EQ(slurp(dir_ / "a" / "metrics.jsonl"), slurp(dir_ / "b" / "metrics.jsonl"));
  EXPECT_EQ(read_jsonl(dir_ / "a" / "metrics.jsonl").size(), 6u);

  // Saving every 4 steps does not change the result.
  ASSERT_EQ(run("pretrain --config " + cfg.string() + " --seed 4 --save-every 4 --out " + (dir_ / "c").string()).code, 0);
  EXPECT_EQ(slurp(dir_ / "a" / "model.ckpt"), slurp(dir_ / "c" / "model.ckpt"));

  // Resuming from a step-4 state reproduces the straight run.
  const auto rc = parse_run_config(nlohmann::json::parse(slurp(cfg)), dir_);
  auto tc = rc.train_config(Stage::ContrastivePretrain);
  tc.seed = 4;
  auto st = TrainState::start(read_checkpoint(dir_ / "m.ckpt").model);
  train_until(st, tc, {{}, pairs}, 4);
  save_train_state(dir_ / "step4.ckpt", st, tc);
  ASSERT_EQ(run("pretrain --config " + cfg.string() + " --seed 4 --resume " + (dir_ / "step4.ckpt").string() +
                " --out " + (dir_ / "d").string())
                .code,
            0);
  EXPECT_EQ(slurp(dir_ / "a" / "model.ckpt"), slurp(dir_ / "d" / "model.ckpt"));
}
