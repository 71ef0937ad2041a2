#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "moembed/cli/run_config.hpp"
#include "moembed/datapipe/curation.hpp"
#include "moembed/datapipe/records.hpp"
#include "moembed/datapipe/synthetic.hpp"
#include "moembed/encoder/checkpoint.hpp"
#include "moembed/eval/retrieval.hpp"
#include "moembed/moe/upcycle.hpp"
#include "moembed/trainer/ablation.hpp"
#include "moembed/trainer/trainer.hpp"

namespace fs = std::filesystem;
using namespace moembed;

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  std::string init;
  std::string resume;
  std::size_t save_every = 0;
  std::string input;
  std::string role = "query";
  std::optional<std::size_t> dim;
  std::string task;
  std::string layers;
  std::optional<std::size_t> experts;
  std::optional<std::size_t> topk;
  std::size_t entities = 5000;
  std::size_t test_entities = 300;
};

RunConfig load_config(const Flags& f) {
  RunConfig c = f.config.empty() ? parse_run_config(nlohmann::json::object(), fs::current_path())
                                 : load_run_config(f.config);
  if (f.seed) c.seed = f.seed;
  if (!f.init.empty()) c.data.init = fs::path(f.init);
  if (!f.task.empty()) c.data.task = fs::path(f.task);
  return c;
}

const fs::path& require(const std::optional<fs::path>& p, const char* key) {
  if (!p) throw ConfigError(std::string("missing 'data.") + key + "' (set it in the config or pass a flag)");
  return *p;
}

std::vector<std::string> read_texts(const fs::path& path) {
  std::vector<std::string> out;
  for (const auto& j : read_jsonl(path)) {
    if (!j.is_object() || !j.contains("text") || !j["text"].is_string()) {
      throw InputError(path.string() + ": every line needs a \"text\" string");
    }
    out.push_back(j["text"].get<std::string>());
  }
  return out;
}

std::vector<std::string> pair_texts(const std::vector<PairRecord>& pairs) {
  std::vector<std::string> out;
  for (const auto& r : pairs) {
    out.push_back(r.query);
    out.push_back(r.document);
    for (const auto& n : r.hard_negatives) out.push_back(n);
  }
  return out;
}

std::uint64_t seed_of(const RunConfig& c) { return c.seed.value_or(0); }

/// The init checkpoint, or a fresh model whose vocabulary comes from `texts`.
EncoderModel starting_model(const RunConfig& c, const std::vector<std::string>& texts) {
  if (c.data.init) return read_checkpoint(*c.data.init).model;
  EncoderConfig enc = c.encoder;
  Tokenizer tok = Tokenizer::build(texts, c.data.max_vocab);
  enc.vocab_size = tok.size();
  return init_encoder(enc, seed_of(c), std::move(tok));
}

Embedder make_embedder(const EmbedderSection& e, const std::optional<EncoderModel>& model) {
  if (e.kind == "hashing") return hashing_embedder(e.hashing_dim);
  if (!model) throw ConfigError("embedder kind 'model' needs an init checkpoint (data.init or --init)");
  return model_embedder(*model, e.max_len);
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw InputError("cannot open " + path.string() + " for writing");
  os << j.dump(2) << '\n';
}

int run_train(const Flags& f, Stage stage) {
  const RunConfig c = load_config(f);
  const TrainConfig tc = c.train_config(stage);
  StageData data;
  std::vector<std::string> vocab_texts;
  if (stage == Stage::MLM) {
    data.texts = c.data.texts ? read_texts(*c.data.texts) : pair_texts(read_pairs(require(c.data.pairs, "texts")));
    vocab_texts = data.texts;
  } else {
    data.pairs = read_pairs(require(c.data.pairs, "pairs"));
    vocab_texts = pair_texts(data.pairs);
  }
  const fs::path out(f.out);
  fs::create_directories(out);
  TrainState state = f.resume.empty() ? TrainState::start(starting_model(c, vocab_texts)) : load_train_state(f.resume);
  const auto mode = f.resume.empty() ? std::ios::trunc : std::ios::app;
  std::ofstream metrics(out / "metrics.jsonl", mode), routing(out / "routing.jsonl", mode);
  const TrainLogs logs{&metrics, &routing};
  write_json(out / "train_config.json", tc);
  if (f.save_every == 0) {
    train_until(state, tc, data, static_cast<std::size_t>(-1), logs);
  } else {
    for (;;) {
      const std::size_t target = state.step + f.save_every;
      train_until(state, tc, data, target, logs);
      save_train_state(out / "state.ckpt", state, tc);
      if (state.step < target) break;
    }
  }
  save_train_state(out / "model.ckpt", state, tc);
  std::cout << to_string(stage) << ": " << state.step << " steps";
  if (!state.loss_history.empty()) std::cout << ", final loss " << state.loss_history.back();
  std::cout << "\nwrote " << (out / "model.ckpt").string() << '\n';
  return 0;
}

int run_upcycle(const Flags& f) {
  RunConfig c = load_config(f);
  if (!f.layers.empty()) c.upcycle.layers = f.layers;
  if (f.experts) c.upcycle.options.experts = *f.experts;
  if (f.topk) c.upcycle.options.top_k = *f.topk;
  c.upcycle.options.seed = seed_of(c);
  const EncoderModel dense = read_checkpoint(require(c.data.init, "init")).model;
  const auto layers = parse_layer_spec(c.upcycle.layers, dense.config.num_layers);
  const EncoderModel moe = upcycle(dense, layers, c.upcycle.options);
  const fs::path path = fs::path(f.out) / "model.ckpt";
  write_checkpoint(path, moe, {{"upcycled_layers", layers}});
  std::cout << "upcycled layers";
  for (auto l : layers) std::cout << ' ' << l;
  std::cout << " to " << c.upcycle.options.experts << " experts (top-" << c.upcycle.options.top_k << ")\n"
            << "active parameters " << active_parameter_count(moe) << " of " << parameter_count(moe) << '\n'
            << "wrote " << path.string() << '\n';
  return 0;
}

std::optional<EncoderModel> optional_model(const RunConfig& c) {
  if (!c.data.init) return std::nullopt;
  return read_checkpoint(*c.data.init).model;
}

int run_mine(const Flags& f) {
  const RunConfig c = load_config(f);
  const auto pairs = read_pairs(require(c.data.pairs, "pairs"));
  const auto model = optional_model(c);
  MiningReport report;
  const auto mined = mine_corpus(pairs, make_embedder(c.mining.teacher, model), c.mining.config, &report);
  const fs::path out(f.out);
  write_jsonl(out / "mined.jsonl", mined);
  write_json(out / "mining_report.json", report);
  std::cout << nlohmann::json(report).dump() << '\n';
  return 0;
}

int run_filter(const Flags& f) {
  const RunConfig c = load_config(f);
  const auto pairs = read_pairs(require(c.data.pairs, "pairs"));
  const auto model = optional_model(c);
  FilterReport report;
  const auto kept =
      filter_corpus(pairs, make_embedder(c.filter.embedder, model), c.filter.top_k, c.filter.shard_size, &report);
  const fs::path out(f.out);
  write_jsonl(out / "filtered.jsonl", kept);
  write_json(out / "filter_report.json", report);
  std::cout << "kept " << report.retained_count << " of " << report.input_count << " pairs\n";
  return 0;
}

int run_embed(const Flags& f) {
  const RunConfig c = load_config(f);
  if (f.input.empty()) throw ConfigError("embed needs --input");
  const EncoderModel model = read_checkpoint(require(c.data.init, "init")).model;
  std::vector<std::string> ids, texts;
  for (const auto& j : read_jsonl(f.input)) {
    if (!j.is_object() || !j.contains("text") || !j["text"].is_string()) {
      throw InputError(f.input + ": every line needs a \"text\" string");
    }
    ids.push_back(j.contains("id") ? (j["id"].is_string() ? j["id"].get<std::string>() : j["id"].dump())
                                   : std::to_string(ids.size()));
    texts.push_back(j["text"].get<std::string>());
  }
  const std::size_t dim = f.dim.value_or(c.eval.dim == 0 ? model.config.hidden_dim : c.eval.dim);
  const Tensor emb =
      truncate_embedding(embed_texts(model, texts, parse_role(f.role), model.config.max_seq_len), dim, model.config);
  std::vector<nlohmann::json> rows;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto row = emb.data().subspan(i * dim, dim);
    rows.push_back({{"id", ids[i]}, {"vector", std::vector<double>(row.begin(), row.end())}});
  }
  const fs::path path = fs::path(f.out) / "embeddings.jsonl";
  write_jsonl(path, rows);
  std::cout << "wrote " << rows.size() << " embeddings of width " << dim << " to " << path.string() << '\n';
  return 0;
}

int run_eval(const Flags& f) {
  const RunConfig c = load_config(f);
  const EncoderModel model = read_checkpoint(require(c.data.init, "init")).model;
  const RetrievalTask task = load_task(require(c.data.task, "task"));
  const std::size_t dim = f.dim.value_or(c.eval.dim == 0 ? model.config.hidden_dim : c.eval.dim);
  const RetrievalRun run = retrieve(model, task, dim, c.eval.k);
  const double ndcg = ndcg_at_k(run, task.qrels, c.eval.k);
  const fs::path out(f.out);
  write_run(out / "run.jsonl", run);
  write_json(out / "eval.json", {{"ndcg", ndcg}, {"k", c.eval.k}, {"dim", dim}, {"queries", task.queries.size()}});
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", ndcg);
  std::cout << "ndcg@" << c.eval.k << ' ' << buf << '\n';
  return 0;
}

int run_ablate(const Flags& f) {
  const RunConfig c = load_config(f);
  const auto pairs = read_pairs(require(c.data.pairs, "pairs"));
  const RetrievalTask task = load_task(require(c.data.task, "task"));
  AblationConfig a = c.ablation;
  a.dense = c.encoder;
  a.train = c.train_config(Stage::ContrastivePretrain);
  if (f.seed) a.seeds = {*f.seed};
  const Tokenizer tok = Tokenizer::build(pair_texts(pairs), c.data.max_vocab);
  const auto result = run_ablation(a, pairs, task, tok, [](const RunScore& s) {
    std::cerr << s.model << " batch=" << s.batch_size << " seed=" << s.seed << " ndcg@10=" << s.ndcg << std::endl;
  });
  const fs::path out(f.out);
  write_json(out / "ablation.json", result.comparison.json);
  std::ofstream(out / "ablation.txt", std::ios::trunc) << result.comparison.table;
  std::cout << result.comparison.table;
  return 0;
}

int run_synth(const Flags& f) {
  SyntheticConfig sc;
  sc.train_entities = f.entities;
  sc.test_entities = f.test_entities;
  sc.seed = f.seed.value_or(0);
  const auto corpus = make_synthetic_corpus(sc);
  const fs::path out(f.out);
  write_jsonl(out / "pairs.jsonl", corpus.train);
  std::vector<nlohmann::json> texts;
  for (const auto& t : pair_texts(corpus.train)) texts.push_back({{"text", t}});
  write_jsonl(out / "texts.jsonl", texts);
  save_task(out / "task", corpus.test);
  std::cout << "wrote " << corpus.train.size() << " pairs and a task with " << corpus.test.queries.size()
            << " queries to " << out.string() << '\n';
  return 0;
}

void add_common(CLI::App* sub, Flags& f) {
  sub->add_option("--config", f.config, "JSON run config")->check(CLI::ExistingFile);
  sub->add_option("--seed", f.seed, "Seed; overrides the config");
  sub->add_option("--out", f.out, "Output directory")->capture_default_str();
  sub->add_option("--init", f.init, "Checkpoint to start from; overrides data.init");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"moembed: MoE text-embedding pipeline"};
  app.require_subcommand(1);
  Flags f;

  auto* mlm = app.add_subcommand("mlm", "Masked-language-model training");
  auto* pretrain = app.add_subcommand("pretrain", "Contrastive pretraining on pairs");
  auto* finetune = app.add_subcommand("finetune", "Contrastive finetuning with hard negatives");
  for (auto* sub : {mlm, pretrain, finetune}) {
    add_common(sub, f);
    sub->add_option("--resume", f.resume, "Continue from a training checkpoint")->check(CLI::ExistingFile);
    sub->add_option("--save-every", f.save_every, "Write <out>/state.ckpt every N steps");
  }
  auto* up = app.add_subcommand("upcycle", "Turn dense MLP layers into MoE layers");
  add_common(up, f);
  up->add_option("--layers", f.layers, "alternate-from-second, all, or a comma list");
  up->add_option("--experts", f.experts, "Experts per MoE layer");
  up->add_option("--topk", f.topk, "Experts per token");
  auto* mine = app.add_subcommand("mine", "Mine hard negatives below a margin of the positive score");
  add_common(mine, f);
  auto* filter = app.add_subcommand("filter", "Consistency-filter pairs shard by shard");
  add_common(filter, f);
  auto* embed = app.add_subcommand("embed", "Embed texts to JSONL {id, vector}");
  add_common(embed, f);
  embed->add_option("--input", f.input, "JSONL with {id, text}")->check(CLI::ExistingFile);
  embed->add_option("--role", f.role, "query or document")->check(CLI::IsMember({"query", "document"}))->capture_default_str();
  embed->add_option("--dim", f.dim, "Embedding width (configured output dim)");
  auto* eval = app.add_subcommand("eval", "nDCG@10 on a retrieval task");
  add_common(eval, f);
  eval->add_option("--task", f.task, "Task directory; overrides data.task");
  eval->add_option("--dim", f.dim, "Embedding width (configured output dim)");
  auto* ablate = app.add_subcommand("ablate", "Dense vs MoE vs large dense sweep over batch sizes");
  add_common(ablate, f);
  auto* synth = app.add_subcommand("synth", "Write the synthetic pair corpus and retrieval task");
  synth->add_option("--seed", f.seed, "Generator seed");
  synth->add_option("--out", f.out, "Output directory")->capture_default_str();
  synth->add_option("--entities", f.entities, "Training entities")->capture_default_str();
  synth->add_option("--test-entities", f.test_entities, "Test entities")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (mlm->parsed()) return run_train(f, Stage::MLM);
    if (pretrain->parsed()) return run_train(f, Stage::ContrastivePretrain);
    if (finetune->parsed()) return run_train(f, Stage::ContrastiveFinetune);
    if (up->parsed()) return run_upcycle(f);
    if (mine->parsed()) return run_mine(f);
    if (filter->parsed()) return run_filter(f);
    if (embed->parsed()) return run_embed(f);
    if (eval->parsed()) return run_eval(f);
    if (ablate->parsed()) return run_ablate(f);
    if (synth->parsed()) return run_synth(f);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const InputError& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return 1;
  } catch (const DimensionError& e) {
    std::cerr << "dimension error: " << e.what() << '\n';
    return 1;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
