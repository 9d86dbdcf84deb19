#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "svdl/cli.hpp"

using namespace svdl;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

void write(const fs::path& p, const std::string& body) { std::ofstream(p, std::ios::binary) << body; }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string synthetic_config(const fs::path& out, std::size_t epochs = 4) {
  return "# tiny sparse_signal run\n"
         "task = classification\n"
         "variant = wgn\n"
         "data.train = synthetic:sparse_signal\n"
         "synthetic.samples = 200\n"
         "synthetic.length = 8\n"
         "synthetic.vocab = 12\n"
         "emb.dim = 6\n"
         "hidden = 6\n"
         "lr = 0.01\n"
         "batch = 32\n"
         "epochs = " + std::to_string(epochs) + "\n"
         "seed = 5\n"
         "out.dir = " + out.string() + "\n";
}

std::string valid_metric_of_best(const fs::path& metrics, std::size_t best_epoch) {
  std::ifstream in(metrics);
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::vector<std::string> f;
    for (std::string x; std::getline(ls, x, '\t');) f.push_back(x);
    if (f.size() == 6 && f[1] == "valid" && f[0] == std::to_string(best_epoch)) return f[4];
  }
  return {};
}

}  // namespace

TEST(Config, ParsesKeysCommentsAndDefaults) {
  const RunConfig rc = parse_config(
      "task = char_lm   # comment\n\n"
      "variant = w\n"
      "data.train = corpus.txt\n"
      "hidden = 32\n"
      "clip = none\n"
      "noise = sequence\n"
      "neuron_rule = strict\n",
      "/base");
  EXPECT_EQ(rc.train.task, Task::CharLM);
  EXPECT_EQ(rc.train.variant, Variant::W);
  EXPECT_EQ(rc.train.hidden, 32u);
  EXPECT_EQ(rc.train.clip, 0.0);
  EXPECT_EQ(rc.train.lr, 2e-3);
  EXPECT_EQ(rc.train.batch, 64u);
  EXPECT_EQ(rc.train.tau, 0.05);
  EXPECT_TRUE(rc.train.per_sequence_noise);
  EXPECT_TRUE(rc.train.strict_neuron_rule);
  EXPECT_EQ(rc.data.train, "/base/corpus.txt");
}

TEST(Config, UnknownKeyIsNamed) {
  try {
    parse_config("task = classification\ndata.train = x\nfoo = 1\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("'foo'"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
}

TEST(Config, RejectsBadValues) {
  const std::string head = "task = classification\ndata.train = x\n";
  EXPECT_THROW(parse_config(head + "hidden = many\n"), ConfigError);
  EXPECT_THROW(parse_config(head + "lr = -1\n"), ConfigError);
  EXPECT_THROW(parse_config(head + "variant = big\n"), ConfigError);
  EXPECT_THROW(parse_config(head + "hidden = 3\nhidden = 4\n"), ConfigError);
  EXPECT_THROW(parse_config(head + "just words\n"), ConfigError);
  EXPECT_THROW(parse_config("data.train = x\n"), ConfigError);
  EXPECT_THROW(parse_config("task = classification\n"), ConfigError);
}

TEST(Config, EveryDocumentedKeyAccepted) {
  std::string text = "task = classification\ndata.train = a\n";
  const std::map<std::string, std::string> values = {
      {"variant", "wn"},   {"data.valid", "b"},         {"data.test", "c"},        {"vocab.size", "100"},
      {"emb.dim", "8"},    {"hidden", "8"},              {"lr", "0.001"},           {"batch", "4"},
      {"epochs", "2"},     {"clip", "5"},                {"tau", "0.1"},            {"seed", "3"},
      {"kl.warmup_epochs", "2"}, {"out.dir", "o"},       {"neuron_rule", "consume"}, {"seq_len", "10"},
      {"noise", "minibatch"},    {"kl.scale", "0.5"},    {"valid.fraction", "0.2"}, {"synthetic.samples", "10"},
      {"synthetic.length", "5"}, {"synthetic.vocab", "8"}};
  for (const auto& [k, v] : values) text += k + " = " + v + "\n";
  ASSERT_EQ(values.size() + 2, config_keys().size());
  const RunConfig rc = parse_config(text);
  EXPECT_EQ(rc.data.vocab_size, 100u);
  EXPECT_EQ(rc.train.kl_warmup_epochs, 2u);
  EXPECT_EQ(rc.data.valid_fraction, 0.2);
  EXPECT_EQ(rc.out_dir, "o");
}

TEST(Cli, TrainPruneEvalBench) {
  TempDir tmp("svdl_cli_flow");
  const fs::path run = tmp.path / "run";
  write(tmp.path / "run.cfg", synthetic_config(run));
  std::ostringstream out, err;
  ASSERT_EQ(cli::cmd_train(tmp.path / "run.cfg", out, err), cli::kOk) << err.str();
  for (const char* f : {"metrics.tsv", "best.ckpt", "final.ckpt"}) EXPECT_TRUE(fs::exists(run / f)) << f;

  const Checkpoint best = load_checkpoint(run / "best.ckpt");
  std::ostringstream eo, ee;
  ASSERT_EQ(cli::cmd_eval(run / "best.ckpt", "", "valid", eo, ee), cli::kOk) << ee.str();
  EXPECT_EQ(eo.str(), "accuracy\t" + valid_metric_of_best(run / "metrics.tsv", best.epoch) + "\n");
  std::ostringstream eo2;
  cli::cmd_eval(run / "best.ckpt", "", "valid", eo2, ee);
  EXPECT_EQ(eo.str(), eo2.str());

  std::ostringstream po, pe;
  ASSERT_EQ(cli::cmd_prune(run / "best.ckpt", 0.05, tmp.path / "pruned", po, pe), cli::kOk) << pe.str();
  EXPECT_EQ(po.str().rfind(std::string(kSummaryHeader) + "\nwgn\taccuracy\t", 0), 0u) << po.str();
  for (const char* f : {"pruned.ckpt", "summary.tsv", "gates.csv", "snr_hist.tsv"})
    EXPECT_TRUE(fs::exists(tmp.path / "pruned" / f)) << f;

  std::ostringstream po2;
  ASSERT_EQ(cli::cmd_eval(tmp.path / "pruned" / "pruned.ckpt", "", "test", po2, pe), cli::kOk) << pe.str();

  std::ostringstream bo, be;
  ASSERT_EQ(cli::cmd_bench(tmp.path / "pruned" / "pruned.ckpt", 20, 10, bo, be), cli::kOk) << be.str();
  EXPECT_EQ(bo.str().rfind(std::string(kBenchHeader), 0), 0u);
  EXPECT_EQ(cli::cmd_bench(tmp.path / "pruned" / "pruned.ckpt", 20, 9, bo, be), cli::kConfig);
  std::ostringstream ne;
  EXPECT_EQ(cli::cmd_bench(run / "best.ckpt", 20, 10, bo, ne), cli::kNotPruned);
  EXPECT_NE(ne.str().find("prune"), std::string::npos);
}

TEST(Cli, TauZeroPrintsCompressionOne) {
  TempDir tmp("svdl_cli_tau0");
  write(tmp.path / "run.cfg", synthetic_config(tmp.path / "run", 1));
  std::ostringstream out, err;
  ASSERT_EQ(cli::cmd_train(tmp.path / "run.cfg", out, err), cli::kOk) << err.str();
  std::ostringstream po;
  ASSERT_EQ(cli::cmd_prune(tmp.path / "run" / "final.ckpt", 0.0, tmp.path / "p0", po, err), cli::kOk);
  std::istringstream rows(po.str());
  std::string header, row;
  std::getline(rows, header);
  std::getline(rows, row);
  std::vector<std::string> f;
  std::istringstream rs(row);
  for (std::string x; std::getline(rs, x, '\t');) f.push_back(x);
  ASSERT_EQ(f.size(), 8u);
  EXPECT_EQ(f[3], "1");
  // dense and compiled layouts cost the same when nothing is pruned
  std::ostringstream bo;
  ASSERT_EQ(cli::cmd_bench(tmp.path / "p0" / "pruned.ckpt", 20, 10, bo, err), cli::kOk);
  std::istringstream bs(bo.str());
  std::getline(bs, header);
  std::getline(bs, row);
  f.clear();
  std::istringstream rs2(row);
  for (std::string x; std::getline(rs2, x, '\t');) f.push_back(x);
  ASSERT_EQ(f.size(), 6u);
  EXPECT_EQ(f[4], f[5]);
}

TEST(Cli, ExitCodes) {
  TempDir tmp("svdl_cli_codes");
  std::ostringstream out, err;

  write(tmp.path / "unknown.cfg", "task = classification\ndata.train = x\nfoo = 1\n");
  EXPECT_EQ(cli::cmd_train(tmp.path / "unknown.cfg", out, err), cli::kConfig);
  EXPECT_NE(err.str().find("foo"), std::string::npos);

  err.str("");
  write(tmp.path / "missing.cfg", "task = char_lm\ndata.train = no_such_corpus.txt\n");
  EXPECT_EQ(cli::cmd_train(tmp.path / "missing.cfg", out, err), cli::kData);
  EXPECT_NE(err.str().find("no_such_corpus.txt"), std::string::npos) << err.str();

  write(tmp.path / "junk.ckpt", "not a checkpoint");
  EXPECT_EQ(cli::cmd_prune(tmp.path / "junk.ckpt", 0.05, tmp.path / "p", out, err), cli::kCheckpoint);
  EXPECT_EQ(cli::cmd_eval(tmp.path / "junk.ckpt", "", "valid", out, err), cli::kCheckpoint);
  EXPECT_EQ(cli::cmd_bench(tmp.path / "junk.ckpt", 10, 10, out, err), cli::kCheckpoint);
  EXPECT_EQ(cli::cmd_prune(tmp.path / "absent.ckpt", 0.05, tmp.path / "p", out, err), cli::kCheckpoint);
  EXPECT_EQ(cli::cmd_prune(tmp.path / "junk.ckpt", -1.0, tmp.path / "p", out, err), cli::kConfig);
}

TEST(Cli, DimensionMismatchOnEval) {
  TempDir tmp("svdl_cli_mismatch");
  std::string train;
  for (int i = 0; i < 40; ++i) train += std::to_string(i % 2) + "\t" + (i % 2 ? "good fine nice" : "bad poor awful") + "\n";
  write(tmp.path / "train.tsv", train);
  write(tmp.path / "other.tsv", "0\tgood\n7\tbad\n");
  write(tmp.path / "run.cfg",
        "task = classification\nvariant = wn\ndata.train = train.tsv\nemb.dim = 4\nhidden = 4\nepochs = 1\n"
        "batch = 8\nout.dir = " + (tmp.path / "run").string() + "\n");
  std::ostringstream out, err;
  ASSERT_EQ(cli::cmd_train(tmp.path / "run.cfg", out, err), cli::kOk) << err.str();
  EXPECT_EQ(cli::cmd_eval(tmp.path / "run" / "best.ckpt", (tmp.path / "other.tsv").string(), "valid", out, err),
            cli::kMismatch);
  std::ostringstream ok;
  write(tmp.path / "same.tsv", "0\tbad poor\n1\tnice fine\n");
  EXPECT_EQ(cli::cmd_eval(tmp.path / "run" / "best.ckpt", (tmp.path / "same.tsv").string(), "valid", ok, err),
            cli::kOk)
      << err.str();
  EXPECT_EQ(ok.str().rfind("accuracy\t", 0), 0u);
}

TEST(Cli, RerunIsByteIdentical) {
  TempDir tmp("svdl_cli_rerun");
  write(tmp.path / "a.cfg", synthetic_config(tmp.path / "a", 2));
  write(tmp.path / "b.cfg", synthetic_config(tmp.path / "b", 2));
  std::ostringstream out, err;
  ASSERT_EQ(cli::cmd_train(tmp.path / "a.cfg", out, err), cli::kOk);
  ASSERT_EQ(cli::cmd_train(tmp.path / "b.cfg", out, err), cli::kOk);
  for (const char* f : {"metrics.tsv", "best.ckpt", "final.ckpt"}) {
    // the stored config differs only in out.dir, which is not part of it
    EXPECT_EQ(slurp(tmp.path / "a" / f), slurp(tmp.path / "b" / f)) << f;
  }
}

TEST(Cli, SweepWritesTable) {
  TempDir tmp("svdl_cli_sweep");
  write(tmp.path / "s.cfg", synthetic_config(tmp.path / "sweep", 1));
  std::ostringstream out, err;
  ASSERT_EQ(cli::cmd_sweep(tmp.path / "s.cfg", out, err), cli::kOk) << err.str();
  const std::string table = slurp(tmp.path / "sweep" / "table.tsv");
  EXPECT_EQ(table, out.str());
  EXPECT_EQ(table.rfind(std::string(cli::kTableHeader) + "\n", 0), 0u);
  EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 5);
  for (const char* v : {"baseline", "w", "wn", "wgn"}) EXPECT_TRUE(fs::exists(tmp.path / "sweep" / v / "gates.csv")) << v;
}

TEST(Cli, RepeatedCharacterCorpusHasNearZeroBits) {
  TaskData d;
  d.task = Task::CharLM;
  d.vocab_size = 4;
  d.classes = 4;
  d.train_ids.assign(3000, 1);
  d.valid_ids.assign(300, 1);
  TrainConfig c = TrainConfig::defaults(Task::CharLM);
  c.variant = Variant::W;
  c.hidden = 8;
  c.batch = 8;
  c.seq_len = 20;
  c.epochs = 6;
  c.lr = 0.02;
  const TrainResult r = train(c, d);
  EXPECT_LT(r.best_valid_metric, 0.05);
}

TEST(Cli, UniformPredictorNearHalf) {
  Rng rng(3);
  ClassificationSet s;
  for (int i = 0; i < 1000; ++i) {
    s.sequences.push_back({static_cast<std::int32_t>(rng.below(5))});
    s.labels.push_back(static_cast<std::int32_t>(rng.below(2)));
  }
  ModelShape shape;
  shape.task = Task::Classification;
  shape.variant = Variant::Baseline;
  shape.vocab = 5;
  shape.emb_dim = 3;
  shape.hidden = 3;
  shape.classes = 2;
  Rng init(4);
  const auto m = init_model<float>(shape, init);
  EXPECT_NEAR(metric_value(Task::Classification, evaluate_classification(m, s, 100)), 0.5, 0.05);
}
