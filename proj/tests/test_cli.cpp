#include "conllm/cli.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <sys/wait.h>

using namespace conllm;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "conllm");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

class Workspace : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = fs::temp_directory_path() / ("conllm_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }

  std::string path(const std::string& name) const { return (dir / name).string(); }

  std::string write_config(const std::string& name, const Json& j) const {
    std::ofstream(dir / name) << j.dump();
    return path(name);
  }

  // Small problem so that a full train/eval cycle takes well under a second.
  Json small_config() const {
    return Json{{"seed", 3},
                {"synth",
                 {{"n_real", 40},
                  {"n_fake", 40},
                  {"latent_dim", 3},
                  {"mode", "easy"},
                  {"dims", {{"audio", 6}, {"video", 5}, {"audiovisual", 4}}}}},
                {"train",
                 {{"epochs", 2}, {"batch_size", 16}, {"shared_dim", 8}, {"refiner", {{"layers", 1}, {"heads", 2}}}}}};
  }

  fs::path dir;
};

std::string slurp(const std::string& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

Json without_timing(Json j) {
  j.erase("timing");
  return j;
}

}  // namespace

TEST(Config, DefaultsMatchDocumentedValues) {
  const RunConfig c = default_run_config();
  EXPECT_EQ(c.train.lr, 1e-3);
  EXPECT_EQ(c.train.batch_size, 32u);
  EXPECT_EQ(c.train.epochs, 50u);
  EXPECT_EQ(c.train.momentum, 0.9);
  EXPECT_EQ(c.train.weight_decay, 1e-4);
  EXPECT_EQ(c.train.dropout, 0.5);
  EXPECT_EQ(c.train.decay_factor, 0.1);
  EXPECT_EQ(c.train.decay_every, 10u);
  EXPECT_EQ(c.train.lambda, 0.5);
  EXPECT_EQ(c.train.temperature, 0.07);
  EXPECT_EQ(c.train.shared_dim, 32u);
  EXPECT_EQ(c.train.n_layers, 2u);
  EXPECT_EQ(c.train.n_heads, 4u);
  EXPECT_EQ(c.train.fusion.kind, FusionKind::concat);
  EXPECT_EQ(c.train.seed, derive_seed(0, "train"));
  EXPECT_EQ(c.synth.seed, derive_seed(0, "synth"));
}

TEST(Config, JsonRoundTripAndHash) {
  RunConfig c = default_run_config();
  c.seed = 9;
  c.train.fusion = FusionStrategy::weighted(0.5, 0.25, 0.25);
  c.train.pair_policy = PairPolicy::supervised_label;
  c.synth.mode = SynthMode::easy;
  c.derive_seeds();
  const RunConfig back = run_config_from_json(to_json(c));
  EXPECT_EQ(canonical(to_json(back)), canonical(to_json(c)));
  EXPECT_EQ(config_hash(back), config_hash(c));

  RunConfig moved = c;
  moved.paths.data = "/elsewhere.ceb";
  EXPECT_EQ(config_hash(moved), config_hash(c));
  RunConfig tweaked = c;
  tweaked.train.lr = 2e-3;
  EXPECT_NE(config_hash(tweaked), config_hash(c));
  EXPECT_EQ(hex64(0xABCull), "0000000000000abc");
}

TEST(Config, ErrorsNameTheField) {
  auto field_of = [](const std::string& text) {
    try {
      parse_run_config(text);
    } catch (const ConfigError& e) {
      return e.field();
    }
    return std::string("<accepted>");
  };
  EXPECT_EQ(field_of(R"({"train": {"lr": 0}})"), "train.lr");
  EXPECT_EQ(field_of(R"({"train": {"lr": "fast"}})"), "train.lr");
  EXPECT_EQ(field_of(R"({"synth": {"dims": {"audio": 0}}})"), "synth.dims.audio");
  EXPECT_EQ(field_of(R"({"train": {"refiner": {"heads": 5}}})"), "train.refiner.heads");
  EXPECT_EQ(field_of(R"({"train": {"lambda": 1.5}})"), "train.lambda");
  EXPECT_EQ(field_of(R"({"train": {"optimizer": "sgd"}})"), "train.optimizer");
  EXPECT_EQ(field_of(R"({"train": {"fusion": {"kind": "weighted", "weights": [1, 1, 1]}}})"),
            "train.fusion.weights");
  EXPECT_EQ(field_of(R"({"trian": {}})"), "trian");
  EXPECT_EQ(field_of("{"), "<root>");
  EXPECT_EQ(field_of(R"({"train": {"epochs": 3}})"), "<accepted>");
}

TEST(Report, CurvesCsvAndNumberFormatting) {
  const ScoreSet s{{0.25, Label::authentic}, {0.75, Label::manipulated}};
  EXPECT_EQ(curves_csv(s), "threshold,fpr,tpr,fnr\ninf,0,0,1\n0.75,0,1,0\n0.25,1,1,0\n");
  EXPECT_EQ(format_double(0.1), "0.10000000000000001");
  const Json j = metrics_report({0.5, 0.75, 0.5, 2, 2}, 0x1234);
  EXPECT_EQ(j["config_hash"], "0000000000001234");
  EXPECT_EQ(j["auc"], 0.75);
}

TEST_F(Workspace, SynthIsByteIdenticalAcrossRuns) {
  const std::string cfg = write_config("c.json", small_config());
  ASSERT_EQ(run_cli({"synth", "--config", cfg, "--out", path("a.ceb"), "--quiet"}).code, 0);
  ASSERT_EQ(run_cli({"synth", "--config", cfg, "--out", path("b.ceb"), "--quiet"}).code, 0);
  EXPECT_EQ(slurp(path("a.ceb")), slurp(path("b.ceb")));
  ASSERT_EQ(run_cli({"synth", "--config", cfg, "--out", path("c.ceb"), "--seed", "4", "--quiet"}).code, 0);
  EXPECT_NE(slurp(path("a.ceb")), slurp(path("c.ceb")));
  const EmbeddingBundle b = read_bundle(path("a.ceb"));
  EXPECT_EQ(b.size(), 80u);
  EXPECT_EQ(b.dims, (Dims{6, 5, 4}));
}

TEST_F(Workspace, InvalidConfigExitsTwoNamingTheField) {
  Json j = small_config();
  j["synth"]["dims"]["video"] = 0;
  const Result r = run_cli({"synth", "--config", write_config("bad.json", j), "--out", path("x.ceb")});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("synth.dims.video"), std::string::npos) << r.err;

  j = small_config();
  j["train"]["bogus"] = 1;
  const Result u = run_cli({"train", "--config", write_config("unknown.json", j), "--data", path("x.ceb")});
  EXPECT_EQ(u.code, 2);
  EXPECT_NE(u.err.find("train.bogus"), std::string::npos) << u.err;

  EXPECT_EQ(run_cli({"train", "--bogus-flag"}).code, 2);
}

TEST_F(Workspace, MissingInputsExitThree) {
  const Result r = run_cli({"train", "--data", path("missing.ceb"), "--out-dir", path("out")});
  EXPECT_EQ(r.code, 3);
  EXPECT_EQ(run_cli({"eval", "--checkpoint", path("missing.ckpt"), "--data", path("missing.ceb")}).code, 3);
  std::ofstream(path("junk.ceb")) << "not a bundle";
  EXPECT_EQ(run_cli({"train", "--data", path("junk.ceb"), "--out-dir", path("out")}).code, 3);
}

TEST_F(Workspace, TrainEvalProfileCycle) {
  const std::string cfg = write_config("c.json", small_config());
  ASSERT_EQ(run_cli({"synth", "--config", cfg, "--out", path("d.ceb"), "--quiet"}).code, 0);

  const Result t = run_cli({"train", "--config", cfg, "--data", path("d.ceb"), "--out-dir", path("run"), "--epochs", "1"});
  ASSERT_EQ(t.code, 0) << t.err;
  EXPECT_NE(t.out.find("EER"), std::string::npos);
  const Json history = Json::parse(slurp(path("run/history.json")));
  ASSERT_EQ(history.size(), 1u);
  EXPECT_EQ(history[0]["epoch"], 0);
  const Json report = Json::parse(slurp(path("run/report.json")));
  for (const char* k : {"eer", "auc", "acc", "n_real", "n_fake", "config_hash"}) EXPECT_TRUE(report.contains(k)) << k;
  EXPECT_EQ(slurp(path("run/curves.csv")).rfind("threshold,fpr,tpr,fnr\n", 0), 0u);

  // Same inputs, same artefacts.
  ASSERT_EQ(run_cli({"train", "--config", cfg, "--data", path("d.ceb"), "--out-dir", path("run2"), "--epochs", "1",
                     "--quiet"})
                .code,
            0);
  EXPECT_EQ(slurp(path("run/model.ckpt")), slurp(path("run2/model.ckpt")));
  EXPECT_EQ(slurp(path("run/history.json")), slurp(path("run2/history.json")));
  EXPECT_EQ(without_timing(report), without_timing(Json::parse(slurp(path("run2/report.json")))));

  for (const char* name : {"e1.json", "e2.json"}) {
    const Result e = run_cli({"eval", "--checkpoint", path("run/model.ckpt"), "--data", path("d.ceb"), "--report",
                              path(name), "--quiet"});
    ASSERT_EQ(e.code, 0) << e.err;
  }
  const Json e1 = Json::parse(slurp(path("e1.json")));
  EXPECT_EQ(without_timing(e1), without_timing(Json::parse(slurp(path("e2.json")))));
  EXPECT_EQ(e1["n_real"].get<int>() + e1["n_fake"].get<int>(), 80);
  EXPECT_EQ(slurp(path("e1_curves.csv")), slurp(path("e2_curves.csv")));

  const Result p = run_cli({"profile", "--checkpoint", path("run/model.ckpt"), "--data", path("d.ceb"),
                            "--repetitions", "3", "--report", path("p.json"), "--quiet"});
  ASSERT_EQ(p.code, 0) << p.err;
  const Json pj = Json::parse(slurp(path("p.json")));
  EXPECT_EQ(pj["samples"], 80);
  EXPECT_GT(pj["flop_count"].get<double>(), 0.0);
  EXPECT_EQ(run_cli({"profile", "--checkpoint", path("run/model.ckpt"), "--data", path("d.ceb"), "--repetitions",
                     "2"})
                .code,
            2);
}

TEST_F(Workspace, EvalRejectsMismatchedAndEmptyData) {
  const std::string cfg = write_config("c.json", small_config());
  ASSERT_EQ(run_cli({"synth", "--config", cfg, "--out", path("d.ceb"), "--quiet"}).code, 0);
  ASSERT_EQ(run_cli({"train", "--config", cfg, "--data", path("d.ceb"), "--out-dir", path("run"), "--epochs", "1",
                     "--quiet"})
                .code,
            0);

  Json other = small_config();
  other["synth"]["dims"]["video"] = 7;
  const std::string cfg2 = write_config("c2.json", other);
  ASSERT_EQ(run_cli({"synth", "--config", cfg2, "--out", path("wide.ceb"), "--quiet"}).code, 0);
  const Result m = run_cli({"eval", "--checkpoint", path("run/model.ckpt"), "--data", path("wide.ceb")});
  EXPECT_EQ(m.code, 5);
  EXPECT_NE(m.err.find("video"), std::string::npos) << m.err;

  EmbeddingBundle empty;
  empty.dims = {6, 5, 4};
  write_bundle(empty, path("empty.ceb"));
  EXPECT_EQ(run_cli({"eval", "--checkpoint", path("run/model.ckpt"), "--data", path("empty.ceb")}).code, 2);
}

TEST_F(Workspace, AblateNeedsThreeSeeds) {
  const std::string cfg = write_config("c.json", small_config());
  ASSERT_EQ(run_cli({"synth", "--config", cfg, "--out", path("d.ceb"), "--quiet"}).code, 0);
  EXPECT_EQ(run_cli({"ablate", "--config", cfg, "--data", path("d.ceb"), "--out-dir", path("abl"), "--seeds", "2"}).code,
            2);
}

TEST(Cli, PrintsDefaultConfigAndHelp) {
  const Result r = run_cli({"--print-default-config"});
  ASSERT_EQ(r.code, 0);
  const RunConfig c = run_config_from_json(Json::parse(r.out));
  EXPECT_EQ(canonical(to_json(c)), canonical(to_json(default_run_config())));
  const Result h = run_cli({"--help"});
  EXPECT_EQ(h.code, 0);
  EXPECT_NE(h.out.find("synth"), std::string::npos);
}

TEST(Cli, BinaryRunsAsAProcess) {
  const char* exe = std::getenv("CONLLM_CLI");
  if (!exe) GTEST_SKIP() << "CONLLM_CLI not set";
  const fs::path out = fs::temp_directory_path() / "conllm_cli_process.json";
  const std::string cmd = std::string("\"") + exe + "\" --print-default-config > \"" + out.string() + "\"";
  ASSERT_EQ(std::system(cmd.c_str()), 0);
  EXPECT_NO_THROW(run_config_from_json(Json::parse(slurp(out.string()))));
  const std::string bad = std::string("\"") + exe + "\" train --data /nonexistent.ceb --out-dir /tmp/x > /dev/null 2>&1";
  const int status = std::system(bad.c_str());
  EXPECT_EQ(WEXITSTATUS(status), 3);
}
