#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "skiprec/cli.hpp"

using namespace skiprec;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string out, err;
};

Outcome run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "skiprec");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("skiprec_cli_" + std::to_string(::getpid()) + "_" +
            ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  // Small synthetic corpus, prepared; returns the corpus directory.
  std::string prepared_synth(const std::vector<std::string>& extra = {}) {
    std::vector<std::string> args = {"synth", "--out", path("syn"), "--set", "synth.num_tracks=80",
                                     "--set", "synth.num_sessions=150"};
    args.insert(args.end(), extra.begin(), extra.end());
    EXPECT_EQ(run_cli(args).code, 0);
    EXPECT_EQ(run_cli({"prepare", "--data", path("syn/sessions.csv"), "--out", path("corpus")}).code, 0);
    return path("corpus");
  }

  std::vector<std::string> small_train(const std::string& corpus, const std::string& out) {
    return {"train", "--corpus", corpus, "--out", out, "--set", "model.d=16", "--set", "model.heads=2",
            "--set", "model.blocks=1", "--set", "model.ffn_dim=16", "--set", "train.max_epochs=2",
            "--set", "train.num_negatives=30", "--set", "eval.num_negatives=30", "--set", "eval.ks=[1,5,10]"};
  }

  fs::path dir_;
};

std::string slurp(const std::string& p) {
  std::ifstream in(p);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_F(CliTest, EmptyFileIsUsageError) {
  std::ofstream(path("empty.csv")).close();
  const auto r = run_cli({"prepare", "--data", path("empty.csv"), "--out", path("c")});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("empty"), std::string::npos);
}

TEST_F(CliTest, MissingAndMalformedInputs) {
  EXPECT_NE(run_cli({"prepare", "--data", path("nope.csv"), "--out", path("c")}).code, 0);
  std::ofstream(path("bad.csv")) << "session_id,session_position,track_id_clean,skip_1,skip_2,skip_3\n"
                                 << "s,1,a,false,false\n";
  const auto r = run_cli({"prepare", "--data", path("bad.csv"), "--out", path("c")});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("line 2"), std::string::npos);
  EXPECT_EQ(run_cli({"prepare"}).code, 2);
  EXPECT_EQ(run_cli({"train", "--out", path("t"), "--alpha", "-1"}).code, 2);
  EXPECT_EQ(run_cli({"synth", "--out", path("s"), "--set", "synth.bogus=1"}).code, 2);
  EXPECT_EQ(run_cli({"frobnicate"}).code, 2);
}

TEST_F(CliTest, SingleSessionGivesOneRecord) {
  std::ofstream(path("one.csv")) << "session_id,session_position,track_id_clean,skip_1,skip_2,skip_3\n"
                                 << "s,1,a,false,false,false\ns,2,b,true,false,false\ns,3,c,false,false,false\n";
  const auto r = run_cli({"prepare", "--data", path("one.csv"), "--out", path("c")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto cache = slurp(path("c/corpus.jsonl"));
  EXPECT_EQ(std::count(cache.begin(), cache.end(), '\n'), 1);
  const auto stats = nlohmann::json::parse(slurp(path("c/stats.json")));
  EXPECT_EQ(stats["sessions_kept"], 1);
  EXPECT_NEAR(stats["skip_fraction"].get<double>(), 1.0 / 3.0, 1e-12);
  const auto m = nlohmann::json::parse(slurp(path("c/manifest.json")));
  EXPECT_TRUE(m.contains("corpus_fingerprint"));
  EXPECT_TRUE(m["seeds"].contains("negatives"));
}

TEST_F(CliTest, ColumnMappingFlag) {
  std::ofstream(path("cols.csv")) << "sid;pos;track;skip_1;skip_2;skip_3\n"
                                  << "s;1;a;0;0;0\ns;2;b;0;1;0\ns;3;c;0;0;0\n";
  const auto r = run_cli({"prepare", "--data", path("cols.csv"), "--out", path("c"), "--columns",
                          R"({"session_id":"sid","position":"pos","track":"track","delimiter":";"})"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto bad = run_cli({"prepare", "--data", path("cols.csv"), "--out", path("d"), "--columns", R"({"track":"nope"})"});
  EXPECT_EQ(bad.code, 2);
}

TEST_F(CliTest, ConfigFileEnvAndPrecedence) {
  std::ofstream(path("cfg.json")) << R"({"synth": {"num_tracks": 50, "num_sessions": 20}})";
  ::setenv(kConfigEnv, path("cfg.json").c_str(), 1);
  auto r = run_cli({"synth", "--out", path("s1"), "--set", "synth.num_sessions=30"});
  ::unsetenv(kConfigEnv);
  ASSERT_EQ(r.code, 0) << r.err;
  const auto m = nlohmann::json::parse(slurp(path("s1/manifest.json")));
  EXPECT_EQ(m["config"]["synth"]["num_tracks"], 50);
  EXPECT_EQ(m["config"]["synth"]["num_sessions"], 30);
  std::ofstream(path("broken.json")) << "{";
  EXPECT_EQ(run_cli({"--config", path("broken.json"), "synth", "--out", path("s2")}).code, 2);
}

TEST_F(CliTest, TrainEvaluateCompareWorkflow) {
  const auto corpus = prepared_synth();
  auto minus = small_train(corpus, path("minus"));
  minus.insert(minus.end(), {"--alpha", "0"});
  auto r = run_cli(minus);
  ASSERT_EQ(r.code, 0) << r.err;
  auto plus = small_train(corpus, path("plus"));
  plus.insert(plus.end(), {"--context-mode", "embedding"});
  r = run_cli(plus);
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"checkpoint.bin", "optimizer.bin", "train_log.jsonl", "timings.jsonl", "manifest.json"}) {
    EXPECT_TRUE(fs::exists(path("plus") + "/" + f)) << f;
  }
  const auto meta = load_checkpoint(path("plus/checkpoint.bin")).meta;
  EXPECT_EQ(meta["context_mode"], "embedding");
  EXPECT_EQ(meta["alpha"], 0.5);

  r = run_cli({"evaluate", "--checkpoint", path("plus/checkpoint.bin"), "--corpus", corpus, "--out", path("rep.json"),
               "--set", "eval.num_negatives=30", "--set", "eval.ks=[1,5,10]"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rep = nlohmann::json::parse(slurp(path("rep.json")));
  EXPECT_EQ(rep["split"], "test");
  EXPECT_EQ(rep["num_sessions"], 150);
  EXPECT_LE(rep["hr"]["1"].get<double>(), rep["hr"]["10"].get<double>());
  EXPECT_TRUE(fs::exists(path("rep.json.manifest.json")));

  // Re-running evaluation gives the same report.
  r = run_cli({"evaluate", "--checkpoint", path("plus/checkpoint.bin"), "--corpus", corpus, "--out", path("rep2.json"),
               "--set", "eval.num_negatives=30", "--set", "eval.ks=[1,5,10]"});
  EXPECT_EQ(slurp(path("rep.json")), slurp(path("rep2.json")));

  r = run_cli({"compare", "--checkpoint", path("minus/checkpoint.bin"), "--checkpoint", path("plus/checkpoint.bin"),
               "--label", "S-", "--label", "S+", "--corpus", corpus, "--set", "eval.num_negatives=30", "--set",
               "eval.ks=[1,5,10]"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out.substr(0, r.out.find('\n')), "metric,S-,S+");
  EXPECT_NE(r.out.find("HR@10,"), std::string::npos);
  EXPECT_NE(r.out.find("%)"), std::string::npos);
}

TEST_F(CliTest, IdenticalRunsGiveIdenticalLogs) {
  const auto corpus = prepared_synth();
  ASSERT_EQ(run_cli(small_train(corpus, path("a"))).code, 0);
  ASSERT_EQ(run_cli(small_train(corpus, path("b"))).code, 0);
  EXPECT_EQ(slurp(path("a/train_log.jsonl")), slurp(path("b/train_log.jsonl")));
  EXPECT_EQ(slurp(path("a/checkpoint.bin")), slurp(path("b/checkpoint.bin")));
}

TEST_F(CliTest, AlphaWithoutNegativesWarns) {
  const auto corpus = prepared_synth({"--set", "synth.skip_rate=0"});
  auto args = small_train(corpus, path("t"));
  args.insert(args.end(), {"--set", "train.max_epochs=1"});
  const auto r = run_cli(args);
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.err.find("warning"), std::string::npos);
}

TEST_F(CliTest, VocabularyMismatchIsFault) {
  const auto corpus = prepared_synth();
  auto args = small_train(corpus, path("t"));
  args.insert(args.end(), {"--set", "train.max_epochs=1"});
  ASSERT_EQ(run_cli(args).code, 0);
  ASSERT_EQ(run_cli({"synth", "--out", path("syn2"), "--set", "synth.num_tracks=90", "--set", "synth.num_sessions=50"}).code, 0);
  ASSERT_EQ(run_cli({"prepare", "--data", path("syn2/sessions.csv"), "--out", path("other")}).code, 0);
  const auto r = run_cli({"evaluate", "--checkpoint", path("t/checkpoint.bin"), "--corpus", path("other"), "--set",
                          "eval.num_negatives=30", "--set", "eval.ks=[1,5,10]"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("vocabulary mismatch"), std::string::npos);
}

TEST_F(CliTest, RandomInitCheckpointIsChanceLevel) {
  ASSERT_EQ(run_cli({"synth", "--out", path("syn"), "--set", "synth.num_tracks=1200", "--set",
                     "synth.num_sessions=3000", "--set", "synth.transition_sharpness=0"})
                .code,
            0);
  ASSERT_EQ(run_cli({"prepare", "--data", path("syn/sessions.csv"), "--out", path("corpus")}).code, 0);
  auto args = small_train(path("corpus"), path("t"));
  args.insert(args.end(), {"--set", "train.max_epochs=0"});
  ASSERT_EQ(run_cli(args).code, 0);
  const auto r = run_cli({"evaluate", "--checkpoint", path("t/checkpoint.bin"), "--corpus", path("corpus")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rep = nlohmann::json::parse(r.out);
  const double n = rep["num_sessions"].get<double>();
  const double p = 1.0 / 1001.0;
  EXPECT_NEAR(rep["hr"]["1"].get<double>(), p, 4 * std::sqrt(p * (1 - p) / n));
}

TEST(ComparisonCsv, RelativeIncreaseColumn) {
  EvalReport a, b;
  a.ks = b.ks = {1, 10};
  a.hr = {{1, 0.2821}, {10, 0.5}};
  b.hr = {{1, 0.3073}, {10, 0.5}};
  const auto csv = cli::comparison_csv({"S-", "S+"}, {a, b});
  EXPECT_EQ(csv, "metric,S-,S+\nHR@1,0.2821,0.3073 (+8.93%)\nHR@10,0.5000,0.5000 (+0.00%)\n");
}
