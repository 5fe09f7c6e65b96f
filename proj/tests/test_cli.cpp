#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "evimix/cli.hpp"

namespace evimix {
namespace {

namespace fs = std::filesystem;

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

struct Result {
  int code = 0;
  std::string out, err;
};

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    root_ = fs::temp_directory_path() / (std::string("evimix_cli_") + info->name());
    fs::remove_all(root_);
    fs::create_directories(root_);
  }
  void TearDown() override { fs::remove_all(root_); }

  Result run(std::vector<std::string> args) {
    args.insert(args.begin(), "evimix");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
  }

  std::string out_dir() const { return (root_ / "out").string(); }

  /// A small dataset; returns the manifest path.
  std::string synth() {
    const Result r = run({"synth", "--views", "2", "--classes", "2", "--dims", "4,3", "--n", "60", "--seed", "5",
                          "--separation", "2", "--out", out_dir()});
    EXPECT_EQ(r.code, 0) << r.err;
    return (root_ / "out" / "synth" / "data" / "manifest.json").string();
  }

  std::vector<std::string> quick(const std::string& data) {
    return {"--data",       data, "--pretrain-epochs", "3", "--train-epochs", "2", "--batch-size", "32",
            "--runs",       "2",  "--steps",           "2", "--out",          out_dir()};
  }

  std::vector<std::string> with(std::vector<std::string> head, const std::vector<std::string>& tail) {
    head.insert(head.end(), tail.begin(), tail.end());
    return head;
  }

  fs::path root_;
};

TEST_F(Cli, SynthWritesDatasetAndConfig) {
  const std::string manifest = synth();
  ASSERT_TRUE(fs::exists(manifest));
  const LoadedDataset d = load_dataset(manifest);
  EXPECT_EQ(d.batch.size(), 60u);
  EXPECT_EQ(d.batch.view_dims(), (std::vector<std::size_t>{4, 3}));
  const auto cfg = nlohmann::json::parse(slurp(root_ / "out" / "synth" / "config_resolved.json"));
  EXPECT_EQ(cfg["seed"], 5);
  EXPECT_EQ(cfg["n"], 60);
}

TEST_F(Cli, PipelineWritesLayoutAndReports) {
  const std::string data = synth();
  ASSERT_EQ(run(with({"pretrain"}, quick(data))).code, 0);
  const fs::path pre = root_ / "out" / "pretrain";
  for (const char* sub : {"checkpoints", "reports", "curves"}) EXPECT_TRUE(fs::is_directory(pre / sub)) << sub;
  EXPECT_TRUE(fs::exists(pre / "checkpoints" / "pretrain_seed1.ckpt"));
  EXPECT_TRUE(fs::exists(pre / "checkpoints" / "pretrain_seed2.ckpt"));
  EXPECT_TRUE(fs::exists(pre / "curves" / "pretrain_seed1.csv"));
  EXPECT_TRUE(fs::exists(pre / "config_resolved.json"));

  const Result tr = run(with({"train", "--pretrained", (pre / "checkpoints").string()}, quick(data)));
  ASSERT_EQ(tr.code, 0) << tr.err;
  const fs::path trained = root_ / "out" / "train";
  EXPECT_TRUE(fs::exists(trained / "checkpoints" / "model_seed2.ckpt"));
  const std::string curve = slurp(trained / "curves" / "train_seed1.csv");
  EXPECT_EQ(curve.substr(0, curve.find('\n')), "stage,epoch,total,fused_ecl,view_ecl,acl,edl,frl");
  EXPECT_EQ(std::count(curve.begin(), curve.end(), '\n'), 3);

  const Result ev = run(with({"eval", "--model", (trained / "checkpoints").string()}, quick(data)));
  ASSERT_EQ(ev.code, 0) << ev.err;
  const auto report = nlohmann::json::parse(slurp(root_ / "out" / "eval" / "reports" / "report.json"));
  ASSERT_EQ(report["runs"].size(), 2u);
  EXPECT_EQ(report["runs"][0]["attacked"].size(), 3u);
  EXPECT_TRUE(report["aggregate"]["mean"].contains("clean_acc"));
  const std::string hist = slurp(root_ / "out" / "eval" / "reports" / "uncertainty_hist.csv");
  EXPECT_EQ(hist.substr(0, hist.find('\n')), "a,bin_left,bin_right,density");

  const fs::path md = root_ / "table.md";
  const Result rep = run({"report", (root_ / "out" / "eval" / "reports" / "report.json").string(), "--output",
                          md.string(), "--out", out_dir()});
  ASSERT_EQ(rep.code, 0) << rep.err;
  EXPECT_NE(slurp(md).find("| RDML |"), std::string::npos);
}

TEST_F(Cli, EvalIsByteIdenticalAcrossRunsAndConfigRoundTrips) {
  const std::string data = synth();
  ASSERT_EQ(run(with({"pretrain"}, quick(data))).code, 0);
  const std::string pre = (root_ / "out" / "pretrain" / "checkpoints").string();
  ASSERT_EQ(run(with({"train", "--pretrained", pre}, quick(data))).code, 0);
  const std::string model = (root_ / "out" / "train" / "checkpoints").string();
  ASSERT_EQ(run(with({"eval", "--model", model, "--run-name", "a", "--gamma1", "0.5"}, quick(data))).code, 0);
  ASSERT_EQ(run(with({"eval", "--model", model, "--run-name", "b", "--gamma1", "0.5"}, quick(data))).code, 0);
  const fs::path a = root_ / "out" / "a", b = root_ / "out" / "b";
  EXPECT_EQ(slurp(a / "reports" / "report.json"), slurp(b / "reports" / "report.json"));

  const Result again = run({"eval", "--model", model, "--config", (a / "config_resolved.json").string(),
                            "--run-name", "c", "--out", out_dir()});
  ASSERT_EQ(again.code, 0) << again.err;
  const fs::path c = root_ / "out" / "c";
  EXPECT_EQ(slurp(c / "config_resolved.json"), slurp(a / "config_resolved.json"));
  EXPECT_EQ(slurp(c / "reports" / "report.json"), slurp(a / "reports" / "report.json"));
  EXPECT_EQ(nlohmann::json::parse(slurp(c / "config_resolved.json"))["gamma1"], 0.5);
}

TEST_F(Cli, FlagsOverrideConfigFile) {
  const std::string data = synth();
  const fs::path cfg = root_ / "cfg.json";
  std::ofstream(cfg) << R"({"gamma1": 0.25, "runs": 1, "pretrain_epochs": 2, "batch_size": 64})";
  const Result r = run({"pretrain", "--config", cfg.string(), "--data", data, "--pretrain-epochs", "1", "--out",
                        out_dir()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto resolved = nlohmann::json::parse(slurp(root_ / "out" / "pretrain" / "config_resolved.json"));
  EXPECT_EQ(resolved["gamma1"], 0.25);
  EXPECT_EQ(resolved["pretrain_epochs"], 1);
  EXPECT_EQ(resolved["seeds"], nlohmann::json::array({1}));
  EXPECT_EQ(resolved["data"], data);
}

TEST_F(Cli, ConfigErrorsExitTwo) {
  const std::string data = synth();
  for (const auto& args : std::vector<std::vector<std::string>>{
           {"pretrain", "--data", data, "--gamma1", "-1"},
           {"pretrain", "--data", data, "--ablation", "dropout"},
           {"pretrain", "--data", data, "--ablation", "disentangle"},
           {"pretrain", "--data", data, "--loss-target", "nowhere"},
           {"pretrain", "--data", data, "--learning-rate", "fast"},
           {"pretrain", "--data", data, "--no-such-flag"},
           {"pretrain", "--data", data, "--runs", "2", "--seeds", "1,2,3"},
           {"pretrain"},
           {"eval", "--data", data},
           {"frobnicate"},
           {}}) {
    const Result r = run(with(args, {"--out", out_dir()}));
    EXPECT_EQ(r.code, 2) << ::testing::PrintToString(args) << " -> " << r.err;
    EXPECT_EQ(r.err.rfind("error: ConfigError: ", 0), 0u) << r.err;
    EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1) << r.err;
  }
}

TEST_F(Cli, DataErrorsExitThree) {
  const std::string data = synth();
  Result r = run({"pretrain", "--data", (root_ / "missing.json").string(), "--out", out_dir()});
  EXPECT_EQ(r.code, 3);
  EXPECT_EQ(r.err.rfind("error: LoadError: ", 0), 0u) << r.err;

  r = run({"pretrain", "--data", data, "--train-fraction", "0.999", "--out", out_dir()});
  EXPECT_EQ(r.code, 3);
  EXPECT_EQ(r.err.rfind("error: SplitError: ", 0), 0u) << r.err;

  // A pretrain checkpoint is not a trained model.
  ASSERT_EQ(run(with({"pretrain"}, quick(data))).code, 0);
  r = run(with({"eval", "--model", (root_ / "out" / "pretrain" / "checkpoints").string()}, quick(data)));
  EXPECT_EQ(r.code, 3);
  r = run(with({"train", "--pretrained", (root_ / "missing").string()}, quick(data)));
  EXPECT_EQ(r.code, 3);

  const fs::path junk = root_ / "junk.json";
  std::ofstream(junk) << "{not json";
  r = run({"report", junk.string()});
  EXPECT_EQ(r.code, 3);
}

TEST_F(Cli, DivergenceExitsFour) {
  const std::string data = synth();
  const Result r = run(with({"pretrain", "--learning-rate", "1e300"}, quick(data)));
  EXPECT_EQ(r.code, 4) << r.err;
  EXPECT_EQ(r.err.rfind("error: TrainingError: ", 0), 0u) << r.err;
}

TEST_F(Cli, FailedRunLeavesNoPartialOutputs) {
  const std::string data = synth();
  const Result r = run(with({"pretrain", "--learning-rate", "1e300", "--run-name", "doomed"}, quick(data)));
  ASSERT_NE(r.code, 0);
  EXPECT_FALSE(fs::exists(root_ / "out" / "doomed"));
  EXPECT_TRUE(fs::exists(data));

  const Result m = run({"eval", "--data", (root_ / "nope.json").string(), "--model", "x", "--out",
                        (root_ / "fresh" / "nested").string()});
  ASSERT_EQ(m.code, 3);
  EXPECT_FALSE(fs::exists(root_ / "fresh"));
}

TEST_F(Cli, TrainWithoutPretrainingNeedsNoCheckpoint) {
  const std::string data = synth();
  Result r = run(with({"train"}, quick(data)));
  EXPECT_EQ(r.code, 2);
  r = run(with({"train", "--ablation", "pretrain-with-attacks,attention"}, quick(data)));
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(root_ / "out" / "train" / "checkpoints" / "model_seed1.ckpt"));
}

TEST_F(Cli, AblateWritesOneReportPerSet) {
  const std::string data = synth();
  const Result r = run(with({"ablate", "--sets", "no-acl,full"}, quick(data)));
  ASSERT_EQ(r.code, 0) << r.err;
  const fs::path reports = root_ / "out" / "ablate" / "reports";
  const auto no_acl = nlohmann::json::parse(slurp(reports / "ablation_no-acl.json"));
  const auto full = nlohmann::json::parse(slurp(reports / "ablation_full.json"));
  EXPECT_EQ(no_acl["ablation"], nlohmann::json::array({"L_ACL"}));
  EXPECT_EQ(full["ablation"], nlohmann::json::array());
  const std::string md = slurp(reports / "ablation.md");
  EXPECT_NE(md.find("RDML (w/o L_ACL)"), std::string::npos);
  EXPECT_EQ(run(with({"ablate", "--sets", "no-such-set"}, quick(data))).code, 2);
}

TEST_F(Cli, HelpExitsZero) {
  const Result r = run({"--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("pretrain"), std::string::npos);
}

TEST_F(Cli, BinaryReportsExitCodeAndSingleErrorLine) {
  const fs::path err = root_ / "stderr.txt";
  const std::string cmd = std::string(EVIMIX_CLI_PATH) + " pretrain --gamma2 -3 --data x 2> " + err.string();
  const int status = std::system(cmd.c_str());
  ASSERT_TRUE(WIFEXITED(status));
  EXPECT_EQ(WEXITSTATUS(status), 2);
  EXPECT_EQ(slurp(err), "error: ConfigError: gamma1 and gamma2 must be >= 0\n");

  const std::string load = std::string(EVIMIX_CLI_PATH) + " pretrain --data " + (root_ / "none.json").string() +
                           " --out " + out_dir() + " 2> " + err.string();
  const int s2 = std::system(load.c_str());
  ASSERT_TRUE(WIFEXITED(s2));
  EXPECT_EQ(WEXITSTATUS(s2), 3);
}

}  // namespace
}  // namespace evimix
