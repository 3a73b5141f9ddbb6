#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "peopl/encoders.hpp"
#include "peopl/error.hpp"
#include "peopl/harness.hpp"
#include "peopl/io.hpp"
#include "peopl/tensor.hpp"

namespace peopl {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

const fs::path kConfigs = PEOPL_CONFIG_DIR;

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / (std::string("peopl_cli_") + info->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  json config(const std::string& name) const { return load_config((kConfigs / name).string()); }

  RunResult run(const json& cfg, const std::string& out, int workers = 1) const {
    RunOptions options;
    options.out = (dir_ / out).string();
    options.workers = workers;
    options.base_dir = dir_.string();
    return run_experiment(cfg, options);
  }

  // Runs the command-line tool and returns its exit status.
  int cli(const std::string& args) const {
    const std::string cmd = std::string(PEOPL_CLI_PATH) + " " + args + " >" +
                            (dir_ / "stdout.txt").string() + " 2>" + (dir_ / "stderr.txt").string();
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }
  std::string stderr_text() const { return read_file((dir_ / "stderr.txt").string()); }

  std::string write(const std::string& name, const std::string& contents) const {
    write_file((dir_ / name).string(), contents);
    return (dir_ / name).string();
  }
  std::string write(const std::string& name, const json& j) const { return write(name, j.dump(2)); }

  double bits(const RunResult& r, const std::string& family, const std::string& metric) const {
    for (const json& row : r.report.at("rows")) {
      if (row.at("family") == family && row.at("metric") == metric) return row.at("bits");
    }
    ADD_FAILURE() << "no row for " << family << " " << metric;
    return -1;
  }

  fs::path dir_;
};

TEST_F(CliTest, TwoSwapsConfig) {
  const RunResult r = run(config("two_swaps.json"), "out");
  EXPECT_NEAR(bits(r, "F", "privacy"), 1.0, 1e-9);
  EXPECT_NEAR(bits(r, "F'", "privacy"), 1.0, 1e-9);
  EXPECT_NEAR(bits(r, "F'oF", "privacy"), 2.0, 1e-9);
  for (const char* f : {"manifest.json", "report.json", "summary.csv"}) {
    EXPECT_TRUE(fs::exists(dir_ / "out" / f)) << f;
  }
}

TEST_F(CliTest, FamilyGrowthConfig) {
  const RunResult r = run(config("family_growth.json"), "out");
  EXPECT_NEAR(bits(r, "F", "privacy"), 2.0, 1e-9);
  EXPECT_NEAR(bits(r, "F'", "privacy"), 1.6, 1e-9);
  EXPECT_NEAR(bits(r, "F'", "h_data") + bits(r, "F'", "h_key_given_data"), 1.6, 1e-9);
  EXPECT_NEAR(bits(r, "F'", "mismatched_uniform") - bits(r, "F'", "privacy"),
              bits(r, "F'", "kl_gap_uniform"), 1e-9);
}

TEST_F(CliTest, UnknownFieldIsConfigError) {
  json cfg = config("two_swaps.json");
  cfg["score"]["families"][0]["wieghts"] = {1.0};
  try {
    run(cfg, "out");
    FAIL() << "expected a config error";
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("score.families[0].wieghts"), std::string::npos) << e.what();
  }
  json top = config("two_swaps.json");
  top["colour"] = "blue";
  EXPECT_THROW(run(top, "out2"), InvalidArgument);
  EXPECT_EQ(cli("run " + write("bad.json", cfg) + " --out " + (dir_ / "cli").string()), 2);
  EXPECT_NE(stderr_text().find("unknown field"), std::string::npos);
}

TEST_F(CliTest, StructuralErrorsExitTwo) {
  json cfg = config("two_swaps.json");
  cfg["schema_version"] = 2;
  EXPECT_EQ(cli("run " + write("v2.json", cfg) + " --out " + (dir_ / "a").string()), 2);
  cfg = config("two_swaps.json");
  cfg.erase("seed");
  EXPECT_EQ(cli("run " + write("noseed.json", cfg) + " --out " + (dir_ / "b").string()), 2);
  EXPECT_EQ(cli("run " + write("broken.json", std::string("{\"kind\": ")) + " --out " +
                (dir_ / "c").string()),
            2);
  EXPECT_EQ(cli("run " + (dir_ / "absent.json").string()), 2);
  EXPECT_EQ(cli("score " + (kConfigs / "train.json").string() + " --out " + (dir_ / "d").string()), 2);
  EXPECT_EQ(cli("frobnicate"), 2);
}

TEST_F(CliTest, BudgetErrorExitsThree) {
  EXPECT_EQ(cli("run " + (kConfigs / "utility.json").string() + " --budget 5 --out " +
                (dir_ / "out").string()),
            3);
  EXPECT_NE(stderr_text().find("budget"), std::string::npos);
}

TEST_F(CliTest, DivergenceExitsFour) {
  json cfg = config("attack_match.json");
  cfg["attack"]["replicates"] = 1;
  cfg["attack"]["victims"] = json::parse(R"([{"name": "linear", "kind": "linear", "hidden": 8}])");
  cfg["attack"]["plaintext"]["lr"] = 1e300;
  EXPECT_EQ(cli("run " + write("diverge.json", cfg) + " --out " + (dir_ / "out").string()), 4);
}

TEST_F(CliTest, CommandLineOverridesAndSuccess) {
  EXPECT_EQ(cli("--workers 2 run " + (kConfigs / "two_swaps.json").string() + " --out " +
                (dir_ / "a").string()),
            0);
  EXPECT_EQ(cli("attack mmd " + (kConfigs / "attack_mmd.json").string() + " --seed 3 --out " +
                (dir_ / "b").string()),
            0);
  const json manifest = json::parse(read_file((dir_ / "b" / "manifest.json").string()));
  EXPECT_EQ(manifest.at("master_seed"), 3);
  EXPECT_EQ(cli("attack sensitive " + (kConfigs / "attack_mmd.json").string() + " --out " +
                (dir_ / "c").string()),
            2);
  EXPECT_EQ(cli("validate " + (kConfigs / "pipeline.json").string()), 0);
}

TEST_F(CliTest, ManifestIsWrittenOnceUnlessForced) {
  const json cfg = config("two_swaps.json");
  run(cfg, "out");
  EXPECT_THROW(run(cfg, "out"), InvalidArgument);
  RunOptions options;
  options.out = (dir_ / "out").string();
  options.force = true;
  EXPECT_NO_THROW(run_experiment(cfg, options));
  const json manifest = json::parse(read_file((dir_ / "out" / "manifest.json").string()));
  EXPECT_EQ(manifest.at("tool_version"), kToolVersion);
  EXPECT_EQ(manifest.at("config_hash").get<std::string>().size(), 16u);
}

TEST_F(CliTest, ManifestWrittenBeforeAFailingRun) {
  json cfg = config("utility.json");
  RunOptions options;
  options.out = (dir_ / "out").string();
  options.budget = 5;
  EXPECT_THROW(run_experiment(cfg, options), BudgetExceeded);
  EXPECT_TRUE(fs::exists(dir_ / "out" / "manifest.json"));
  EXPECT_FALSE(fs::exists(dir_ / "out" / "summary.csv"));
}

TEST_F(CliTest, ResultsDoNotDependOnWorkers) {
  for (const char* name : {"compose_sweep.json", "attack_mmd.json", "train.json", "pipeline.json"}) {
    const json cfg = config(name);
    const RunResult a = run(cfg, std::string(name) + ".w1", 1);
    const RunResult b = run(cfg, std::string(name) + ".w3", 3);
    EXPECT_EQ(a.summary_csv, b.summary_csv) << name;
    EXPECT_EQ(a.report.dump(), b.report.dump()) << name;
  }
}

TEST_F(CliTest, RowsAreConfigurationsTimesSeeds) {
  const RunResult r = run(config("attack_mmd.json"), "out");
  EXPECT_EQ(r.report.at("rows").size(), 2u * 2u);
  std::size_t lines = 0;
  for (char c : r.summary_csv) lines += c == '\n';
  EXPECT_EQ(lines, 1u + 4u);
}

TEST_F(CliTest, StageSeedsAreKeyedByName) {
  json cfg = config("pipeline.json");
  const RunResult a = run(cfg, "a");
  json extra = cfg["full_pipeline"]["stages"][0];
  extra["name"] = "another";
  cfg["full_pipeline"]["stages"].insert(cfg["full_pipeline"]["stages"].begin(), extra);
  const RunResult b = run(cfg, "b");
  const json ma = json::parse(read_file((dir_ / "a" / "manifest.json").string()));
  const json mb = json::parse(read_file((dir_ / "b" / "manifest.json").string()));
  for (const char* stage : {"stage.scores", "stage.encode", "stage.train"}) {
    EXPECT_EQ(ma["stage_seeds"][stage], mb["stage_seeds"][stage]) << stage;
  }
  EXPECT_EQ(read_file((dir_ / "a" / "train" / "summary.csv").string()),
            read_file((dir_ / "b" / "train" / "summary.csv").string()));
}

TEST_F(CliTest, PrivateKeyNeverLandsInTheOutputDirectory) {
  json cfg = config("encode_synthetic.json");
  cfg["encode"]["key_dir"] = (dir_ / "out" / "key").string();
  EXPECT_THROW(run(cfg, "out"), InvalidArgument);
  cfg["encode"]["key_dir"] = dir_.string();  // contains the output directory
  EXPECT_THROW(run(cfg, "out"), InvalidArgument);

  cfg["encode"]["key_dir"] = (dir_ / "key").string();
  run(cfg, "out");
  ASSERT_TRUE(fs::exists(dir_ / "key" / "params.ptnsr"));
  for (const auto& entry : fs::recursive_directory_iterator(dir_ / "out")) {
    EXPECT_NE(entry.path().filename(), "params.ptnsr") << entry.path();
  }
  const Tensor rows = load_tensor((dir_ / "out" / "encoded.ptnsr").string());
  const ImageEncoder key = load_encoder((dir_ / "key").string());
  EXPECT_EQ(rows.dim(1), key.output_dim());

  // Attack runs store only the adversary's estimates.
  run(config("attack_mmd.json"), "attack");
  std::size_t encoders = 0;
  for (const auto& entry : fs::recursive_directory_iterator(dir_ / "attack")) {
    if (entry.path().filename() != "params.ptnsr") continue;
    bool adversarial = false;
    load_encoder(entry.path().parent_path().string(), &adversarial);
    EXPECT_TRUE(adversarial) << entry.path();
    ++encoders;
  }
  EXPECT_EQ(encoders, 4u);
}

TEST_F(CliTest, IngestCsvUniverse) {
  write("universe.csv", std::string("id,label,f0,f1\n1,+,0.5,1\n2,+,0.25,0\n3,-,1,1\n4,-,0,0\n"));
  json cfg = config("two_swaps.json");
  cfg["score"]["universe"] = {{"csv", "universe.csv"}};
  const RunResult r = run(cfg, "out");
  EXPECT_NEAR(bits(r, "F'oF", "privacy"), 2.0, 1e-9);
  const json manifest = json::parse(read_file((dir_ / "out" / "manifest.json").string()));
  EXPECT_EQ(manifest["inputs"]["universe.csv"], file_digest((dir_ / "universe.csv").string()));

  write("bad.csv", std::string("id,label,f0\n1,+,x\n"));
  cfg["score"]["universe"] = {{"csv", "bad.csv"}};
  EXPECT_THROW(run(cfg, "bad"), InvalidArgument);
}

TEST_F(CliTest, IngestRawTensorImages) {
  Tensor images({6, 8, 8});
  for (std::size_t i = 0; i < images.size(); ++i) images[i] = static_cast<double>(i % 256);
  save_tensor((dir_ / "images.ptnsr").string(), images);
  write("labels.csv", std::string("id,label\n0,0\n1,1\n2,0\n3,1\n4,0\n5,1\n"));
  json cfg = config("encode_synthetic.json");
  cfg["encode"]["data"] = {
      {"source", "raw_tensor"}, {"tensor", "images.ptnsr"}, {"labels", "labels.csv"}, {"rescale", 255}};
  const RunResult r = run(cfg, "out");
  EXPECT_EQ(r.report["rows"][0]["samples"], 6);
  EXPECT_EQ(r.report["rows"][0]["rows"], 6 * 4);

  write("short.csv", std::string("id,label\n0,0\n1,1\n"));
  cfg["encode"]["data"]["labels"] = "short.csv";
  EXPECT_THROW(run(cfg, "bad"), InvalidArgument);
}

TEST_F(CliTest, IngestTokenCsvDropsShortRows) {
  write("tokens.csv", std::string("id,label,tokens\n"
                                  "1,spam,4 8 15 16 23 42\n"
                                  "2,ham,1 2 3\n"
                                  "3,ham,9 9 9 9 9\n"));
  json cfg = config("encode_synthetic.json");
  cfg["encode"]["data"] = {{"source", "token_csv"}, {"path", "tokens.csv"}, {"min_tokens", 5}};
  cfg["encode"]["encoder"] = {{"kind", "rnn"}, {"hidden", 12}, {"vocab", 50}, {"embedding_dim", 4}};
  const RunResult r = run(cfg, "out");
  EXPECT_EQ(r.report["rows"][0]["samples"], 2);
  EXPECT_EQ(r.report["rows"][0]["dropped"], 1);
  const Tensor rows = load_tensor((dir_ / "out" / "encoded.ptnsr").string());
  EXPECT_EQ(rows.dim(0), 2u);
  EXPECT_EQ(rows.dim(1), 12u);

  cfg["encode"]["encoder"]["kind"] = "patch";
  EXPECT_THROW(run(cfg, "bad"), InvalidArgument);
}

TEST_F(CliTest, CsvSummaryIsFlatAndStable) {
  const RunResult r = run(config("two_swaps.json"), "out");
  EXPECT_EQ(r.summary_csv,
            "family,n,metric,bits,evaluated\n"
            "F,1,privacy,1,8\n"
            "F',1,privacy,1,8\n"
            "F'oF,1,privacy,2,16\n");
  EXPECT_EQ(read_file((dir_ / "out" / "summary.csv").string()), r.summary_csv);
}

}  // namespace
}  // namespace peopl
