#include <gtest/gtest.h>
#include <sys/wait.h>

#include <chrono>
#include <map>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "dcollab/csv.hpp"
#include "dcollab/synth.hpp"

// End-to-end checks of the command-line tool: exit codes, printed hashes,
// emitted files. DCOLLAB_CLI is injected by the build.

namespace fs = std::filesystem;

namespace {

struct RunResult {
  int code = -1;
  std::string output;
};

RunResult run_cli(const std::string& args) {
  const std::string cmd = std::string(DCOLLAB_CLI) + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  EXPECT_NE(pipe, nullptr);
  RunResult r;
  std::array<char, 4096> buf;
  while (fgets(buf.data(), buf.size(), pipe)) r.output += buf.data();
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / "dc_cli_test";
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const {
    return (dir_ / name).string();
  }
  fs::path dir_;
};

}  // namespace

TEST_F(CliTest, GenPrintsStableHash) {
  const std::string cmd = "--seed 5 gen --samples 40 --size 16 --scale-min 0.8 --scale-max 0.95 -o " +
                          path("a.toyf");
  auto a = run_cli(cmd);
  ASSERT_EQ(a.code, 0) << a.output;
  EXPECT_NE(a.output.find("hash"), std::string::npos);

  auto b = run_cli("--seed 5 gen --samples 40 --size 16 --scale-min 0.8 --scale-max 0.95 -o " + path("b.toyf"));
  ASSERT_EQ(b.code, 0);
  // same seed, same printed hash; and the files load identically
  const auto ha = a.output.substr(a.output.find("hash"));
  const auto hb = b.output.substr(b.output.find("hash"));
  EXPECT_EQ(ha, hb);
  EXPECT_EQ(dcollab::load(path("a.toyf")).content_hash(),
            dcollab::load(path("b.toyf")).content_hash());
}

TEST_F(CliTest, GenRejectsZeroSamples) {
  auto r = run_cli("gen --samples 0 -o " + path("x.toyf"));
  EXPECT_EQ(r.code, 2);
}

TEST_F(CliTest, GenExportsLabelsJson) {
  auto r = run_cli("--seed 1 gen --samples 5 --size 16 --scale-min 0.8 --scale-max 0.95 -o " + path("d.toyf") +
                   " --export-json " + path("labels.json"));
  ASSERT_EQ(r.code, 0) << r.output;
  std::ifstream in(path("labels.json"));
  ASSERT_TRUE(in.good());
  std::string all((std::istreambuf_iterator<char>(in)),
                  std::istreambuf_iterator<char>());
  EXPECT_NE(all.find("landmarks"), std::string::npos);
  EXPECT_NE(all.find("glasses"), std::string::npos);
}

TEST_F(CliTest, TrainProducesRunArtifacts) {
  ASSERT_EQ(run_cli("--seed 2 gen --samples 30 --size 16 --scale-min 0.8 --scale-max 0.95 -o " +
                    path("t.toyf"))
                .code,
            0);
  // a small config keeps this fast
  {
    std::ofstream cfg(path("cfg.json"));
    cfg << R"({"net": {"input": {"channels":1,"height":16,"width":16},
                "stem": {"channels":4,"kernel":3,"stride":1,"pool":true},
                "stages": [{"units":1,"channels":8,"first_stride":2}]},
               "tasks": [
                {"name":"landmarks","kind":"landmarks","num_points":5,"image_size":16},
                {"name":"smile","kind":"categorical","num_classes":2,"loss_weight":0.25}],
               "train": {"epochs":1,"batch_size":8}})";
  }
  auto r = run_cli("--seed 2 --config " + path("cfg.json") +
                   " train --data " + path("t.toyf") +
                   " --strategy collaboration --run-dir " + path("run"));
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_TRUE(fs::exists(path("run/manifest.jsonl")));
  EXPECT_TRUE(fs::exists(path("run/summary.json")));
  EXPECT_TRUE(fs::exists(path("run/checkpoint.bin")));
  EXPECT_TRUE(fs::exists(path("run/config.json")));

  // unknown strategy lists the valid set and exits 2
  auto bad = run_cli("train --data " + path("t.toyf") + " --strategy wat");
  EXPECT_EQ(bad.code, 2);
  EXPECT_NE(bad.output.find("cross_stitch"), std::string::npos);

  // single-strategy summary has the same schema
  auto single = run_cli("--seed 2 --config " + path("cfg.json") +
                        " train --data " + path("t.toyf") +
                        " --strategy single --run-dir " + path("run2"));
  ASSERT_EQ(single.code, 0) << single.output;
  std::ifstream s1(path("run/summary.json")), s2(path("run2/summary.json"));
  auto j1 = nlohmann::json::parse(s1);
  auto j2 = nlohmann::json::parse(s2);
  for (const auto& [key, value] : j1.items()) {
    (void)value;
    EXPECT_TRUE(j2.contains(key)) << key;
  }
}

TEST_F(CliTest, MissingDatasetIsDataError) {
  auto r = run_cli("train --data /nonexistent.toyf --strategy single");
  EXPECT_EQ(r.code, 3);
}

TEST_F(CliTest, DivergentTrainingExitsNumericFailure) {
  ASSERT_EQ(run_cli("--seed 3 gen --samples 30 --size 16 --scale-min 0.8 --scale-max 0.95 -o " +
                    path("n.toyf"))
                .code,
            0);
  {
    std::ofstream cfg(path("cfg.json"));
    cfg << R"({"net": {"input": {"channels":1,"height":16,"width":16},
                "stem": {"channels":4,"kernel":3,"stride":1,"pool":true},
                "stages": [{"units":1,"channels":8,"first_stride":2}]},
               "tasks": [
                {"name":"landmarks","kind":"landmarks","num_points":5,"image_size":16}],
               "train": {"epochs":5,"batch_size":8,
                         "optimizer": {"learning_rate": 1e18}}})";
  }
  auto r = run_cli("--seed 3 --config " + path("cfg.json") + " train --data " +
                   path("n.toyf") + " --strategy single --run-dir " +
                   path("runN"));
  EXPECT_EQ(r.code, 4) << r.output;
}

TEST_F(CliTest, SampleWeightsFileShape) {
  auto r = run_cli("--seed 4 --out " + path("w") +
                   " sample-weights --n 100 -o " + path("w/weights.csv"));
  ASSERT_EQ(r.code, 0) << r.output;
  auto rows = dcollab::parse_csv_file(path("w/weights.csv"));
  ASSERT_EQ(rows.size(), 101u);  // header + 100 draws
  ASSERT_EQ(rows[0].size(), 5u);  // draw + 4 related tasks
  for (std::size_t i = 1; i < rows.size(); ++i)
    for (std::size_t c = 1; c < rows[i].size(); ++c) {
      const double v = std::stod(rows[i][c]);
      EXPECT_GE(v, 1e-4);
      EXPECT_LE(v, 1.0);
    }

  // stable across reruns with the same seed
  auto again = run_cli("--seed 4 --out " + path("w2") +
                       " sample-weights --n 100 -o " + path("w2/weights.csv"));
  ASSERT_EQ(again.code, 0);
  std::ifstream f1(path("w/weights.csv")), f2(path("w2/weights.csv"));
  std::string s1((std::istreambuf_iterator<char>(f1)),
                 std::istreambuf_iterator<char>());
  std::string s2((std::istreambuf_iterator<char>(f2)),
                 std::istreambuf_iterator<char>());
  EXPECT_EQ(s1, s2);

  // N=0 writes just the header
  auto empty = run_cli("sample-weights --n 0 -o " + path("empty.csv"));
  ASSERT_EQ(empty.code, 0);
  EXPECT_EQ(dcollab::parse_csv_file(path("empty.csv")).size(), 1u);
}

TEST_F(CliTest, CsvUsesCrlfLineEndings) {
  ASSERT_EQ(run_cli("--seed 4 sample-weights --n 2 -o " + path("crlf.csv"))
                .code,
            0);
  std::ifstream in(path("crlf.csv"), std::ios::binary);
  std::string all((std::istreambuf_iterator<char>(in)),
                  std::istreambuf_iterator<char>());
  EXPECT_NE(all.find("\r\n"), std::string::npos);
}

TEST_F(CliTest, CompareEmitsTableShapedCsv) {
  ASSERT_EQ(run_cli("--seed 6 gen --samples 40 --size 16 --scale-min 0.8 --scale-max 0.95 -o " +
                    path("c.toyf"))
                .code,
            0);
  {
    std::ofstream cfg(path("cfg.json"));
    cfg << R"({"net": {"input": {"channels":1,"height":16,"width":16},
                "stem": {"channels":4,"kernel":3,"stride":1,"pool":true},
                "stages": [{"units":1,"channels":8,"first_stride":2}]},
               "tasks": [
                {"name":"landmarks","kind":"landmarks","num_points":5,"image_size":16},
                {"name":"smile","kind":"categorical","num_classes":2,"loss_weight":0.25}],
               "train": {"epochs":1,"batch_size":8}})";
  }
  auto r = run_cli("--seed 6 --config " + path("cfg.json") + " --out " +
                   path("cmp") + " --jobs 2 compare --data " + path("c.toyf") +
                   " --strategies single,hard --seeds 2");
  ASSERT_EQ(r.code, 0) << r.output;
  auto rows = dcollab::parse_csv_file(path("cmp/compare.csv"));
  ASSERT_EQ(rows.size(), 5u);  // header + 2 strategies x 2 seeds
  EXPECT_EQ(rows[0], (std::vector<std::string>{"ratio", "strategy", "seed",
                                               "failure_rate", "mean_error"}));

  auto again = run_cli("--seed 6 --config " + path("cfg.json") + " --out " +
                       path("cmp2") + " --jobs 1 compare --data " +
                       path("c.toyf") + " --strategies single,hard --seeds 2");
  ASSERT_EQ(again.code, 0);
  std::ifstream f1(path("cmp/compare.csv")), f2(path("cmp2/compare.csv"));
  std::string s1((std::istreambuf_iterator<char>(f1)),
                 std::istreambuf_iterator<char>());
  std::string s2((std::istreambuf_iterator<char>(f2)),
                 std::istreambuf_iterator<char>());
  EXPECT_EQ(s1, s2);
}

TEST_F(CliTest, AblateValidatesStrategyAndPaths) {
  auto missing = run_cli("ablate --checkpoint " + path("nope"));
  EXPECT_EQ(missing.code, 3);

  ASSERT_EQ(run_cli("--seed 7 gen --samples 30 --size 16 --scale-min 0.8 --scale-max 0.95 -o " +
                    path("a.toyf"))
                .code,
            0);
  {
    std::ofstream cfg(path("cfg.json"));
    cfg << R"({"net": {"input": {"channels":1,"height":16,"width":16},
                "stem": {"channels":4,"kernel":3,"stride":1,"pool":true},
                "stages": [{"units":1,"channels":8,"first_stride":2}]},
               "tasks": [
                {"name":"landmarks","kind":"landmarks","num_points":5,"image_size":16},
                {"name":"smile","kind":"categorical","num_classes":2,"loss_weight":0.25}],
               "train": {"epochs":1,"batch_size":8}})";
  }
  ASSERT_EQ(run_cli("--seed 7 --config " + path("cfg.json") +
                    " train --data " + path("a.toyf") +
                    " --strategy single --run-dir " + path("runS"))
                .code,
            0);
  auto wrong = run_cli("ablate --checkpoint " + path("runS") + " --data " +
                       path("a.toyf"));
  EXPECT_EQ(wrong.code, 2);  // not a collaboration checkpoint

  ASSERT_EQ(run_cli("--seed 7 --config " + path("cfg.json") +
                    " train --data " + path("a.toyf") +
                    " --strategy collaboration --run-dir " + path("runC"))
                .code,
            0);
  auto ok = run_cli("--out " + path("abl") + " ablate --checkpoint " +
                    path("runC") + " --data " + path("a.toyf"));
  ASSERT_EQ(ok.code, 0) << ok.output;
  EXPECT_TRUE(fs::exists(path("abl/ablation.csv")));
  EXPECT_TRUE(fs::exists(path("abl/ablation.json")));

  // restricting depths keeps a single value column
  auto one = run_cli("--out " + path("abl1") + " ablate --checkpoint " +
                     path("runC") + " --data " + path("a.toyf") +
                     " --depths 1");
  ASSERT_EQ(one.code, 0) << one.output;
  auto rows = dcollab::parse_csv_file(path("abl1/ablation.csv"));
  ASSERT_EQ(rows[0].size(), 2u);  // task + one block column
  EXPECT_NE(rows[0][1].find("block1"), std::string::npos);
}

TEST_F(CliTest, HelpAndUsageErrors) {
  EXPECT_EQ(run_cli("--help").code, 0);
  EXPECT_EQ(run_cli("").code, 2);           // missing subcommand
  EXPECT_EQ(run_cli("frobnicate").code, 2);  // unknown subcommand
}

TEST_F(CliTest, GenThousandSamplesWithinBudget) {
  const auto t0 = std::chrono::steady_clock::now();
  auto r = run_cli("--seed 9 gen --samples 1000 -o " + path("big.toyf"));
  const double sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_LT(sec, 10.0);
}

TEST_F(CliTest, ResumeReproducesNextStepLoss) {
  ASSERT_EQ(run_cli("--seed 8 gen --samples 30 --size 16 --scale-min 0.8 "
                    "--scale-max 0.95 -o " +
                    path("r.toyf"))
                .code,
            0);
  const std::string net_and_tasks =
      R"("net": {"input": {"channels":1,"height":16,"width":16},
           "stem": {"channels":4,"kernel":3,"stride":1,"pool":true},
           "stages": [{"units":1,"channels":8,"first_stride":2}]},
          "tasks": [
           {"name":"landmarks","kind":"landmarks","num_points":5,"image_size":16},
           {"name":"smile","kind":"categorical","num_classes":2,"loss_weight":0.25}],)";
  {
    std::ofstream cfg(path("full.json"));
    cfg << "{" << net_and_tasks
        << R"("train": {"epochs":4,"batch_size":8}})";
  }
  {
    std::ofstream cfg(path("half.json"));
    cfg << "{" << net_and_tasks
        << R"("train": {"epochs":4,"batch_size":8,"stop_after_epochs":2}})";
  }
  ASSERT_EQ(run_cli("--seed 8 --config " + path("full.json") +
                    " train --data " + path("r.toyf") +
                    " --strategy collaboration --run-dir " + path("full"))
                .code,
            0);
  ASSERT_EQ(run_cli("--seed 8 --config " + path("half.json") +
                    " train --data " + path("r.toyf") +
                    " --strategy collaboration --run-dir " + path("half"))
                .code,
            0);
  ASSERT_EQ(run_cli("--seed 8 --config " + path("full.json") +
                    " train --data " + path("r.toyf") +
                    " --strategy collaboration --resume " +
                    path("half/checkpoint.bin") + " --run-dir " +
                    path("resumed"))
                .code,
            0);

  auto epoch_losses = [&](const std::string& run_dir) {
    std::ifstream in(path(run_dir + "/manifest.jsonl"));
    std::map<int, double> out;
    std::string line;
    while (std::getline(in, line)) {
      const auto j = nlohmann::json::parse(line);
      out[j.at("epoch").get<int>()] = j.at("train_loss").get<double>();
    }
    return out;
  };
  const auto full = epoch_losses("full");
  const auto resumed = epoch_losses("resumed");
  ASSERT_TRUE(resumed.count(2) && full.count(2));
  EXPECT_NEAR(resumed.at(2), full.at(2), 1e-6);
  EXPECT_NEAR(resumed.at(3), full.at(3), 1e-6);
}
