#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <nlohmann/json.hpp>

#include "cod/io.hpp"
#include "cod/token_hierarchy.hpp"

namespace fs = std::filesystem;
using cod::read_file;

namespace {

const std::string kSmall =
    " --set model.num_layers=1 --set model.hidden_dim=16 --set model.num_heads=2 --set model.mlp_dim=32"
    " --set train.batch_size=2 --set train.warmup_steps=2 --set train.checkpoint_every=5 --set train.log_every=1000";

int run(const std::string& args) {
  const std::string cmd = std::string("COD_NUM_THREADS=1 ") + COD_BINARY + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / "cod_cli_test";
    fs::remove_all(root_);
    fs::create_directories(root_);
    ASSERT_EQ(run("corpus --n 120 --seed 4 --out " + p("corpus")), 0);
    ASSERT_EQ(run("train --corpus " + p("corpus") + " --out " + p("run") + " --steps 10 --seed 2" + kSmall), 0);
    cod::write_file_atomic(root_ / "input.txt", "1 2 3\n4 5 6 7 8\n");
  }
  static std::string p(const std::string& rel) { return (root_ / rel).string(); }
  static fs::path root_;
};

fs::path Cli::root_;

}  // namespace

TEST_F(Cli, CorpusIsByteIdenticalAcrossRuns) {
  ASSERT_EQ(run("corpus --n 120 --seed 4 --out " + p("corpus2")), 0);
  for (const char* f : {"train.jsonl", "dev.jsonl", "test.jsonl", "manifest.json"})
    EXPECT_EQ(read_file(root_ / "corpus" / f), read_file(root_ / "corpus2" / f)) << f;
}

TEST_F(Cli, ManifestRecordsLevelRates) {
  const auto m = nlohmann::json::parse(read_file(root_ / "corpus" / "manifest.json"));
  const auto rates = m.at("rates_hz").get<std::vector<double>>();
  ASSERT_EQ(rates.size(), 3u);
  EXPECT_NEAR(rates[0], 21.5325, 1e-9);
  EXPECT_NEAR(rates[1], 43.065, 1e-9);
  EXPECT_NEAR(rates[2], 86.13, 1e-9);
  EXPECT_EQ(m.at("n_utts").get<int>(), 120);
}

TEST_F(Cli, TrainIsBitReproducible) {
  ASSERT_EQ(run("train --corpus " + p("corpus") + " --out " + p("run2") + " --steps 10 --seed 2" + kSmall), 0);
  EXPECT_EQ(read_file(root_ / "run" / "model.codm"), read_file(root_ / "run2" / "model.codm"));
  EXPECT_EQ(read_file(root_ / "run" / "metrics.csv"), read_file(root_ / "run2" / "metrics.csv"));
  const auto metrics = read_file(root_ / "run" / "metrics.csv");
  EXPECT_EQ(metrics.substr(0, metrics.find('\n')), "step,level,loss,lr,masked_fraction");
  EXPECT_EQ(std::count(metrics.begin(), metrics.end(), '\n'), 11);
}

TEST_F(Cli, ResumeContinuesFromCheckpoint) {
  fs::copy(root_ / "run", root_ / "resumed", fs::copy_options::recursive);
  ASSERT_EQ(run("train --resume --corpus " + p("corpus") + " --out " + p("resumed") + " --steps 10 --seed 2" + kSmall), 0);
  EXPECT_EQ(read_file(root_ / "run" / "model.codm"), read_file(root_ / "resumed" / "model.codm"));
  EXPECT_EQ(read_file(root_ / "run" / "metrics.csv"), read_file(root_ / "resumed" / "metrics.csv"));
  ASSERT_EQ(run("train --resume --corpus " + p("corpus") + " --out " + p("resumed") + " --steps 15 --seed 2" + kSmall), 0);
  const auto metrics = read_file(root_ / "resumed" / "metrics.csv");
  EXPECT_EQ(std::count(metrics.begin(), metrics.end(), '\n'), 16);
  EXPECT_EQ(run("train --resume --corpus " + p("corpus") + " --out " + p("nothing_here") + kSmall), 2);
}

TEST_F(Cli, ResumeWithDifferentModelShapeIsRejected) {
  fs::copy(root_ / "run", root_ / "mismatch", fs::copy_options::recursive);
  EXPECT_EQ(run("train --resume --corpus " + p("corpus") + " --out " + p("mismatch") + " --steps 12" + kSmall +
                " --set model.hidden_dim=32"),
            1);
}

TEST_F(Cli, GenerateWithFixedDurationAndSeed) {
  const std::string base = "generate --checkpoint " + p("run/model.codm") + " --input " + p("input.txt") +
                           " --speaker 1 --duration 1.0 --steps 3 --seed 5 --out ";
  ASSERT_EQ(run(base + p("gen1")), 0);
  ASSERT_EQ(run(base + p("gen2")), 0);
  for (const char* f : {"level1.tok", "level2.tok", "level3.tok", "diagnostics.jsonl"})
    EXPECT_EQ(read_file(root_ / "gen1" / f), read_file(root_ / "gen2" / f)) << f;
  const auto finest = cod::parse_token_file(read_file(root_ / "gen1" / "level3.tok"), 32);
  ASSERT_EQ(finest.size(), 2u);
  EXPECT_EQ(finest[0].seq.size(), 87u);
  EXPECT_EQ(finest[1].seq.size(), 87u);
  EXPECT_EQ(cod::parse_token_file(read_file(root_ / "gen1" / "level1.tok"), 32)[0].seq.size(), 22u);
  const auto diag = read_file(root_ / "gen1" / "diagnostics.jsonl");
  EXPECT_EQ(std::count(diag.begin(), diag.end(), '\n'), 2 * 3 * 3);
}

TEST_F(Cli, GenerateNeedsADuration) {
  EXPECT_EQ(run("generate --checkpoint " + p("run/model.codm") + " --input " + p("input.txt") + " --out " + p("g")), 1);
}

TEST_F(Cli, EvalIsReproducibleAndOracleRowIsExact) {
  const std::string base = "eval --corpus " + p("corpus") + " --max-utts 4 --seed 3 --set sampler.steps=3,3,3";
  ASSERT_EQ(run(base + " --checkpoint " + p("run/model.codm") + " --out " + p("ev1/raw.csv")), 0);
  ASSERT_EQ(run(base + " --checkpoint " + p("run/model.codm") + " --out " + p("ev2/raw.csv")), 0);
  EXPECT_EQ(read_file(root_ / "ev1" / "raw.csv"), read_file(root_ / "ev2" / "raw.csv"));
  const auto csv = read_file(root_ / "ev1" / "raw.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "config,seed,level,cond_ce,ter");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);

  ASSERT_EQ(run("corpus --n 40 --seed 4 --set corpus.fine_noise=0 --out " + p("clean")), 0);
  ASSERT_EQ(run("eval --oracle --corpus " + p("clean") + " --max-utts 4 --out " + p("ev3/raw.csv")), 0);
  const auto oracle = read_file(root_ / "ev3" / "raw.csv");
  for (auto line : cod::split(oracle, '\n')) {
    if (line.empty() || line.starts_with("config")) continue;
    EXPECT_EQ(cod::split(line, ',').back(), "0") << line;
  }
}

TEST_F(Cli, ExitCodes) {
  EXPECT_EQ(run("corpus --n 10 --out " + p("x") + " --set corpus.no_such_key=1"), 1);
  EXPECT_EQ(run("train --corpus " + p("missing") + " --out " + p("y")), 2);
  EXPECT_EQ(run("no-such-command"), 1);
  cod::write_file_atomic(root_ / "broken.codm", "CODM\x01garbage");
  EXPECT_EQ(run("generate --checkpoint " + p("broken.codm") + " --input " + p("input.txt") + " --duration 1 --out " +
                p("z")),
            2);
  EXPECT_EQ(run("train --corpus " + p("corpus") + " --out " + p("nan") + " --steps 3" + kSmall +
                " --set train.lr_peak=1e30 --set train.grad_clip=0"),
            3);
}
