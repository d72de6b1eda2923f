#include <gtest/gtest.h>

#include <filesystem>

#include "cod/eval.hpp"

using namespace cod;
namespace fs = std::filesystem;

namespace {

class UniformPredictor : public TokenPredictor {
 public:
  UniformPredictor(int v, int levels) : v_(v), levels_(levels) {}
  int vocab_size() const override { return v_; }
  int num_levels() const override { return levels_; }
  std::vector<Mat<float>> predict(std::span<const DecoderInput> inputs) const override {
    std::vector<Mat<float>> out;
    for (const auto& in : inputs) out.push_back(Mat<float>::Constant(static_cast<Eigen::Index>(in.canvas->size()), v_, 0.3f));
    return out;
  }

 private:
  int v_, levels_;
};

SamplerConfig few_steps(int steps = 6) {
  SamplerConfig s;
  s.steps_per_level = {steps, steps, steps};
  return s;
}

fs::path scratch(const std::string& name) {
  const auto d = fs::temp_directory_path() / "cod_eval_test" / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

}  // namespace

TEST(ConditionalCe, OracleMatchesBayesEntropy) {
  const SynthLaw law(SynthSpec{});
  const auto data = generate_corpus(SynthSpec{}, 300);
  const OraclePredictor oracle(law);
  EXPECT_NEAR(conditional_ce(oracle, data, 3, law.speakers), bayes_entropy(32, 0.15), 0.05);
  EXPECT_NEAR(conditional_ce(oracle, data, 2, law.speakers), bayes_entropy(32, 0.15), 0.05);
  EXPECT_LT(conditional_ce(oracle, data, 1, law.speakers), 1e-3);
}

TEST(ConditionalCe, UniformModelGivesLogV) {
  const SynthLaw law(SynthSpec{});
  const auto data = generate_corpus(SynthSpec{}, 10);
  EXPECT_NEAR(conditional_ce(UniformPredictor(32, 3), data, 2, law.speakers), std::log(32.0), 1e-6);
}

TEST(ConditionalCe, BatchSizeDoesNotChangeResult) {
  const SynthLaw law(SynthSpec{});
  const auto data = generate_corpus(SynthSpec{}, 20);
  const OraclePredictor oracle(law);
  EXPECT_NEAR(conditional_ce(oracle, data, 3, law.speakers, 7), conditional_ce(oracle, data, 3, law.speakers), 1e-9);
  EXPECT_THROW(conditional_ce(oracle, data, 4, law.speakers), std::invalid_argument);
}

TEST(GenerationTer, OracleIsExactWithoutFineNoise) {
  SynthSpec s;
  s.fine_noise = 0.0;
  const SynthLaw law(s);
  const auto data = generate_corpus(s, 20);
  auto quiet = few_steps();
  quiet.noise_var_start = 0;
  EXPECT_EQ(generation_ter(OraclePredictor(law), data, data, law, s.hierarchy(), quiet, law.speakers).ter, 0.0);
  EXPECT_EQ(generation_ter(OraclePredictor(law), data, data, law, s.hierarchy(), few_steps(), law.speakers).ter, 0.0);
}

TEST(GenerationTer, UntrainedModelIsNearChance) {
  SynthSpec s;
  s.vocab_size = 16;
  const SynthLaw law(s);
  const auto data = generate_corpus(s, 30);
  ModelConfig mc;
  mc.vocab_size = 16;
  const Decoder<float> model(mc, 11);
  const auto r = generation_ter(DecoderPredictor(model), data, data, law, s.hierarchy(), few_steps(4), law.speakers);
  EXPECT_NEAR(r.ter, 15.0 / 16.0, 0.05);
}

TEST(GenerationTer, InvariantToUtteranceOrder) {
  const SynthLaw law(SynthSpec{});
  const auto data = generate_corpus(SynthSpec{}, 24);
  auto shuffled = data;
  std::reverse(shuffled.begin(), shuffled.end());
  std::swap(shuffled[3], shuffled[17]);
  const OraclePredictor oracle(law);
  const auto h = law.spec.hierarchy();
  const auto a = generation_ter(oracle, data, data, law, h, few_steps(), law.speakers, 5);
  const auto b = generation_ter(oracle, shuffled, data, law, h, few_steps(), law.speakers, 5);
  EXPECT_EQ(a.mismatches, b.mismatches);
  EXPECT_EQ(a.positions, b.positions);
  EXPECT_GT(a.mismatches, 0);
}

TEST(GenerationTer, RejectsMissingReferences) {
  const SynthLaw law(SynthSpec{});
  const auto data = generate_corpus(SynthSpec{}, 4);
  const std::vector<SynthUtterance> part(data.begin(), data.begin() + 2);
  EXPECT_THROW(generation_ter(OraclePredictor(law), data, part, law, law.spec.hierarchy(), few_steps(), law.speakers),
               std::invalid_argument);
}

TEST(Views, DecimatedKeepsFinestLevels) {
  const SynthSpec s;
  const auto v2 = view_spec(s, 2, Strategy::Decimated);
  EXPECT_EQ(v2.decimation_factors, (std::vector<int>{2, 1}));
  const auto v1 = view_spec(s, 1, Strategy::Decimated);
  EXPECT_EQ(v1.decimation_factors, (std::vector<int>{1}));
  EXPECT_THROW(view_spec(s, 4, Strategy::Decimated), std::invalid_argument);

  const SynthLaw law(s);
  const auto data = generate_corpus(s, 3);
  const auto view = make_view(data, law, v2);
  for (std::size_t i = 0; i < data.size(); ++i) {
    ASSERT_EQ(view[i].levels.size(), 2u);
    EXPECT_EQ(view[i].levels[0].tokens, data[i].levels[1].tokens);
    EXPECT_EQ(view[i].levels[0].level, 1);
    EXPECT_EQ(view[i].levels[1].tokens, data[i].levels[2].tokens);
  }
}

TEST(Views, ExtraSharedQuantizesWithOneCodebook) {
  const SynthSpec s;
  const SynthLaw law(s);
  const auto data = generate_corpus(s, 40);
  const auto v = view_spec(s, 3, Strategy::ExtraShared);
  const auto books = train_codebooks(data, law, v, 1, 1);
  ASSERT_EQ(books.size(), 1u);
  const auto view = make_view(data, law, v, books);
  const auto vi = view_spec(s, 3, Strategy::ExtraIndependent);
  EXPECT_EQ(train_codebooks(data, law, vi, 1, 1).size(), 2u);
  for (std::size_t i = 0; i < data.size(); ++i) {
    ASSERT_EQ(view[i].levels.size(), 3u);
    EXPECT_EQ(view[i].levels[2].tokens, data[i].levels[2].tokens);
    for (int l = 1; l <= 2; ++l)
      EXPECT_EQ(static_cast<int>(view[i].levels[static_cast<std::size_t>(l - 1)].size()),
                level_length(data[i].duration_s, v, l));
  }
  EXPECT_TRUE(train_codebooks(data, law, view_spec(s, 3, Strategy::Decimated), 1).empty());
}

TEST(Views, DefaultLevelProbabilities) {
  EXPECT_EQ(default_level_probs(3), (std::vector<double>{0.2, 0.3, 0.5}));
  const auto two = default_level_probs(2);
  EXPECT_NEAR(two[0], 0.375, 1e-12);
  EXPECT_NEAR(two[1], 0.625, 1e-12);
  EXPECT_EQ(default_level_probs(1), (std::vector<double>{1.0}));
  EXPECT_EQ(default_config_name(2, Strategy::ExtraShared), "extra-shared-2");
}

TEST(Csv, RawAndSummaryFormats) {
  std::vector<AblationRow> rows;
  for (int seed = 0; seed < 3; ++seed) {
    rows.push_back({"decimated-2", 2, Strategy::Decimated, seed, 1, 0.5, 0.1 * (seed + 1), 10});
    rows.push_back({"decimated-2", 2, Strategy::Decimated, seed, 2, 1.0 + seed, 0.1 * (seed + 1), 10});
  }
  const auto raw = raw_csv(rows);
  EXPECT_EQ(raw.substr(0, raw.find('\n')), "config,seed,level,cond_ce,ter");
  EXPECT_EQ(std::count(raw.begin(), raw.end(), '\n'), 7);

  const auto s = summarize(rows);
  ASSERT_EQ(s.size(), 1u);
  EXPECT_NEAR(s[0].mean_ter, 0.2, 1e-12);
  EXPECT_NEAR(s[0].std_ter, 0.1, 1e-12);
  EXPECT_NEAR(s[0].mean_ce, 2.0, 1e-12);
  EXPECT_NEAR(s[0].std_ce, 1.0, 1e-12);
  const auto csv = summary_csv(s);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "config,levels,strategy,mean_ter,std_ter,mean_ce,std_ce");
  EXPECT_EQ(csv.substr(csv.find('\n') + 1, 22), "decimated-2,2,decimate");

  const auto back = parse_result_record(result_record(rows));
  ASSERT_EQ(back.size(), rows.size());
  EXPECT_EQ(back[3].config, "decimated-2");
  EXPECT_EQ(back[3].cond_ce, rows[3].cond_ce);
  EXPECT_EQ(back[3].ter, rows[3].ter);
  EXPECT_THROW(parse_result_record("a,b,c\n"), FormatError);
}

TEST(Ablation, CellResumesAndReusesItsResult) {
  const SynthSpec spec;
  const auto data = split_corpus(spec, generate_corpus(spec, 150));
  const SynthLaw law(spec);
  AblationSettings s;
  s.model.num_layers = 1;
  s.model.hidden_dim = 16;
  s.model.num_heads = 2;
  s.model.mlp_dim = 32;
  s.train.batch_size = 2;
  s.train.total_steps = 6;
  s.train.warmup_steps = 1;
  s.sampler = few_steps(2);
  s.eval_utts = 3;
  s.checkpoint_every = 3;
  s.work_dir = scratch("cell");
  const AblationConfig cfg{"decimated-2", 2, Strategy::Decimated};

  const auto rows = run_ablation_cell(data, law, s, cfg, 0);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_TRUE(fs::exists(s.work_dir / "decimated-2_s0.result"));
  EXPECT_EQ(parse_result_record(read_file(s.work_dir / "decimated-2_s0.result")).size(), 2u);

  // A finished checkpoint without a result only re-runs evaluation.
  fs::remove(s.work_dir / "decimated-2_s0.result");
  std::vector<std::string> log;
  const auto again = run_ablation_cell(data, law, s, cfg, 0, [&](const std::string& m) { log.push_back(m); });
  ASSERT_FALSE(log.empty());
  EXPECT_NE(log.front().find("resumed at step 6"), std::string::npos);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(again[i].cond_ce, rows[i].cond_ce);
    EXPECT_EQ(again[i].ter, rows[i].ter);
  }
}

TEST(Ablation, ResumingMidRunMatchesUninterrupted) {
  const SynthSpec spec;
  const auto data = split_corpus(spec, generate_corpus(spec, 150));
  const SynthLaw law(spec);
  AblationSettings s;
  s.model.num_layers = 1;
  s.model.hidden_dim = 16;
  s.model.num_heads = 2;
  s.model.mlp_dim = 32;
  s.train.batch_size = 2;
  s.train.total_steps = 6;
  s.train.warmup_steps = 1;
  s.sampler = few_steps(2);
  s.eval_utts = 3;
  s.checkpoint_every = 3;
  const AblationConfig cfg{"decimated-1", 1, Strategy::Decimated};

  s.work_dir = scratch("full");
  const auto full = run_ablation_cell(data, law, s, cfg, 1);

  s.work_dir = scratch("partial");
  // Leave behind the checkpoint an interrupted run would have written at step 3.
  {
    TrainConfig tc = s.train;
    tc.level_probs = {1.0};
    tc.seed = 1;
    ModelConfig mc = s.model;
    mc.num_levels = 1;
    mc.speaker_dim = spec.speaker_dim;
    Trainer t(mc, tc, law.speakers);
    const auto view = view_spec(spec, 1, Strategy::Decimated);
    const auto train = make_view(data.train, law, view);
    for (int i = 0; i < 3; ++i) t.train_step(train);
    auto meta = hierarchy_to_kv(view);
    meta.emplace_back("train_seconds", "0");
    t.save(s.work_dir / "decimated-1_s1.codm", meta);
  }
  const auto resumed = run_ablation_cell(data, law, s, cfg, 1);
  ASSERT_EQ(full.size(), resumed.size());
  EXPECT_EQ(full[0].cond_ce, resumed[0].cond_ce);
  EXPECT_EQ(full[0].ter, resumed[0].ter);
}
