#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "cod/synth_corpus.hpp"
#include "gen.hpp"

using namespace cod;
namespace fs = std::filesystem;

namespace {

// Entropy of one oracle row, summed term by term.
double row_entropy(const Mat<double>& p, int row) {
  double h = 0;
  for (Eigen::Index k = 0; k < p.cols(); ++k) h -= p(row, k) * std::log(p(row, k));
  return h;
}

}  // namespace

TEST(SynthLaw, UtterancesAreDeterministicPerId) {
  const SynthLaw law(SynthSpec{});
  EXPECT_EQ(gen_utterance(law, 17), gen_utterance(law, "utt000017"));
  EXPECT_EQ(gen_utterance(law, 17), gen_utterance(SynthLaw(SynthSpec{}), 17));
  SynthSpec other;
  other.seed = 2;
  EXPECT_NE(gen_utterance(law, 17), gen_utterance(SynthLaw(other), 17));
}

TEST(SynthLaw, LevelLengthsFollowDuration) {
  const SynthLaw law(SynthSpec{});
  const auto h = law.spec.hierarchy();
  for (long long i = 0; i < 200; ++i) {
    const auto u = gen_utterance(law, i);
    ASSERT_EQ(u.levels.size(), 3u);
    for (int l = 1; l <= 3; ++l) {
      ASSERT_EQ(static_cast<int>(u.levels[static_cast<std::size_t>(l - 1)].size()), level_length(u.duration_s, h, l));
      ASSERT_EQ(u.levels[static_cast<std::size_t>(l - 1)].level, l);
    }
  }
}

TEST(SynthLaw, DurationFollowsLinearRule) {
  const SynthLaw law(SynthSpec{});
  for (long long i = 0; i < 500; ++i) {
    const auto u = gen_utterance(law, i);
    const double base = 0.08 * static_cast<double>(u.phonemes.size()) + 0.2;
    ASSERT_LE(std::abs(u.duration_s - base), 0.03 + 1e-12);
    ASSERT_GE(u.phonemes.size(), 4u);
    ASSERT_LE(u.phonemes.size(), 12u);
  }
}

TEST(SynthLaw, CoarseLevelIsAFunctionOfPhonemesAndLength) {
  const SynthLaw law(SynthSpec{});
  for (long long i = 0; i < 200; ++i) {
    const auto u = gen_utterance(law, i);
    ASSERT_EQ(u.levels[0].tokens, law.coarse_tokens(u.phonemes, static_cast<int>(u.levels[0].size())));
  }
}

TEST(SynthLaw, ZeroNoiseMakesFinerLevelsExactExpansions) {
  SynthSpec s;
  s.fine_noise = 0.0;
  const SynthLaw law(s);
  for (long long i = 0; i < 100; ++i) {
    const auto u = gen_utterance(law, i);
    for (int l = 1; l < 3; ++l) {
      const auto& fine = u.levels[static_cast<std::size_t>(l)].tokens;
      ASSERT_EQ(fine, law.expand_level(u.levels[static_cast<std::size_t>(l - 1)].tokens, u.speaker_id, l,
                                       static_cast<int>(fine.size())));
    }
    ASSERT_EQ(u.levels.back().tokens, map_expansion(u.levels[0].tokens, u.speaker_id, u.duration_s, law));
  }
}

TEST(SynthLaw, ExpansionIsAPermutationPerSpeakerAndSubPosition) {
  const SynthLaw law(SynthSpec{});
  for (int spk = 0; spk < 4; ++spk)
    for (int sub = 0; sub < law.max_ratio; ++sub) {
      std::vector<int> seen(32, 0);
      for (TokenId c = 0; c < 32; ++c) ++seen[static_cast<std::size_t>(law.expand(c, spk, sub))];
      for (int x : seen) ASSERT_EQ(x, 1);
    }
}

TEST(SynthLaw, ResampledFractionMatchesNoiseRate) {
  const SynthLaw law(SynthSpec{});
  long differ = 0, total = 0;
  for (long long i = 0; i < 1000; ++i) {
    const auto u = gen_utterance(law, i);
    const auto& fine = u.levels[2].tokens;
    const auto clean = law.expand_level(u.levels[1].tokens, u.speaker_id, 2, static_cast<int>(fine.size()));
    for (std::size_t j = 0; j < fine.size(); ++j) differ += fine[j] != clean[j];
    total += static_cast<long>(fine.size());
  }
  // A resample lands back on the clean token with probability 1/V.
  EXPECT_NEAR(static_cast<double>(differ) / total, 0.15 * 31.0 / 32.0, 0.01);
}

TEST(Oracle, TopProbabilityForSmallVocabulary) {
  SynthSpec s;
  s.vocab_size = 8;
  s.fine_noise = 0.2;
  const SynthLaw law(s);
  const auto u = gen_utterance(law, 0);
  const auto p = oracle_fine_distribution(u.levels[0], u.speaker_id, law, static_cast<int>(u.levels[1].size()));
  for (Eigen::Index j = 0; j < p.rows(); ++j) {
    EXPECT_NEAR(p.row(j).maxCoeff(), 0.825, 1e-12);
    EXPECT_NEAR(p.row(j).minCoeff(), 0.025, 1e-12);
    EXPECT_NEAR(p.row(j).sum(), 1.0, 1e-12);
  }
}

TEST(Oracle, ClosedFormEntropyMatchesRowEntropy) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    SynthSpec s;
    s.vocab_size = testgen::between(rng, 4, 64);
    s.fine_noise = 0.01 + 0.98 * rng.uniform();
    const SynthLaw law(s);
    const auto u = gen_utterance(law, trial);
    const auto p = oracle_fine_distribution(u.levels[1], u.speaker_id, law, static_cast<int>(u.levels[2].size()));
    ASSERT_NEAR(bayes_entropy(s.vocab_size, s.fine_noise), row_entropy(p, 0), 1e-12);
  }
  EXPECT_NEAR(bayes_entropy(32, 0.15), 0.913492, 5e-7);
  EXPECT_EQ(bayes_entropy(32, 0.0), 0.0);
  EXPECT_NEAR(bayes_entropy(32, 1.0), std::log(32.0), 1e-12);
}

TEST(Oracle, EmpiricalCrossEntropyOfSampledTokensApproachesEntropy) {
  const SynthLaw law(SynthSpec{});
  double nll = 0;
  long n = 0;
  for (long long i = 0; i < 1000; ++i) {
    const auto u = gen_utterance(law, i);
    const auto& fine = u.levels[2].tokens;
    const auto p = oracle_fine_distribution(u.levels[1], u.speaker_id, law, static_cast<int>(fine.size()));
    for (std::size_t j = 0; j < fine.size(); ++j) nll -= std::log(p(static_cast<Eigen::Index>(j), fine[j]));
    n += static_cast<long>(fine.size());
  }
  EXPECT_NEAR(nll / n, bayes_entropy(32, 0.15), 0.04);
}

TEST(Split, FractionsAndIdKeying) {
  std::array<int, 3> counts{};
  for (long long i = 0; i < 5000; ++i) ++counts[static_cast<std::size_t>(split_of(utt_name(i)))];
  EXPECT_NEAR(counts[0] / 5000.0, 0.8, 0.02);
  EXPECT_NEAR(counts[1] / 5000.0, 0.1, 0.02);
  EXPECT_NEAR(counts[2] / 5000.0, 0.1, 0.02);
  EXPECT_EQ(split_of("utt000042"), split_of(std::string("utt0000") + "42"));
}

TEST(Corpus, WriteReadRoundTrip) {
  const auto dir = fs::temp_directory_path() / "cod_synth_test" / "corpus";
  fs::remove_all(dir);
  SynthSpec s;
  s.seed = 5;
  write_corpus(s, 60, dir);
  const auto d = read_corpus(dir);
  EXPECT_EQ(d.spec, s);
  const auto expect = split_corpus(s, generate_corpus(s, 60));
  EXPECT_EQ(d.train, expect.train);
  EXPECT_EQ(d.dev, expect.dev);
  EXPECT_EQ(d.test, expect.test);
  EXPECT_EQ(d.train.size() + d.dev.size() + d.test.size(), 60u);
}

TEST(Corpus, RejectsMalformedLines) {
  const SynthSpec s;
  auto line = utterance_json_line(generate_corpus(s, 1)[0]);
  EXPECT_EQ(parse_corpus(line, s).size(), 1u);

  auto bad_token = line;
  const auto pos = bad_token.find("[[") + 2;
  bad_token.replace(pos, bad_token.find(',', pos) - pos, "32");
  EXPECT_THROW(parse_corpus(bad_token, s), FormatError);
  EXPECT_THROW(parse_corpus("{\"utt_id\": 3", s), FormatError);
  EXPECT_THROW(parse_corpus(R"({"utt_id":"u","phonemes":[1],"speaker_id":0,"duration_s":1.0,"levels":[[1],[2]]})", s),
               FormatError);
  EXPECT_THROW(parse_corpus(R"({"utt_id":"u","phonemes":[1],"speaker_id":9,"duration_s":1.0,"levels":[[1],[2],[3]]})", s),
               FormatError);
}

TEST(Frames, OneFramePerFinestToken) {
  const SynthLaw law(SynthSpec{});
  const auto u = gen_utterance(law, 3);
  const auto f = synth_frames(u, law);
  EXPECT_EQ(f.rows(), static_cast<Eigen::Index>(u.levels.back().size()));
  EXPECT_EQ(f.cols(), 8);
  EXPECT_EQ(f, synth_frames(u, law));
}

TEST(SynthSpec, Validation) {
  SynthSpec s;
  s.fine_noise = 1.5;
  EXPECT_THROW(SynthLaw{s}, std::invalid_argument);
  s = SynthSpec{};
  s.factors = {2, 4, 1};
  EXPECT_THROW(SynthLaw{s}, std::invalid_argument);
}
