#include <gtest/gtest.h>

#include "cod/config.hpp"

using namespace cod;

TEST(Config, CommandLineBeatsFileBeatsDefaults) {
  const auto c = load_config("train.lr_peak = 0.002\ntrain.batch_size = 4  # comment\n",
                             {{"train.lr_peak", "0.005"}});
  EXPECT_EQ(c.train.lr_peak, 0.005);
  EXPECT_EQ(c.train.batch_size, 4);
  EXPECT_EQ(c.train.warmup_steps, TrainConfig{}.warmup_steps);
}

TEST(Config, ListsAndStrings) {
  const auto c = load_config("", {{"sampler.steps", "4, 5,6"}, {"ablate.strategies", "decimated,extra-shared"},
                                  {"corpus.factors", "8,2,1"}});
  EXPECT_EQ(c.sampler.steps_per_level, (std::vector<int>{4, 5, 6}));
  EXPECT_EQ(c.ablate.strategies, (std::vector<std::string>{"decimated", "extra-shared"}));
  EXPECT_EQ(c.corpus.factors, (std::vector<int>{8, 2, 1}));
}

TEST(Config, AllBadKeysAreReportedTogether) {
  try {
    load_config("train.lr_peek = 1\n", {{"model.hidden_dim", "abc"}, {"nope", "1"}});
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.keys, (std::vector<std::string>{"train.lr_peek"}));
  }
  try {
    load_config("", {{"model.hidden_dim", "abc"}, {"nope", "1"}});
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.keys, (std::vector<std::string>{"model.hidden_dim", "nope"}));
  }
}

TEST(Config, MalformedLines) {
  EXPECT_THROW(parse_key_values("just text\n"), ConfigError);
  EXPECT_THROW(parse_key_values(" = 3\n"), ConfigError);
  EXPECT_TRUE(parse_key_values("# only a comment\n\n").empty());
}

TEST(Config, CrossFieldValidation) {
  RunConfig c;
  EXPECT_NO_THROW(validate(c));
  c.train.level_probs = {0.5, 0.5};
  c.sampler.steps_per_level = {20, 20};
  try {
    validate(c);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.keys, (std::vector<std::string>{"train", "sampler"}));
  }
  c = RunConfig{};
  c.ablate.strategies = {"stride"};
  EXPECT_THROW(validate(c), ConfigError);
}

TEST(Config, ResolvedCopiesCorpusShape) {
  RunConfig c;
  c.corpus.vocab_size = 16;
  c.corpus.speaker_dim = 4;
  const auto r = resolved(c);
  EXPECT_EQ(r.model.vocab_size, 16);
  EXPECT_EQ(r.model.speaker_dim, 4);
  EXPECT_EQ(r.model.num_levels, 3);
}

TEST(Config, DumpRoundTrips) {
  auto c = load_config("", {{"train.lr_peak", "0.0007"}, {"sampler.steps", "3,4,5"}, {"corpus.seed", "9"}});
  const auto text = dump_config(c);
  const auto back = load_config(text, {});
  EXPECT_EQ(dump_config(back), text);
  EXPECT_EQ(back.train.lr_peak, 0.0007);
  EXPECT_EQ(back.corpus.seed, 9u);
}
