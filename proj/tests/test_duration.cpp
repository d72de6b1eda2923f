#include <gtest/gtest.h>

#include <filesystem>

#include "cod/duration.hpp"
#include "gen.hpp"

using namespace cod;

namespace {

DurationModelConfig small() {
  DurationModelConfig c;
  c.num_layers = 2;
  c.hidden_dim = 32;
  c.num_heads = 2;
  c.mlp_dim = 64;
  return c;
}

DurationTrainConfig quick(int steps, std::uint64_t seed = 1) {
  DurationTrainConfig t;
  t.lr_peak = 3e-3;
  t.warmup_steps = 50;
  t.total_steps = steps;
  t.seed = seed;
  return t;
}

// d = 0.08 len + 0.2 + U(-0.03, 0.03), lengths in [lo, hi].
std::vector<DurationPair> linear_rule(int n, int lo, int hi, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<DurationPair> out;
  for (int i = 0; i < n; ++i) {
    const int len = testgen::between(rng, lo, hi);
    DurationPair p;
    p.phonemes = testgen::tokens(rng, len, 24);
    p.seconds = 0.08 * len + 0.2 + 0.03 * (2 * rng.uniform() - 1);
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace

TEST(Duration, UntrainedOutputIsPositiveAndFinite) {
  const DurationModel<float> m(small(), 3);
  Rng rng(4);
  for (int i = 0; i < 200; ++i) {
    const double d = m.predict(testgen::tokens(rng, testgen::between(rng, 1, 64), 24));
    ASSERT_TRUE(std::isfinite(d));
    ASSERT_GT(d, 0.0);
  }
  EXPECT_THROW(m.predict(std::vector<int>{}), std::invalid_argument);
  EXPECT_THROW(m.predict(std::vector<int>(65, 1)), std::invalid_argument);
  EXPECT_THROW(m.predict(std::vector<int>{24}), std::invalid_argument);
}

TEST(Duration, SoftplusStaysPositiveForLargeNegativeInputs) {
  EXPECT_GT(softplus(-50.0), 0.0);
  EXPECT_NEAR(softplus(0.0), std::log(2.0), 1e-15);
  EXPECT_EQ(softplus(30.0), 30.0);
}

TEST(Duration, BatchedPredictionEqualsSingle) {
  const DurationModel<float> m(small(), 3);
  const std::vector<std::vector<int>> batch{{1, 2, 3}, {4, 5, 6, 7, 8, 9}, {0}};
  const auto out = m.predict(batch);
  for (std::size_t i = 0; i < batch.size(); ++i) EXPECT_NEAR(out[i], m.predict(batch[i]), 1e-6);
}

TEST(Duration, ConstantTargetIsFit) {
  Rng rng(5);
  std::vector<DurationPair> pairs;
  for (int i = 0; i < 200; ++i) pairs.push_back({testgen::tokens(rng, testgen::between(rng, 3, 20), 24), 0.7});
  const auto t = train_duration(pairs, small(), quick(800));
  for (int i = 0; i < 20; ++i) EXPECT_NEAR(t.model().predict(pairs[static_cast<std::size_t>(i)].phonemes), 0.7, 1e-2);
}

TEST(Duration, LinearRuleFitAndLengthMonotonicity) {
  const auto train = linear_rule(2000, 5, 50, 6);
  const auto held_out = linear_rule(300, 5, 50, 7);
  const auto t = train_duration(train, small(), quick(1500));
  EXPECT_LE(mean_absolute_error(t.model(), held_out), 0.05);

  // Prefixes of one long sequence, so only the length changes.
  Rng rng(8);
  const auto base = testgen::tokens(rng, 50, 24);
  double prev = 0;
  for (int len = 5; len <= 50; len += 5) {
    const double d = t.model().predict(std::vector<int>(base.begin(), base.begin() + len));
    EXPECT_GT(d, prev) << "length " << len;
    prev = d;
  }
}

TEST(Duration, SeededTrainingIsReproducible) {
  const auto pairs = linear_rule(150, 4, 12, 9);
  const auto a = train_duration(pairs, small(), quick(60, 3));
  const auto b = train_duration(pairs, small(), quick(60, 3));
  const auto c = train_duration(pairs, small(), quick(60, 4));
  auto pa = a.model().params(), pb = b.model().params(), pc = c.model().params();
  auto ta = pa.tensors(), tb = pb.tensors(), tc = pc.tensors();
  bool all_same = true, any_diff = false;
  for (std::size_t i = 0; i < ta.size(); ++i) {
    all_same = all_same && *ta[i].second == *tb[i].second;
    any_diff = any_diff || *ta[i].second != *tc[i].second;
  }
  EXPECT_TRUE(all_same);
  EXPECT_TRUE(any_diff);
}

TEST(Duration, RequiresEnoughPairs) {
  EXPECT_THROW(train_duration(linear_rule(99, 4, 12, 1), small(), quick(10)), std::invalid_argument);
  EXPECT_THROW(train_duration({}, small(), quick(10)), std::invalid_argument);
}

TEST(Duration, CheckpointRoundTrip) {
  const auto pairs = linear_rule(120, 4, 12, 2);
  const auto t = train_duration(pairs, small(), quick(60));
  const auto path = std::filesystem::temp_directory_path() / "cod_duration_test.codd";
  t.save(path);
  const auto loaded = load_duration_model(path);
  for (const auto& p : pairs) ASSERT_EQ(loaded.predict(p.phonemes), t.model().predict(p.phonemes));
  EXPECT_THROW(read_container(path, "CODM"), FormatError);
}
