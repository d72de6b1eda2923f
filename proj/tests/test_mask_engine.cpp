#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "cod/mask_engine.hpp"
#include "gen.hpp"

using namespace cod;

namespace {

// Direct evaluation: per-step floor of the cosine schedule, then the
// strict-decrease clamp applied along the sequence of steps. Once the count
// reaches zero it stays there.
std::vector<int> schedule_oracle(int T, int n) {
  std::vector<int> out;
  int prev = n;
  for (int t = 1; t <= T; ++t) {
    int c = static_cast<int>(std::floor(n * std::cos(static_cast<double>(t) / T * M_PI / 2.0)));
    if (t == T) c = 0;
    c = prev > 0 ? std::min(c, prev - 1) : 0;
    out.push_back(c);
    prev = c;
  }
  return out;
}

}  // namespace

TEST(MaskRatio, Endpoints) {
  EXPECT_EQ(mask_ratio(0.0), 1.0);
  EXPECT_EQ(mask_ratio(1.0), 0.0);
  EXPECT_NEAR(mask_ratio(0.5), 0.7071067811865476, 1e-12);
  EXPECT_THROW(mask_ratio(-0.01), std::invalid_argument);
  EXPECT_THROW(mask_ratio(1.01), std::invalid_argument);
}

TEST(MaskRatio, MonotoneNonIncreasing) {
  double prev = 1.0;
  for (int i = 0; i <= 1000; ++i) {
    const double r = mask_ratio(i / 1000.0);
    ASSERT_LE(r, prev);
    prev = r;
  }
}

TEST(MaskedCountAt, TenTokensFourSteps) {
  std::vector<int> got;
  for (int t = 1; t <= 4; ++t) got.push_back(masked_count_at(t, 4, 10));
  EXPECT_EQ(got, (std::vector<int>{9, 7, 3, 0}));
}

TEST(MaskedCountAt, SingleTokenCanvas) {
  for (int T = 1; T <= 10; ++T) EXPECT_EQ(masked_count_at(1, T, 1), 0);
}

TEST(MaskedCountAt, ExhaustiveAgainstDirectFormula) {
  for (int n = 1; n <= 64; ++n)
    for (int T = 1; T <= 32; ++T) {
      const auto expect = schedule_oracle(T, n);
      int prev = n;
      for (int t = 1; t <= T; ++t) {
        const int c = masked_count_at(t, T, n);
        ASSERT_EQ(c, expect[static_cast<std::size_t>(t - 1)]) << "n=" << n << " T=" << T << " t=" << t;
        ASSERT_LE(c, prev);
        if (prev > 0) {
          ASSERT_LT(c, prev);
        }
        prev = c;
      }
      ASSERT_EQ(masked_count_at(T, T, n), 0);
    }
}

TEST(MaskedCountAt, RejectsBadArguments) {
  EXPECT_THROW(masked_count_at(0, 4, 10), std::invalid_argument);
  EXPECT_THROW(masked_count_at(5, 4, 10), std::invalid_argument);
  EXPECT_THROW(masked_count_at(1, 0, 10), std::invalid_argument);
  EXPECT_THROW(masked_count_at(1, 4, 0), std::invalid_argument);
}

TEST(TrainingMask, ReproducibleAndNonEmpty) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) {
    const auto ma = sample_training_mask(8, a);
    ASSERT_EQ(ma, sample_training_mask(8, b));
    ASSERT_GE(std::count(ma.begin(), ma.end(), 1), 1);
  }
}

TEST(TrainingMask, MeanMaskedFractionIsTwoOverPi) {
  Rng rng(7);
  double sum = 0;
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) {
    const auto m = sample_training_mask(100, rng);
    sum += static_cast<double>(std::count(m.begin(), m.end(), 1)) / 100.0;
  }
  EXPECT_NEAR(sum / draws, 2.0 / M_PI, 0.01);
}

TEST(SelectUnmask, FixesTheMostConfident) {
  auto s = MaskState::all_masked(3);
  const auto next = select_unmask({0.9, 0.1, 0.5}, s, 1, {4, 5, 6});
  EXPECT_EQ(next.masked, (std::vector<std::uint8_t>{0, 1, 0}));
  EXPECT_EQ(next.tokens, (std::vector<TokenId>{4, -1, 6}));
  EXPECT_EQ(next.step, 1);
}

TEST(SelectUnmask, TiesGoToLowerPositions) {
  auto s = MaskState::all_masked(3);
  const auto next = select_unmask({0.3, 0.3, 0.3}, s, 1, {1, 2, 3});
  EXPECT_EQ(next.masked, (std::vector<std::uint8_t>{0, 0, 1}));
}

TEST(SelectUnmask, AlignsWithMaskedPositionsOnly) {
  auto s = MaskState::from_tokens({7, 8, 9, 10}, {0, 1, 0, 1});
  const auto next = select_unmask({0.2, 0.8}, s, 1, {11, 12});
  EXPECT_EQ(next.tokens, (std::vector<TokenId>{7, -1, 9, 12}));
}

TEST(SelectUnmask, RejectsBadTargets) {
  auto s = MaskState::all_masked(3);
  EXPECT_THROW(select_unmask({1, 1, 1}, s, 3, {0, 0, 0}), std::invalid_argument);
  EXPECT_THROW(select_unmask({1, 1}, s, 1, {0, 0}), std::invalid_argument);
}

TEST(SelectUnmask, FullLoopOnTenTokens) {
  auto s = MaskState::all_masked(10);
  Rng rng(1);
  std::set<int> fixed;
  std::vector<TokenId> fixed_tokens(10, -1);
  for (int target : {9, 7, 3, 0}) {
    const int m = s.masked_count();
    std::vector<double> conf;
    std::vector<TokenId> toks;
    for (int i = 0; i < m; ++i) {
      conf.push_back(rng.uniform());
      toks.push_back(static_cast<TokenId>(rng.below(32)));
    }
    s = select_unmask(conf, s, target, toks);
    ASSERT_EQ(s.masked_count(), target);
    for (int p : fixed) ASSERT_EQ(s.tokens[static_cast<std::size_t>(p)], fixed_tokens[static_cast<std::size_t>(p)]);
    for (int p = 0; p < 10; ++p)
      if (!s.masked[static_cast<std::size_t>(p)] && fixed.insert(p).second) fixed_tokens[static_cast<std::size_t>(p)] = s.tokens[static_cast<std::size_t>(p)];
  }
  EXPECT_EQ(fixed.size(), 10u);
  EXPECT_EQ(s.step, 4);
}

TEST(SelectUnmask, RandomLoopsNeverRewriteFixedTokens) {
  Rng rng(99);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = testgen::between(rng, 1, 64);
    const int T = testgen::between(rng, 1, 32);
    auto s = MaskState::all_masked(static_cast<std::size_t>(n));
    int fixings = 0;
    for (int t = 1; t <= T; ++t) {
      const int target = masked_count_at(t, T, n);
      const int m = s.masked_count();
      if (m == target) continue;
      std::vector<double> conf;
      for (int i = 0; i < m; ++i) conf.push_back(rng.uniform());
      const auto before = s;
      s = select_unmask(conf, s, target, testgen::tokens(rng, m, 16));
      fixings += m - target;
      for (int p = 0; p < n; ++p)
        if (!before.masked[static_cast<std::size_t>(p)]) {
          ASSERT_EQ(s.tokens[static_cast<std::size_t>(p)], before.tokens[static_cast<std::size_t>(p)]);
        }
    }
    ASSERT_EQ(s.masked_count(), 0);
    ASSERT_EQ(fixings, n);
  }
}

TEST(CorruptCondition, RateZeroIsIdentity) {
  Rng rng(1);
  TokenSequence s{1, 21.5, testgen::tokens(rng, 200, 32)};
  EXPECT_EQ(corrupt_condition(s, 0.0, 32, rng), s);
}

TEST(CorruptCondition, RateOneBinaryVocabulary) {
  Rng rng(2);
  TokenSequence s{1, 21.5, std::vector<TokenId>(100000, 0)};
  const auto c = corrupt_condition(s, 1.0, 2, rng);
  const double diff = static_cast<double>(std::count(c.tokens.begin(), c.tokens.end(), 1)) / 100000.0;
  EXPECT_NEAR(diff, 0.5, 0.01);
  EXPECT_EQ(c.size(), s.size());
}

TEST(CorruptCondition, TenPercentReplacement) {
  // Count replacements directly by corrupting with a vocabulary whose draws
  // never equal the sentinel input.
  Rng rng(3);
  const int n = 100000;
  TokenSequence s{2, 43.065, std::vector<TokenId>(n, 1000)};
  const auto c = corrupt_condition(s, 0.1, 32, rng);
  const double frac = static_cast<double>(std::count_if(c.tokens.begin(), c.tokens.end(), [](TokenId t) { return t != 1000; })) / n;
  EXPECT_NEAR(frac, 0.10, 0.01);
  EXPECT_THROW(corrupt_condition(s, 1.5, 32, rng), std::invalid_argument);
}
