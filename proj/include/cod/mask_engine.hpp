#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "cod/core.hpp"
#include "cod/token_hierarchy.hpp"

namespace cod {

/// Canvas state during iterative decoding.
struct MaskState {
  std::vector<std::uint8_t> masked;  // 1 = still [MASK]
  std::vector<TokenId> tokens;       // valid where masked == 0, -1 otherwise
  int step = 0;

  static MaskState all_masked(std::size_t n) {
    MaskState s;
    s.masked.assign(n, 1);
    s.tokens.assign(n, -1);
    return s;
  }

  /// Fully specified canvas with the positions flagged in `mask` hidden.
  static MaskState from_tokens(const std::vector<TokenId>& tokens, const std::vector<std::uint8_t>& mask) {
    if (tokens.size() != mask.size()) invalid("mask length must match token count");
    MaskState s;
    s.masked = mask;
    s.tokens = tokens;
    for (std::size_t i = 0; i < tokens.size(); ++i)
      if (mask[i]) s.tokens[i] = -1;
    return s;
  }

  std::size_t size() const { return masked.size(); }

  int masked_count() const { return static_cast<int>(std::count(masked.begin(), masked.end(), 1)); }

  std::vector<int> masked_positions() const {
    std::vector<int> out;
    for (std::size_t i = 0; i < masked.size(); ++i)
      if (masked[i]) out.push_back(static_cast<int>(i));
    return out;
  }
};

/// Fraction of the canvas still masked at the given decode progress (cosine schedule).
inline double mask_ratio(double progress) {
  if (!(progress >= 0.0 && progress <= 1.0)) invalid("mask_ratio: progress outside [0, 1]");
  if (progress == 1.0) return 0.0;
  return std::cos(progress * M_PI / 2.0);
}

/// Masked-token count after decode step `step` of `total_steps` on an n-token
/// canvas. Each step reveals at least one token while any remain; step T is 0.
inline int masked_count_at(int step, int total_steps, int n) {
  if (total_steps < 1) invalid("total_steps must be >= 1");
  if (step < 1 || step > total_steps) invalid("step outside [1, T]");
  if (n < 1) invalid("canvas length must be >= 1");
  int prev = n;
  int count = n;
  for (int t = 1; t <= step; ++t) {
    count = static_cast<int>(std::floor(n * mask_ratio(static_cast<double>(t) / total_steps)));
    count = prev > 0 ? std::min(count, prev - 1) : 0;
    count = std::max(count, 0);
    prev = count;
  }
  return step == total_steps ? 0 : count;
}

/// Training mask: r ~ U(0, 1], k = ceil(n * mask_ratio(r)) clamped to [1, n],
/// then k positions uniformly without replacement.
inline std::vector<std::uint8_t> sample_training_mask(int n, Rng& rng) {
  if (n < 1) invalid("sample_training_mask: n must be >= 1");
  const double r = rng.uniform_open_closed();
  int k = static_cast<int>(std::ceil(n * mask_ratio(r)));
  k = std::clamp(k, 1, n);
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  for (int i = 0; i < k; ++i) {
    const auto j = i + static_cast<int>(rng.below(static_cast<std::uint64_t>(n - i)));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(n), 0);
  for (int i = 0; i < k; ++i) mask[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])] = 1;
  return mask;
}

/// Fixes the (masked - target_masked) most confident masked positions.
/// `confidences` and `sampled_tokens` are aligned with state.masked_positions().
inline MaskState select_unmask(const std::vector<double>& confidences, const MaskState& state, int target_masked,
                               const std::vector<TokenId>& sampled_tokens) {
  const auto positions = state.masked_positions();
  const int current = static_cast<int>(positions.size());
  if (target_masked < 0 || target_masked >= current)
    invalid("select_unmask: target " + std::to_string(target_masked) + " not below masked count " +
            std::to_string(current));
  if (confidences.size() != positions.size() || sampled_tokens.size() != positions.size())
    invalid("select_unmask: need one confidence and one token per masked position");

  std::vector<int> order(positions.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return confidences[static_cast<std::size_t>(a)] > confidences[static_cast<std::size_t>(b)];
  });

  MaskState next = state;
  for (int i = 0; i < current - target_masked; ++i) {
    const auto k = static_cast<std::size_t>(order[static_cast<std::size_t>(i)]);
    const auto pos = static_cast<std::size_t>(positions[k]);
    if (sampled_tokens[k] < 0) invalid("select_unmask: negative token id");
    next.masked[pos] = 0;
    next.tokens[pos] = sampled_tokens[k];
  }
  ++next.step;
  return next;
}

/// Replaces each position independently, with probability `rate`, by a
/// uniformly drawn id in [0, vocab_size).
inline TokenSequence corrupt_condition(const TokenSequence& seq, double rate, int vocab_size, Rng& rng) {
  if (!(rate >= 0.0 && rate <= 1.0)) invalid("corruption rate outside [0, 1]");
  if (vocab_size < 1) invalid("vocab_size must be positive");
  TokenSequence out = seq;
  for (auto& t : out.tokens) {
    const bool replace = rng.uniform() < rate;
    const auto draw = static_cast<TokenId>(rng.below(static_cast<std::uint64_t>(vocab_size)));
    if (replace) t = draw;
  }
  return out;
}

}  // namespace cod
