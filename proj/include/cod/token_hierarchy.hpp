#pragma once

// Multi-rate token sequences and the three ways of building coarse levels:
// stride decimation of the finest stream, and extra quantizers over
// mean-pooled frames with either one codebook per level or one shared codebook.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "cod/core.hpp"
#include "cod/io.hpp"

namespace cod {

enum class Strategy { Decimated, ExtraIndependent, ExtraShared };

inline std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::Decimated: return "decimated";
    case Strategy::ExtraIndependent: return "extra-independent";
    case Strategy::ExtraShared: return "extra-shared";
  }
  return "?";
}

inline Strategy parse_strategy(std::string_view s) {
  if (s == "decimated") return Strategy::Decimated;
  if (s == "extra-independent") return Strategy::ExtraIndependent;
  if (s == "extra-shared") return Strategy::ExtraShared;
  invalid("unknown strategy '" + std::string(s) + "'");
}

struct TokenSequence {
  int level = 1;
  double rate_hz = 0.0;
  std::vector<TokenId> tokens;

  std::size_t size() const { return tokens.size(); }
  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

struct HierarchySpec {
  int num_levels = 3;
  double finest_rate_hz = 86.13;
  /// Factor from the finest level to level l, indexed l-1. Last entry is 1.
  std::vector<int> decimation_factors{4, 2, 1};
  int vocab_size = 32;
  Strategy strategy = Strategy::Decimated;

  int factor(int level) const {
    check_level(level);
    return decimation_factors[static_cast<std::size_t>(level - 1)];
  }

  double rate(int level) const { return finest_rate_hz / factor(level); }

  /// Window size when pooling level+1 down to level.
  int ratio(int level) const { return factor(level) / factor(level + 1); }

  void check_level(int level) const {
    if (level < 1 || level > num_levels)
      invalid("level " + std::to_string(level) + " outside [1, " + std::to_string(num_levels) + "]");
  }

  void validate() const {
    if (num_levels < 1) invalid("num_levels must be >= 1");
    if (!(finest_rate_hz > 0)) invalid("finest_rate_hz must be positive");
    if (vocab_size < 2) invalid("vocab_size must be >= 2");
    if (decimation_factors.size() != static_cast<std::size_t>(num_levels))
      invalid("need one decimation factor per level");
    if (decimation_factors.back() != 1) invalid("finest decimation factor must be 1");
    for (std::size_t i = 0; i + 1 < decimation_factors.size(); ++i) {
      const int a = decimation_factors[i], b = decimation_factors[i + 1];
      if (a <= b) invalid("decimation factors must be strictly decreasing");
      if (a % b != 0) invalid("each decimation factor must divide the previous one");
    }
  }

  friend bool operator==(const HierarchySpec&, const HierarchySpec&) = default;
};

inline void validate_sequence(const TokenSequence& seq, int vocab_size) {
  if (seq.tokens.empty()) invalid("empty token sequence");
  for (TokenId t : seq.tokens)
    if (t < 0 || t >= vocab_size)
      invalid("token id " + std::to_string(t) + " outside vocabulary of " + std::to_string(vocab_size));
}

/// Keeps every factor-th token starting at index 0. The level field is left to
/// the caller; the rate is divided by the factor.
inline TokenSequence decimate(const TokenSequence& seq, int factor) {
  if (factor <= 0) invalid("decimation factor must be positive");
  if (seq.tokens.empty()) invalid("cannot decimate an empty sequence");
  TokenSequence out;
  out.level = seq.level;
  out.rate_hz = seq.rate_hz / factor;
  out.tokens.reserve((seq.tokens.size() + factor - 1) / factor);
  for (std::size_t i = 0; i < seq.tokens.size(); i += static_cast<std::size_t>(factor))
    out.tokens.push_back(seq.tokens[i]);
  return out;
}

inline int finest_length(double duration_s, double finest_rate_hz) {
  if (!(duration_s > 0) || !std::isfinite(duration_s)) invalid("duration must be positive and finite");
  return std::max(1, static_cast<int>(std::ceil(duration_s * finest_rate_hz)));
}

inline int level_length(double duration_s, const HierarchySpec& spec, int level) {
  spec.check_level(level);
  const int n = finest_length(duration_s, spec.finest_rate_hz);
  const int f = spec.factor(level);
  return (n + f - 1) / f;
}

/// VQ codebook with exponential-moving-average updates.
struct Codebook {
  Mat<float> entries;                     // V x dim
  std::vector<std::int64_t> usage_counts;  // lifetime assignments per entry

  // EMA k-means state.
  std::vector<double> ema_count;
  Mat<double> ema_sum;
  std::vector<int> idle_steps;

  static constexpr int kDeadAfter = 256;

  Codebook() = default;
  explicit Codebook(Mat<float> e) : entries(std::move(e)) { reset_stats(); }

  int size() const { return static_cast<int>(entries.rows()); }
  int dim() const { return static_cast<int>(entries.cols()); }

  void reset_stats() {
    const auto v = static_cast<std::size_t>(entries.rows());
    usage_counts.assign(v, 0);
    ema_count.assign(v, 1.0);
    ema_sum = entries.cast<double>();
    idle_steps.assign(v, 0);
  }

  /// Nearest entry under squared Euclidean distance; ties go to the lower index.
  int nearest(const Eigen::Ref<const RowVec<float>>& x) const {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int k = 0; k < entries.rows(); ++k) {
      double d = 0;
      for (int j = 0; j < entries.cols(); ++j) {
        const double diff = static_cast<double>(x(j)) - entries(k, j);
        d += diff * diff;
      }
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    return best;
  }

  /// One EMA step on a batch of frames. Entries unused for kDeadAfter
  /// consecutive steps are re-seeded from a random frame of the batch.
  void ema_update(const Mat<float>& frames, Rng& rng, double decay = 0.99) {
    if (frames.cols() != entries.cols()) invalid("codebook update: dimension mismatch");
    if (frames.rows() == 0) return;
    const int v = size();
    std::vector<double> count(static_cast<std::size_t>(v), 0.0);
    Mat<double> sum = Mat<double>::Zero(v, dim());
    for (int i = 0; i < frames.rows(); ++i) {
      const int k = nearest(frames.row(i));
      count[static_cast<std::size_t>(k)] += 1;
      sum.row(k) += frames.row(i).cast<double>();
      ++usage_counts[static_cast<std::size_t>(k)];
    }
    for (int k = 0; k < v; ++k) {
      const auto ku = static_cast<std::size_t>(k);
      ema_count[ku] = decay * ema_count[ku] + (1 - decay) * count[ku];
      ema_sum.row(k) = decay * ema_sum.row(k) + (1 - decay) * sum.row(k);
      idle_steps[ku] = count[ku] > 0 ? 0 : idle_steps[ku] + 1;
      if (idle_steps[ku] >= kDeadAfter) {
        const auto pick = static_cast<int>(rng.below(static_cast<std::uint64_t>(frames.rows())));
        ema_sum.row(k) = frames.row(pick).cast<double>();
        ema_count[ku] = 1.0;
        idle_steps[ku] = 0;
      }
      entries.row(k) = (ema_sum.row(k) / std::max(ema_count[ku], 1e-5)).cast<float>();
    }
  }
};

struct Quantized {
  std::vector<TokenId> tokens;
  Mat<float> residuals;
};

inline Quantized quantize(const Mat<float>& frames, const Codebook& codebook) {
  if (frames.cols() != codebook.dim())
    invalid("quantize: frame dim " + std::to_string(frames.cols()) + " != codebook dim " +
            std::to_string(codebook.dim()));
  if (codebook.size() == 0) invalid("quantize: empty codebook");
  Quantized q;
  q.tokens.resize(static_cast<std::size_t>(frames.rows()));
  q.residuals.resize(frames.rows(), frames.cols());
  for (int i = 0; i < frames.rows(); ++i) {
    const int k = codebook.nearest(frames.row(i));
    q.tokens[static_cast<std::size_t>(i)] = k;
    q.residuals.row(i) = frames.row(i) - codebook.entries.row(k);
  }
  return q;
}

/// Averages consecutive windows of `window` rows; a short last window is
/// averaged over the rows it has.
inline Mat<float> mean_pool(const Mat<float>& frames, int window) {
  if (window <= 0) invalid("pool window must be positive");
  const auto n = frames.rows();
  const auto m = (n + window - 1) / window;
  Mat<float> out(m, frames.cols());
  for (Eigen::Index i = 0; i < m; ++i) {
    const auto start = i * window;
    const auto len = std::min<Eigen::Index>(window, n - start);
    out.row(i) = frames.middleRows(start, len).colwise().mean();
  }
  return out;
}

/// Continuous representation at every level: index l-1 holds level l.
/// The finest level is the frames themselves.
inline std::vector<Mat<float>> pooled_levels(const Mat<float>& frames, const HierarchySpec& spec) {
  std::vector<Mat<float>> out(static_cast<std::size_t>(spec.num_levels));
  out.back() = frames;
  for (int l = spec.num_levels - 1; l >= 1; --l)
    out[static_cast<std::size_t>(l - 1)] = mean_pool(out[static_cast<std::size_t>(l)], spec.ratio(l));
  return out;
}

/// Builds all L levels, coarsest first. For the extra-quantizer strategies
/// `frames` (one row per finest token) and the level codebooks are required:
/// one shared codebook, or one per coarse level (index l-1 for level l).
inline std::vector<TokenSequence> build_hierarchy(const TokenSequence& finest, const HierarchySpec& spec,
                                                  const Mat<float>* frames = nullptr,
                                                  std::span<const Codebook> codebooks = {}) {
  spec.validate();
  validate_sequence(finest, spec.vocab_size);
  std::vector<TokenSequence> levels(static_cast<std::size_t>(spec.num_levels));
  TokenSequence top = finest;
  top.level = spec.num_levels;
  top.rate_hz = spec.finest_rate_hz;
  levels.back() = top;
  if (spec.num_levels == 1) return levels;

  if (spec.strategy == Strategy::Decimated) {
    for (int l = 1; l < spec.num_levels; ++l) {
      auto s = decimate(top, spec.factor(l));
      s.level = l;
      levels[static_cast<std::size_t>(l - 1)] = std::move(s);
    }
    return levels;
  }

  if (frames == nullptr) invalid("extra-quantizer strategies need frames");
  if (frames->rows() != static_cast<Eigen::Index>(finest.size()))
    invalid("frame count must equal finest token count");
  const std::size_t need = spec.strategy == Strategy::ExtraShared ? 1 : static_cast<std::size_t>(spec.num_levels - 1);
  if (codebooks.size() != need) invalid("expected " + std::to_string(need) + " codebook(s)");
  for (const auto& cb : codebooks)
    if (cb.size() != spec.vocab_size) invalid("codebook size must equal vocab size");

  const auto pooled = pooled_levels(*frames, spec);
  for (int l = 1; l < spec.num_levels; ++l) {
    const auto& cb = spec.strategy == Strategy::ExtraShared ? codebooks[0] : codebooks[static_cast<std::size_t>(l - 1)];
    auto q = quantize(pooled[static_cast<std::size_t>(l - 1)], cb);
    levels[static_cast<std::size_t>(l - 1)] = TokenSequence{l, spec.rate(l), std::move(q.tokens)};
  }
  return levels;
}

/// One line of a token file: utt_id<TAB>level<TAB>rate_hz<TAB>ids.
struct TokenRecord {
  std::string utt_id;
  TokenSequence seq;
  friend bool operator==(const TokenRecord&, const TokenRecord&) = default;
};

inline std::string format_token_line(const TokenRecord& r) {
  return r.utt_id + '\t' + std::to_string(r.seq.level) + '\t' + format_double(r.seq.rate_hz) + '\t' +
         join(r.seq.tokens) + '\n';
}

inline std::string format_token_file(const std::vector<TokenRecord>& records) {
  std::string out;
  for (const auto& r : records) out += format_token_line(r);
  return out;
}

/// Parses a token file. Token ids must be below `vocab_size` when it is positive.
inline std::vector<TokenRecord> parse_token_file(std::string_view text, int vocab_size = 0) {
  std::vector<TokenRecord> out;
  int lineno = 0;
  for (auto line : split(text, '\n')) {
    ++lineno;
    if (line.empty()) continue;
    const auto where = "token file line " + std::to_string(lineno) + ": ";
    auto f = split(line, '\t');
    if (f.size() != 4) throw FormatError(where + "expected 4 tab-separated fields");
    TokenRecord r;
    r.utt_id = std::string(f[0]);
    try {
      r.seq.level = static_cast<int>(parse_int(f[1]));
      r.seq.rate_hz = parse_double(f[2]);
      for (auto id : split(f[3], ',')) r.seq.tokens.push_back(static_cast<TokenId>(parse_int(id)));
    } catch (const std::invalid_argument& e) {
      throw FormatError(where + e.what());
    }
    if (r.seq.tokens.empty()) throw FormatError(where + "no tokens");
    for (TokenId t : r.seq.tokens)
      if (t < 0 || (vocab_size > 0 && t >= vocab_size))
        throw FormatError(where + "token id " + std::to_string(t) + " out of range");
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace cod
