#pragma once

// Synthetic stand-in for a speech corpus with a known coarse-to-fine law.
//
//   phonemes  ~ seeded first-order Markov chain, length uniform in [min, max]
//   duration  = slope * |phonemes| + intercept + U(-jitter, jitter)
//   level 1   : position k is aligned to phoneme floor(k * P / N1); the first
//               token of each phoneme run is onset[phoneme], later ones follow
//               cont[previous token]
//   level l+1 : token j = expand(level_l[j / r], speaker, j % r), resampled
//               uniformly over V with probability fine_noise
//
// Given level l and the speaker, level l+1 tokens are independent, so the
// Bayes predictive distribution and its entropy have closed forms.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cod/core.hpp"
#include "cod/io.hpp"
#include "cod/token_hierarchy.hpp"

namespace cod {

struct SynthSpec {
  int phoneme_vocab = 24;
  int vocab_size = 32;
  int num_speakers = 4;
  int num_levels = 3;
  std::vector<int> factors{4, 2, 1};
  double finest_rate_hz = 86.13;
  double fine_noise = 0.15;
  double dur_slope = 0.08;
  double dur_intercept = 0.2;
  double dur_jitter = 0.03;
  int min_phonemes = 4;
  int max_phonemes = 12;
  int speaker_dim = 16;
  int frame_dim = 8;
  double frame_noise = 0.1;
  std::uint64_t seed = 1;

  HierarchySpec hierarchy() const {
    HierarchySpec h;
    h.num_levels = num_levels;
    h.finest_rate_hz = finest_rate_hz;
    h.decimation_factors = factors;
    h.vocab_size = vocab_size;
    return h;
  }

  void validate() const {
    if (vocab_size < 4) invalid("synthetic vocab must be >= 4");
    if (phoneme_vocab < 2 || num_speakers < 1) invalid("need >= 2 phonemes and >= 1 speaker");
    if (!(fine_noise >= 0 && fine_noise <= 1)) invalid("fine_noise outside [0, 1]");
    if (min_phonemes < 1 || max_phonemes < min_phonemes) invalid("bad phoneme length range");
    if (dur_slope * min_phonemes + dur_intercept - dur_jitter <= 0) invalid("duration rule can go nonpositive");
    if (speaker_dim < 0 || frame_dim < 1) invalid("bad embedding dims");
    hierarchy().validate();
  }

  friend bool operator==(const SynthSpec&, const SynthSpec&) = default;
};

inline void to_json(nlohmann::json& j, const SynthSpec& s) {
  j = nlohmann::json{{"phoneme_vocab", s.phoneme_vocab}, {"vocab_size", s.vocab_size},
                     {"num_speakers", s.num_speakers},   {"num_levels", s.num_levels},
                     {"factors", s.factors},             {"finest_rate_hz", s.finest_rate_hz},
                     {"fine_noise", s.fine_noise},       {"dur_slope", s.dur_slope},
                     {"dur_intercept", s.dur_intercept}, {"dur_jitter", s.dur_jitter},
                     {"min_phonemes", s.min_phonemes},   {"max_phonemes", s.max_phonemes},
                     {"speaker_dim", s.speaker_dim},     {"frame_dim", s.frame_dim},
                     {"frame_noise", s.frame_noise},     {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, SynthSpec& s) {
  j.at("phoneme_vocab").get_to(s.phoneme_vocab);
  j.at("vocab_size").get_to(s.vocab_size);
  j.at("num_speakers").get_to(s.num_speakers);
  j.at("num_levels").get_to(s.num_levels);
  j.at("factors").get_to(s.factors);
  j.at("finest_rate_hz").get_to(s.finest_rate_hz);
  j.at("fine_noise").get_to(s.fine_noise);
  j.at("dur_slope").get_to(s.dur_slope);
  j.at("dur_intercept").get_to(s.dur_intercept);
  j.at("dur_jitter").get_to(s.dur_jitter);
  j.at("min_phonemes").get_to(s.min_phonemes);
  j.at("max_phonemes").get_to(s.max_phonemes);
  j.at("speaker_dim").get_to(s.speaker_dim);
  j.at("frame_dim").get_to(s.frame_dim);
  j.at("frame_noise").get_to(s.frame_noise);
  j.at("seed").get_to(s.seed);
}

struct SynthUtterance {
  std::string utt_id;
  std::vector<int> phonemes;
  int speaker_id = 0;
  double duration_s = 0;
  std::vector<TokenSequence> levels;  // coarsest first

  friend bool operator==(const SynthUtterance&, const SynthUtterance&) = default;
};

/// Fixed tables of the generative law, all derived from the corpus seed.
struct SynthLaw {
  SynthSpec spec;
  std::vector<std::vector<double>> phoneme_cdf;  // row: cumulative next-phoneme distribution
  std::vector<TokenId> onset;                    // phoneme -> token
  std::vector<TokenId> cont;                     // token -> token
  std::vector<TokenId> expand_table;             // [(coarse * S + speaker) * R + sub]
  int max_ratio = 1;
  Mat<float> speakers;  // S x speaker_dim
  Mat<float> frames;    // V x frame_dim, acoustic frame of each token

  explicit SynthLaw(const SynthSpec& s) : spec(s) {
    s.validate();
    Rng rng(derive_seed(s.seed, "law"));
    const auto p = static_cast<std::size_t>(s.phoneme_vocab);
    const auto v = static_cast<std::size_t>(s.vocab_size);
    phoneme_cdf.assign(p, std::vector<double>(p));
    for (auto& row : phoneme_cdf) {
      double acc = 0;
      for (auto& x : row) {
        acc += std::exp(1.5 * rng.normal());
        x = acc;
      }
      for (auto& x : row) x /= acc;
      row.back() = 1.0;
    }
    onset.resize(p);
    for (auto& t : onset) t = static_cast<TokenId>(rng.below(v));
    cont.resize(v);
    for (auto& t : cont) t = static_cast<TokenId>(rng.below(v));

    const auto h = s.hierarchy();
    for (int l = 1; l < s.num_levels; ++l) max_ratio = std::max(max_ratio, h.ratio(l));
    expand_table.resize(v * static_cast<std::size_t>(s.num_speakers * max_ratio));
    for (int spk = 0; spk < s.num_speakers; ++spk)
      for (int sub = 0; sub < max_ratio; ++sub) {
        // A permutation of the vocabulary for every (speaker, sub-position).
        std::vector<TokenId> perm(v);
        for (std::size_t i = 0; i < v; ++i) perm[i] = static_cast<TokenId>(i);
        for (std::size_t i = v - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
        for (std::size_t c = 0; c < v; ++c) expand_table[index(static_cast<int>(c), spk, sub)] = perm[c];
      }

    speakers.resize(s.num_speakers, s.speaker_dim);
    const double sscale = s.speaker_dim > 0 ? 1.0 / std::sqrt(static_cast<double>(s.speaker_dim)) : 0.0;
    for (Eigen::Index i = 0; i < speakers.size(); ++i) speakers.data()[i] = static_cast<float>(sscale * rng.normal());
    frames.resize(s.vocab_size, s.frame_dim);
    for (Eigen::Index i = 0; i < frames.size(); ++i) frames.data()[i] = static_cast<float>(rng.normal());
  }

  TokenId expand(TokenId coarse, int speaker, int sub) const {
    return expand_table[index(coarse, speaker, sub)];
  }

  std::vector<float> speaker_vector(int speaker) const {
    if (speaker < 0 || speaker >= spec.num_speakers) invalid("speaker id out of range");
    std::vector<float> out(static_cast<std::size_t>(spec.speaker_dim));
    for (int j = 0; j < spec.speaker_dim; ++j) out[static_cast<std::size_t>(j)] = speakers(speaker, j);
    return out;
  }

  /// Level-1 tokens implied by the phonemes for a canvas of n1 tokens.
  std::vector<TokenId> coarse_tokens(const std::vector<int>& phonemes, int n1) const {
    std::vector<TokenId> out(static_cast<std::size_t>(n1));
    const auto p = static_cast<long long>(phonemes.size());
    long long prev_align = -1;
    for (int k = 0; k < n1; ++k) {
      const long long a = static_cast<long long>(k) * p / n1;
      out[static_cast<std::size_t>(k)] =
          a != prev_align ? onset[static_cast<std::size_t>(phonemes[static_cast<std::size_t>(a)])]
                          : cont[static_cast<std::size_t>(out[static_cast<std::size_t>(k - 1)])];
      prev_align = a;
    }
    return out;
  }

  /// Noise-free expansion of level `level` tokens to `fine_len` tokens at level + 1.
  std::vector<TokenId> expand_level(const std::vector<TokenId>& coarse, int speaker, int level, int fine_len) const {
    const int r = spec.hierarchy().ratio(level);
    std::vector<TokenId> out(static_cast<std::size_t>(fine_len));
    for (int j = 0; j < fine_len; ++j)
      out[static_cast<std::size_t>(j)] = expand(coarse[static_cast<std::size_t>(j / r)], speaker, j % r);
    return out;
  }

 private:
  std::size_t index(int coarse, int speaker, int sub) const {
    return static_cast<std::size_t>((coarse * spec.num_speakers + speaker) * max_ratio + sub);
  }
};

inline std::string utt_name(long long index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "utt%06lld", index);
  return buf;
}

/// Generates one utterance; its randomness is derived from (corpus seed, utt_id).
inline SynthUtterance gen_utterance(const SynthLaw& law, const std::string& utt_id) {
  const auto& s = law.spec;
  const auto h = s.hierarchy();
  Rng rng(derive_seed(s.seed, utt_id));
  SynthUtterance u;
  u.utt_id = utt_id;
  const int n_ph = s.min_phonemes + static_cast<int>(rng.below(static_cast<std::uint64_t>(s.max_phonemes - s.min_phonemes + 1)));
  int ph = static_cast<int>(rng.below(static_cast<std::uint64_t>(s.phoneme_vocab)));
  for (int i = 0; i < n_ph; ++i) {
    if (i > 0) {
      const auto& cdf = law.phoneme_cdf[static_cast<std::size_t>(ph)];
      const double x = rng.uniform();
      ph = static_cast<int>(std::upper_bound(cdf.begin(), cdf.end(), x) - cdf.begin());
      ph = std::min(ph, s.phoneme_vocab - 1);
    }
    u.phonemes.push_back(ph);
  }
  u.speaker_id = static_cast<int>(rng.below(static_cast<std::uint64_t>(s.num_speakers)));
  u.duration_s = s.dur_slope * n_ph + s.dur_intercept + s.dur_jitter * (2.0 * rng.uniform() - 1.0);

  u.levels.resize(static_cast<std::size_t>(s.num_levels));
  u.levels[0] = TokenSequence{1, h.rate(1), law.coarse_tokens(u.phonemes, level_length(u.duration_s, h, 1))};
  for (int l = 1; l < s.num_levels; ++l) {
    const int n = level_length(u.duration_s, h, l + 1);
    auto tokens = law.expand_level(u.levels[static_cast<std::size_t>(l - 1)].tokens, u.speaker_id, l, n);
    for (auto& t : tokens) {
      const bool resample = rng.uniform() < s.fine_noise;
      const auto draw = static_cast<TokenId>(rng.below(static_cast<std::uint64_t>(s.vocab_size)));
      if (resample) t = draw;
    }
    u.levels[static_cast<std::size_t>(l)] = TokenSequence{l + 1, h.rate(l + 1), std::move(tokens)};
  }
  return u;
}

inline SynthUtterance gen_utterance(const SynthLaw& law, long long index) { return gen_utterance(law, utt_name(index)); }

/// Bayes predictive distribution of level (level + 1) given the level tokens:
/// one row per fine position, (1 - eps) + eps / V on the expansion, eps / V elsewhere.
inline Mat<double> oracle_fine_distribution(const TokenSequence& coarse, int speaker, const SynthLaw& law,
                                            int fine_len) {
  const auto& s = law.spec;
  const int v = s.vocab_size;
  const double eps = s.fine_noise;
  const auto fine = law.expand_level(coarse.tokens, speaker, coarse.level, fine_len);
  Mat<double> p = Mat<double>::Constant(fine_len, v, eps / v);
  for (int j = 0; j < fine_len; ++j) p(j, fine[static_cast<std::size_t>(j)]) += 1.0 - eps;
  return p;
}

/// Entropy (nats) of the Bayes predictive distribution for one fine token.
inline double bayes_entropy(int vocab_size, double fine_noise) {
  const double v = vocab_size;
  const double top = (1.0 - fine_noise) + fine_noise / v;
  const double rest = fine_noise / v;
  auto xlogx = [](double x) { return x > 0 ? x * std::log(x) : 0.0; };
  return -(xlogx(top) + (v - 1) * xlogx(rest));
}

/// Most probable finest-level sequence given the level-1 tokens: the noise-free
/// expansion chain.
inline std::vector<TokenId> map_expansion(const std::vector<TokenId>& level1, int speaker, double duration_s,
                                          const SynthLaw& law) {
  const auto h = law.spec.hierarchy();
  std::vector<TokenId> cur = level1;
  for (int l = 1; l < h.num_levels; ++l) cur = law.expand_level(cur, speaker, l, level_length(duration_s, h, l + 1));
  return cur;
}

/// Finest-level acoustic frames of an utterance: token frame plus Gaussian noise.
inline Mat<float> synth_frames(const SynthUtterance& u, const SynthLaw& law) {
  const auto& finest = u.levels.back().tokens;
  Rng rng(derive_seed(law.spec.seed, u.utt_id + "/frames"));
  Mat<float> f(static_cast<Eigen::Index>(finest.size()), law.spec.frame_dim);
  for (std::size_t i = 0; i < finest.size(); ++i)
    for (int j = 0; j < law.spec.frame_dim; ++j)
      f(static_cast<Eigen::Index>(i), j) =
          law.frames(finest[i], j) + static_cast<float>(law.spec.frame_noise * rng.normal());
  return f;
}

enum class Split { Train, Dev, Test };

/// 80/10/10 split keyed only on the utterance id.
inline Split split_of(const std::string& utt_id) {
  const auto bucket = mix64(fnv1a(utt_id)) % 100;
  if (bucket < 80) return Split::Train;
  if (bucket < 90) return Split::Dev;
  return Split::Test;
}

inline std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Dev: return "dev";
    case Split::Test: return "test";
  }
  return "?";
}

struct Dataset {
  SynthSpec spec;
  std::vector<SynthUtterance> train, dev, test;

  const std::vector<SynthUtterance>& split(Split s) const {
    return s == Split::Train ? train : s == Split::Dev ? dev : test;
  }
};

inline std::string utterance_json_line(const SynthUtterance& u) {
  nlohmann::json levels = nlohmann::json::array();
  for (const auto& l : u.levels) levels.push_back(l.tokens);
  nlohmann::json j{{"utt_id", u.utt_id},
                   {"phonemes", u.phonemes},
                   {"speaker_id", u.speaker_id},
                   {"duration_s", u.duration_s},
                   {"levels", levels}};
  return j.dump() + '\n';
}

/// Parses a corpus JSON-lines file; rates and ranges come from `spec`.
inline std::vector<SynthUtterance> parse_corpus(std::string_view text, const SynthSpec& spec) {
  const auto h = spec.hierarchy();
  std::vector<SynthUtterance> out;
  int lineno = 0;
  for (auto line : split(text, '\n')) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto where = "corpus line " + std::to_string(lineno) + ": ";
    SynthUtterance u;
    try {
      const auto j = nlohmann::json::parse(line);
      j.at("utt_id").get_to(u.utt_id);
      j.at("phonemes").get_to(u.phonemes);
      j.at("speaker_id").get_to(u.speaker_id);
      j.at("duration_s").get_to(u.duration_s);
      const auto& levels = j.at("levels");
      if (!levels.is_array() || static_cast<int>(levels.size()) != spec.num_levels)
        throw FormatError(where + "expected " + std::to_string(spec.num_levels) + " levels");
      for (std::size_t l = 0; l < levels.size(); ++l) {
        TokenSequence seq{static_cast<int>(l) + 1, h.rate(static_cast<int>(l) + 1), {}};
        levels[l].get_to(seq.tokens);
        u.levels.push_back(std::move(seq));
      }
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(where + e.what());
    }
    if (u.phonemes.empty()) throw FormatError(where + "no phonemes");
    for (int p : u.phonemes)
      if (p < 0 || p >= spec.phoneme_vocab) throw FormatError(where + "phoneme id out of range");
    if (u.speaker_id < 0 || u.speaker_id >= spec.num_speakers) throw FormatError(where + "speaker id out of range");
    if (!(u.duration_s > 0)) throw FormatError(where + "duration must be positive");
    for (const auto& seq : u.levels) {
      if (seq.tokens.empty()) throw FormatError(where + "empty level");
      for (TokenId t : seq.tokens)
        if (t < 0 || t >= spec.vocab_size)
          throw FormatError(where + "token id " + std::to_string(t) + " outside vocabulary");
    }
    out.push_back(std::move(u));
  }
  return out;
}

inline std::vector<SynthUtterance> generate_corpus(const SynthSpec& spec, long long n_utts) {
  const SynthLaw law(spec);
  std::vector<SynthUtterance> out;
  out.reserve(static_cast<std::size_t>(n_utts));
  for (long long i = 0; i < n_utts; ++i) out.push_back(gen_utterance(law, i));
  return out;
}

inline Dataset split_corpus(const SynthSpec& spec, std::vector<SynthUtterance> utts) {
  Dataset d;
  d.spec = spec;
  for (auto& u : utts) {
    switch (split_of(u.utt_id)) {
      case Split::Train: d.train.push_back(std::move(u)); break;
      case Split::Dev: d.dev.push_back(std::move(u)); break;
      case Split::Test: d.test.push_back(std::move(u)); break;
    }
  }
  return d;
}

/// Writes train/dev/test JSON-lines files and manifest.json into `dir`.
inline void write_corpus(const SynthSpec& spec, long long n_utts, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto data = split_corpus(spec, generate_corpus(spec, n_utts));
  for (auto s : {Split::Train, Split::Dev, Split::Test}) {
    std::string text;
    for (const auto& u : data.split(s)) text += utterance_json_line(u);
    write_file_atomic(dir / (to_string(s) + ".jsonl"), text);
  }
  const auto h = spec.hierarchy();
  std::vector<double> rates;
  for (int l = 1; l <= h.num_levels; ++l) rates.push_back(h.rate(l));
  nlohmann::json manifest{{"spec", spec},
                          {"n_utts", n_utts},
                          {"counts", {{"train", data.train.size()}, {"dev", data.dev.size()}, {"test", data.test.size()}}},
                          {"rates_hz", rates},
                          {"bayes_entropy", bayes_entropy(spec.vocab_size, spec.fine_noise)}};
  write_file_atomic(dir / "manifest.json", manifest.dump(2) + '\n');
}

inline Dataset read_corpus(const std::filesystem::path& dir) {
  Dataset d;
  try {
    d.spec = nlohmann::json::parse(read_file(dir / "manifest.json")).at("spec").get<SynthSpec>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest.json: " + std::string(e.what()));
  }
  d.spec.validate();
  d.train = parse_corpus(read_file(dir / "train.jsonl"), d.spec);
  d.dev = parse_corpus(read_file(dir / "dev.jsonl"), d.spec);
  d.test = parse_corpus(read_file(dir / "test.jsonl"), d.spec);
  return d;
}

}  // namespace cod
