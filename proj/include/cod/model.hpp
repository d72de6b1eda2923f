#pragma once

// Shared multi-level masked-token decoder. The input is one packed sequence
//   [phoneme segment] ++ [previous-level segment] ++ [canvas segment]
// where each row is a content embedding plus a segment-relative positional
// embedding plus the embedding of the segment's level (0 for phonemes).
// Logits come out for the canvas rows only, over one vocabulary shared by all
// levels.

#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cod/core.hpp"
#include "cod/io.hpp"
#include "cod/mask_engine.hpp"
#include "cod/token_hierarchy.hpp"
#include "cod/transformer.hpp"

namespace cod {

using KeyValues = std::vector<std::pair<std::string, std::string>>;

struct ModelConfig {
  int num_layers = 4;
  int hidden_dim = 128;
  int num_heads = 4;
  int mlp_dim = 256;
  int vocab_size = 32;
  int phoneme_vocab = 24;
  int num_levels = 3;
  int max_seq_len = 256;
  int speaker_dim = 16;

  StackShape stack_shape() const { return {num_layers, hidden_dim, num_heads, mlp_dim, speaker_dim}; }

  void validate() const {
    if (num_layers < 0 || hidden_dim < 1 || num_heads < 1 || mlp_dim < 1) invalid("model dims must be positive");
    if (hidden_dim % num_heads != 0) invalid("hidden_dim must be divisible by num_heads");
    if (vocab_size < 2 || phoneme_vocab < 1 || num_levels < 1 || max_seq_len < 1 || speaker_dim < 0)
      invalid("invalid model vocabulary/level/length settings");
  }

  KeyValues to_kv() const {
    return {{"num_layers", std::to_string(num_layers)},     {"hidden_dim", std::to_string(hidden_dim)},
            {"num_heads", std::to_string(num_heads)},       {"mlp_dim", std::to_string(mlp_dim)},
            {"vocab_size", std::to_string(vocab_size)},     {"phoneme_vocab", std::to_string(phoneme_vocab)},
            {"num_levels", std::to_string(num_levels)},     {"max_seq_len", std::to_string(max_seq_len)},
            {"speaker_dim", std::to_string(speaker_dim)}};
  }

  static ModelConfig from_kv(const std::map<std::string, std::string>& kv) {
    ModelConfig c;
    auto get = [&](const char* k, int& dst) {
      auto it = kv.find(k);
      if (it == kv.end()) throw FormatError(std::string("missing model config key ") + k);
      dst = static_cast<int>(parse_int(it->second));
    };
    get("num_layers", c.num_layers);
    get("hidden_dim", c.hidden_dim);
    get("num_heads", c.num_heads);
    get("mlp_dim", c.mlp_dim);
    get("vocab_size", c.vocab_size);
    get("phoneme_vocab", c.phoneme_vocab);
    get("num_levels", c.num_levels);
    get("max_seq_len", c.max_seq_len);
    get("speaker_dim", c.speaker_dim);
    return c;
  }

  /// Name of the first field that differs, or empty when equal.
  std::string first_difference(const ModelConfig& o) const {
    const auto a = to_kv(), b = o.to_kv();
    for (std::size_t i = 0; i < a.size(); ++i)
      if (a[i].second != b[i].second) return a[i].first;
    return {};
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct ConditioningBundle {
  std::vector<int> phonemes;
  bool phonemes_null = false;
  std::vector<float> speaker;
  int level = 1;
  std::optional<TokenSequence> prev;  // X_{l-1}; absent at level 1 or when prev_null
  bool prev_null = false;

  /// Both transcript and previous-level conditions replaced by null embeddings.
  ConditioningBundle nulled() const {
    ConditioningBundle c = *this;
    c.phonemes_null = true;
    c.prev_null = true;
    c.prev.reset();
    return c;
  }
};

/// One sequence to run through a predictor.
struct DecoderInput {
  const MaskState* canvas = nullptr;
  const ConditioningBundle* cond = nullptr;
};

/// Anything that maps (canvas, conditions) to per-canvas-position logits.
class TokenPredictor {
 public:
  virtual ~TokenPredictor() = default;
  virtual int vocab_size() const = 0;
  virtual int num_levels() const = 0;
  virtual std::vector<Mat<float>> predict(std::span<const DecoderInput> inputs) const = 0;
};

template <class T>
struct DecoderParams {
  Mat<T> tok_emb;    // (V + 1) x D, row V is [MASK]
  Mat<T> ph_emb;     // P x D
  Mat<T> pos_emb;    // max_seq_len x D
  Mat<T> level_emb;  // (L + 1) x D, row 0 is the phoneme segment
  Mat<T> null_ph;    // 1 x D
  Mat<T> null_prev;  // 1 x D
  StackParams<T> stack;
  Mat<T> head_w, head_b;

  TensorList<T> tensors() {
    TensorList<T> out{{"tok_emb", &tok_emb}, {"ph_emb", &ph_emb},   {"pos_emb", &pos_emb},
                      {"level_emb", &level_emb}, {"null_ph", &null_ph}, {"null_prev", &null_prev}};
    stack.collect("", out);
    out.emplace_back("head_w", &head_w);
    out.emplace_back("head_b", &head_b);
    return out;
  }

  DecoderParams zeros_like() const {
    DecoderParams z = *this;
    auto dst = z.tensors();
    for (auto& [name, m] : dst) m->setZero();
    return z;
  }
};

/// Exact learnable-parameter count for a decoder configuration.
inline long long param_count(const ModelConfig& c) {
  const long long d = c.hidden_dim;
  const long long embeddings = (c.vocab_size + 1LL) * d + 1LL * c.phoneme_vocab * d + 1LL * c.max_seq_len * d +
                               (c.num_levels + 1LL) * d + 2 * d;
  const long long head = d * c.vocab_size + c.vocab_size;
  return embeddings + stack_param_count(c.stack_shape()) + head;
}

enum class RowSource : std::uint8_t { Token, Phoneme, NullPhoneme, NullPrev };

struct RowRef {
  RowSource source;
  int index;  // row in the source table
  int pos;    // segment-relative position
  int level;  // segment level id
};

template <class T>
struct DecoderCache {
  PackedLayout layout;
  Mat<T> cond;
  std::vector<RowRef> rows;
  std::vector<int> canvas_start;  // first canvas row of each sequence
  std::vector<int> canvas_len;
  StackCache<T> stack;
  Mat<T> head_in;  // gathered canvas rows after the stack
};

template <class T>
class Decoder {
 public:
  Decoder() = default;

  Decoder(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg.validate();
    Rng rng(seed);
    const int d = cfg.hidden_dim;
    init_normal(p_.tok_emb, cfg.vocab_size + 1, d, 0.02, rng);
    init_normal(p_.ph_emb, cfg.phoneme_vocab, d, 0.02, rng);
    init_normal(p_.pos_emb, cfg.max_seq_len, d, 0.02, rng);
    init_normal(p_.level_emb, cfg.num_levels + 1, d, 0.02, rng);
    init_normal(p_.null_ph, 1, d, 0.02, rng);
    init_normal(p_.null_prev, 1, d, 0.02, rng);
    p_.stack = init_stack<T>(cfg.stack_shape(), rng);
    init_normal(p_.head_w, d, cfg.vocab_size, 0.02, rng);
    init_zero(p_.head_b, 1, cfg.vocab_size);
    initialized_ = true;
  }

  Decoder(const ModelConfig& cfg, DecoderParams<T> params) : cfg_(cfg), p_(std::move(params)), initialized_(true) {
    cfg.validate();
  }

  bool initialized() const { return initialized_; }
  const ModelConfig& config() const { return cfg_; }
  DecoderParams<T>& params() { return p_; }
  const DecoderParams<T>& params() const { return p_; }

  /// Embedded input rows for one sequence.
  Mat<T> build_input(const MaskState& canvas, const ConditioningBundle& cond) const {
    require_init();
    std::vector<RowRef> rows;
    append_rows(canvas, cond, rows);
    return embed(rows);
  }

  std::vector<Mat<T>> forward(std::span<const DecoderInput> inputs) const { return run(inputs, nullptr); }

  std::vector<Mat<T>> forward(std::span<const DecoderInput> inputs, DecoderCache<T>& cache) const {
    return run(inputs, &cache);
  }

  std::vector<Mat<T>> forward(const MaskState& canvas, const ConditioningBundle& cond) const {
    DecoderInput in{&canvas, &cond};
    return forward(std::span<const DecoderInput>(&in, 1));
  }

  /// Accumulates gradients of a loss whose logit gradients are `dlogits`
  /// (one matrix per sequence of the cached forward) into `g`.
  void backward(const std::vector<Mat<T>>& dlogits, const DecoderCache<T>& c, DecoderParams<T>& g) const {
    const int d = cfg_.hidden_dim;
    Mat<T> dhead_out(c.head_in.rows(), cfg_.vocab_size);
    for (std::size_t b = 0, r = 0; b < dlogits.size(); r += static_cast<std::size_t>(c.canvas_len[b]), ++b)
      dhead_out.middleRows(static_cast<Eigen::Index>(r), c.canvas_len[b]) = dlogits[b];
    Mat<T> dhead_in;
    linear_backward(c.head_in, dhead_out, p_.head_w, g.head_w, g.head_b, &dhead_in);

    Mat<T> dstack = Mat<T>::Zero(c.layout.rows(), d);
    for (std::size_t b = 0, r = 0; b < dlogits.size(); r += static_cast<std::size_t>(c.canvas_len[b]), ++b)
      dstack.middleRows(c.canvas_start[b], c.canvas_len[b]) =
          dhead_in.middleRows(static_cast<Eigen::Index>(r), c.canvas_len[b]);

    const TransformerStack<T> stack(cfg_.stack_shape(), p_.stack);
    Mat<T> dx = stack.backward(dstack, c.cond, c.layout, c.stack, g.stack);

    for (std::size_t i = 0; i < c.rows.size(); ++i) {
      const auto& rr = c.rows[i];
      const auto ri = static_cast<Eigen::Index>(i);
      source_table(g, rr.source).row(rr.index) += dx.row(ri);
      g.pos_emb.row(rr.pos) += dx.row(ri);
      g.level_emb.row(rr.level) += dx.row(ri);
    }
  }

 private:
  void require_init() const {
    if (!initialized_) throw StateError("decoder used before initialization");
  }

  void append_rows(const MaskState& canvas, const ConditioningBundle& cond, std::vector<RowRef>& rows) const {
    if (cond.level < 1 || cond.level > cfg_.num_levels) invalid("conditioning level out of range");
    if (canvas.size() == 0) invalid("empty canvas");
    const auto first = rows.size();
    if (cond.phonemes_null) {
      rows.push_back({RowSource::NullPhoneme, 0, 0, 0});
    } else {
      if (cond.phonemes.empty()) invalid("empty phoneme sequence");
      for (std::size_t i = 0; i < cond.phonemes.size(); ++i) {
        const int ph = cond.phonemes[i];
        if (ph < 0 || ph >= cfg_.phoneme_vocab) invalid("phoneme id out of range");
        rows.push_back({RowSource::Phoneme, ph, static_cast<int>(i), 0});
      }
    }
    if (cond.level > 1) {
      if (cond.prev_null) {
        rows.push_back({RowSource::NullPrev, 0, 0, cond.level - 1});
      } else {
        if (!cond.prev || cond.prev->tokens.empty()) invalid("level > 1 needs previous-level tokens");
        for (std::size_t i = 0; i < cond.prev->tokens.size(); ++i) {
          const int t = cond.prev->tokens[i];
          if (t < 0 || t >= cfg_.vocab_size) invalid("previous-level token out of range");
          rows.push_back({RowSource::Token, t, static_cast<int>(i), cond.level - 1});
        }
      }
    }
    for (std::size_t i = 0; i < canvas.size(); ++i) {
      const int t = canvas.masked[i] ? cfg_.vocab_size : canvas.tokens[i];
      if (t < 0 || t > cfg_.vocab_size) invalid("canvas token out of range");
      rows.push_back({RowSource::Token, t, static_cast<int>(i), cond.level});
    }
    const auto total = rows.size() - first;
    if (total > static_cast<std::size_t>(cfg_.max_seq_len))
      invalid("input length " + std::to_string(total) + " exceeds max_seq_len " + std::to_string(cfg_.max_seq_len));
  }

  template <class P>
  static auto& source_table(P& p, RowSource s) {
    switch (s) {
      case RowSource::Phoneme: return p.ph_emb;
      case RowSource::NullPhoneme: return p.null_ph;
      case RowSource::NullPrev: return p.null_prev;
      case RowSource::Token: break;
    }
    return p.tok_emb;
  }

  Mat<T> embed(const std::vector<RowRef>& rows) const {
    Mat<T> x(static_cast<Eigen::Index>(rows.size()), cfg_.hidden_dim);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto& r = rows[i];
      x.row(static_cast<Eigen::Index>(i)) =
          source_table(p_, r.source).row(r.index) + p_.pos_emb.row(r.pos) + p_.level_emb.row(r.level);
    }
    return x;
  }

  std::vector<Mat<T>> run(std::span<const DecoderInput> inputs, DecoderCache<T>* cache) const {
    require_init();
    DecoderCache<T> local;
    DecoderCache<T>& c = cache ? *cache : local;
    c = DecoderCache<T>{};
    c.cond.resize(static_cast<Eigen::Index>(inputs.size()), cfg_.speaker_dim);
    for (std::size_t b = 0; b < inputs.size(); ++b) {
      const auto& in = inputs[b];
      if (static_cast<int>(in.cond->speaker.size()) != cfg_.speaker_dim) invalid("speaker vector has wrong dimension");
      for (int j = 0; j < cfg_.speaker_dim; ++j)
        c.cond(static_cast<Eigen::Index>(b), j) = static_cast<T>(in.cond->speaker[static_cast<std::size_t>(j)]);
      const auto before = static_cast<int>(c.rows.size());
      append_rows(*in.canvas, *in.cond, c.rows);
      const int len = static_cast<int>(c.rows.size()) - before;
      c.layout.add(len);
      c.canvas_len.push_back(static_cast<int>(in.canvas->size()));
      c.canvas_start.push_back(before + len - static_cast<int>(in.canvas->size()));
    }
    const Mat<T> x = embed(c.rows);
    const TransformerStack<T> stack(cfg_.stack_shape(), p_.stack);
    const Mat<T> h = stack.forward(x, c.cond, c.layout, cache ? &c.stack : nullptr);

    int total_canvas = 0;
    for (int n : c.canvas_len) total_canvas += n;
    c.head_in.resize(total_canvas, cfg_.hidden_dim);
    for (std::size_t b = 0, r = 0; b < inputs.size(); r += static_cast<std::size_t>(c.canvas_len[b]), ++b)
      c.head_in.middleRows(static_cast<Eigen::Index>(r), c.canvas_len[b]) = h.middleRows(c.canvas_start[b], c.canvas_len[b]);
    const Mat<T> logits = linear(c.head_in, p_.head_w, p_.head_b);

    std::vector<Mat<T>> out(inputs.size());
    for (std::size_t b = 0, r = 0; b < inputs.size(); r += static_cast<std::size_t>(c.canvas_len[b]), ++b)
      out[b] = logits.middleRows(static_cast<Eigen::Index>(r), c.canvas_len[b]);
    return out;
  }

  ModelConfig cfg_;
  DecoderParams<T> p_;
  bool initialized_ = false;
};

/// TokenPredictor over a float decoder; the decoder must outlive the adapter.
class DecoderPredictor : public TokenPredictor {
 public:
  explicit DecoderPredictor(const Decoder<float>& model) : model_(model) {}
  int vocab_size() const override { return model_.config().vocab_size; }
  int num_levels() const override { return model_.config().num_levels; }
  std::vector<Mat<float>> predict(std::span<const DecoderInput> inputs) const override { return model_.forward(inputs); }

 private:
  const Decoder<float>& model_;
};

}  // namespace cod
