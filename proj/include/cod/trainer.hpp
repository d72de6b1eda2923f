#pragma once

// Multi-level masked-token training: one temporal level is drawn per batch
// (biased towards finer levels), its tokens are masked through the cosine
// schedule, the previous level is corrupted and fed as a prefix, and the
// transcript/previous-level conditions are jointly dropped for guidance.

#include <cmath>
#include <filesystem>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "cod/checkpoint.hpp"
#include "cod/core.hpp"
#include "cod/mask_engine.hpp"
#include "cod/model.hpp"
#include "cod/synth_corpus.hpp"

namespace cod {

struct TrainConfig {
  int batch_size = 8;
  double lr_peak = 1e-3;
  int warmup_steps = 500;
  int total_steps = 20000;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.95;
  double adam_eps = 1e-8;
  double weight_decay = 0.05;
  double grad_clip = 1.0;  // global-norm clip, 0 disables
  std::vector<double> level_probs{0.2, 0.3, 0.5};
  double cfg_dropout = 0.1;
  double condition_corruption = 0.1;
  std::uint64_t seed = 0;

  void validate(int num_levels) const {
    if (batch_size < 1) invalid("batch_size must be >= 1");
    if (!(lr_peak > 0)) invalid("lr_peak must be positive");
    if (warmup_steps < 0 || warmup_steps >= total_steps) invalid("need 0 <= warmup_steps < total_steps");
    if (static_cast<int>(level_probs.size()) != num_levels) invalid("need one level probability per level");
    const double sum = std::accumulate(level_probs.begin(), level_probs.end(), 0.0);
    if (std::abs(sum - 1.0) > 1e-9) invalid("level_probs must sum to 1");
    if (!(cfg_dropout >= 0 && cfg_dropout <= 1)) invalid("cfg_dropout outside [0, 1]");
    if (!(condition_corruption >= 0 && condition_corruption <= 1)) invalid("condition_corruption outside [0, 1]");
  }

  KeyValues to_kv() const {
    return {{"batch_size", std::to_string(batch_size)},
            {"lr_peak", format_double(lr_peak)},
            {"warmup_steps", std::to_string(warmup_steps)},
            {"total_steps", std::to_string(total_steps)},
            {"adam_beta1", format_double(adam_beta1)},
            {"adam_beta2", format_double(adam_beta2)},
            {"adam_eps", format_double(adam_eps)},
            {"weight_decay", format_double(weight_decay)},
            {"grad_clip", format_double(grad_clip)},
            {"level_probs", join(level_probs)},
            {"cfg_dropout", format_double(cfg_dropout)},
            {"condition_corruption", format_double(condition_corruption)},
            {"seed", std::to_string(seed)}};
  }
};

struct TrainRecord {
  long step = 0;
  int level = 0;
  double loss = 0;
  double lr = 0;
  double masked_fraction = 0;

  friend bool operator==(const TrainRecord&, const TrainRecord&) = default;
};

inline std::string metrics_header() { return "step,level,loss,lr,masked_fraction\n"; }

inline std::string metrics_line(const TrainRecord& r) {
  return std::to_string(r.step) + ',' + std::to_string(r.level) + ',' + format_double(r.loss) + ',' +
         format_double(r.lr) + ',' + format_double(r.masked_fraction) + '\n';
}

/// Sum of -log softmax(logits_i)[target_i] over masked rows. When `dlogits`
/// is given it receives (softmax - onehot) / denom on masked rows, 0 elsewhere.
template <class T>
double masked_nll_sum(const Mat<T>& logits, const std::vector<TokenId>& targets, const std::vector<std::uint8_t>& mask,
                      Mat<T>* dlogits = nullptr, double denom = 1.0) {
  if (logits.rows() != static_cast<Eigen::Index>(targets.size()) || targets.size() != mask.size())
    invalid("masked_nll: logits, targets and mask lengths differ");
  if (dlogits) *dlogits = Mat<T>::Zero(logits.rows(), logits.cols());
  double sum = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    if (!mask[static_cast<std::size_t>(i)]) continue;
    const TokenId t = targets[static_cast<std::size_t>(i)];
    if (t < 0 || t >= logits.cols()) invalid("masked_nll: target out of range");
    const T mx = logits.row(i).maxCoeff();
    const auto shifted = (logits.row(i).array() - mx).eval();
    const T lse = std::log(shifted.exp().sum());
    sum -= static_cast<double>(shifted(t) - lse);
    if (dlogits) {
      dlogits->row(i) = (shifted - lse).exp().matrix();
      (*dlogits)(i, t) -= T(1);
      dlogits->row(i) /= static_cast<T>(denom);
    }
  }
  return sum;
}

/// Mean negative log-likelihood of the masked positions.
template <class T>
double masked_nll(const Mat<T>& logits, const std::vector<TokenId>& targets, const std::vector<std::uint8_t>& mask) {
  const auto m = std::count(mask.begin(), mask.end(), 1);
  if (m == 0) invalid("masked_nll: no masked positions");
  return masked_nll_sum(logits, targets, mask) / static_cast<double>(m);
}

/// Categorical draw of a 1-indexed level.
inline int sample_level(const std::vector<double>& probs, Rng& rng) {
  if (probs.empty()) invalid("sample_level: empty distribution");
  double sum = 0;
  for (double p : probs) {
    if (!(p >= 0)) invalid("sample_level: negative probability");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-9) invalid("sample_level: probabilities must sum to 1");
  const double u = rng.uniform();
  double acc = 0;
  int last_nonzero = 1;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] > 0) last_nonzero = static_cast<int>(i) + 1;
    acc += probs[i];
    if (u < acc && probs[i] > 0) return static_cast<int>(i) + 1;
  }
  return last_nonzero;
}

/// With probability p, replace transcript and previous-level conditions with
/// their null embeddings. The speaker is always kept.
inline ConditioningBundle apply_cfg_dropout(const ConditioningBundle& cond, double p, Rng& rng) {
  if (!(p >= 0 && p <= 1)) invalid("cfg dropout probability outside [0, 1]");
  return rng.uniform() < p ? cond.nulled() : cond;
}

/// Linear warmup to lr_peak, then cosine decay to 0 at total_steps.
inline double warmup_cosine(long step, double peak, long warmup, long total) {
  if (step <= 0) return 0.0;
  if (step < warmup) return peak * static_cast<double>(step) / static_cast<double>(warmup);
  if (step >= total) return 0.0;
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  return peak * 0.5 * (1.0 + std::cos(M_PI * progress));
}

inline double lr_at(long step, const TrainConfig& c) {
  return warmup_cosine(step, c.lr_peak, c.warmup_steps, c.total_steps);
}

/// Decoupled-weight-decay Adam over parallel tensor lists. Tensors whose name
/// ends in "_w" are decayed; embeddings, biases and null embeddings are not.
struct AdamW {
  double beta1, beta2, eps, weight_decay;

  template <class T>
  void update(const TensorList<T>& params, const TensorList<T>& grads, const TensorList<T>& m, const TensorList<T>& v,
              long step, double lr) const {
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = *params[i].second;
      const auto& g = *grads[i].second;
      auto& mi = *m[i].second;
      auto& vi = *v[i].second;
      const bool decay = params[i].first.ends_with("_w");
      mi = static_cast<T>(beta1) * mi + static_cast<T>(1 - beta1) * g;
      vi = static_cast<T>(beta2) * vi + static_cast<T>(1 - beta2) * g.cwiseAbs2();
      if (decay) p *= static_cast<T>(1.0 - lr * weight_decay);
      p.array() -= static_cast<T>(lr / bc1) * mi.array() / ((vi.array() / static_cast<T>(bc2)).sqrt() + static_cast<T>(eps));
    }
  }
};

template <class T>
double global_norm(const TensorList<T>& grads) {
  double s = 0;
  for (const auto& [n, g] : grads) s += static_cast<double>(g->squaredNorm());
  return std::sqrt(s);
}

/// Builds the training example for one utterance at `level`: masked canvas,
/// targets and conditioning (corruption and guidance dropout applied).
struct TrainExample {
  MaskState canvas;
  std::vector<TokenId> targets;
  std::vector<std::uint8_t> mask;
  ConditioningBundle cond;
};

inline TrainExample make_train_example(const SynthUtterance& u, int level, const Mat<float>& speakers,
                                       const TrainConfig& cfg, int vocab_size, Rng& rng) {
  if (level < 1 || static_cast<std::size_t>(level) > u.levels.size()) invalid("utterance lacks the sampled level");
  TrainExample ex;
  ex.targets = u.levels[static_cast<std::size_t>(level - 1)].tokens;
  ex.mask = sample_training_mask(static_cast<int>(ex.targets.size()), rng);
  ex.canvas = MaskState::from_tokens(ex.targets, ex.mask);
  ex.cond.phonemes = u.phonemes;
  ex.cond.speaker.assign(speakers.row(u.speaker_id).data(), speakers.row(u.speaker_id).data() + speakers.cols());
  ex.cond.level = level;
  if (level > 1)
    ex.cond.prev = corrupt_condition(u.levels[static_cast<std::size_t>(level - 2)], cfg.condition_corruption, vocab_size, rng);
  ex.cond = apply_cfg_dropout(ex.cond, cfg.cfg_dropout, rng);
  return ex;
}

inline constexpr const char* kDecoderMagic = "CODM";

/// Hierarchy description stored next to a decoder checkpoint.
inline KeyValues hierarchy_to_kv(const HierarchySpec& h) {
  return {{"hier.num_levels", std::to_string(h.num_levels)},
          {"hier.finest_rate_hz", format_double(h.finest_rate_hz)},
          {"hier.factors", join(h.decimation_factors)},
          {"hier.vocab_size", std::to_string(h.vocab_size)},
          {"hier.strategy", to_string(h.strategy)}};
}

inline HierarchySpec hierarchy_from_kv(const std::map<std::string, std::string>& kv) {
  auto get = [&](const char* k) -> const std::string& {
    auto it = kv.find(k);
    if (it == kv.end()) throw FormatError(std::string("checkpoint is missing ") + k);
    return it->second;
  };
  HierarchySpec h;
  try {
    h.num_levels = static_cast<int>(parse_int(get("hier.num_levels")));
    h.finest_rate_hz = parse_double(get("hier.finest_rate_hz"));
    h.decimation_factors.clear();
    for (auto f : split(get("hier.factors"), ',')) h.decimation_factors.push_back(static_cast<int>(parse_int(f)));
    h.vocab_size = static_cast<int>(parse_int(get("hier.vocab_size")));
    h.strategy = parse_strategy(get("hier.strategy"));
    h.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("bad hierarchy in checkpoint: ") + e.what());
  }
  return h;
}

inline std::vector<NamedTensor> codebooks_to_named(std::span<const Codebook> books) {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < books.size(); ++i) out.push_back(to_named("codebook." + std::to_string(i), books[i].entries));
  return out;
}

inline std::vector<Codebook> codebooks_from(const Container& c) {
  std::vector<Codebook> out;
  for (std::size_t i = 0;; ++i) {
    const auto* t = c.find("codebook." + std::to_string(i));
    if (!t) break;
    Mat<float> e(static_cast<Eigen::Index>(t->rows), static_cast<Eigen::Index>(t->cols));
    from_named(c, t->name, e);
    out.emplace_back(std::move(e));
  }
  return out;
}

class Trainer {
 public:
  Trainer(const ModelConfig& mcfg, const TrainConfig& tcfg, Mat<float> speakers)
      : tcfg_(tcfg),
        speakers_(std::move(speakers)),
        model_(mcfg, derive_seed(tcfg.seed, "init")),
        rng_(derive_seed(tcfg.seed, "train")) {
    tcfg.validate(mcfg.num_levels);
    if (speakers_.cols() != mcfg.speaker_dim) invalid("speaker table width must equal speaker_dim");
    m_ = model_.params().zeros_like();
    v_ = model_.params().zeros_like();
    grad_ = model_.params().zeros_like();
  }

  const Decoder<float>& model() const { return model_; }
  Decoder<float>& model() { return model_; }
  const TrainConfig& train_config() const { return tcfg_; }
  long steps_done() const { return step_; }
  const Rng& rng() const { return rng_; }

  /// One optimizer update on `batch`.
  TrainRecord train_step(std::span<const SynthUtterance> batch) {
    if (batch.empty()) invalid("train_step: empty batch");
    const auto& mc = model_.config();
    const int level = sample_level(tcfg_.level_probs, rng_);
    std::vector<TrainExample> examples;
    examples.reserve(batch.size());
    for (const auto& u : batch) {
      if (static_cast<int>(u.levels.size()) != mc.num_levels) invalid("utterance level count differs from model");
      examples.push_back(make_train_example(u, level, speakers_, tcfg_, mc.vocab_size, rng_));
    }
    std::vector<DecoderInput> inputs;
    long masked = 0, positions = 0;
    for (const auto& ex : examples) {
      inputs.push_back({&ex.canvas, &ex.cond});
      masked += std::count(ex.mask.begin(), ex.mask.end(), 1);
      positions += static_cast<long>(ex.mask.size());
    }

    DecoderCache<float> cache;
    const auto logits = model_.forward(inputs, cache);
    std::vector<Mat<float>> dlogits(examples.size());
    double sum = 0;
    for (std::size_t b = 0; b < examples.size(); ++b)
      sum += masked_nll_sum(logits[b], examples[b].targets, examples[b].mask, &dlogits[b], static_cast<double>(masked));
    const double loss = sum / static_cast<double>(masked);

    TrainRecord rec{step_ + 1, level, loss, lr_at(step_ + 1, tcfg_), static_cast<double>(masked) / positions};
    if (!std::isfinite(loss))
      throw NumericalError("non-finite loss at step " + std::to_string(rec.step) + " (level " +
                           std::to_string(level) + ", lr " + format_double(rec.lr) + ")");

    auto g = grad_.tensors();
    for (auto& [n, t] : g) t->setZero();
    model_.backward(dlogits, cache, grad_);
    if (tcfg_.grad_clip > 0) {
      const double norm = global_norm(g);
      if (!std::isfinite(norm)) throw NumericalError("non-finite gradient at step " + std::to_string(rec.step));
      if (norm > tcfg_.grad_clip)
        for (auto& [n, t] : g) *t *= static_cast<float>(tcfg_.grad_clip / norm);
    }
    ++step_;
    AdamW opt{tcfg_.adam_beta1, tcfg_.adam_beta2, tcfg_.adam_eps, tcfg_.weight_decay};
    opt.update(model_.params().tensors(), g, m_.tensors(), v_.tensors(), step_, rec.lr);
    return rec;
  }

  /// Draws batch_size utterances uniformly (with replacement) and trains on them.
  TrainRecord train_step(const std::vector<SynthUtterance>& data) {
    if (data.empty()) invalid("train_step: empty dataset");
    std::vector<SynthUtterance> batch;
    batch.reserve(static_cast<std::size_t>(tcfg_.batch_size));
    for (int i = 0; i < tcfg_.batch_size; ++i) batch.push_back(data[rng_.below(data.size())]);
    return train_step(std::span<const SynthUtterance>(batch));
  }

  Container to_container(const KeyValues& extra_meta = {}, const std::vector<NamedTensor>& extra = {}) const {
    Container c;
    c.magic = kDecoderMagic;
    for (const auto& kv : model_.config().to_kv()) c.meta.push_back(kv);
    for (const auto& [k, v] : tcfg_.to_kv()) c.meta.emplace_back("train." + k, v);
    c.meta.emplace_back("step", std::to_string(step_));
    c.meta.emplace_back("rng_state", rng_.state());
    for (const auto& kv : extra_meta) c.meta.push_back(kv);
    auto params = model_.params();
    auto m = m_, v = v_;
    append_tensors(c, "", params.tensors());
    append_tensors(c, "adam_m.", m.tensors());
    append_tensors(c, "adam_v.", v.tensors());
    c.tensors.push_back(to_named("speakers", speakers_));
    for (const auto& t : extra) c.tensors.push_back(t);
    return c;
  }

  void save(const std::filesystem::path& path, const KeyValues& extra_meta = {},
            const std::vector<NamedTensor>& extra = {}) const {
    write_container(path, to_container(extra_meta, extra));
  }

  /// Restores parameters, optimizer moments, step counter and rng state. The
  /// stored model config must match this trainer's; nothing changes on error.
  void load(const std::filesystem::path& path) { restore(read_container(path, kDecoderMagic)); }

  void restore(const Container& c) {
    const auto meta = c.meta_map();
    const auto stored = ModelConfig::from_kv(meta);
    const auto diff = model_.config().first_difference(stored);
    if (!diff.empty()) throw ConfigMismatch(diff);
    auto params = model_.params().zeros_like();
    auto m = params, v = params;
    load_tensors(c, "", params.tensors());
    load_tensors(c, "adam_m.", m.tensors());
    load_tensors(c, "adam_v.", v.tensors());
    auto it = meta.find("step");
    if (it == meta.end()) throw FormatError("checkpoint is missing 'step'");
    const long step = static_cast<long>(parse_int(it->second));
    it = meta.find("rng_state");
    if (it == meta.end()) throw FormatError("checkpoint is missing 'rng_state'");
    Rng rng;
    rng.set_state(it->second);

    model_.params() = std::move(params);
    m_ = std::move(m);
    v_ = std::move(v);
    step_ = step;
    rng_ = rng;
  }

 private:
  TrainConfig tcfg_;
  Mat<float> speakers_;
  Decoder<float> model_;
  DecoderParams<float> m_, v_, grad_;
  Rng rng_;
  long step_ = 0;
};

/// Reads just the decoder (for inference) from a trainer checkpoint.
inline Decoder<float> load_decoder(const Container& c) {
  const auto cfg = ModelConfig::from_kv(c.meta_map());
  Decoder<float> model(cfg, 0);
  auto params = model.params().zeros_like();
  load_tensors(c, "", params.tensors());
  model.params() = std::move(params);
  return model;
}

inline Decoder<float> load_decoder(const std::filesystem::path& path) {
  return load_decoder(read_container(path, kDecoderMagic));
}

}  // namespace cod
