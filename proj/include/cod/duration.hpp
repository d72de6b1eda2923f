#pragma once

// Utterance-length regressor: phoneme ids -> transformer encoder -> mean pool
// -> linear -> softplus (seconds). Trained with mean absolute error.

#include <cmath>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cod/checkpoint.hpp"
#include "cod/core.hpp"
#include "cod/model.hpp"
#include "cod/trainer.hpp"
#include "cod/transformer.hpp"

namespace cod {

struct DurationModelConfig {
  int num_layers = 6;
  int hidden_dim = 256;
  int num_heads = 4;
  int mlp_dim = 1024;
  int phoneme_vocab = 24;
  int max_len = 64;

  StackShape stack_shape() const { return {num_layers, hidden_dim, num_heads, mlp_dim, 0}; }

  void validate() const {
    if (num_layers < 0 || hidden_dim < 1 || num_heads < 1 || mlp_dim < 1 || phoneme_vocab < 1 || max_len < 1)
      invalid("duration model dims must be positive");
    if (hidden_dim % num_heads != 0) invalid("hidden_dim must be divisible by num_heads");
  }

  KeyValues to_kv() const {
    return {{"num_layers", std::to_string(num_layers)}, {"hidden_dim", std::to_string(hidden_dim)},
            {"num_heads", std::to_string(num_heads)},   {"mlp_dim", std::to_string(mlp_dim)},
            {"phoneme_vocab", std::to_string(phoneme_vocab)}, {"max_len", std::to_string(max_len)}};
  }

  static DurationModelConfig from_kv(const std::map<std::string, std::string>& kv) {
    DurationModelConfig c;
    auto get = [&](const char* k, int& dst) {
      auto it = kv.find(k);
      if (it == kv.end()) throw FormatError(std::string("missing duration config key ") + k);
      dst = static_cast<int>(parse_int(it->second));
    };
    get("num_layers", c.num_layers);
    get("hidden_dim", c.hidden_dim);
    get("num_heads", c.num_heads);
    get("mlp_dim", c.mlp_dim);
    get("phoneme_vocab", c.phoneme_vocab);
    get("max_len", c.max_len);
    return c;
  }

  std::string first_difference(const DurationModelConfig& o) const {
    const auto a = to_kv(), b = o.to_kv();
    for (std::size_t i = 0; i < a.size(); ++i)
      if (a[i].second != b[i].second) return a[i].first;
    return {};
  }

  friend bool operator==(const DurationModelConfig&, const DurationModelConfig&) = default;
};

struct DurationTrainConfig {
  int batch_size = 32;
  double lr_peak = 1e-3;
  int warmup_steps = 80;
  int total_steps = 500;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.95;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
  double grad_clip = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (batch_size < 1) invalid("batch_size must be >= 1");
    if (!(lr_peak > 0)) invalid("lr_peak must be positive");
    if (warmup_steps < 0 || warmup_steps >= total_steps) invalid("need 0 <= warmup_steps < total_steps");
  }
};

template <class T>
struct DurationParams {
  Mat<T> ph_emb;   // P x D
  Mat<T> pos_emb;  // max_len x D
  StackParams<T> stack;
  Mat<T> head_w;  // D x 1
  Mat<T> head_b;  // 1 x 1

  TensorList<T> tensors() {
    TensorList<T> out{{"ph_emb", &ph_emb}, {"pos_emb", &pos_emb}};
    stack.collect("", out);
    out.emplace_back("head_w", &head_w);
    out.emplace_back("head_b", &head_b);
    return out;
  }

  DurationParams zeros_like() const {
    DurationParams z = *this;
    for (auto& [n, m] : z.tensors()) m->setZero();
    return z;
  }
};

template <class T>
struct DurationCache {
  PackedLayout layout;
  std::vector<std::pair<int, int>> rows;  // (phoneme id, position)
  StackCache<T> stack;
  Mat<T> pooled;  // B x D
  Mat<T> z;       // B x 1 pre-softplus
};

inline double softplus(double z) { return z > 20 ? z : std::log1p(std::exp(z)); }
inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

template <class T>
class DurationModel {
 public:
  DurationModel(const DurationModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg.validate();
    Rng rng(seed);
    init_normal(p_.ph_emb, cfg.phoneme_vocab, cfg.hidden_dim, 0.02, rng);
    init_normal(p_.pos_emb, cfg.max_len, cfg.hidden_dim, 0.02, rng);
    p_.stack = init_stack<T>(cfg.stack_shape(), rng);
    init_normal(p_.head_w, cfg.hidden_dim, 1, 0.02, rng);
    init_zero(p_.head_b, 1, 1);
  }

  const DurationModelConfig& config() const { return cfg_; }
  DurationParams<T>& params() { return p_; }
  const DurationParams<T>& params() const { return p_; }

  /// Predicted seconds for each phoneme sequence.
  std::vector<double> predict(std::span<const std::vector<int>> batch, DurationCache<T>* cache = nullptr) const {
    DurationCache<T> local;
    DurationCache<T>& c = cache ? *cache : local;
    c = DurationCache<T>{};
    for (const auto& ph : batch) {
      if (ph.empty()) invalid("duration: empty phoneme sequence");
      if (static_cast<int>(ph.size()) > cfg_.max_len)
        invalid("duration: sequence longer than max_len " + std::to_string(cfg_.max_len));
      for (std::size_t i = 0; i < ph.size(); ++i) {
        if (ph[i] < 0 || ph[i] >= cfg_.phoneme_vocab) invalid("duration: phoneme id out of range");
        c.rows.emplace_back(ph[i], static_cast<int>(i));
      }
      c.layout.add(static_cast<int>(ph.size()));
    }
    Mat<T> x(static_cast<Eigen::Index>(c.rows.size()), cfg_.hidden_dim);
    for (std::size_t i = 0; i < c.rows.size(); ++i)
      x.row(static_cast<Eigen::Index>(i)) = p_.ph_emb.row(c.rows[i].first) + p_.pos_emb.row(c.rows[i].second);
    const Mat<T> cond(c.layout.batch(), 0);
    const TransformerStack<T> stack(cfg_.stack_shape(), p_.stack);
    const Mat<T> h = stack.forward(x, cond, c.layout, cache ? &c.stack : nullptr);
    c.pooled.resize(c.layout.batch(), cfg_.hidden_dim);
    for (int b = 0; b < c.layout.batch(); ++b)
      c.pooled.row(b) = h.middleRows(c.layout.start(b), c.layout.length(b)).colwise().mean();
    c.z = linear(c.pooled, p_.head_w, p_.head_b);
    std::vector<double> out(batch.size());
    for (std::size_t b = 0; b < batch.size(); ++b) out[b] = softplus(static_cast<double>(c.z(static_cast<Eigen::Index>(b), 0)));
    return out;
  }

  double predict(const std::vector<int>& phonemes) const {
    return predict(std::span<const std::vector<int>>(&phonemes, 1))[0];
  }

  /// Accumulates gradients given d(loss)/d(prediction) per sequence.
  void backward(const std::vector<double>& dpred, const DurationCache<T>& c, DurationParams<T>& g) const {
    const int bsz = c.layout.batch();
    Mat<T> dz(bsz, 1);
    for (int b = 0; b < bsz; ++b) dz(b, 0) = static_cast<T>(dpred[static_cast<std::size_t>(b)] * sigmoid(c.z(b, 0)));
    Mat<T> dpool;
    linear_backward(c.pooled, dz, p_.head_w, g.head_w, g.head_b, &dpool);
    Mat<T> dh(c.layout.rows(), cfg_.hidden_dim);
    for (int b = 0; b < bsz; ++b) {
      const int n = c.layout.length(b);
      dh.middleRows(c.layout.start(b), n).rowwise() = dpool.row(b) / static_cast<T>(n);
    }
    const Mat<T> cond(bsz, 0);
    const TransformerStack<T> stack(cfg_.stack_shape(), p_.stack);
    const Mat<T> dx = stack.backward(dh, cond, c.layout, c.stack, g.stack);
    for (std::size_t i = 0; i < c.rows.size(); ++i) {
      g.ph_emb.row(c.rows[i].first) += dx.row(static_cast<Eigen::Index>(i));
      g.pos_emb.row(c.rows[i].second) += dx.row(static_cast<Eigen::Index>(i));
    }
  }

 private:
  DurationModelConfig cfg_;
  DurationParams<T> p_;
};

struct DurationPair {
  std::vector<int> phonemes;
  double seconds = 0;
};

inline double mean_absolute_error(const DurationModel<float>& model, std::span<const DurationPair> pairs) {
  if (pairs.empty()) invalid("mean_absolute_error: no pairs");
  double sum = 0;
  constexpr std::size_t kChunk = 64;
  for (std::size_t i = 0; i < pairs.size(); i += kChunk) {
    std::vector<std::vector<int>> batch;
    for (std::size_t j = i; j < std::min(pairs.size(), i + kChunk); ++j) batch.push_back(pairs[j].phonemes);
    const auto pred = model.predict(batch);
    for (std::size_t j = 0; j < pred.size(); ++j) sum += std::abs(pred[j] - pairs[i + j].seconds);
  }
  return sum / static_cast<double>(pairs.size());
}

inline constexpr const char* kDurationMagic = "CODD";

class DurationTrainer {
 public:
  DurationTrainer(const DurationModelConfig& mcfg, const DurationTrainConfig& tcfg)
      : tcfg_(tcfg), model_(mcfg, derive_seed(tcfg.seed, "duration-init")), rng_(derive_seed(tcfg.seed, "duration")) {
    tcfg.validate();
    m_ = model_.params().zeros_like();
    v_ = model_.params().zeros_like();
    grad_ = model_.params().zeros_like();
  }

  const DurationModel<float>& model() const { return model_; }
  long steps_done() const { return step_; }

  /// One update on a uniformly drawn batch; returns the batch MAE.
  double train_step(std::span<const DurationPair> data) {
    if (data.empty()) invalid("train_duration: empty dataset");
    std::vector<std::vector<int>> batch;
    std::vector<double> target;
    for (int i = 0; i < tcfg_.batch_size; ++i) {
      const auto& p = data[rng_.below(data.size())];
      batch.push_back(p.phonemes);
      target.push_back(p.seconds);
    }
    DurationCache<float> cache;
    const auto pred = model_.predict(batch, &cache);
    double loss = 0;
    std::vector<double> dpred(pred.size());
    for (std::size_t b = 0; b < pred.size(); ++b) {
      const double e = pred[b] - target[b];
      loss += std::abs(e);
      dpred[b] = (e > 0 ? 1.0 : e < 0 ? -1.0 : 0.0) / static_cast<double>(pred.size());
    }
    loss /= static_cast<double>(pred.size());
    if (!std::isfinite(loss)) throw NumericalError("non-finite duration loss at step " + std::to_string(step_ + 1));

    auto g = grad_.tensors();
    for (auto& [n, t] : g) t->setZero();
    model_.backward(dpred, cache, grad_);
    if (tcfg_.grad_clip > 0) {
      const double norm = global_norm(g);
      if (norm > tcfg_.grad_clip)
        for (auto& [n, t] : g) *t *= static_cast<float>(tcfg_.grad_clip / norm);
    }
    ++step_;
    const double lr = warmup_cosine(step_, tcfg_.lr_peak, tcfg_.warmup_steps, tcfg_.total_steps);
    AdamW opt{tcfg_.adam_beta1, tcfg_.adam_beta2, tcfg_.adam_eps, tcfg_.weight_decay};
    opt.update(model_.params().tensors(), g, m_.tensors(), v_.tensors(), step_, lr);
    return loss;
  }

  void save(const std::filesystem::path& path) const {
    Container c;
    c.magic = kDurationMagic;
    c.meta = model_.config().to_kv();
    c.meta.emplace_back("step", std::to_string(step_));
    auto params = model_.params();
    append_tensors(c, "", params.tensors());
    write_container(path, c);
  }

 private:
  DurationTrainConfig tcfg_;
  DurationModel<float> model_;
  DurationParams<float> m_, v_, grad_;
  Rng rng_;
  long step_ = 0;
};

/// Trains for the configured number of steps (at least 100 pairs required).
inline DurationTrainer train_duration(std::span<const DurationPair> pairs, const DurationModelConfig& mcfg,
                                      const DurationTrainConfig& tcfg) {
  if (pairs.size() < 100) invalid("train_duration needs at least 100 pairs");
  DurationTrainer t(mcfg, tcfg);
  while (t.steps_done() < tcfg.total_steps) t.train_step(pairs);
  return t;
}

inline DurationModel<float> load_duration_model(const std::filesystem::path& path) {
  const auto c = read_container(path, kDurationMagic);
  DurationModel<float> model(DurationModelConfig::from_kv(c.meta_map()), 0);
  auto params = model.params().zeros_like();
  load_tensors(c, "", params.tensors());
  model.params() = std::move(params);
  return model;
}

}  // namespace cod
