#pragma once

// Metrics (leave-one-out conditional cross-entropy, generation token error
// rate against the noise-free expansion) and the level/strategy ablation grid.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cod/core.hpp"
#include "cod/io.hpp"
#include "cod/mask_engine.hpp"
#include "cod/model.hpp"
#include "cod/sampler.hpp"
#include "cod/synth_corpus.hpp"
#include "cod/token_hierarchy.hpp"
#include "cod/trainer.hpp"

namespace cod {

inline Mat<float> speaker_table(const SynthLaw& law) { return law.speakers; }

inline std::vector<float> speaker_row(const Mat<float>& table, int id) {
  if (id < 0 || id >= table.rows()) invalid("speaker id out of range");
  return {table.row(id).data(), table.row(id).data() + table.cols()};
}

/// Exact predictor for the synthetic law. Level 1 is a point mass on the
/// phoneme-driven chain; finer levels use the Bayes distribution given the
/// previous level. Null conditions give flat logits.
class OraclePredictor : public TokenPredictor {
 public:
  explicit OraclePredictor(const SynthLaw& law) : law_(law) {}

  int vocab_size() const override { return law_.spec.vocab_size; }
  int num_levels() const override { return law_.spec.num_levels; }

  std::vector<Mat<float>> predict(std::span<const DecoderInput> inputs) const override {
    std::vector<Mat<float>> out;
    const int v = vocab_size();
    for (const auto& in : inputs) {
      const auto n = static_cast<int>(in.canvas->size());
      const auto& c = *in.cond;
      if (c.phonemes_null || (c.level > 1 && c.prev_null)) {
        out.push_back(Mat<float>::Zero(n, v));
        continue;
      }
      const int spk = speaker_id(c.speaker);
      Mat<double> p;
      if (c.level == 1) {
        p = Mat<double>::Zero(n, v);
        const auto tokens = law_.coarse_tokens(c.phonemes, n);
        for (int j = 0; j < n; ++j) p(j, tokens[static_cast<std::size_t>(j)]) = 1.0;
      } else {
        p = oracle_fine_distribution(*c.prev, spk, law_, n);
      }
      out.push_back(p.unaryExpr([](double x) { return x > 0 ? std::log(x) : -1e4; }).cast<float>());
    }
    return out;
  }

 private:
  int speaker_id(const std::vector<float>& vec) const {
    for (int s = 0; s < law_.spec.num_speakers; ++s)
      if (law_.speaker_vector(s) == vec) return s;
    invalid("oracle: unknown speaker vector");
  }

  const SynthLaw& law_;
};

/// Leave-one-out cross-entropy (nats per token) at `level`: each position is
/// masked alone with every other token of the level visible, conditioned on
/// the ground-truth previous level.
inline double conditional_ce(const TokenPredictor& model, std::span<const SynthUtterance> data, int level,
                             const Mat<float>& speakers, int max_batch = 256) {
  if (level < 1 || level > model.num_levels()) invalid("conditional_ce: level out of range");
  double sum = 0;
  long count = 0;
  for (const auto& u : data) {
    if (static_cast<int>(u.levels.size()) != model.num_levels()) invalid("conditional_ce: level count mismatch");
    ConditioningBundle cond;
    cond.phonemes = u.phonemes;
    cond.speaker = speaker_row(speakers, u.speaker_id);
    cond.level = level;
    if (level > 1) cond.prev = u.levels[static_cast<std::size_t>(level - 2)];
    const auto& target = u.levels[static_cast<std::size_t>(level - 1)].tokens;
    const int n = static_cast<int>(target.size());
    for (int start = 0; start < n; start += max_batch) {
      const int end = std::min(n, start + max_batch);
      std::vector<MaskState> canvases;
      for (int i = start; i < end; ++i) {
        std::vector<std::uint8_t> mask(static_cast<std::size_t>(n), 0);
        mask[static_cast<std::size_t>(i)] = 1;
        canvases.push_back(MaskState::from_tokens(target, mask));
      }
      std::vector<DecoderInput> inputs;
      for (const auto& c : canvases) inputs.push_back({&c, &cond});
      const auto logits = model.predict(inputs);
      for (int i = start; i < end; ++i) {
        const auto row = logits[static_cast<std::size_t>(i - start)].row(i).cast<double>().eval();
        const double mx = row.maxCoeff();
        const double lse = mx + std::log((row.array() - mx).exp().sum());
        sum += lse - row(target[static_cast<std::size_t>(i)]);
        ++count;
      }
    }
  }
  if (count == 0) invalid("conditional_ce: no positions");
  return sum / static_cast<double>(count);
}

struct TerResult {
  double ter = 0;
  long mismatches = 0;
  long positions = 0;
};

/// Generates every utterance with its ground-truth duration and speaker and
/// compares the finest level with the noise-free expansion of the corpus
/// level-1 chain. `data` holds utterances in the model's level view and
/// `corpus` the same utterances (matched by utt_id) as generated.
inline TerResult generation_ter(const TokenPredictor& model, std::span<const SynthUtterance> data,
                                std::span<const SynthUtterance> corpus, const SynthLaw& law, const HierarchySpec& spec,
                                const SamplerConfig& scfg, const Mat<float>& speakers, int batch = 16) {
  std::map<std::string, const SynthUtterance*> by_id;
  for (const auto& u : corpus) by_id[u.utt_id] = &u;
  std::vector<const SynthUtterance*> order;
  for (const auto& u : data) order.push_back(&u);
  std::sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->utt_id < b->utt_id; });

  TerResult r;
  for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(batch)) {
    std::vector<GenerateRequest> reqs;
    const auto end = std::min(order.size(), i + static_cast<std::size_t>(batch));
    for (std::size_t j = i; j < end; ++j) {
      const auto& u = *order[j];
      reqs.push_back({u.phonemes, speaker_row(speakers, u.speaker_id), u.duration_s, derive_seed(scfg.seed, u.utt_id)});
    }
    const auto gen = generate_batch(model, reqs, scfg, spec);
    for (std::size_t j = i; j < end; ++j) {
      const auto& u = *order[j];
      const auto it = by_id.find(u.utt_id);
      if (it == by_id.end()) invalid("generation_ter: " + u.utt_id + " missing from corpus");
      const auto ref = map_expansion(it->second->levels.front().tokens, u.speaker_id, u.duration_s, law);
      const auto& hyp = gen[j - i].levels.back().tokens;
      if (hyp.size() != ref.size()) invalid("generation_ter: finest length differs from reference");
      for (std::size_t k = 0; k < ref.size(); ++k) r.mismatches += hyp[k] != ref[k];
      r.positions += static_cast<long>(ref.size());
    }
  }
  if (r.positions == 0) invalid("generation_ter: empty dataset");
  r.ter = static_cast<double>(r.mismatches) / static_cast<double>(r.positions);
  return r;
}

// ---------------------------------------------------------------------------
// Level views and coarse-token construction for the ablation grid.

struct AblationConfig {
  std::string name;
  int levels = 3;
  Strategy strategy = Strategy::Decimated;
};

inline std::string default_config_name(int levels, Strategy s) {
  return to_string(s) + "-" + std::to_string(levels);
}

/// Hierarchy of a k-level view: the finest k factors of the corpus hierarchy.
inline HierarchySpec view_spec(const SynthSpec& corpus, int levels, Strategy strategy) {
  const auto h = corpus.hierarchy();
  if (levels < 1 || levels > h.num_levels) invalid("view must have between 1 and " + std::to_string(h.num_levels) + " levels");
  HierarchySpec v = h;
  v.num_levels = levels;
  v.decimation_factors.assign(h.decimation_factors.end() - levels, h.decimation_factors.end());
  v.strategy = strategy;
  v.validate();
  return v;
}

/// Level sampling probabilities for k levels: the three-level split
/// [0.2, 0.3, 0.5] restricted to the finest k levels and renormalized.
inline std::vector<double> default_level_probs(int levels) {
  const std::vector<double> base{0.2, 0.3, 0.5};
  if (levels < 1 || levels > 3) invalid("default level probabilities exist for 1 to 3 levels");
  std::vector<double> p(base.end() - levels, base.end());
  const double s = std::accumulate(p.begin(), p.end(), 0.0);
  for (auto& x : p) x /= s;
  return p;
}

/// Trains the coarse-level codebooks of an extra-quantizer view on `train`:
/// one shared codebook, or one per coarse level.
inline std::vector<Codebook> train_codebooks(std::span<const SynthUtterance> train, const SynthLaw& law,
                                             const HierarchySpec& view, std::uint64_t seed, int epochs = 3,
                                             int utts_per_batch = 32) {
  if (view.strategy == Strategy::Decimated || view.num_levels == 1) return {};
  Rng rng(derive_seed(seed, "codebooks"));
  std::vector<std::vector<Mat<float>>> pooled;  // per utterance, per level
  for (const auto& u : train) pooled.push_back(pooled_levels(synth_frames(u, law), view));

  const int coarse = view.num_levels - 1;
  const int n_books = view.strategy == Strategy::ExtraShared ? 1 : coarse;
  auto level_frames = [&](int l, std::size_t from, std::size_t to) {
    long rows = 0;
    for (std::size_t i = from; i < to; ++i) rows += pooled[i][static_cast<std::size_t>(l - 1)].rows();
    Mat<float> m(rows, law.spec.frame_dim);
    long r = 0;
    for (std::size_t i = from; i < to; ++i) {
      const auto& f = pooled[i][static_cast<std::size_t>(l - 1)];
      m.middleRows(r, f.rows()) = f;
      r += f.rows();
    }
    return m;
  };

  std::vector<Codebook> books;
  for (int b = 0; b < n_books; ++b) {
    // Seed entries with random pooled frames of the level(s) the book serves.
    Mat<float> init(view.vocab_size, law.spec.frame_dim);
    for (int k = 0; k < view.vocab_size; ++k) {
      const int l = n_books == 1 ? 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(coarse))) : b + 1;
      const auto& f = pooled[rng.below(pooled.size())][static_cast<std::size_t>(l - 1)];
      init.row(k) = f.row(static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(f.rows()))));
    }
    books.emplace_back(std::move(init));
  }
  for (int e = 0; e < epochs; ++e)
    for (std::size_t i = 0; i < pooled.size(); i += static_cast<std::size_t>(utts_per_batch)) {
      const auto to = std::min(pooled.size(), i + static_cast<std::size_t>(utts_per_batch));
      for (int l = 1; l <= coarse; ++l)
        books[static_cast<std::size_t>(n_books == 1 ? 0 : l - 1)].ema_update(level_frames(l, i, to), rng);
    }
  return books;
}

/// Re-expresses utterances in a view: Decimated keeps the finest k corpus
/// levels; extra-quantizer strategies quantize pooled acoustic frames.
inline std::vector<SynthUtterance> make_view(std::span<const SynthUtterance> data, const SynthLaw& law,
                                             const HierarchySpec& view, std::span<const Codebook> codebooks = {}) {
  std::vector<SynthUtterance> out;
  out.reserve(data.size());
  for (const auto& u : data) {
    SynthUtterance w = u;
    if (view.strategy == Strategy::Decimated || view.num_levels == 1) {
      w.levels.assign(u.levels.end() - view.num_levels, u.levels.end());
      for (int l = 1; l <= view.num_levels; ++l) {
        w.levels[static_cast<std::size_t>(l - 1)].level = l;
        w.levels[static_cast<std::size_t>(l - 1)].rate_hz = view.rate(l);
      }
    } else {
      const auto frames = synth_frames(u, law);
      w.levels = build_hierarchy(u.levels.back(), view, &frames, codebooks);
    }
    out.push_back(std::move(w));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ablation harness.

struct AblationSettings {
  std::vector<AblationConfig> configs;
  int seeds = 3;
  ModelConfig model;
  TrainConfig train;  // level_probs are replaced per config
  SamplerConfig sampler;
  int eval_utts = 200;       // test utterances used for TER and cross-entropy
  int checkpoint_every = 1000;
  std::filesystem::path work_dir;
};

struct AblationRow {
  std::string config;
  int levels = 0;
  Strategy strategy = Strategy::Decimated;
  int seed = 0;
  int level = 0;
  double cond_ce = 0;
  double ter = 0;
  double train_seconds = 0;
};

struct AblationSummary {
  std::string config;
  int levels = 0;
  Strategy strategy = Strategy::Decimated;
  double mean_ter = 0, std_ter = 0, mean_ce = 0, std_ce = 0;
};

inline std::string raw_csv(const std::vector<AblationRow>& rows) {
  std::string s = "config,seed,level,cond_ce,ter\n";
  for (const auto& r : rows)
    s += r.config + ',' + std::to_string(r.seed) + ',' + std::to_string(r.level) + ',' + format_double(r.cond_ce) + ',' +
         format_double(r.ter) + '\n';
  return s;
}

inline std::pair<double, double> mean_std(const std::vector<double>& xs) {
  if (xs.empty()) return {0, 0};
  const double m = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  if (xs.size() < 2) return {m, 0};
  double ss = 0;
  for (double x : xs) ss += (x - m) * (x - m);
  return {m, std::sqrt(ss / static_cast<double>(xs.size() - 1))};
}

/// One summary row per config; cross-entropy is that of the finest level.
inline std::vector<AblationSummary> summarize(const std::vector<AblationRow>& rows) {
  std::vector<AblationSummary> out;
  std::vector<std::string> names;
  for (const auto& r : rows)
    if (std::find(names.begin(), names.end(), r.config) == names.end()) names.push_back(r.config);
  for (const auto& name : names) {
    AblationSummary s{name};
    std::map<int, double> ter_by_seed;
    std::vector<double> ces;
    for (const auto& r : rows) {
      if (r.config != name) continue;
      s.levels = r.levels;
      s.strategy = r.strategy;
      ter_by_seed[r.seed] = r.ter;
      if (r.level == r.levels) ces.push_back(r.cond_ce);
    }
    std::vector<double> ters;
    for (const auto& [seed, t] : ter_by_seed) ters.push_back(t);
    std::tie(s.mean_ter, s.std_ter) = mean_std(ters);
    std::tie(s.mean_ce, s.std_ce) = mean_std(ces);
    out.push_back(s);
  }
  return out;
}

inline std::string summary_csv(const std::vector<AblationSummary>& rows) {
  std::string s = "config,levels,strategy,mean_ter,std_ter,mean_ce,std_ce\n";
  for (const auto& r : rows)
    s += r.config + ',' + std::to_string(r.levels) + ',' + to_string(r.strategy) + ',' + format_double(r.mean_ter) +
         ',' + format_double(r.std_ter) + ',' + format_double(r.mean_ce) + ',' + format_double(r.std_ce) + '\n';
  return s;
}

/// Cached result of one (config, seed) run, so grids resume cheaply.
inline std::string result_record(const std::vector<AblationRow>& rows) {
  std::string s;
  for (const auto& r : rows)
    s += r.config + ',' + std::to_string(r.levels) + ',' + to_string(r.strategy) + ',' + std::to_string(r.seed) + ',' +
         std::to_string(r.level) + ',' + format_double(r.cond_ce) + ',' + format_double(r.ter) + ',' +
         format_double(r.train_seconds) + '\n';
  return s;
}

inline std::vector<AblationRow> parse_result_record(std::string_view text) {
  std::vector<AblationRow> rows;
  for (auto line : split(text, '\n')) {
    if (trim(line).empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != 8) throw FormatError("malformed ablation result line");
    rows.push_back({std::string(f[0]), static_cast<int>(parse_int(f[1])), parse_strategy(f[2]),
                    static_cast<int>(parse_int(f[3])), static_cast<int>(parse_int(f[4])), parse_double(f[5]),
                    parse_double(f[6]), parse_double(f[7])});
  }
  return rows;
}

using AblationLog = std::function<void(const std::string&)>;

/// Trains and evaluates one (config, seed) cell, resuming from its checkpoint
/// and reusing its cached result when present.
inline std::vector<AblationRow> run_ablation_cell(const Dataset& data, const SynthLaw& law,
                                                  const AblationSettings& s, const AblationConfig& cfg, int seed,
                                                  const AblationLog& log = {}) {
  namespace fs = std::filesystem;
  const auto stem = cfg.name + "_s" + std::to_string(seed);
  const auto result_path = s.work_dir / (stem + ".result");
  if (fs::exists(result_path)) return parse_result_record(read_file(result_path));

  const auto view = view_spec(data.spec, cfg.levels, cfg.strategy);
  const auto books = train_codebooks(data.train, law, view, static_cast<std::uint64_t>(seed));
  const auto train = make_view(data.train, law, view, books);
  std::vector<SynthUtterance> test(data.test.begin(),
                                   data.test.begin() + std::min<std::size_t>(data.test.size(), static_cast<std::size_t>(s.eval_utts)));
  const auto test_view = make_view(test, law, view, books);

  ModelConfig mc = s.model;
  mc.num_levels = cfg.levels;
  mc.vocab_size = view.vocab_size;
  mc.phoneme_vocab = data.spec.phoneme_vocab;
  mc.speaker_dim = data.spec.speaker_dim;
  TrainConfig tc = s.train;
  tc.level_probs = default_level_probs(cfg.levels);
  tc.seed = static_cast<std::uint64_t>(seed);
  const auto speakers = speaker_table(law);
  Trainer trainer(mc, tc, speakers);

  const auto ckpt = s.work_dir / (stem + ".codm");
  double seconds = 0;
  if (fs::exists(ckpt)) {
    const auto c = read_container(ckpt, kDecoderMagic);
    trainer.restore(c);
    const auto meta = c.meta_map();
    if (auto it = meta.find("train_seconds"); it != meta.end()) seconds = parse_double(it->second);
    if (log) log(stem + ": resumed at step " + std::to_string(trainer.steps_done()));
  }
  auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] { return seconds + std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };
  while (trainer.steps_done() < tc.total_steps) {
    const auto rec = trainer.train_step(train);
    if (rec.step % s.checkpoint_every == 0 || rec.step == tc.total_steps) {
      auto meta = hierarchy_to_kv(view);
      meta.emplace_back("train_seconds", format_double(elapsed()));
      trainer.save(ckpt, meta, codebooks_to_named(books));
      if (log) log(stem + ": step " + std::to_string(rec.step) + " loss " + format_double(rec.loss));
    }
  }
  const double train_seconds = elapsed();

  const DecoderPredictor pred(trainer.model());
  SamplerConfig sc = s.sampler;
  sc.steps_per_level.assign(static_cast<std::size_t>(cfg.levels), s.sampler.steps_per_level.front());
  sc.seed = derive_seed(static_cast<std::uint64_t>(seed), "generate");
  const auto ter = generation_ter(pred, test_view, test, law, view, sc, speakers).ter;
  std::vector<AblationRow> rows;
  for (int l = 1; l <= cfg.levels; ++l)
    rows.push_back({cfg.name, cfg.levels, cfg.strategy, seed, l, conditional_ce(pred, test_view, l, speakers), ter,
                    train_seconds});
  write_file_atomic(result_path, result_record(rows));
  if (log) log(stem + ": ter " + format_double(ter));
  return rows;
}

/// Runs the whole grid serially (configs x seeds 0..seeds-1) and writes
/// raw.csv and summary.csv into the work directory.
inline std::vector<AblationRow> run_ablation(const Dataset& data, const AblationSettings& s,
                                             const AblationLog& log = {}) {
  std::filesystem::create_directories(s.work_dir);
  const SynthLaw law(data.spec);
  std::vector<AblationRow> rows;
  for (const auto& cfg : s.configs)
    for (int seed = 0; seed < s.seeds; ++seed)
      for (auto& r : run_ablation_cell(data, law, s, cfg, seed, log)) rows.push_back(r);
  write_file_atomic(s.work_dir / "raw.csv", raw_csv(rows));
  write_file_atomic(s.work_dir / "summary.csv", summary_csv(summarize(rows)));
  return rows;
}

}  // namespace cod
