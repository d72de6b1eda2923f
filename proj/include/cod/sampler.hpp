#pragma once

// Coarse-to-fine inference: each level is decoded from a fully masked canvas
// by iterative confidence-based unmasking, guided by the previous level.

#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cod/core.hpp"
#include "cod/io.hpp"
#include "cod/mask_engine.hpp"
#include "cod/model.hpp"
#include "cod/token_hierarchy.hpp"

namespace cod {

struct SamplerConfig {
  std::vector<int> steps_per_level{20, 20, 20};
  double guidance_start = 3.0;
  double guidance_end = 0.75;
  double noise_var_start = 3.0;
  double noise_var_end = 0.0;
  double temperature = 1.0;
  std::uint64_t seed = 0;

  int steps(int level) const {
    if (level < 1 || level > static_cast<int>(steps_per_level.size())) invalid("no step count for this level");
    return steps_per_level[static_cast<std::size_t>(level - 1)];
  }

  void validate(int num_levels) const {
    if (static_cast<int>(steps_per_level.size()) != num_levels) invalid("need one step count per level");
    for (int t : steps_per_level)
      if (t < 1) invalid("steps per level must be >= 1");
    if (!(noise_var_start >= noise_var_end && noise_var_end >= 0)) invalid("need noise_var_start >= noise_var_end >= 0");
    if (!(temperature > 0)) invalid("temperature must be positive");
  }

  KeyValues to_kv() const {
    return {{"steps", join(steps_per_level)},
            {"guidance_start", format_double(guidance_start)},
            {"guidance_end", format_double(guidance_end)},
            {"noise_var_start", format_double(noise_var_start)},
            {"noise_var_end", format_double(noise_var_end)},
            {"temperature", format_double(temperature)},
            {"seed", std::to_string(seed)}};
  }
};

namespace detail {
inline double ramp(int step, int total, double a, double b) {
  if (total < 1 || step < 1 || step > total) invalid("ramp: need 1 <= step <= T");
  if (total == 1) return a;
  return a + (b - a) * static_cast<double>(step - 1) / (total - 1);
}
}  // namespace detail

/// Guidance weight at decode step `step` (1-based) of T, linear from w_start to w_end.
inline double guidance_at(int step, int total, double w_start, double w_end) {
  return detail::ramp(step, total, w_start, w_end);
}

/// Logit-noise variance at decode step `step` of T, linear from v_start to v_end.
inline double noise_variance_at(int step, int total, double v_start, double v_end) {
  return detail::ramp(step, total, v_start, v_end);
}

/// uncond + w (cond - uncond)
inline Mat<float> cfg_combine(const Mat<float>& cond, const Mat<float>& uncond, double w) {
  if (cond.rows() != uncond.rows() || cond.cols() != uncond.cols()) invalid("cfg_combine: shape mismatch");
  if (w == 1.0) return cond;
  if (w == 0.0) return uncond;
  return uncond + static_cast<float>(w) * (cond - uncond);
}

struct StepDiagnostics {
  int level = 0;
  int step = 0;
  double guidance = 0;
  double noise_var = 0;
  int masked_count = 0;
};

struct LevelDecode {
  TokenSequence seq;
  std::vector<StepDiagnostics> steps;
};

/// One sequence to decode at a level, with its own rng stream.
struct DecodeJob {
  const ConditioningBundle* cond = nullptr;
  int canvas_len = 0;
  Rng* rng = nullptr;
};

/// Draws a token for every masked position and returns (tokens, confidences).
inline void sample_masked(const Mat<float>& logits, const MaskState& canvas, double noise_var, double temperature,
                          Rng& rng, std::vector<TokenId>& tokens, std::vector<double>& confidences) {
  const auto positions = canvas.masked_positions();
  const auto v = logits.cols();
  const double sd = std::sqrt(noise_var);
  tokens.clear();
  confidences.clear();
  std::vector<double> p(static_cast<std::size_t>(v));
  for (int pos : positions) {
    double mx = -INFINITY;
    for (Eigen::Index k = 0; k < v; ++k) {
      double z = logits(pos, k);
      if (noise_var > 0) z += sd * rng.normal();
      z /= temperature;
      p[static_cast<std::size_t>(k)] = z;
      mx = std::max(mx, z);
    }
    double sum = 0;
    for (auto& x : p) sum += (x = std::exp(x - mx));
    const double u = rng.uniform() * sum;
    double acc = 0;
    Eigen::Index pick = v - 1;
    for (Eigen::Index k = 0; k < v; ++k) {
      acc += p[static_cast<std::size_t>(k)];
      if (u < acc) {
        pick = k;
        break;
      }
    }
    tokens.push_back(static_cast<TokenId>(pick));
    confidences.push_back(p[static_cast<std::size_t>(pick)] / sum);
  }
}

/// Decodes several canvases at the same level in lock-step. Each step makes
/// one predictor call holding a conditional and a null-condition input per job.
inline std::vector<LevelDecode> decode_level_batch(const TokenPredictor& model, std::span<const DecodeJob> jobs,
                                                   int level, const HierarchySpec& spec, const SamplerConfig& scfg) {
  const int total = scfg.steps(level);
  std::vector<MaskState> canvases;
  std::vector<ConditioningBundle> nulls;
  for (const auto& j : jobs) {
    if (j.canvas_len < 1) invalid("canvas length must be >= 1");
    if (j.cond->level != level) invalid("conditioning level does not match decode level");
    canvases.push_back(MaskState::all_masked(static_cast<std::size_t>(j.canvas_len)));
    nulls.push_back(j.cond->nulled());
  }
  std::vector<LevelDecode> out(jobs.size());
  std::vector<DecoderInput> inputs(2 * jobs.size());
  std::vector<TokenId> tokens;
  std::vector<double> conf;
  for (int t = 1; t <= total; ++t) {
    const double w = guidance_at(t, total, scfg.guidance_start, scfg.guidance_end);
    const double nv = noise_variance_at(t, total, scfg.noise_var_start, scfg.noise_var_end);
    for (std::size_t b = 0; b < jobs.size(); ++b) {
      inputs[2 * b] = {&canvases[b], jobs[b].cond};
      inputs[2 * b + 1] = {&canvases[b], &nulls[b]};
    }
    const auto logits = model.predict(inputs);
    for (std::size_t b = 0; b < jobs.size(); ++b) {
      auto& c = canvases[b];
      const int target = masked_count_at(t, total, jobs[b].canvas_len);
      if (c.masked_count() > target) {
        const Mat<float> guided = cfg_combine(logits[2 * b], logits[2 * b + 1], w);
        sample_masked(guided, c, nv, scfg.temperature, *jobs[b].rng, tokens, conf);
        c = select_unmask(conf, c, target, tokens);
      }
      out[b].steps.push_back({level, t, w, nv, c.masked_count()});
    }
  }
  for (std::size_t b = 0; b < jobs.size(); ++b)
    out[b].seq = TokenSequence{level, spec.rate(level), canvases[b].tokens};
  return out;
}

inline LevelDecode decode_level(const TokenPredictor& model, const ConditioningBundle& cond, int canvas_len,
                                const HierarchySpec& spec, const SamplerConfig& scfg, Rng& rng) {
  const DecodeJob job{&cond, canvas_len, &rng};
  return std::move(decode_level_batch(model, std::span<const DecodeJob>(&job, 1), cond.level, spec, scfg)[0]);
}

using DurationFn = std::function<double(const std::vector<int>&)>;

struct GenerateRequest {
  std::vector<int> phonemes;
  std::vector<float> speaker;
  std::optional<double> duration_s;
  std::uint64_t seed = 0;
};

struct GenerateResult {
  double duration_s = 0;
  std::vector<TokenSequence> levels;  // coarsest first
  std::vector<StepDiagnostics> steps;
};

/// Runs the full level cascade for a batch of requests. Durations missing from
/// a request come from `duration`; each request decodes with its own seed.
inline std::vector<GenerateResult> generate_batch(const TokenPredictor& model, std::span<const GenerateRequest> reqs,
                                                  const SamplerConfig& scfg, const HierarchySpec& spec,
                                                  const DurationFn& duration = {}) {
  spec.validate();
  scfg.validate(spec.num_levels);
  if (model.num_levels() != spec.num_levels) invalid("model and hierarchy disagree on the number of levels");
  std::vector<GenerateResult> out(reqs.size());
  std::vector<Rng> rngs;
  std::vector<ConditioningBundle> conds(reqs.size());
  for (std::size_t i = 0; i < reqs.size(); ++i) {
    const auto& r = reqs[i];
    if (r.phonemes.empty()) invalid("generate: empty phoneme sequence");
    double d;
    if (r.duration_s) {
      d = *r.duration_s;
    } else {
      if (!duration) throw StateError("no duration given and no duration predictor loaded");
      d = duration(r.phonemes);
    }
    if (!(d > 0) || !std::isfinite(d)) invalid("duration must be positive and finite");
    out[i].duration_s = d;
    rngs.emplace_back(r.seed);
    conds[i].phonemes = r.phonemes;
    conds[i].speaker = r.speaker;
  }
  for (int l = 1; l <= spec.num_levels; ++l) {
    std::vector<DecodeJob> jobs;
    for (std::size_t i = 0; i < reqs.size(); ++i) {
      conds[i].level = l;
      if (l > 1) conds[i].prev = out[i].levels.back();
      jobs.push_back({&conds[i], level_length(out[i].duration_s, spec, l), &rngs[i]});
    }
    auto decoded = decode_level_batch(model, jobs, l, spec, scfg);
    for (std::size_t i = 0; i < reqs.size(); ++i) {
      out[i].levels.push_back(std::move(decoded[i].seq));
      for (const auto& s : decoded[i].steps) out[i].steps.push_back(s);
    }
  }
  return out;
}

inline GenerateResult generate(const TokenPredictor& model, const GenerateRequest& req, const SamplerConfig& scfg,
                               const HierarchySpec& spec, const DurationFn& duration = {}) {
  return std::move(generate_batch(model, std::span<const GenerateRequest>(&req, 1), scfg, spec, duration)[0]);
}

}  // namespace cod
