#pragma once

// Run configuration: flat `key = value` text with `#` comments and dotted
// section keys (corpus.*, model.*, train.*, sampler.*, duration.*, ablate.*).
// Every key is checked against the schema; unknown keys are rejected.

#include <algorithm>
#include <filesystem>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "cod/duration.hpp"
#include "cod/eval.hpp"
#include "cod/io.hpp"
#include "cod/model.hpp"
#include "cod/sampler.hpp"
#include "cod/synth_corpus.hpp"
#include "cod/trainer.hpp"

namespace cod {

struct ConfigError : std::runtime_error {
  std::vector<std::string> keys;
  ConfigError(const std::string& msg, std::vector<std::string> k) : std::runtime_error(msg), keys(std::move(k)) {}
};

struct AblationGrid {
  std::vector<int> levels{1, 2, 3};
  std::vector<std::string> strategies{"decimated"};
  int seeds = 3;
  int eval_utts = 200;
  int checkpoint_every = 1000;
};

struct RunConfig {
  SynthSpec corpus;
  ModelConfig model;
  TrainConfig train;
  SamplerConfig sampler;
  DurationModelConfig duration;
  DurationTrainConfig duration_train;
  AblationGrid ablate;
  int train_log_every = 100;
  int train_checkpoint_every = 1000;
};

namespace detail {

template <class T>
std::vector<T> parse_list(std::string_view s) {
  std::vector<T> out;
  for (auto part : split(s, ',')) {
    part = trim(part);
    if (part.empty()) invalid("empty list element");
    if constexpr (std::is_same_v<T, std::string>)
      out.emplace_back(part);
    else if constexpr (std::is_integral_v<T>)
      out.push_back(static_cast<T>(parse_int(part)));
    else
      out.push_back(static_cast<T>(parse_double(part)));
  }
  return out;
}

struct Field {
  std::function<std::string()> get;
  std::function<void(std::string_view)> set;
};

template <class T>
Field bind(T& ref) {
  return {[&ref] {
            if constexpr (std::is_same_v<T, std::string>)
              return ref;
            else if constexpr (std::is_same_v<T, bool>)
              return std::string(ref ? "true" : "false");
            else if constexpr (std::is_integral_v<T>)
              return std::to_string(ref);
            else if constexpr (std::is_floating_point_v<T>)
              return format_double(ref);
            else
              return join(ref);
          },
          [&ref](std::string_view v) {
            if constexpr (std::is_same_v<T, std::string>)
              ref = std::string(v);
            else if constexpr (std::is_same_v<T, bool>) {
              if (v == "true" || v == "1") ref = true;
              else if (v == "false" || v == "0") ref = false;
              else invalid("expected true or false");
            } else if constexpr (std::is_integral_v<T>)
              ref = static_cast<T>(parse_int(v));
            else if constexpr (std::is_floating_point_v<T>)
              ref = parse_double(v);
            else
              ref = parse_list<typename T::value_type>(v);
          }};
}

}  // namespace detail

/// Schema of every configurable key, bound to the fields of `c`.
inline std::map<std::string, detail::Field> config_schema(RunConfig& c) {
  using detail::bind;
  return {
      {"corpus.phoneme_vocab", bind(c.corpus.phoneme_vocab)},
      {"corpus.vocab_size", bind(c.corpus.vocab_size)},
      {"corpus.num_speakers", bind(c.corpus.num_speakers)},
      {"corpus.num_levels", bind(c.corpus.num_levels)},
      {"corpus.factors", bind(c.corpus.factors)},
      {"corpus.finest_rate_hz", bind(c.corpus.finest_rate_hz)},
      {"corpus.fine_noise", bind(c.corpus.fine_noise)},
      {"corpus.dur_slope", bind(c.corpus.dur_slope)},
      {"corpus.dur_intercept", bind(c.corpus.dur_intercept)},
      {"corpus.dur_jitter", bind(c.corpus.dur_jitter)},
      {"corpus.min_phonemes", bind(c.corpus.min_phonemes)},
      {"corpus.max_phonemes", bind(c.corpus.max_phonemes)},
      {"corpus.speaker_dim", bind(c.corpus.speaker_dim)},
      {"corpus.frame_dim", bind(c.corpus.frame_dim)},
      {"corpus.frame_noise", bind(c.corpus.frame_noise)},
      {"corpus.seed", bind(c.corpus.seed)},
      {"model.num_layers", bind(c.model.num_layers)},
      {"model.hidden_dim", bind(c.model.hidden_dim)},
      {"model.num_heads", bind(c.model.num_heads)},
      {"model.mlp_dim", bind(c.model.mlp_dim)},
      {"model.max_seq_len", bind(c.model.max_seq_len)},
      {"train.batch_size", bind(c.train.batch_size)},
      {"train.lr_peak", bind(c.train.lr_peak)},
      {"train.warmup_steps", bind(c.train.warmup_steps)},
      {"train.total_steps", bind(c.train.total_steps)},
      {"train.adam_beta1", bind(c.train.adam_beta1)},
      {"train.adam_beta2", bind(c.train.adam_beta2)},
      {"train.adam_eps", bind(c.train.adam_eps)},
      {"train.weight_decay", bind(c.train.weight_decay)},
      {"train.grad_clip", bind(c.train.grad_clip)},
      {"train.level_probs", bind(c.train.level_probs)},
      {"train.cfg_dropout", bind(c.train.cfg_dropout)},
      {"train.condition_corruption", bind(c.train.condition_corruption)},
      {"train.seed", bind(c.train.seed)},
      {"train.log_every", bind(c.train_log_every)},
      {"train.checkpoint_every", bind(c.train_checkpoint_every)},
      {"sampler.steps", bind(c.sampler.steps_per_level)},
      {"sampler.guidance_start", bind(c.sampler.guidance_start)},
      {"sampler.guidance_end", bind(c.sampler.guidance_end)},
      {"sampler.noise_var_start", bind(c.sampler.noise_var_start)},
      {"sampler.noise_var_end", bind(c.sampler.noise_var_end)},
      {"sampler.temperature", bind(c.sampler.temperature)},
      {"sampler.seed", bind(c.sampler.seed)},
      {"duration.num_layers", bind(c.duration.num_layers)},
      {"duration.hidden_dim", bind(c.duration.hidden_dim)},
      {"duration.num_heads", bind(c.duration.num_heads)},
      {"duration.mlp_dim", bind(c.duration.mlp_dim)},
      {"duration.max_len", bind(c.duration.max_len)},
      {"duration.batch_size", bind(c.duration_train.batch_size)},
      {"duration.lr_peak", bind(c.duration_train.lr_peak)},
      {"duration.warmup_steps", bind(c.duration_train.warmup_steps)},
      {"duration.total_steps", bind(c.duration_train.total_steps)},
      {"duration.weight_decay", bind(c.duration_train.weight_decay)},
      {"duration.seed", bind(c.duration_train.seed)},
      {"ablate.levels", bind(c.ablate.levels)},
      {"ablate.strategies", bind(c.ablate.strategies)},
      {"ablate.seeds", bind(c.ablate.seeds)},
      {"ablate.eval_utts", bind(c.ablate.eval_utts)},
      {"ablate.checkpoint_every", bind(c.ablate.checkpoint_every)},
  };
}

/// Parses `key = value` lines. Blank lines and `#` comments are skipped.
inline std::vector<std::pair<std::string, std::string>> parse_key_values(std::string_view text) {
  std::vector<std::pair<std::string, std::string>> out;
  int lineno = 0;
  for (auto line : split(text, '\n')) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value", {});
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key", {});
    out.emplace_back(std::string(key), std::string(value));
  }
  return out;
}

/// Applies overrides in order. All unknown or unparsable keys are reported together.
inline void apply_overrides(RunConfig& c, const std::vector<std::pair<std::string, std::string>>& kvs) {
  auto schema = config_schema(c);
  std::vector<std::string> bad;
  std::string detail;
  for (const auto& [k, v] : kvs) {
    auto it = schema.find(k);
    if (it == schema.end()) {
      bad.push_back(k);
      detail += "\n  " + k + ": unknown key";
      continue;
    }
    try {
      it->second.set(v);
    } catch (const std::invalid_argument& e) {
      bad.push_back(k);
      detail += "\n  " + k + ": " + e.what();
    }
  }
  if (!bad.empty()) throw ConfigError("invalid configuration keys:" + detail, bad);
}

/// Checks cross-field consistency of the merged configuration.
inline void validate(const RunConfig& c) {
  std::vector<std::string> bad;
  std::string detail;
  auto check = [&](const std::string& section, const std::function<void()>& f) {
    try {
      f();
    } catch (const std::invalid_argument& e) {
      bad.push_back(section);
      detail += "\n  " + section + ": " + e.what();
    }
  };
  check("corpus", [&] { c.corpus.validate(); });
  check("model", [&] { c.model.validate(); });
  check("train", [&] { c.train.validate(c.corpus.num_levels); });
  check("sampler", [&] { c.sampler.validate(c.corpus.num_levels); });
  check("duration", [&] {
    c.duration.validate();
    c.duration_train.validate();
  });
  check("ablate", [&] {
    if (c.ablate.seeds < 1) invalid("seeds must be >= 1");
    for (int l : c.ablate.levels)
      if (l < 1 || l > c.corpus.num_levels) invalid("levels must lie in [1, corpus.num_levels]");
    for (const auto& s : c.ablate.strategies) parse_strategy(s);
  });
  if (!bad.empty()) throw ConfigError("invalid configuration:" + detail, bad);
}

/// Derived fields shared with the corpus (vocabularies, speaker width, levels).
inline RunConfig resolved(RunConfig c) {
  c.model.vocab_size = c.corpus.vocab_size;
  c.model.phoneme_vocab = c.corpus.phoneme_vocab;
  c.model.num_levels = c.corpus.num_levels;
  c.model.speaker_dim = c.corpus.speaker_dim;
  c.duration.phoneme_vocab = c.corpus.phoneme_vocab;
  return c;
}

/// Effective configuration as `key = value` text, keys sorted.
inline std::string dump_config(const RunConfig& c) {
  RunConfig copy = c;
  std::string out;
  for (const auto& [k, f] : config_schema(copy)) out += k + " = " + f.get() + '\n';
  return out;
}

/// defaults < file < command-line overrides
inline RunConfig load_config(const std::string& file_text, const std::vector<std::pair<std::string, std::string>>& cli) {
  RunConfig c;
  apply_overrides(c, parse_key_values(file_text));
  apply_overrides(c, cli);
  return c;
}

/// Grid settings for a resolved configuration. One-level configs are shared by
/// every strategy and appear once.
inline AblationSettings ablation_settings(const RunConfig& cfg, const std::filesystem::path& work_dir) {
  AblationSettings s;
  for (const auto& st : cfg.ablate.strategies)
    for (int l : cfg.ablate.levels) {
      const auto strat = l == 1 ? Strategy::Decimated : parse_strategy(st);
      const auto name = default_config_name(l, strat);
      if (std::none_of(s.configs.begin(), s.configs.end(), [&](const auto& c) { return c.name == name; }))
        s.configs.push_back({name, l, strat});
    }
  s.seeds = cfg.ablate.seeds;
  s.model = cfg.model;
  s.train = cfg.train;
  s.sampler = cfg.sampler;
  s.eval_utts = cfg.ablate.eval_utts;
  s.checkpoint_every = cfg.ablate.checkpoint_every;
  s.work_dir = work_dir;
  return s;
}

}  // namespace cod
