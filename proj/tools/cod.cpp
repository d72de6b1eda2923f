// cod: command-line driver for corpus generation, training, generation,
// evaluation and ablation grids.
//
// Exit codes: 0 success, 1 usage/config error, 2 I/O or format error,
// 3 numerical failure.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cod/config.hpp"
#include "cod/duration.hpp"
#include "cod/eval.hpp"
#include "cod/sampler.hpp"
#include "cod/synth_corpus.hpp"
#include "cod/trainer.hpp"

namespace fs = std::filesystem;
using namespace cod;

namespace {

enum Exit { kOk = 0, kUsage = 1, kIo = 2, kNumeric = 3 };

struct Common {
  std::string config_file;
  std::vector<std::string> sets;
};

std::vector<std::pair<std::string, std::string>> parse_sets(const std::vector<std::string>& sets) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'", {s});
    out.emplace_back(std::string(trim(s.substr(0, eq))), std::string(trim(s.substr(eq + 1))));
  }
  return out;
}

RunConfig merged(const Common& c, std::vector<std::pair<std::string, std::string>> flags) {
  const std::string text = c.config_file.empty() ? std::string() : read_file(c.config_file);
  auto cli = parse_sets(c.sets);
  for (auto& f : flags) cli.push_back(std::move(f));
  return load_config(text, cli);
}

void dump_effective(const fs::path& dir, const RunConfig& c) {
  write_file_atomic(dir / "config.txt", dump_config(c));
}

/// Ratio flags such as "3:0.75".
std::pair<std::string, std::string> ramp_flag(const std::string& v, const char* name) {
  const auto parts = split(v, ':');
  if (parts.size() != 2) throw ConfigError(std::string("--") + name + " expects start:end", {name});
  return {std::string(parts[0]), std::string(parts[1])};
}

Dataset load_dataset(const std::string& dir, RunConfig& cfg) {
  auto data = read_corpus(dir);
  cfg.corpus = data.spec;
  return data;
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  for (auto l : split(text, '\n'))
    if (!trim(l).empty()) out.emplace_back(trim(l));
  return out;
}

// ---------------------------------------------------------------------------

int cmd_corpus(const Common& common, long long n, std::optional<std::uint64_t> seed, std::optional<int> levels,
               const std::string& factors, const std::string& out) {
  std::vector<std::pair<std::string, std::string>> flags;
  if (seed) flags.emplace_back("corpus.seed", std::to_string(*seed));
  if (levels) flags.emplace_back("corpus.num_levels", std::to_string(*levels));
  if (!factors.empty()) flags.emplace_back("corpus.factors", factors);
  if (levels && factors.empty()) {
    // Default factors for L levels: 2^(L-1), ..., 2, 1.
    std::vector<int> f;
    for (int l = 1; l <= *levels; ++l) f.push_back(1 << (*levels - l));
    flags.emplace_back("corpus.factors", join(f));
  }
  auto cfg = merged(common, flags);
  cfg.corpus.validate();
  if (n < 1) throw ConfigError("--n must be >= 1", {"n"});
  write_corpus(cfg.corpus, n, out);
  dump_effective(out, cfg);
  std::cerr << "wrote " << n << " utterances to " << out << "\n";
  return kOk;
}

int cmd_train(const Common& common, const std::string& corpus, const std::string& out, bool resume,
              const std::string& level_probs, std::optional<int> steps, std::optional<std::uint64_t> seed) {
  std::vector<std::pair<std::string, std::string>> flags;
  if (!level_probs.empty()) flags.emplace_back("train.level_probs", level_probs);
  if (steps) flags.emplace_back("train.total_steps", std::to_string(*steps));
  if (seed) flags.emplace_back("train.seed", std::to_string(*seed));
  auto cfg = merged(common, flags);
  const auto data = load_dataset(corpus, cfg);
  cfg = resolved(cfg);
  validate(cfg);
  if (data.train.empty()) throw ConfigError("corpus has no training utterances", {"corpus"});

  fs::create_directories(out);
  const auto ckpt = fs::path(out) / "model.codm";
  const auto metrics_path = fs::path(out) / "metrics.csv";
  Trainer trainer(cfg.model, cfg.train, speaker_table(SynthLaw(data.spec)));
  std::string metrics = metrics_header();
  if (resume) {
    if (!fs::exists(ckpt)) throw IoError("--resume: no checkpoint at " + ckpt.string());
    trainer.load(ckpt);
    // Keep the metrics rows up to the checkpointed step.
    if (fs::exists(metrics_path)) {
      metrics = metrics_header();
      for (const auto& line : lines_of(read_file(metrics_path))) {
        if (line.rfind("step", 0) == 0) continue;
        if (parse_int(split(line, ',')[0]) <= trainer.steps_done()) metrics += line + '\n';
      }
    }
    std::cerr << "resumed at step " << trainer.steps_done() << "\n";
  }
  dump_effective(out, cfg);
  const auto meta = hierarchy_to_kv(cfg.corpus.hierarchy());
  while (trainer.steps_done() < cfg.train.total_steps) {
    const auto rec = trainer.train_step(data.train);
    metrics += metrics_line(rec);
    if (rec.step % cfg.train_log_every == 0)
      std::cerr << "step " << rec.step << " level " << rec.level << " loss " << rec.loss << " lr " << rec.lr << "\n";
    if (rec.step % cfg.train_checkpoint_every == 0 || rec.step == cfg.train.total_steps) {
      trainer.save(ckpt, meta);
      write_file_atomic(metrics_path, metrics);
    }
  }
  return kOk;
}

struct LoadedModel {
  Container container;
  Decoder<float> model;
  HierarchySpec hier;
  Mat<float> speakers;
};

LoadedModel load_model(const std::string& path) {
  if (!fs::exists(path)) throw IoError("checkpoint not found: " + path);
  LoadedModel m{read_container(path, kDecoderMagic), {}, {}, {}};
  m.model = load_decoder(m.container);
  m.hier = hierarchy_from_kv(m.container.meta_map());
  const auto* t = m.container.find("speakers");
  if (!t) throw FormatError("checkpoint has no speaker table");
  m.speakers.resize(static_cast<Eigen::Index>(t->rows), static_cast<Eigen::Index>(t->cols));
  from_named(m.container, "speakers", m.speakers);
  return m;
}

int cmd_generate(const Common& common, const std::string& checkpoint, const std::string& input,
                 const std::string& speakers_file, int speaker, const std::string& out, const std::string& steps,
                 const std::string& guidance, const std::string& noise, std::optional<std::uint64_t> seed,
                 std::optional<double> temperature, std::optional<double> duration, const std::string& duration_model) {
  std::vector<std::pair<std::string, std::string>> flags;
  auto lm = load_model(checkpoint);
  const int levels = lm.hier.num_levels;
  if (!steps.empty()) {
    auto s = split(steps, ',');
    std::string v(steps);
    if (s.size() == 1) v = join(std::vector<std::string>(static_cast<std::size_t>(levels), std::string(s[0])));
    flags.emplace_back("sampler.steps", v);
  } else if (levels != 3) {
    flags.emplace_back("sampler.steps", join(std::vector<int>(static_cast<std::size_t>(levels), 20)));
  }
  if (!guidance.empty()) {
    auto [a, b] = ramp_flag(guidance, "guidance");
    flags.emplace_back("sampler.guidance_start", a);
    flags.emplace_back("sampler.guidance_end", b);
  }
  if (!noise.empty()) {
    auto [a, b] = ramp_flag(noise, "noise");
    flags.emplace_back("sampler.noise_var_start", a);
    flags.emplace_back("sampler.noise_var_end", b);
  }
  if (seed) flags.emplace_back("sampler.seed", std::to_string(*seed));
  if (temperature) flags.emplace_back("sampler.temperature", format_double(*temperature));
  auto cfg = merged(common, flags);
  cfg.sampler.validate(levels);

  std::vector<std::vector<int>> phonemes;
  for (const auto& line : lines_of(read_file(input))) {
    std::vector<int> ph;
    for (auto tok : split(line, ' '))
      if (!trim(tok).empty()) ph.push_back(static_cast<int>(parse_int(trim(tok))));
    if (ph.empty()) throw ConfigError("empty phoneme line in " + input, {"input"});
    phonemes.push_back(std::move(ph));
  }
  std::vector<int> spk(phonemes.size(), speaker);
  if (!speakers_file.empty()) {
    const auto ids = lines_of(read_file(speakers_file));
    if (ids.size() != phonemes.size()) throw ConfigError("speaker file must have one id per phoneme line", {"speakers"});
    for (std::size_t i = 0; i < ids.size(); ++i) spk[i] = static_cast<int>(parse_int(ids[i]));
  }

  std::optional<DurationModel<float>> dm;
  DurationFn dur;
  if (!duration && !duration_model.empty()) {
    if (!fs::exists(duration_model)) throw IoError("duration model not found: " + duration_model);
    dm.emplace(load_duration_model(duration_model));
    dur = [&dm](const std::vector<int>& ph) { return dm->predict(ph); };
  }
  if (!duration && !dur) throw ConfigError("need --duration or --duration-model", {"duration"});

  std::vector<GenerateRequest> reqs;
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < phonemes.size(); ++i) {
    ids.push_back("gen" + utt_name(static_cast<long long>(i)).substr(3));
    reqs.push_back({phonemes[i], speaker_row(lm.speakers, spk[i]), duration, derive_seed(cfg.sampler.seed, ids.back())});
  }
  const DecoderPredictor pred(lm.model);
  const auto results = generate_batch(pred, reqs, cfg.sampler, lm.hier, dur);

  fs::create_directories(out);
  std::string sidecar;
  std::vector<std::vector<TokenRecord>> per_level(static_cast<std::size_t>(levels));
  for (std::size_t i = 0; i < results.size(); ++i) {
    for (int l = 0; l < levels; ++l)
      per_level[static_cast<std::size_t>(l)].push_back({ids[i], results[i].levels[static_cast<std::size_t>(l)]});
    for (const auto& s : results[i].steps)
      sidecar += nlohmann::json{{"utt_id", ids[i]},      {"level", s.level},       {"step", s.step},
                                {"guidance", s.guidance}, {"noise_var", s.noise_var}, {"masked_count", s.masked_count},
                                {"duration_s", results[i].duration_s}}
                     .dump() +
                 '\n';
  }
  for (int l = 1; l <= levels; ++l)
    write_file_atomic(fs::path(out) / ("level" + std::to_string(l) + ".tok"),
                      format_token_file(per_level[static_cast<std::size_t>(l - 1)]));
  write_file_atomic(fs::path(out) / "diagnostics.jsonl", sidecar);
  dump_effective(out, cfg);
  return kOk;
}

int cmd_eval(const Common& common, const std::string& checkpoint, bool oracle, const std::string& corpus,
             const std::string& split_name, int max_utts, const std::string& out, std::optional<std::uint64_t> seed) {
  std::vector<std::pair<std::string, std::string>> flags;
  if (seed) flags.emplace_back("sampler.seed", std::to_string(*seed));
  auto cfg = merged(common, flags);
  const auto data = load_dataset(corpus, cfg);
  const SynthLaw law(data.spec);
  const Split which = split_name == "train" ? Split::Train : split_name == "dev" ? Split::Dev : Split::Test;
  if (split_name != "train" && split_name != "dev" && split_name != "test")
    throw ConfigError("--split must be train, dev or test", {"split"});
  const auto& all = data.split(which);
  std::vector<SynthUtterance> utts(all.begin(), all.begin() + std::min<std::size_t>(all.size(), static_cast<std::size_t>(max_utts)));
  if (utts.empty()) throw ConfigError("no utterances to evaluate", {"split"});

  std::optional<LoadedModel> lm;
  std::optional<DecoderPredictor> dp;
  std::optional<OraclePredictor> op;
  const TokenPredictor* pred;
  HierarchySpec view;
  Mat<float> speakers;
  std::vector<Codebook> books;
  std::string name;
  if (oracle) {
    op.emplace(law);
    pred = &*op;
    view = data.spec.hierarchy();
    speakers = speaker_table(law);
    name = "oracle";
  } else {
    if (checkpoint.empty()) throw ConfigError("need --checkpoint or --oracle", {"checkpoint"});
    lm.emplace(load_model(checkpoint));
    dp.emplace(lm->model);
    pred = &*dp;
    view = lm->hier;
    speakers = lm->speakers;
    books = codebooks_from(lm->container);
    name = fs::path(checkpoint).stem().string();
  }
  const auto levels = view.num_levels;
  if (cfg.sampler.steps_per_level.size() != static_cast<std::size_t>(levels))
    cfg.sampler.steps_per_level.assign(static_cast<std::size_t>(levels), cfg.sampler.steps_per_level.front());
  cfg.sampler.validate(levels);
  const auto view_utts = make_view(utts, law, view, books);
  const auto ter = generation_ter(*pred, view_utts, utts, law, view, cfg.sampler, speakers).ter;
  std::vector<AblationRow> rows;
  for (int l = 1; l <= levels; ++l)
    rows.push_back({name, levels, view.strategy, static_cast<int>(cfg.sampler.seed), l,
                    conditional_ce(*pred, view_utts, l, speakers), ter, 0});
  const auto csv = raw_csv(rows);
  if (out.empty()) {
    std::cout << csv;
  } else {
    const auto dir = fs::path(out).parent_path().empty() ? fs::path(".") : fs::path(out).parent_path();
    fs::create_directories(dir);
    write_file_atomic(out, csv);
    dump_effective(dir, cfg);
  }
  return kOk;
}

int cmd_ablate(const Common& common, const std::string& corpus, const std::string& out, const std::string& levels,
               const std::string& strategies, std::optional<int> seeds, std::optional<int> steps,
               std::optional<int> eval_utts) {
  std::vector<std::pair<std::string, std::string>> flags;
  if (!levels.empty()) flags.emplace_back("ablate.levels", levels);
  if (!strategies.empty()) flags.emplace_back("ablate.strategies", strategies);
  if (seeds) flags.emplace_back("ablate.seeds", std::to_string(*seeds));
  if (steps) flags.emplace_back("train.total_steps", std::to_string(*steps));
  if (eval_utts) flags.emplace_back("ablate.eval_utts", std::to_string(*eval_utts));
  auto cfg = merged(common, flags);
  const auto data = load_dataset(corpus, cfg);
  cfg = resolved(cfg);
  validate(cfg);

  const auto s = ablation_settings(cfg, out);
  fs::create_directories(out);
  dump_effective(out, cfg);
  run_ablation(data, s, [](const std::string& m) { std::cerr << m << std::endl; });
  std::cout << read_file(fs::path(out) / "summary.csv");
  return kOk;
}

int cmd_train_duration(const Common& common, const std::string& corpus, const std::string& out,
                       std::optional<int> steps, std::optional<std::uint64_t> seed) {
  std::vector<std::pair<std::string, std::string>> flags;
  if (steps) flags.emplace_back("duration.total_steps", std::to_string(*steps));
  if (seed) flags.emplace_back("duration.seed", std::to_string(*seed));
  auto cfg = merged(common, flags);
  const auto data = load_dataset(corpus, cfg);
  cfg = resolved(cfg);
  validate(cfg);
  auto pairs = [](const std::vector<SynthUtterance>& us) {
    std::vector<DurationPair> p;
    for (const auto& u : us) p.push_back({u.phonemes, u.duration_s});
    return p;
  };
  const auto train = pairs(data.train);
  const auto trainer = train_duration(train, cfg.duration, cfg.duration_train);
  trainer.save(out);
  const auto dev = pairs(data.dev.empty() ? data.test : data.dev);
  if (!dev.empty()) std::cerr << "held-out MAE " << mean_absolute_error(trainer.model(), dev) << " s\n";
  dump_effective(fs::path(out).parent_path().empty() ? fs::path(".") : fs::path(out).parent_path(), cfg);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  if (const char* t = std::getenv("COD_NUM_THREADS")) {
    try {
      if (parse_int(t) < 1) throw std::invalid_argument("must be >= 1");
    } catch (const std::invalid_argument& e) {
      std::cerr << "COD_NUM_THREADS: " << e.what() << "\n";
      return kUsage;
    }
  }

  CLI::App app{"Coarse-to-fine masked token modeling on a synthetic hierarchical corpus"};
  app.require_subcommand(1);
  app.fallthrough();
  Common common;
  app.add_option("--config", common.config_file, "key = value config file");
  app.add_option("--set", common.sets, "config override key=value (repeatable)");

  std::function<int()> run;

  auto* corpus = app.add_subcommand("corpus", "generate a synthetic corpus");
  long long n = 1000;
  std::optional<std::uint64_t> c_seed;
  std::optional<int> c_levels;
  std::string c_factors, c_out;
  corpus->add_option("--n", n, "number of utterances");
  corpus->add_option("--seed", c_seed);
  corpus->add_option("--levels", c_levels);
  corpus->add_option("--factors", c_factors, "decimation factors, coarsest first");
  corpus->add_option("--out", c_out)->required();
  corpus->callback([&] { run = [&] { return cmd_corpus(common, n, c_seed, c_levels, c_factors, c_out); }; });

  auto* train = app.add_subcommand("train", "train the decoder");
  std::string t_corpus, t_out, t_probs;
  bool t_resume = false;
  std::optional<int> t_steps;
  std::optional<std::uint64_t> t_seed;
  train->add_option("--corpus", t_corpus)->required();
  train->add_option("--out", t_out)->required();
  train->add_flag("--resume", t_resume);
  train->add_option("--level-probs", t_probs);
  train->add_option("--steps", t_steps);
  train->add_option("--seed", t_seed);
  train->callback([&] { run = [&] { return cmd_train(common, t_corpus, t_out, t_resume, t_probs, t_steps, t_seed); }; });

  auto* gen = app.add_subcommand("generate", "decode token hierarchies for phoneme sequences");
  std::string g_ckpt, g_input, g_speakers, g_out, g_steps, g_guidance, g_noise, g_dmodel;
  int g_speaker = 0;
  std::optional<std::uint64_t> g_seed;
  std::optional<double> g_temp, g_duration;
  gen->add_option("--checkpoint", g_ckpt)->required();
  gen->add_option("--input", g_input, "one phoneme sequence per line, space separated")->required();
  gen->add_option("--speakers", g_speakers, "one speaker id per line");
  gen->add_option("--speaker", g_speaker, "speaker id for every line");
  gen->add_option("--out", g_out)->required();
  gen->add_option("--steps", g_steps, "steps per level (one value or one per level)");
  gen->add_option("--guidance", g_guidance, "start:end");
  gen->add_option("--noise", g_noise, "start:end logit-noise variance");
  gen->add_option("--seed", g_seed);
  gen->add_option("--temperature", g_temp);
  gen->add_option("--duration", g_duration, "seconds, overrides the duration model");
  gen->add_option("--duration-model", g_dmodel);
  gen->callback([&] {
    run = [&] {
      return cmd_generate(common, g_ckpt, g_input, g_speakers, g_speaker, g_out, g_steps, g_guidance, g_noise, g_seed,
                          g_temp, g_duration, g_dmodel);
    };
  });

  auto* ev = app.add_subcommand("eval", "cross-entropy and token error rate of a checkpoint");
  std::string e_ckpt, e_corpus, e_split = "test", e_out;
  bool e_oracle = false;
  int e_max = 200;
  std::optional<std::uint64_t> e_seed;
  ev->add_option("--checkpoint", e_ckpt);
  ev->add_flag("--oracle", e_oracle, "evaluate the exact law instead of a checkpoint");
  ev->add_option("--corpus", e_corpus)->required();
  ev->add_option("--split", e_split);
  ev->add_option("--max-utts", e_max);
  ev->add_option("--out", e_out);
  ev->add_option("--seed", e_seed);
  ev->callback([&] { run = [&] { return cmd_eval(common, e_ckpt, e_oracle, e_corpus, e_split, e_max, e_out, e_seed); }; });

  auto* ab = app.add_subcommand("ablate", "train and evaluate a level/strategy grid (resumable)");
  std::string a_corpus, a_out, a_levels, a_strats;
  std::optional<int> a_seeds, a_steps, a_eval;
  ab->add_option("--corpus", a_corpus)->required();
  ab->add_option("--out", a_out)->required();
  ab->add_option("--levels", a_levels);
  ab->add_option("--strategies", a_strats);
  ab->add_option("--seeds", a_seeds);
  ab->add_option("--steps", a_steps);
  ab->add_option("--eval-utts", a_eval);
  ab->callback([&] {
    run = [&] { return cmd_ablate(common, a_corpus, a_out, a_levels, a_strats, a_seeds, a_steps, a_eval); };
  });

  auto* td = app.add_subcommand("train-duration", "train the utterance duration predictor");
  std::string d_corpus, d_out;
  std::optional<int> d_steps;
  std::optional<std::uint64_t> d_seed;
  td->add_option("--corpus", d_corpus)->required();
  td->add_option("--out", d_out)->required();
  td->add_option("--steps", d_steps);
  td->add_option("--seed", d_seed);
  td->callback([&] { run = [&] { return cmd_train_duration(common, d_corpus, d_out, d_steps, d_seed); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    return run();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const ConfigMismatch& e) {
    std::cerr << "config mismatch: " << e.what() << "\n";
    return kUsage;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const StateError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid argument: " << e.what() << "\n";
    return kUsage;
  }
}
