#pragma once

// Command-line front end: gen-data, train, translate, eval, analyze.
//
// Every flag maps to a flat config key. Values are resolved as
//   command-line flag > --config file > built-in default,
// and seeds fall back to the LCS_MNMT_SEED environment variable when neither
// the flag nor the config file sets one.
//
// Exit codes: 0 success, 1 user error (bad flags, config, input files),
// 2 internal error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "lcs_mnmt/checkpoint.hpp"
#include "lcs_mnmt/corpus.hpp"
#include "lcs_mnmt/harness.hpp"
#include "lcs_mnmt/inference.hpp"
#include "lcs_mnmt/strategies.hpp"
#include "lcs_mnmt/training.hpp"

namespace lcs::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUser = 1;
inline constexpr int kExitInternal = 2;

class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline constexpr const char* kSeedEnv = "LCS_MNMT_SEED";

// Flags registered on a subcommand, each bound to a config key.
class FlagSet {
 public:
  void add(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
    auto& slot = values_[key];
    CLI::Option* opt = app->add_option(flag, slot, help + "  [" + key + "]");
    options_.push_back({opt, key});
  }

  // Config file values overlaid with the flags given on the command line.
  KeyValueConfig resolve(const std::string& config_path) const {
    KeyValueConfig kv;
    if (!config_path.empty()) kv = KeyValueConfig::load(config_path);
    for (const auto& [opt, key] : options_)
      if (opt->count() > 0) kv.set(key, values_.at(key));
    return kv;
  }

 private:
  std::map<std::string, std::string> values_;
  std::vector<std::pair<CLI::Option*, std::string>> options_;
};

inline std::optional<std::string> env_seed() {
  const char* v = std::getenv(kSeedEnv);
  if (v == nullptr || *v == '\0') return std::nullopt;
  KeyValueConfig::to_int(kSeedEnv, v);  // validates
  return std::string(v);
}

inline void apply_seed_fallback(KeyValueConfig& kv, const std::string& key) {
  if (!kv.has(key))
    if (auto s = env_seed()) kv.set(key, *s);
}

inline std::string require(const KeyValueConfig& kv, const std::string& key, const std::string& flag) {
  if (!kv.has(key) || kv.get(key).empty()) throw UsageError("missing required option " + flag + " (config key `" + key + "`)");
  return kv.get(key);
}

inline Direction parse_direction(const std::string& s) {
  const auto dash = s.find('-');
  if (dash == std::string::npos || dash == 0 || dash + 1 == s.size()) {
    throw UsageError("direction must look like src-tgt, got `" + s + "`");
  }
  return {s.substr(0, dash), s.substr(dash + 1)};
}

inline TokenSeq parse_token_line(const std::string& line) {
  TokenSeq out;
  std::istringstream in(line);
  std::string tok;
  while (in >> tok) out.push_back(static_cast<int>(KeyValueConfig::to_int("token", tok)));
  return out;
}

inline std::string format_tokens(const TokenSeq& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) out += (i ? " " : "") + std::to_string(tokens[i]);
  return out;
}

// ---------------------------------------------------------------------------

struct Context {
  std::ostream& out;
  std::ostream& err;
};

inline void add_corpus_flags(CLI::App* app, FlagSet& f) {
  f.add(app, "--langs", "corpus.langs", "number of languages including en (default 4)");
  f.add(app, "--pairs", "corpus.pairs", "training pairs per supervised direction (default 8000)");
  f.add(app, "--grammar", "corpus.grammar", "concept inventory size (default 200)");
  f.add(app, "--range-width", "corpus.range_width", "token-id range per language, >= grammar (default grammar)");
  f.add(app, "--valid-pairs", "corpus.valid_pairs", "validation pairs per direction (default 100)");
  f.add(app, "--test-pairs", "corpus.test_pairs", "test pairs per direction (default 500)");
  f.add(app, "--min-len", "corpus.min_len", "minimum sentence length (default 5)");
  f.add(app, "--max-len", "corpus.max_len", "maximum sentence length (default 15)");
  f.add(app, "--noise", "corpus.noise", "fraction of training pairs with an off-target reference (default 0)");
}

inline void add_model_flags(CLI::App* app, FlagSet& f) {
  f.add(app, "--enc-layers", "model.enc_layers", "encoder layers (default 2)");
  f.add(app, "--dec-layers", "model.dec_layers", "decoder layers (default 2)");
  f.add(app, "--d-model", "model.d_model", "model width (default 64)");
  f.add(app, "--heads", "model.n_heads", "attention heads (default 4)");
  f.add(app, "--d-ff", "model.d_ff", "feed-forward width (default 128)");
  f.add(app, "--dropout", "model.dropout", "dropout rate (default 0)");
}

inline void add_train_flags(CLI::App* app, FlagSet& f) {
  f.add(app, "--steps", "train.max_steps", "optimizer steps (default 5000)");
  f.add(app, "--batch-tokens", "train.batch_tokens", "padded tokens per batch (default 256)");
  f.add(app, "--lr", "train.lr_peak", "peak learning rate (default 1e-3)");
  f.add(app, "--warmup", "train.warmup_steps", "linear warmup steps (default 1000)");
  f.add(app, "--clip-norm", "train.clip_norm", "global gradient-norm clip, 0 = off (default 1)");
  f.add(app, "--label-smoothing", "train.label_smoothing", "label smoothing (default 0.1)");
  f.add(app, "--checkpoint-every", "train.checkpoint_every", "snapshot interval in steps (default 500)");
  f.add(app, "--average-last", "train.average_last", "snapshots averaged into the final model (default 5)");
}

inline void add_decode_flags(CLI::App* app, FlagSet& f) {
  f.add(app, "--beam", "eval.beam", "beam size (default 5)");
  f.add(app, "--length-penalty", "eval.length_penalty", "length penalty alpha (default 1.0)");
  f.add(app, "--max-decode-len", "eval.max_decode_len", "decode length cap, 0 = 2*src+10 (default 0)");
}

inline StrategySpec strategy_from(const KeyValueConfig& kv, int enc_layers) {
  StrategyOverrides o;
  if (kv.has("strategy.k")) o.k = static_cast<int>(kv.get_int("strategy.k"));
  if (kv.has("strategy.shallow_tag")) o.shallow_tag = kv.get("strategy.shallow_tag");
  if (kv.has("strategy.converter_tag")) o.converter_tag = kv.get("strategy.converter_tag");
  if (kv.has("strategy.decoder_tag")) o.decoder_tag = kv.get("strategy.decoder_tag");
  return make_strategy(kv.get("strategy.name", "LCS"), enc_layers, o);
}

// ---------------------------------------------------------------------------
// gen-data

inline int run_gen_data(const KeyValueConfig& kv_in, Context& ctx) {
  KeyValueConfig kv = kv_in;
  apply_seed_fallback(kv, "corpus.seed");
  const std::filesystem::path out = require(kv, "out", "--out");
  const CorpusConfig cfg = CorpusConfig::from_config(kv, "corpus.");
  const CorpusSet set = build_corpus(cfg);
  write_corpus(set, cfg, out);
  ctx.out << "wrote corpus to " << out.string() << ": " << set.train.size() << " train, " << set.valid.size()
          << " valid, " << set.test_sup.size() << " supervised test, " << set.test_zero.size()
          << " zero-shot test pairs; " << set.noise_log.size() << " noisy training pairs\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// train

inline int run_train(const KeyValueConfig& kv_in, Context& ctx) {
  KeyValueConfig kv = kv_in;
  apply_seed_fallback(kv, "train.seed");
  const std::filesystem::path data = require(kv, "data", "--data");
  const std::filesystem::path out = require(kv, "out", "--out");
  const CorpusSet set = load_corpus(data);
  const std::string init = kv.get("init", "");
  ModelConfig mc = model_config_from(kv);
  std::optional<ModelCheckpoint> start;
  if (!init.empty()) {
    start = load_checkpoint(init);
    if (!(start->vocab == set.vocab)) throw CheckpointError("--init checkpoint vocabulary differs from the corpus");
    mc = start->config;
  }
  const StrategySpec spec = strategy_from(kv, mc.enc_layers);
  const TrainConfig tc = TrainConfig::from_config(kv);
  const int every = std::max(1, tc.max_steps / 20);
  auto on_step = [&](const StepLog& s) {
    if (s.step % every == 0 || s.step == tc.max_steps)
      ctx.err << "step " << s.step << "/" << tc.max_steps << " loss " << s.loss << " lr " << s.lr << "\n";
  };
  ctx.err << "training " << spec.label() << " on " << set.train.size() << " pairs\n";
  TrainResult r = start ? finetune(*start, spec, set.train, tc, on_step)
                        : train(set.train, set.vocab, mc, spec, tc, on_step);
  std::filesystem::create_directories(out);
  save_checkpoint(r.checkpoint, out / "model.ckpt");
  write_text_file(out / "train_log.csv", step_log_csv(r.log));
  KeyValueConfig eff = r.checkpoint.config.to_config();
  for (const auto& [k, v] : r.checkpoint.meta.values()) eff.set(k, v);
  eff.set("data", data.string());
  write_text_file(out / "train.cfg", eff.to_text());
  ctx.out << "wrote " << (out / "model.ckpt").string() << " (" << r.snapshots_averaged << " snapshots averaged)\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// translate

inline int run_translate(const KeyValueConfig& kv, Context& ctx) {
  const ModelCheckpoint ckpt = load_checkpoint(require(kv, "ckpt", "--ckpt"));
  const Direction dir = parse_direction(require(kv, "direction", "--direction"));
  for (const auto& code : {dir.first, dir.second})
    if (!ckpt.vocab.has_language(code)) throw UsageError("unknown language `" + code + "` in --direction");
  const StrategySpec spec = StrategySpec::from_config(ckpt.meta);
  const EvalConfig ec = EvalConfig::from_config(kv);

  std::vector<TokenSeq> inputs;
  if (kv.has("text")) {
    inputs.push_back(parse_token_line(kv.get("text")));
  } else {
    const std::string input = kv.get("input", "-");
    std::ifstream file;
    std::istream* in = &std::cin;
    if (input != "-") {
      file.open(input);
      if (!file) throw UsageError("cannot open --input " + input);
      in = &file;
    }
    std::string line;
    while (std::getline(*in, line))
      if (!trim(line).empty()) inputs.push_back(parse_token_line(line));
  }
  if (inputs.empty()) throw UsageError("nothing to translate: give --text, --input or lines on stdin");

  std::ostringstream result;
  for (const auto& src : inputs) {
    for (int t : src)
      if (t < 0 || t >= ckpt.config.vocab_size) throw UsageError("token id " + std::to_string(t) + " is out of range");
    const Translation t = translate(ckpt.params, ckpt.config, ckpt.vocab, spec, src, dir, ec.decode);
    result << format_tokens(t.tokens) << (t.truncated ? "\t[truncated]" : "") << "\n";
  }
  const std::string out = kv.get("out", "");
  if (out.empty()) {
    ctx.out << result.str();
  } else {
    std::filesystem::create_directories(out);
    write_text_file(std::filesystem::path(out) / "translations.txt", result.str());
    ctx.out << "wrote " << inputs.size() << " translations to " << out << "/translations.txt\n";
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// eval

inline int run_eval(const KeyValueConfig& kv, Context& ctx) {
  const std::string ckpt_path = require(kv, "ckpt", "--ckpt");
  const ModelCheckpoint ckpt = load_checkpoint(ckpt_path);
  const CorpusSet set = load_corpus(require(kv, "data", "--data"));
  const std::filesystem::path out = require(kv, "out", "--out");
  if (!(ckpt.vocab == set.vocab)) throw CheckpointError("checkpoint vocabulary differs from the corpus");
  const StrategySpec spec = StrategySpec::from_config(ckpt.meta);
  const EvalConfig ec = EvalConfig::from_config(kv);

  CellResult cell;
  cell.strategy = spec.label();
  cell.seed = static_cast<std::uint64_t>(ckpt.meta.get_int("train.seed", 0));
  cell.corpus_label = "data";
  cell.supervised = evaluate_examples(ckpt, spec, per_direction_subset(set.test_sup.examples, ec.max_per_direction), ec);
  cell.zero_shot = evaluate_examples(ckpt, spec, per_direction_subset(set.test_zero.examples, ec.max_per_direction), ec);

  std::ostringstream rates, quality, buckets, langs;
  rates << kRatesHeader << "\n";
  quality << kQualityHeader << "\n";
  buckets << kIntervalsHeader << "\n";
  langs << kIntervalLangHeader << "\n";
  append_rates(rates, cell, "supervised", *cell.supervised);
  append_rates(rates, cell, "zero_shot", *cell.zero_shot);
  append_quality(quality, cell, "supervised", *cell.supervised);
  append_quality(quality, cell, "zero_shot", *cell.zero_shot);
  append_intervals(buckets, langs, cell);
  std::filesystem::create_directories(out);
  write_text_file(out / "rates.csv", rates.str());
  write_text_file(out / "quality.csv", quality.str());
  write_text_file(out / "intervals.csv", buckets.str());
  write_text_file(out / "intervals_lang.csv", langs.str());
  const std::string summary = "Evaluation of " + ckpt_path + "\n\n" + comparison_summary({cell});
  write_text_file(out / "summary.txt", summary);
  ctx.out << summary;
  return kExitOk;
}

// ---------------------------------------------------------------------------
// analyze

inline int run_analyze(const std::string& kind, const KeyValueConfig& kv_in, Context& ctx) {
  KeyValueConfig kv = kv_in;
  apply_seed_fallback(kv, "experiment.seeds");
  const std::string out = require(kv, "out", "--out");
  KeyValueConfig exp_kv;
  for (const auto& [k, v] : kv.values())
    if (k != "out") exp_kv.set(k, v);
  ExperimentSession session(ExperimentConfig::from_config(exp_kv), out, &ctx.err);
  if (kind == "compare") {
    run_strategy_comparison(session);
  } else if (kind == "noise") {
    run_noise_contrast(session);
  } else if (kind == "intervals") {
    run_interval_analysis(session);
  } else if (kind == "layersim") {
    run_layer_similarity(session);
  } else if (kind == "ksweep") {
    run_k_sweep(session);
  } else if (kind == "export") {
    run_export(session);
  } else {
    throw UsageError("unknown analysis `" + kind + "`");
  }
  ctx.out << read_text_file(std::filesystem::path(out) / "summary.txt");
  return kExitOk;
}

// ---------------------------------------------------------------------------
// dispatch

inline int dispatch(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  Context ctx{out, err};
  CLI::App app{"Multilingual NMT with language-tag strategies on synthetic cipher languages", "lcs-mnmt"};
  app.require_subcommand(1);
  app.footer(
      "Flags override --config values, which override defaults.\n"
      "LCS_MNMT_SEED supplies the seed when neither a flag nor the config sets one.");

  std::string config;
  auto add_config = [&](CLI::App* sub) { sub->add_option("--config", config, "flat `key = value` config file"); };

  FlagSet gen_flags;
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic multilingual corpus");
  add_config(gen);
  gen_flags.add(gen, "--out", "out", "output directory");
  gen_flags.add(gen, "--seed", "corpus.seed", "corpus seed");
  add_corpus_flags(gen, gen_flags);

  FlagSet train_flags;
  auto* tr = app.add_subcommand("train", "train a model (or fine-tune one with --init)");
  add_config(tr);
  train_flags.add(tr, "--data", "data", "corpus directory from gen-data");
  train_flags.add(tr, "--out", "out", "output directory");
  train_flags.add(tr, "--init", "init", "checkpoint to fine-tune under the chosen strategy");
  train_flags.add(tr, "--strategy", "strategy.name", "T-Enc, S-Enc-T-Dec, ST-Enc, ST-Enc-T-Dec, T-Enc-T-Dec, T-Enc-Mask, LCS, LCS-variant");
  train_flags.add(tr, "--k", "strategy.k", "converter depth for LCS strategies");
  train_flags.add(tr, "--shallow-tag", "strategy.shallow_tag", "LCS shallow-stage tag: S, T or none");
  train_flags.add(tr, "--converter-tag", "strategy.converter_tag", "LCS converter-stage tag: S, T or none");
  train_flags.add(tr, "--decoder-tag", "strategy.decoder_tag", "LCS decoder tag: S, T or none");
  train_flags.add(tr, "--seed", "train.seed", "training seed");
  add_model_flags(tr, train_flags);
  add_train_flags(tr, train_flags);

  FlagSet tr_flags;
  auto* tl = app.add_subcommand("translate", "translate token-id sentences with a checkpoint");
  add_config(tl);
  tr_flags.add(tl, "--ckpt", "ckpt", "checkpoint file");
  tr_flags.add(tl, "--direction", "direction", "translation direction, e.g. aa-bb");
  tr_flags.add(tl, "--text", "text", "one source sentence as space-separated token ids");
  tr_flags.add(tl, "--input", "input", "file with one sentence per line, '-' for stdin");
  tr_flags.add(tl, "--out", "out", "write translations.txt here instead of stdout");
  add_decode_flags(tl, tr_flags);

  FlagSet eval_flags;
  auto* ev = app.add_subcommand("eval", "language rates, BLEU and exact match on the test splits");
  add_config(ev);
  eval_flags.add(ev, "--ckpt", "ckpt", "checkpoint file");
  eval_flags.add(ev, "--data", "data", "corpus directory");
  eval_flags.add(ev, "--out", "out", "output directory");
  eval_flags.add(ev, "--max-per-direction", "eval.max_per_direction", "test sentences per direction, 0 = all (default 100)");
  eval_flags.add(ev, "--window", "eval.window", "interval width in tokens (default 5)");
  add_decode_flags(ev, eval_flags);

  FlagSet an_flags;
  std::string kind;
  auto* an = app.add_subcommand("analyze", "run an analysis: compare, noise, intervals, layersim, ksweep, export");
  an->add_option("analysis", kind, "compare | noise | intervals | layersim | ksweep | export")
      ->required()
      ->check(CLI::IsMember({"compare", "noise", "intervals", "layersim", "ksweep", "export"}));
  add_config(an);
  an_flags.add(an, "--out", "out", "output directory");
  an_flags.add(an, "--data", "corpus.data", "use this corpus directory instead of generating one");
  an_flags.add(an, "--strategies", "experiment.strategies", "comma-separated strategy names");
  an_flags.add(an, "--seeds", "experiment.seeds", "comma-separated training seeds");
  an_flags.add(an, "--steps", "train.max_steps", "optimizer steps per model");
  an_flags.add(an, "--ckpt", "experiment.export_checkpoint", "export: use this checkpoint instead of training");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitUser;
  }

  try {
    if (gen->parsed()) return run_gen_data(gen_flags.resolve(config), ctx);
    if (tr->parsed()) return run_train(train_flags.resolve(config), ctx);
    if (tl->parsed()) return run_translate(tr_flags.resolve(config), ctx);
    if (ev->parsed()) return run_eval(eval_flags.resolve(config), ctx);
    if (an->parsed()) return run_analyze(kind, an_flags.resolve(config), ctx);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUser;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUser;
  } catch (const VocabularyError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUser;
  } catch (const CheckpointError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUser;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return kExitInternal;
  }
  err << app.help();
  return kExitUser;
}

}  // namespace lcs::cli
