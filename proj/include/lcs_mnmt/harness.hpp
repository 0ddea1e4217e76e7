#pragma once

// Experiment harness: strategy comparison, noise contrast, interval curves,
// layer similarity, converter-depth sweep and representation export.
//
// Every run writes into one output directory: CSV tables, summary.txt,
// run.cfg (the effective configuration) and manifest.json. Trained models are
// cached by a hash of (training corpus, model config, strategy, train config)
// under <out>/models so analyses that need the same model share it.

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lcs_mnmt/checkpoint.hpp"
#include "lcs_mnmt/corpus.hpp"
#include "lcs_mnmt/inference.hpp"
#include "lcs_mnmt/langid.hpp"
#include "lcs_mnmt/similarity.hpp"
#include "lcs_mnmt/strategies.hpp"
#include "lcs_mnmt/training.hpp"

#ifndef LCS_MNMT_REVISION
#define LCS_MNMT_REVISION "unknown"
#endif

namespace lcs {

inline constexpr const char* kRevision = LCS_MNMT_REVISION;

// ---------------------------------------------------------------------------
// Configuration

// Model keys are optional here; absent keys keep the values of `base`.
inline ModelConfig model_config_from(const KeyValueConfig& kv, ModelConfig base = {}) {
  ModelConfig c = base;
  c.enc_layers = static_cast<int>(kv.get_int("model.enc_layers", c.enc_layers));
  c.dec_layers = static_cast<int>(kv.get_int("model.dec_layers", c.dec_layers));
  c.d_model = static_cast<int>(kv.get_int("model.d_model", c.d_model));
  c.n_heads = static_cast<int>(kv.get_int("model.n_heads", c.n_heads));
  c.d_ff = static_cast<int>(kv.get_int("model.d_ff", c.d_ff));
  c.max_len = static_cast<int>(kv.get_int("model.max_len", c.max_len));
  c.dropout = kv.get_double("model.dropout", c.dropout);
  c.label_smoothing = kv.get_double("model.label_smoothing", c.label_smoothing);
  return c;
}

struct EvalConfig {
  DecodeConfig decode;
  int max_per_direction = 100;  // test sentences per direction; 0 = all
  std::size_t window = 5;
  int similarity_pairs = 50;  // zero-shot pairs per direction for layer similarity
  int min_interval_support = 5;  // percent of interval-0 sentences an interval needs to enter the spread

  void validate() const {
    decode.validate();
    if (max_per_direction < 0) throw ConfigError("eval.max_per_direction must be >= 0");
    if (window < 1) throw ConfigError("eval.window must be >= 1");
    if (similarity_pairs < 1) throw ConfigError("eval.similarity_pairs must be >= 1");
    if (min_interval_support < 0 || min_interval_support > 100) {
      throw ConfigError("eval.min_interval_support must lie in [0, 100]");
    }
  }

  KeyValueConfig to_config() const {
    KeyValueConfig kv;
    kv.set("eval.beam", std::to_string(decode.beam_size));
    kv.set("eval.length_penalty", format_double(decode.length_penalty));
    kv.set("eval.max_decode_len", std::to_string(decode.max_decode_len));
    kv.set("eval.max_per_direction", std::to_string(max_per_direction));
    kv.set("eval.window", std::to_string(window));
    kv.set("eval.similarity_pairs", std::to_string(similarity_pairs));
    kv.set("eval.min_interval_support", std::to_string(min_interval_support));
    return kv;
  }

  static EvalConfig from_config(const KeyValueConfig& kv);
  static EvalConfig from_config(const KeyValueConfig& kv, EvalConfig base) {
    EvalConfig c = base;
    c.decode.beam_size = static_cast<int>(kv.get_int("eval.beam", c.decode.beam_size));
    c.decode.length_penalty = kv.get_double("eval.length_penalty", c.decode.length_penalty);
    c.decode.max_decode_len = static_cast<int>(kv.get_int("eval.max_decode_len", c.decode.max_decode_len));
    c.max_per_direction = static_cast<int>(kv.get_int("eval.max_per_direction", c.max_per_direction));
    c.window = static_cast<std::size_t>(kv.get_int("eval.window", static_cast<long>(c.window)));
    c.similarity_pairs = static_cast<int>(kv.get_int("eval.similarity_pairs", c.similarity_pairs));
    c.min_interval_support = static_cast<int>(kv.get_int("eval.min_interval_support", c.min_interval_support));
    c.validate();
    return c;
  }
};

inline EvalConfig EvalConfig::from_config(const KeyValueConfig& kv) { return from_config(kv, EvalConfig()); }

inline std::vector<std::uint64_t> parse_seed_list(const std::vector<std::string>& items) {
  std::vector<std::uint64_t> out;
  for (const auto& s : items) {
    const long v = KeyValueConfig::to_int("seeds", trim(s));
    if (v < 0) throw ConfigError("seeds must be non-negative");
    out.push_back(static_cast<std::uint64_t>(v));
  }
  return out;
}

struct ExperimentConfig {
  CorpusConfig corpus;
  std::string data_dir;  // load the corpus from here instead of generating it
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;
  std::vector<std::string> strategies{"T-Enc", "S-Enc-T-Dec", "LCS"};
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::vector<double> noise_rates{0.2};
  std::string noise_strategy = "T-Enc";
  std::vector<int> k_values{0, 1, 2};
  std::vector<int> k_enc_layers{2};
  std::string export_checkpoint;  // export from this checkpoint instead of training

  ExperimentConfig() { corpus.noise = 0.2; }

  void validate() const {
    ModelConfig m = model;
    m.vocab_size = std::max(m.vocab_size, 1);
    m.validate();
    train.validate();
    eval.validate();
    if (seeds.empty()) throw ConfigError("experiment.seeds must list at least one seed");
    if (strategies.empty()) throw ConfigError("experiment.strategies must list at least one strategy");
    for (const auto& s : strategies) parse_strategy_name(s);
    parse_strategy_name(noise_strategy);
    for (double r : noise_rates)
      if (r < 0.0 || r >= 1.0) throw ConfigError("experiment.noise_rates must lie in [0, 1)");
    for (int k : k_values)
      if (k < 0) throw ConfigError("experiment.k_values must be >= 0");
    for (int l : k_enc_layers)
      if (l < 1) throw ConfigError("experiment.k_enc_layers must be >= 1");
  }

  KeyValueConfig to_config() const {
    KeyValueConfig kv = corpus.to_config("corpus.");
    if (!data_dir.empty()) kv.set("corpus.data", data_dir);
    const KeyValueConfig m = model.to_config(), t = train.to_config(), e = eval.to_config();
    for (const auto& [k, v] : m.values())
      if (k != "model.vocab_size" && k != "model.post_norm") kv.set(k, v);
    for (const auto& [k, v] : t.values()) kv.set(k, v);
    for (const auto& [k, v] : e.values()) kv.set(k, v);
    auto join = [](const auto& items) {
      std::ostringstream out;
      for (std::size_t i = 0; i < items.size(); ++i) out << (i ? "," : "") << items[i];
      return out.str();
    };
    kv.set("experiment.strategies", join(strategies));
    kv.set("experiment.seeds", join(seeds));
    kv.set("experiment.noise_rates", join(noise_rates));
    kv.set("experiment.noise_strategy", noise_strategy);
    kv.set("experiment.k_values", join(k_values));
    kv.set("experiment.k_enc_layers", join(k_enc_layers));
    if (!export_checkpoint.empty()) kv.set("experiment.export_checkpoint", export_checkpoint);
    return kv;
  }

  static ExperimentConfig from_config(const KeyValueConfig& kv) {
    ExperimentConfig c;
    c.corpus = CorpusConfig::from_config(kv, "corpus.");
    if (!kv.has("corpus.noise")) c.corpus.noise = 0.2;
    c.data_dir = kv.get("corpus.data", "");
    c.model = model_config_from(kv);
    c.train = TrainConfig::from_config(kv);
    c.eval = EvalConfig::from_config(kv);
    auto trimmed = [](std::vector<std::string> v) {
      for (auto& s : v) s = trim(s);
      std::erase_if(v, [](const std::string& s) { return s.empty(); });
      return v;
    };
    c.strategies = trimmed(kv.get_list("experiment.strategies", c.strategies));
    if (kv.has("experiment.seeds")) c.seeds = parse_seed_list(trimmed(kv.get_list("experiment.seeds", {})));
    if (kv.has("experiment.noise_rates")) {
      c.noise_rates.clear();
      for (const auto& s : trimmed(kv.get_list("experiment.noise_rates", {})))
        c.noise_rates.push_back(KeyValueConfig::to_double("experiment.noise_rates", s));
    }
    c.noise_strategy = kv.get("experiment.noise_strategy", c.noise_strategy);
    if (kv.has("experiment.k_values")) {
      c.k_values.clear();
      for (const auto& s : trimmed(kv.get_list("experiment.k_values", {})))
        c.k_values.push_back(static_cast<int>(KeyValueConfig::to_int("experiment.k_values", s)));
    }
    if (kv.has("experiment.k_enc_layers")) {
      c.k_enc_layers.clear();
      for (const auto& s : trimmed(kv.get_list("experiment.k_enc_layers", {})))
        c.k_enc_layers.push_back(static_cast<int>(KeyValueConfig::to_int("experiment.k_enc_layers", s)));
    }
    c.export_checkpoint = kv.get("experiment.export_checkpoint", "");
    c.validate();
    return c;
  }
};

// ---------------------------------------------------------------------------
// Evaluation

// The first `max_per_direction` examples of each direction, in corpus order.
inline std::vector<Example> per_direction_subset(const std::vector<Example>& examples, int max_per_direction) {
  if (max_per_direction <= 0) return examples;
  std::map<Direction, int> seen;
  std::vector<Example> out;
  for (const auto& e : examples)
    if (seen[e.direction()]++ < max_per_direction) out.push_back(e);
  return out;
}

struct SplitEvaluation {
  std::vector<TokenSeq> hypotheses;
  std::vector<TokenSeq> references;
  std::vector<Direction> directions;
  LanguageRates rates;
  IntervalRateCurve intervals;
  double bleu = 0.0;
  double exact_match = 0.0;
  std::size_t truncated = 0;
  std::map<Direction, std::pair<double, double>> per_direction_quality;  // (bleu, exact match)
};

inline SplitEvaluation evaluate_examples(const ModelCheckpoint& ckpt, const StrategySpec& spec,
                                         const std::vector<Example>& examples, const EvalConfig& ec) {
  if (examples.empty()) throw MetricError("evaluate: no examples");
  SplitEvaluation ev;
  std::map<Direction, std::pair<std::vector<TokenSeq>, std::vector<TokenSeq>>> by_dir;
  for (const auto& e : examples) {
    const Translation t = translate(ckpt.params, ckpt.config, ckpt.vocab, spec, e.src, e.direction(), ec.decode);
    ev.truncated += t.truncated ? 1 : 0;
    ev.hypotheses.push_back(t.tokens);
    ev.references.push_back(e.tgt);
    ev.directions.push_back(e.direction());
    by_dir[e.direction()].first.push_back(t.tokens);
    by_dir[e.direction()].second.push_back(e.tgt);
  }
  ev.rates = language_rates(ev.hypotheses, ev.directions, ckpt.vocab);
  ev.intervals = interval_rates(ev.hypotheses, ev.directions, ckpt.vocab, ec.window);
  ev.bleu = bleu(ev.hypotheses, ev.references).score;
  ev.exact_match = exact_match(ev.hypotheses, ev.references);
  for (const auto& [dir, hr] : by_dir)
    ev.per_direction_quality[dir] = {bleu(hr.first, hr.second).score, exact_match(hr.first, hr.second)};
  return ev;
}

// Accuracy pooled over all windows at index >= `from`; nullopt when there are none.
inline std::optional<double> pooled_interval_acc(const IntervalRateCurve& curve, std::size_t from) {
  double weighted = 0.0;
  std::size_t n = 0;
  for (const auto& iv : curve.intervals) {
    if (iv.index < from) continue;
    weighted += iv.buckets.acc * static_cast<double>(iv.buckets.n);
    n += iv.buckets.n;
  }
  if (n == 0) return std::nullopt;
  return weighted / static_cast<double>(n);
}

// max - min accuracy over intervals holding at least `min_support_pct` percent
// of the interval-0 sample count.
inline double interval_spread(const IntervalRateCurve& curve, int min_support_pct) {
  if (curve.intervals.empty()) return 0.0;
  const double floor = static_cast<double>(curve.intervals.front().buckets.n) * min_support_pct / 100.0;
  double lo = 100.0, hi = 0.0;
  for (const auto& iv : curve.intervals) {
    if (static_cast<double>(iv.buckets.n) < floor) continue;
    lo = std::min(lo, iv.buckets.acc);
    hi = std::max(hi, iv.buckets.acc);
  }
  return hi >= lo ? hi - lo : 0.0;
}

// ---------------------------------------------------------------------------
// Session: corpora and trained models shared across analyses.

struct TrainedModel {
  std::string key;
  StrategySpec spec;
  std::uint64_t seed = 0;
  std::string corpus_label;
  std::size_t train_size = 0;
  std::optional<ModelCheckpoint> checkpoint;  // empty when training failed
  std::string error;
  double train_seconds = 0.0;
  double final_loss = std::numeric_limits<double>::quiet_NaN();
  bool from_cache = false;

  bool ok() const { return checkpoint.has_value(); }
};

struct CellResult {
  std::string strategy;
  std::uint64_t seed = 0;
  std::string corpus_label;
  std::shared_ptr<TrainedModel> model;
  std::optional<SplitEvaluation> supervised;
  std::optional<SplitEvaluation> zero_shot;
  std::string error;

  bool ok() const { return error.empty() && zero_shot.has_value(); }
};

class ExperimentSession {
 public:
  ExperimentSession(ExperimentConfig cfg, std::filesystem::path out_dir, std::ostream* log = nullptr)
      : cfg_(std::move(cfg)), out_(std::move(out_dir)), log_(log), start_(std::chrono::steady_clock::now()) {
    cfg_.validate();
    std::filesystem::create_directories(out_);
  }

  const ExperimentConfig& config() const { return cfg_; }
  const std::filesystem::path& out_dir() const { return out_; }
  std::ostream* log() const { return log_; }
  double elapsed_seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

  // Base corpus at a given noise rate (generated with corpus.seed, or loaded from corpus.data).
  const CorpusSet& corpus(double noise) {
    const std::string key = cfg_.data_dir.empty() ? std::to_string(noise) : "data";
    auto it = corpora_.find(key);
    if (it != corpora_.end()) return *it->second;
    auto set = std::make_shared<CorpusSet>();
    if (cfg_.data_dir.empty()) {
      CorpusConfig cc = cfg_.corpus;
      cc.noise = noise;
      *set = build_corpus(cc);
    } else {
      *set = load_corpus(cfg_.data_dir);
    }
    return *corpora_.emplace(key, std::move(set)).first->second;
  }

  const CorpusSet& default_corpus() { return corpus(cfg_.corpus.noise); }

  std::string corpus_label(double noise) const {
    if (!cfg_.data_dir.empty()) return "data";
    std::ostringstream s;
    s << "noise" << noise;
    return s.str();
  }

  // Train (or fetch) a model. Training failures are captured in the result.
  std::shared_ptr<TrainedModel> model(const StrategySpec& spec, std::uint64_t seed, const ParallelCorpus& train,
                                      const Vocabulary& vocab, const std::string& corpus_label,
                                      std::optional<ModelConfig> model_override = std::nullopt) {
    ModelConfig mc = model_override.value_or(cfg_.model);
    mc.vocab_size = vocab.size();
    TrainConfig tc = cfg_.train;
    tc.seed = seed;
    const std::string key = model_key(spec, tc, mc, train);
    if (auto it = models_.find(key); it != models_.end()) return it->second;

    auto m = std::make_shared<TrainedModel>();
    m->key = key;
    m->spec = spec;
    m->seed = seed;
    m->corpus_label = corpus_label;
    m->train_size = train.size();
    const auto path = out_ / "models" / (key + ".ckpt");
    try {
      spec.validate(mc.enc_layers);
      if (std::filesystem::exists(path)) {
        m->checkpoint = load_checkpoint(path);
        m->from_cache = true;
        m->final_loss = m->checkpoint->meta.get_double("final_loss", m->final_loss);
        m->train_seconds = m->checkpoint->meta.get_double("train_seconds", 0.0);
        say(spec.label() + " seed " + std::to_string(seed) + " (" + corpus_label + "): reused " + path.string());
      } else {
        say(spec.label() + " seed " + std::to_string(seed) + " (" + corpus_label + "): training " +
            std::to_string(tc.max_steps) + " steps on " + std::to_string(train.size()) + " pairs");
        const auto t0 = std::chrono::steady_clock::now();
        TrainResult r = lcs::train(train, vocab, mc, spec, tc);
        m->train_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (!r.log.empty()) {
          const std::size_t tail = std::min<std::size_t>(r.log.size(), 100);
          double sum = 0.0;
          for (std::size_t i = r.log.size() - tail; i < r.log.size(); ++i) sum += r.log[i].loss;
          m->final_loss = sum / static_cast<double>(tail);
        }
        std::ostringstream fl;
        fl << std::setprecision(10) << m->final_loss;
        r.checkpoint.meta.set("final_loss", fl.str());
        r.checkpoint.meta.set("train_seconds", std::to_string(m->train_seconds));
        r.checkpoint.meta.set("corpus", corpus_label);
        save_checkpoint(r.checkpoint, path);
        write_text_file(out_ / "models" / (key + ".log.csv"), step_log_csv(r.log));
        m->checkpoint = std::move(r.checkpoint);
      }
    } catch (const std::exception& e) {
      m->error = e.what();
      say(spec.label() + " seed " + std::to_string(seed) + ": failed: " + m->error);
    }
    models_.emplace(key, m);
    return m;
  }

  // Supervised and zero-shot evaluation of a trained model (cached per model).
  CellResult evaluate(const std::shared_ptr<TrainedModel>& m, const CorpusSet& set) {
    CellResult cell;
    cell.strategy = m->spec.label();
    cell.seed = m->seed;
    cell.corpus_label = m->corpus_label;
    cell.model = m;
    if (!m->ok()) {
      cell.error = m->error;
      return cell;
    }
    if (auto it = evals_.find(m->key); it != evals_.end()) {
      cell.supervised = it->second.first;
      cell.zero_shot = it->second.second;
      return cell;
    }
    try {
      const auto sup = per_direction_subset(set.test_sup.examples, cfg_.eval.max_per_direction);
      const auto zero = per_direction_subset(set.test_zero.examples, cfg_.eval.max_per_direction);
      cell.supervised = evaluate_examples(*m->checkpoint, m->spec, sup, cfg_.eval);
      cell.zero_shot = evaluate_examples(*m->checkpoint, m->spec, zero, cfg_.eval);
      evals_.emplace(m->key, std::make_pair(*cell.supervised, *cell.zero_shot));
    } catch (const std::exception& e) {
      cell.error = e.what();
    }
    return cell;
  }

  CellResult run_cell(const std::string& strategy, std::uint64_t seed) {
    CellResult cell;
    cell.strategy = strategy;
    cell.seed = seed;
    cell.corpus_label = corpus_label(cfg_.corpus.noise);
    try {
      const StrategySpec spec = make_strategy(strategy, cfg_.model.enc_layers);
      const CorpusSet& set = default_corpus();
      return evaluate(model(spec, seed, set.train, set.vocab, cell.corpus_label), set);
    } catch (const std::exception& e) {
      cell.error = e.what();
    }
    return cell;
  }

  void say(const std::string& msg) const {
    if (log_) *log_ << "[" << std::fixed << std::setprecision(1) << elapsed_seconds() << "s] " << msg << std::endl;
  }

  std::string config_hash() const { return hex64(fnv1a(cfg_.to_config().to_text())); }

 private:
  static std::string model_key(const StrategySpec& spec, const TrainConfig& tc, const ModelConfig& mc,
                               const ParallelCorpus& train) {
    std::string text = spec.to_config().to_text() + tc.to_config().to_text() + mc.to_config().to_text();
    text += hex64(fnv1a(to_jsonl(train)));
    return hex64(fnv1a(text));
  }

  ExperimentConfig cfg_;
  std::filesystem::path out_;
  std::ostream* log_;
  std::chrono::steady_clock::time_point start_;
  std::map<std::string, std::shared_ptr<CorpusSet>> corpora_;
  std::map<std::string, std::shared_ptr<TrainedModel>> models_;
  std::map<std::string, std::pair<SplitEvaluation, SplitEvaluation>> evals_;
};

// ---------------------------------------------------------------------------
// Output helpers

namespace detail {

inline std::string fmt(double v, int precision = 4) {
  if (std::isnan(v)) return "nan";
  std::ostringstream s;
  s << std::fixed << std::setprecision(precision) << v;
  return s.str();
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

struct MeanSpread {
  double mean = std::numeric_limits<double>::quiet_NaN();
  double spread = 0.0;  // sample standard deviation; 0 for a single value
  std::size_t n = 0;
};

inline MeanSpread mean_spread(const std::vector<double>& xs) {
  MeanSpread r;
  r.n = xs.size();
  if (xs.empty()) return r;
  double sum = 0.0;
  for (double x : xs) sum += x;
  r.mean = sum / static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double sq = 0.0;
    for (double x : xs) sq += (x - r.mean) * (x - r.mean);
    r.spread = std::sqrt(sq / static_cast<double>(xs.size() - 1));
  }
  return r;
}

inline std::string pm(const MeanSpread& m) {
  if (m.n == 0) return "n/a";
  return fmt(m.mean, 2) + " ± " + fmt(m.spread, 2);
}

// Plain text table with left-aligned first column and right-aligned others.
inline std::string text_table(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width(header.size(), 0);
  auto visual = [](const std::string& s) {
    std::size_t n = 0;
    for (unsigned char c : s) n += (c & 0xC0) != 0x80;  // count UTF-8 code points
    return n;
  };
  for (std::size_t i = 0; i < header.size(); ++i) width[i] = visual(header[i]);
  for (const auto& r : rows)
    for (std::size_t i = 0; i < r.size() && i < width.size(); ++i) width[i] = std::max(width[i], visual(r[i]));
  std::ostringstream out;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < width.size(); ++i) {
      const std::string c = i < cells.size() ? cells[i] : "";
      const std::string pad(width[i] - visual(c), ' ');
      out << (i ? "  " : "") << (i == 0 ? c + pad : pad + c);
    }
    out << "\n";
  };
  line(header);
  std::size_t total = 0;
  for (auto w : width) total += w;
  out << std::string(total + 2 * (width.size() - 1), '-') << "\n";
  for (const auto& r : rows) line(r);
  return out.str();
}

}  // namespace detail

inline void write_manifest(const ExperimentSession& session, const std::string& analysis,
                           const std::vector<std::string>& outputs) {
  nlohmann::json j;
  j["analysis"] = analysis;
  j["config_hash"] = session.config_hash();
  j["seeds"] = session.config().seeds;
  j["corpus_seed"] = session.config().corpus.seed;
  j["revision"] = kRevision;
  j["wall_seconds"] = session.elapsed_seconds();
  j["outputs"] = outputs;
  write_text_file(session.out_dir() / "run.cfg", session.config().to_config().to_text());
  write_text_file(session.out_dir() / "manifest.json", j.dump(2) + "\n");
}

// Files every analysis writes in addition to its own tables.
inline const std::vector<std::string> kCommonOutputs{"summary.txt", "run.cfg", "manifest.json"};

// ---------------------------------------------------------------------------
// Strategy comparison

struct ComparisonTable {
  std::vector<CellResult> cells;  // strategy-major, then seed
};

inline const char* kRatesHeader = "strategy,seed,corpus,split,direction,acc,to_src,to_en,to_other,n";
inline const char* kQualityHeader = "strategy,seed,corpus,split,direction,bleu,exact_match,n";
inline const char* kCompareHeader =
    "strategy,seed,corpus,status,sup_acc,sup_bleu,sup_em,zs_acc,zs_to_src,zs_to_en,zs_to_other,zs_bleu,zs_em,"
    "truncated,final_loss,train_seconds";
inline const char* kIntervalsHeader = "strategy,seed,corpus,interval,acc,to_src,to_en,to_other,n";
inline const char* kIntervalLangHeader = "strategy,seed,corpus,interval,lang,rate";
inline const char* kLayerSimHeader = "strategy,seed,layer,similarity,pairs_used,excluded";
inline const char* kKSweepHeader = "enc_layers,k,seed,status,sup_bleu,sup_em,zs_acc,zs_bleu,zs_em";
inline const char* kNoiseHeader =
    "strategy,seed,noise,variant,train_size,status,zs_acc,zs_to_src,zs_to_en,zs_to_other,zs_bleu,zs_em";

inline void append_rates(std::ostringstream& out, const CellResult& c, const std::string& split,
                         const SplitEvaluation& ev) {
  using detail::fmt;
  auto row = [&](const LanguageRateReport& r, const std::string& dir) {
    out << detail::csv_field(c.strategy) << "," << c.seed << "," << c.corpus_label << "," << split << "," << dir << ","
        << fmt(r.acc) << "," << fmt(r.to_src) << "," << fmt(r.to_en) << "," << fmt(r.to_other) << "," << r.n << "\n";
  };
  for (const auto& r : ev.rates.per_direction) row(r, direction_name(r.direction));
  row(ev.rates.macro, "avg");
}

inline void append_quality(std::ostringstream& out, const CellResult& c, const std::string& split,
                           const SplitEvaluation& ev) {
  using detail::fmt;
  std::map<Direction, std::size_t> counts;
  for (const auto& d : ev.directions) ++counts[d];
  for (const auto& [dir, q] : ev.per_direction_quality)
    out << detail::csv_field(c.strategy) << "," << c.seed << "," << c.corpus_label << "," << split << ","
        << direction_name(dir) << "," << fmt(q.first) << "," << fmt(q.second) << "," << counts[dir] << "\n";
  out << detail::csv_field(c.strategy) << "," << c.seed << "," << c.corpus_label << "," << split << ",all,"
      << fmt(ev.bleu) << "," << fmt(ev.exact_match) << "," << ev.hypotheses.size() << "\n";
}

inline void append_intervals(std::ostringstream& buckets, std::ostringstream& langs, const CellResult& c) {
  using detail::fmt;
  if (!c.zero_shot) return;
  for (const auto& iv : c.zero_shot->intervals.intervals) {
    const auto& b = iv.buckets;
    buckets << detail::csv_field(c.strategy) << "," << c.seed << "," << c.corpus_label << "," << iv.index << ","
            << fmt(b.acc) << "," << fmt(b.to_src) << "," << fmt(b.to_en) << "," << fmt(b.to_other) << "," << b.n
            << "\n";
    for (const auto& [lang, rate] : iv.lang_rates)
      langs << detail::csv_field(c.strategy) << "," << c.seed << "," << c.corpus_label << "," << iv.index << ","
            << lang << "," << fmt(rate) << "\n";
  }
}

inline std::string compare_row(const CellResult& c) {
  using detail::fmt;
  std::ostringstream out;
  out << detail::csv_field(c.strategy) << "," << c.seed << "," << c.corpus_label << ",";
  if (!c.ok()) {
    out << detail::csv_field("error: " + c.error) << ",,,,,,,,,,,,";
    return out.str() + "\n";
  }
  const auto& s = *c.supervised;
  const auto& z = *c.zero_shot;
  out << "ok," << fmt(s.rates.macro.acc) << "," << fmt(s.bleu) << "," << fmt(s.exact_match) << ","
      << fmt(z.rates.macro.acc) << "," << fmt(z.rates.macro.to_src) << "," << fmt(z.rates.macro.to_en) << ","
      << fmt(z.rates.macro.to_other) << "," << fmt(z.bleu) << "," << fmt(z.exact_match) << ","
      << (s.truncated + z.truncated) << "," << fmt(c.model->final_loss) << "," << fmt(c.model->train_seconds, 1)
      << "\n";
  return out.str();
}

inline std::string comparison_summary(const std::vector<CellResult>& cells) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<const CellResult*>> by;
  for (const auto& c : cells) {
    if (!by.count(c.strategy)) order.push_back(c.strategy);
    by[c.strategy].push_back(&c);
  }
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> failures;
  for (const auto& name : order) {
    std::vector<double> sb, se, za, zs, ze, zo, zb, zm;
    for (const CellResult* c : by[name]) {
      if (!c->ok()) {
        failures.push_back(name + " seed " + std::to_string(c->seed) + ": " + c->error);
        continue;
      }
      sb.push_back(c->supervised->bleu);
      se.push_back(c->supervised->exact_match);
      za.push_back(c->zero_shot->rates.macro.acc);
      zs.push_back(c->zero_shot->rates.macro.to_src);
      ze.push_back(c->zero_shot->rates.macro.to_en);
      zo.push_back(c->zero_shot->rates.macro.to_other);
      zb.push_back(c->zero_shot->bleu);
      zm.push_back(c->zero_shot->exact_match);
    }
    using detail::mean_spread;
    using detail::pm;
    rows.push_back({name, std::to_string(by[name].size()), pm(mean_spread(sb)), pm(mean_spread(se)),
                    pm(mean_spread(za)), pm(mean_spread(zs)), pm(mean_spread(ze)), pm(mean_spread(zo)),
                    pm(mean_spread(zb)), pm(mean_spread(zm))});
  }
  std::string out = detail::text_table(
      {"Strategy", "Seeds", "Sup BLEU", "Sup EM", "ZS Acc", "To-Src", "To-En", "To-Other", "ZS BLEU", "ZS EM"}, rows);
  for (const auto& f : failures) out += "failed: " + f + "\n";
  return out;
}

inline ComparisonTable run_strategy_comparison(ExperimentSession& session) {
  ComparisonTable table;
  for (const auto& s : session.config().strategies)
    for (std::uint64_t seed : session.config().seeds) table.cells.push_back(session.run_cell(s, seed));

  std::ostringstream compare, rates, quality;
  compare << kCompareHeader << "\n";
  rates << kRatesHeader << "\n";
  quality << kQualityHeader << "\n";
  for (const auto& c : table.cells) {
    compare << compare_row(c);
    if (!c.ok()) continue;
    append_rates(rates, c, "supervised", *c.supervised);
    append_rates(rates, c, "zero_shot", *c.zero_shot);
    append_quality(quality, c, "supervised", *c.supervised);
    append_quality(quality, c, "zero_shot", *c.zero_shot);
  }
  const auto& out = session.out_dir();
  write_text_file(out / "compare.csv", compare.str());
  write_text_file(out / "rates.csv", rates.str());
  write_text_file(out / "quality.csv", quality.str());
  write_text_file(out / "summary.txt", "Strategy comparison (mean ± sd over seeds; rates in %)\n\n" +
                                           comparison_summary(table.cells));
  write_manifest(session, "compare", {"compare.csv", "rates.csv", "quality.csv"});
  return table;
}

// ---------------------------------------------------------------------------
// Noise contrast

struct NoiseRow {
  double noise = 0.0;
  std::uint64_t seed = 0;
  std::size_t noisy_size = 0;
  std::size_t denoised_size = 0;
  std::size_t clean_count = 0;  // pairs absent from the corruption log
  CellResult noisy;
  CellResult denoised;

  std::optional<double> to_src_delta() const {
    if (!noisy.ok() || !denoised.ok()) return std::nullopt;
    return noisy.zero_shot->rates.macro.to_src - denoised.zero_shot->rates.macro.to_src;
  }
};

struct NoiseContrast {
  std::string strategy;
  std::vector<NoiseRow> rows;
};

inline NoiseContrast run_noise_contrast(ExperimentSession& session) {
  const auto& cfg = session.config();
  NoiseContrast result;
  const StrategySpec spec = make_strategy(cfg.noise_strategy, cfg.model.enc_layers);
  result.strategy = spec.label();
  std::vector<double> rates = cfg.data_dir.empty() ? cfg.noise_rates : std::vector<double>{cfg.corpus.noise};
  for (double r : rates) {
    const CorpusSet& set = session.corpus(r);
    const ParallelCorpus denoised = denoise_filter(set.train, set.vocab);
    for (std::uint64_t seed : cfg.seeds) {
      NoiseRow row;
      row.noise = cfg.data_dir.empty() ? r : set.train.noise_rate_applied;
      row.seed = seed;
      row.noisy_size = set.train.size();
      row.denoised_size = denoised.size();
      row.clean_count = set.train.size() - set.noise_log.size();
      const std::string label = session.corpus_label(r);
      row.noisy = session.evaluate(session.model(spec, seed, set.train, set.vocab, label), set);
      row.denoised = session.evaluate(session.model(spec, seed, denoised, set.vocab, label + "-denoised"), set);
      result.rows.push_back(std::move(row));
    }
  }

  using detail::fmt;
  std::ostringstream csv;
  csv << kNoiseHeader << "\n";
  std::vector<std::vector<std::string>> table;
  for (const auto& row : result.rows) {
    for (const auto* c : {&row.noisy, &row.denoised}) {
      const bool is_noisy = c == &row.noisy;
      csv << detail::csv_field(result.strategy) << "," << row.seed << "," << fmt(row.noise, 4) << ","
          << (is_noisy ? "noisy" : "denoised") << "," << (is_noisy ? row.noisy_size : row.denoised_size) << ",";
      if (!c->ok()) {
        csv << detail::csv_field("error: " + c->error) << ",,,,,,\n";
        continue;
      }
      const auto& m = c->zero_shot->rates.macro;
      csv << "ok," << fmt(m.acc) << "," << fmt(m.to_src) << "," << fmt(m.to_en) << "," << fmt(m.to_other) << ","
          << fmt(c->zero_shot->bleu) << "," << fmt(c->zero_shot->exact_match) << "\n";
    }
    auto cellstr = [](const CellResult& c, auto get) { return c.ok() ? fmt(get(c), 2) : std::string("failed"); };
    auto acc = [](const CellResult& c) { return c.zero_shot->rates.macro.acc; };
    auto src = [](const CellResult& c) { return c.zero_shot->rates.macro.to_src; };
    const auto delta = row.to_src_delta();
    table.push_back({fmt(row.noise, 2), std::to_string(row.seed), std::to_string(row.noisy_size),
                     std::to_string(row.denoised_size), cellstr(row.noisy, acc), cellstr(row.denoised, acc),
                     cellstr(row.noisy, src), cellstr(row.denoised, src), delta ? fmt(*delta, 2) : "n/a"});
  }
  write_text_file(session.out_dir() / "noise.csv", csv.str());
  write_text_file(session.out_dir() / "summary.txt",
                  "Noise contrast for " + result.strategy + " (zero-shot rates in %)\n\n" +
                      detail::text_table({"Noise", "Seed", "Noisy pairs", "Denoised pairs", "Acc noisy",
                                          "Acc denoised", "To-Src noisy", "To-Src denoised", "To-Src delta"},
                                         table));
  write_manifest(session, "noise", {"noise.csv"});
  return result;
}

// ---------------------------------------------------------------------------
// Interval analysis

struct IntervalAnalysis {
  std::vector<CellResult> cells;
};

inline std::string interval_summary(const std::vector<CellResult>& cells, int min_support) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& c : cells) {
    if (!c.ok()) {
      rows.push_back({c.strategy, std::to_string(c.seed), "failed", "", "", ""});
      continue;
    }
    const auto& curve = c.zero_shot->intervals;
    std::string accs;
    for (const auto& iv : curve.intervals) accs += (accs.empty() ? "" : " ") + detail::fmt(iv.buckets.acc, 1);
    const auto late = pooled_interval_acc(curve, 2);
    rows.push_back({c.strategy, std::to_string(c.seed),
                    curve.intervals.empty() ? "n/a" : detail::fmt(curve.intervals.front().buckets.acc, 2),
                    late ? detail::fmt(*late, 2) : "n/a", detail::fmt(interval_spread(curve, min_support), 2), accs});
  }
  return detail::text_table({"Strategy", "Seed", "Acc@0", "Acc@>=2", "Spread", "Acc by interval"}, rows);
}

inline IntervalAnalysis run_interval_analysis(ExperimentSession& session) {
  IntervalAnalysis result;
  for (const auto& s : session.config().strategies)
    for (std::uint64_t seed : session.config().seeds) result.cells.push_back(session.run_cell(s, seed));
  std::ostringstream buckets, langs;
  buckets << kIntervalsHeader << "\n";
  langs << kIntervalLangHeader << "\n";
  for (const auto& c : result.cells) append_intervals(buckets, langs, c);
  write_text_file(session.out_dir() / "intervals.csv", buckets.str());
  write_text_file(session.out_dir() / "intervals_lang.csv", langs.str());
  write_text_file(session.out_dir() / "summary.txt",
                  "Zero-shot language accuracy per " + std::to_string(session.config().eval.window) +
                      "-token interval (%)\n\n" +
                      interval_summary(result.cells, session.config().eval.min_interval_support));
  write_manifest(session, "intervals", {"intervals.csv", "intervals_lang.csv"});
  return result;
}

// ---------------------------------------------------------------------------
// Layer similarity

struct SimilarityCell {
  std::string strategy;
  std::uint64_t seed = 0;
  std::optional<SimilarityCurve> curve;
  std::string error;
};

struct SimilarityAnalysis {
  std::vector<SimilarityCell> cells;
};

inline SimilarityAnalysis run_layer_similarity(ExperimentSession& session) {
  const auto& cfg = session.config();
  SimilarityAnalysis result;
  const CorpusSet& set = session.default_corpus();
  const auto pairs = sentence_pairs(per_direction_subset(set.test_zero.examples, cfg.eval.similarity_pairs));
  for (const auto& s : cfg.strategies) {
    for (std::uint64_t seed : cfg.seeds) {
      SimilarityCell cell;
      cell.strategy = s;
      cell.seed = seed;
      try {
        const StrategySpec spec = make_strategy(s, cfg.model.enc_layers);
        cell.strategy = spec.label();
        auto m = session.model(spec, seed, set.train, set.vocab, session.corpus_label(cfg.corpus.noise));
        if (!m->ok()) throw std::runtime_error(m->error);
        cell.curve = layer_similarity(*m->checkpoint, pairs, spec);
      } catch (const std::exception& e) {
        cell.error = e.what();
      }
      result.cells.push_back(std::move(cell));
    }
  }
  std::ostringstream csv;
  csv << kLayerSimHeader << "\n";
  std::vector<std::vector<std::string>> rows;
  for (const auto& c : result.cells) {
    if (!c.curve) {
      rows.push_back({c.strategy, std::to_string(c.seed), "failed: " + c.error});
      continue;
    }
    std::string vals;
    for (const auto& p : c.curve->points) {
      csv << detail::csv_field(c.strategy) << "," << c.seed << "," << p.layer << "," << detail::fmt(p.value, 10) << ","
          << p.pairs_used << "," << c.curve->excluded << "\n";
      vals += (vals.empty() ? "" : " ") + detail::fmt(p.value, 4);
    }
    rows.push_back({c.strategy, std::to_string(c.seed), vals});
  }
  write_text_file(session.out_dir() / "layer_sim.csv", csv.str());
  write_text_file(session.out_dir() / "summary.txt",
                  "Mean cosine similarity of pooled encoder states for zero-shot translation pairs\n\n" +
                      detail::text_table({"Strategy", "Seed", "Similarity by layer"}, rows));
  write_manifest(session, "layersim", {"layer_sim.csv"});
  return result;
}

// ---------------------------------------------------------------------------
// Converter depth sweep

struct KSweepRow {
  int enc_layers = 0;
  int k = 0;
  std::uint64_t seed = 0;
  CellResult cell;
};

struct KSweep {
  std::vector<KSweepRow> rows;

  // Per depth, the k with the highest mean zero-shot BLEU.
  std::map<int, int> best_zero_shot_k() const {
    std::map<int, std::map<int, std::vector<double>>> acc;
    for (const auto& r : rows)
      if (r.cell.ok()) acc[r.enc_layers][r.k].push_back(r.cell.zero_shot->bleu);
    std::map<int, int> best;
    for (const auto& [depth, ks] : acc) {
      double top = -1.0;
      for (const auto& [k, v] : ks) {
        const double m = detail::mean_spread(v).mean;
        if (m > top) {
          top = m;
          best[depth] = k;
        }
      }
    }
    return best;
  }
};

inline KSweep run_k_sweep(ExperimentSession& session) {
  const auto& cfg = session.config();
  KSweep result;
  const CorpusSet& set = session.default_corpus();
  const std::string label = session.corpus_label(cfg.corpus.noise);
  for (int depth : cfg.k_enc_layers) {
    ModelConfig mc = cfg.model;
    mc.enc_layers = depth;
    for (int k : cfg.k_values) {
      for (std::uint64_t seed : cfg.seeds) {
        KSweepRow row;
        row.enc_layers = depth;
        row.k = k;
        row.seed = seed;
        row.cell.seed = seed;
        row.cell.corpus_label = label;
        row.cell.strategy = "LCS(k=" + std::to_string(k) + ")";
        if (k > depth) {
          row.cell.error = "k exceeds encoder depth";
        } else {
          row.cell = session.evaluate(session.model(StrategySpec::lcs(k), seed, set.train, set.vocab, label, mc), set);
        }
        result.rows.push_back(std::move(row));
      }
    }
  }
  using detail::fmt;
  std::ostringstream csv;
  csv << kKSweepHeader << "\n";
  std::map<std::pair<int, int>, std::vector<const KSweepRow*>> grouped;
  for (const auto& r : result.rows) {
    grouped[{r.enc_layers, r.k}].push_back(&r);
    csv << r.enc_layers << "," << r.k << "," << r.seed << ",";
    if (!r.cell.ok()) {
      csv << detail::csv_field("error: " + r.cell.error) << ",,,,,\n";
      continue;
    }
    csv << "ok," << fmt(r.cell.supervised->bleu) << "," << fmt(r.cell.supervised->exact_match) << ","
        << fmt(r.cell.zero_shot->rates.macro.acc) << "," << fmt(r.cell.zero_shot->bleu) << ","
        << fmt(r.cell.zero_shot->exact_match) << "\n";
  }
  std::vector<std::vector<std::string>> rows;
  for (const auto& [key, rs] : grouped) {
    std::vector<double> sb, za, zb;
    for (const auto* r : rs) {
      if (!r->cell.ok()) continue;
      sb.push_back(r->cell.supervised->bleu);
      za.push_back(r->cell.zero_shot->rates.macro.acc);
      zb.push_back(r->cell.zero_shot->bleu);
    }
    rows.push_back({std::to_string(key.first), std::to_string(key.second), detail::pm(detail::mean_spread(sb)),
                    detail::pm(detail::mean_spread(za)), detail::pm(detail::mean_spread(zb))});
  }
  std::string summary = "LCS converter depth sweep (mean ± sd over seeds)\n\n" +
                        detail::text_table({"Enc layers", "k", "Sup BLEU", "ZS Acc", "ZS BLEU"}, rows);
  for (const auto& [depth, k] : result.best_zero_shot_k())
    summary += "best zero-shot k for " + std::to_string(depth) + " layers: " + std::to_string(k) + "\n";
  write_text_file(session.out_dir() / "ksweep.csv", csv.str());
  write_text_file(session.out_dir() / "summary.txt", summary);
  write_manifest(session, "ksweep", {"ksweep.csv"});
  return result;
}

// ---------------------------------------------------------------------------
// Representation export

// Zero-shot test sentences encoded in their own direction, plus their
// references encoded in the reverse direction.
inline std::vector<SentenceToEncode> export_sentences(const std::vector<Example>& examples) {
  std::vector<SentenceToEncode> out;
  for (const auto& e : examples) out.push_back({e.src, {e.src_lang, e.tgt_lang}});
  for (const auto& e : examples) out.push_back({e.tgt, {e.tgt_lang, e.src_lang}});
  return out;
}

inline std::string export_file_name(const std::string& strategy_label, std::uint64_t seed) {
  std::string safe;
  for (char c : strategy_label) safe += std::isalnum(static_cast<unsigned char>(c)) || c == '-' ? c : '_';
  return "repr_" + safe + "_seed" + std::to_string(seed) + ".csv";
}

inline std::vector<std::string> run_export(ExperimentSession& session) {
  const auto& cfg = session.config();
  std::vector<std::string> files;
  std::vector<std::vector<std::string>> rows;
  if (!cfg.export_checkpoint.empty()) {
    const ModelCheckpoint ckpt = load_checkpoint(cfg.export_checkpoint);
    const StrategySpec spec = StrategySpec::from_config(ckpt.meta);
    const CorpusSet& set = session.default_corpus();
    const auto sentences = export_sentences(per_direction_subset(set.test_zero.examples, cfg.eval.similarity_pairs));
    const std::string name = export_file_name(spec.label(), 0);
    write_text_file(session.out_dir() / name,
                    representations_csv(export_encoder_representations(ckpt, sentences, spec)));
    files.push_back(name);
    rows.push_back({spec.label(), cfg.export_checkpoint, std::to_string(sentences.size()), name});
  } else {
    const CorpusSet& set = session.default_corpus();
    const auto sentences = export_sentences(per_direction_subset(set.test_zero.examples, cfg.eval.similarity_pairs));
    for (const auto& s : cfg.strategies) {
      for (std::uint64_t seed : cfg.seeds) {
        const StrategySpec spec = make_strategy(s, cfg.model.enc_layers);
        auto m = session.model(spec, seed, set.train, set.vocab, session.corpus_label(cfg.corpus.noise));
        if (!m->ok()) {
          rows.push_back({spec.label(), "seed " + std::to_string(seed), "0", "failed: " + m->error});
          continue;
        }
        const std::string name = export_file_name(spec.label(), seed);
        write_text_file(session.out_dir() / name,
                        representations_csv(export_encoder_representations(*m->checkpoint, sentences, spec)));
        files.push_back(name);
        rows.push_back({spec.label(), "seed " + std::to_string(seed), std::to_string(sentences.size()), name});
      }
    }
  }
  write_text_file(session.out_dir() / "summary.txt",
                  "Exported mean-pooled encoder representations\n\n" +
                      detail::text_table({"Strategy", "Source", "Sentences", "File"}, rows));
  write_manifest(session, "export", files);
  return files;
}

// Tables each analysis writes besides the common files.
inline std::vector<std::string> analysis_outputs(const std::string& analysis) {
  if (analysis == "compare") return {"compare.csv", "rates.csv", "quality.csv"};
  if (analysis == "noise") return {"noise.csv"};
  if (analysis == "intervals") return {"intervals.csv", "intervals_lang.csv"};
  if (analysis == "layersim") return {"layer_sim.csv"};
  if (analysis == "ksweep") return {"ksweep.csv"};
  if (analysis == "export") return {};
  throw ConfigError("unknown analysis `" + analysis + "`");
}

}  // namespace lcs
