#pragma once

// English-centric synthetic parallel corpora over cipher languages, with
// seeded wrong-target noise injection and detector-based denoising.

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "lcs_mnmt/langid.hpp"
#include "lcs_mnmt/util.hpp"
#include "lcs_mnmt/vocabulary.hpp"

namespace lcs {

enum class Split { Train, Valid, TestSupervised, TestZeroShot };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Valid: return "valid";
    case Split::TestSupervised: return "test_sup";
    case Split::TestZeroShot: return "test_zero";
  }
  return "train";
}

struct Example {
  TokenSeq src;
  TokenSeq tgt;
  std::string src_lang;
  std::string tgt_lang;

  Direction direction() const { return {src_lang, tgt_lang}; }
  bool operator==(const Example&) const = default;
};

struct ParallelCorpus {
  Split split = Split::Train;
  std::vector<Example> examples;
  double noise_rate_applied = 0.0;

  std::size_t size() const { return examples.size(); }
};

struct NoiseRecord {
  std::size_t index = 0;
  std::string src_lang;
  std::string tgt_lang;
  std::string rendered_lang;
};

struct CorpusConfig {
  int n_langs = 4;
  int grammar_size = 200;
  int range_width = 0;  // 0: equal to grammar_size
  int pairs_per_direction = 8000;
  int valid_pairs = 100;
  int test_pairs = 500;
  int min_len = 5;
  int max_len = 15;
  double noise = 0.0;
  std::uint64_t seed = 1;

  int effective_range_width() const { return range_width > 0 ? range_width : grammar_size; }

  KeyValueConfig to_config(const std::string& prefix = "") const {
    KeyValueConfig kv;
    kv.set(prefix + "langs", std::to_string(n_langs));
    kv.set(prefix + "grammar", std::to_string(grammar_size));
    kv.set(prefix + "range_width", std::to_string(effective_range_width()));
    kv.set(prefix + "pairs", std::to_string(pairs_per_direction));
    kv.set(prefix + "valid_pairs", std::to_string(valid_pairs));
    kv.set(prefix + "test_pairs", std::to_string(test_pairs));
    kv.set(prefix + "min_len", std::to_string(min_len));
    kv.set(prefix + "max_len", std::to_string(max_len));
    kv.set(prefix + "noise", format_double(noise));
    kv.set(prefix + "seed", std::to_string(seed));
    return kv;
  }

  // Keys absent from `kv` keep their defaults.
  static CorpusConfig from_config(const KeyValueConfig& kv, const std::string& prefix = "") {
    CorpusConfig c;
    c.n_langs = static_cast<int>(kv.get_int(prefix + "langs", c.n_langs));
    c.grammar_size = static_cast<int>(kv.get_int(prefix + "grammar", c.grammar_size));
    c.range_width = static_cast<int>(kv.get_int(prefix + "range_width", c.range_width));
    c.pairs_per_direction = static_cast<int>(kv.get_int(prefix + "pairs", c.pairs_per_direction));
    c.valid_pairs = static_cast<int>(kv.get_int(prefix + "valid_pairs", c.valid_pairs));
    c.test_pairs = static_cast<int>(kv.get_int(prefix + "test_pairs", c.test_pairs));
    c.min_len = static_cast<int>(kv.get_int(prefix + "min_len", c.min_len));
    c.max_len = static_cast<int>(kv.get_int(prefix + "max_len", c.max_len));
    c.noise = kv.get_double(prefix + "noise", c.noise);
    c.seed = static_cast<std::uint64_t>(kv.get_int(prefix + "seed", static_cast<long>(c.seed)));
    return c;
  }
};

struct CorpusSet {
  Vocabulary vocab;
  ParallelCorpus train;
  ParallelCorpus valid;
  ParallelCorpus test_sup;
  ParallelCorpus test_zero;
  std::vector<NoiseRecord> noise_log;
};

// Supervised directions: en->X and X->en. Zero-shot: X->Y for X != Y, both non-English.
inline std::vector<Direction> supervised_directions(const std::vector<std::string>& codes) {
  std::vector<Direction> out;
  for (const auto& x : codes) {
    if (x == kEnglish) continue;
    out.emplace_back(kEnglish, x);
    out.emplace_back(x, kEnglish);
  }
  return out;
}

inline std::vector<Direction> zero_shot_directions(const std::vector<std::string>& codes) {
  std::vector<Direction> out;
  for (const auto& x : codes)
    for (const auto& y : codes)
      if (x != kEnglish && y != kEnglish && x != y) out.emplace_back(x, y);
  return out;
}

// n concept sequences with lengths uniform in [min_len, max_len] and concept
// ids uniform over the grammar.
inline std::vector<std::vector<int>> generate_concepts(int grammar_size, int range_width, int min_len, int max_len,
                                                       int n, Rng& rng) {
  if (grammar_size > range_width) {
    throw ConfigError("grammar size " + std::to_string(grammar_size) + " exceeds per-language range width " +
                      std::to_string(range_width));
  }
  if (grammar_size < 1) throw ConfigError("grammar size must be positive");
  if (min_len < 3 || max_len < min_len) throw ConfigError("sentence lengths must satisfy 3 <= min <= max");
  if (n < 0) throw ConfigError("number of sequences must be non-negative");
  std::vector<std::vector<int>> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    std::vector<int> seq(static_cast<std::size_t>(rng.uniform_int(min_len, max_len)));
    for (int& c : seq) c = static_cast<int>(rng.uniform_index(static_cast<std::size_t>(grammar_size)));
    out.push_back(std::move(seq));
  }
  return out;
}

inline std::vector<std::vector<int>> generate_concepts(int grammar_size, int range_width, int min_len, int max_len,
                                                       int n, std::uint64_t seed) {
  Rng rng(seed);
  return generate_concepts(grammar_size, range_width, min_len, max_len, n, rng);
}

// Wrong-target noise: a seeded `rate` fraction of pairs get their target
// re-rendered in the source language (copy noise) or, with equal probability,
// in a third language.
inline std::pair<ParallelCorpus, std::vector<NoiseRecord>> inject_noise(const ParallelCorpus& corpus,
                                                                        const Vocabulary& vocab, double rate,
                                                                        std::uint64_t seed) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("noise rate must lie in [0, 1)");
  ParallelCorpus out = corpus;
  out.noise_rate_applied = rate;
  std::vector<NoiseRecord> log;
  if (rate == 0.0) return {out, log};
  Rng rng(seed ^ 0x4e015eULL);
  const auto codes = vocab.codes();
  for (std::size_t i = 0; i < out.examples.size(); ++i) {
    if (rng.uniform01() >= rate) continue;
    auto& ex = out.examples[i];
    std::vector<std::string> thirds;
    for (const auto& c : codes)
      if (c != ex.src_lang && c != ex.tgt_lang) thirds.push_back(c);
    const bool copy = thirds.empty() || rng.uniform01() < 0.5;
    const std::string wrong = copy ? ex.src_lang : thirds[rng.uniform_index(thirds.size())];
    const auto concepts = unrender(ex.src, vocab.language(ex.src_lang));
    ex.tgt = render(concepts, vocab.language(wrong));
    log.push_back({i, ex.src_lang, ex.tgt_lang, wrong});
  }
  return {out, log};
}

// Keeps the pairs whose detected target language equals the labeled one.
inline ParallelCorpus denoise_filter(const ParallelCorpus& corpus, const Vocabulary& vocab) {
  ParallelCorpus out;
  out.split = corpus.split;
  out.noise_rate_applied = corpus.noise_rate_applied;
  for (const auto& ex : corpus.examples)
    if (detect_language(ex.tgt, vocab) == ex.tgt_lang) out.examples.push_back(ex);
  return out;
}

inline CorpusSet build_corpus(const CorpusConfig& cfg) {
  if (cfg.n_langs < 3) throw ConfigError("a corpus needs at least 3 languages including en");
  CorpusSet set;
  set.vocab = Vocabulary::build(Vocabulary::default_codes(cfg.n_langs), cfg.grammar_size,
                                cfg.effective_range_width(), cfg.seed);
  const auto codes = set.vocab.codes();
  const auto sup = supervised_directions(codes);
  const auto zero = zero_shot_directions(codes);

  Rng rng(cfg.seed);
  std::set<std::vector<int>> used;
  auto fresh = [&]() {
    while (true) {
      auto seq = generate_concepts(cfg.grammar_size, cfg.effective_range_width(), cfg.min_len, cfg.max_len, 1, rng)
                     .front();
      if (used.insert(seq).second) return seq;
    }
  };
  auto fill = [&](ParallelCorpus& corpus, Split split, const std::vector<Direction>& dirs, int per_dir) {
    corpus.split = split;
    for (const auto& [s, t] : dirs) {
      for (int i = 0; i < per_dir; ++i) {
        const auto concepts = fresh();
        corpus.examples.push_back(
            {render(concepts, set.vocab.language(s)), render(concepts, set.vocab.language(t)), s, t});
      }
    }
  };
  fill(set.train, Split::Train, sup, cfg.pairs_per_direction);
  fill(set.valid, Split::Valid, sup, cfg.valid_pairs);
  fill(set.test_sup, Split::TestSupervised, sup, cfg.test_pairs);
  fill(set.test_zero, Split::TestZeroShot, zero, cfg.test_pairs);
  if (cfg.noise > 0.0) {
    auto [noisy, log] = inject_noise(set.train, set.vocab, cfg.noise, cfg.seed);
    set.train = std::move(noisy);
    set.noise_log = std::move(log);
  }
  return set;
}

// ---------------------------------------------------------------------------
// JSONL serialization: one {"src","tgt","src_lang","tgt_lang"} object per line.

inline std::string to_jsonl(const ParallelCorpus& corpus) {
  std::string out;
  for (const auto& ex : corpus.examples) {
    nlohmann::ordered_json j;
    j["src"] = ex.src;
    j["tgt"] = ex.tgt;
    j["src_lang"] = ex.src_lang;
    j["tgt_lang"] = ex.tgt_lang;
    out += j.dump() + "\n";
  }
  return out;
}

inline ParallelCorpus parse_jsonl(std::istream& in, Split split) {
  ParallelCorpus corpus;
  corpus.split = split;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      corpus.examples.push_back({j.at("src").get<TokenSeq>(), j.at("tgt").get<TokenSeq>(),
                                 j.at("src_lang").get<std::string>(), j.at("tgt_lang").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("malformed corpus line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return corpus;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write " + path.string());
  f << text;
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot read " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline std::string noise_log_jsonl(const std::vector<NoiseRecord>& log) {
  std::string out;
  for (const auto& r : log) {
    nlohmann::ordered_json j;
    j["index"] = r.index;
    j["src_lang"] = r.src_lang;
    j["tgt_lang"] = r.tgt_lang;
    j["rendered_lang"] = r.rendered_lang;
    out += j.dump() + "\n";
  }
  return out;
}

inline std::vector<NoiseRecord> parse_noise_log(const std::string& text) {
  std::vector<NoiseRecord> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    const auto j = nlohmann::json::parse(line);
    out.push_back({j.at("index").get<std::size_t>(), j.at("src_lang").get<std::string>(),
                   j.at("tgt_lang").get<std::string>(), j.at("rendered_lang").get<std::string>()});
  }
  return out;
}

inline constexpr const char* kCorpusFiles[] = {"train.jsonl", "valid.jsonl", "test_sup.jsonl", "test_zero.jsonl",
                                               "noise_log.jsonl", "vocab.cfg", "corpus.cfg"};

inline void write_corpus(const CorpusSet& set, const CorpusConfig& cfg, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_text_file(dir / "train.jsonl", to_jsonl(set.train));
  write_text_file(dir / "valid.jsonl", to_jsonl(set.valid));
  write_text_file(dir / "test_sup.jsonl", to_jsonl(set.test_sup));
  write_text_file(dir / "test_zero.jsonl", to_jsonl(set.test_zero));
  write_text_file(dir / "noise_log.jsonl", noise_log_jsonl(set.noise_log));
  write_text_file(dir / "vocab.cfg", set.vocab.to_text());
  write_text_file(dir / "corpus.cfg", cfg.to_config().to_text());
}

inline CorpusSet load_corpus(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw ConfigError("corpus directory not found: " + dir.string());
  CorpusSet set;
  set.vocab = Vocabulary::from_text(read_text_file(dir / "vocab.cfg"));
  auto load = [&](const char* name, Split split) {
    std::istringstream in(read_text_file(dir / name));
    return parse_jsonl(in, split);
  };
  set.train = load("train.jsonl", Split::Train);
  set.valid = load("valid.jsonl", Split::Valid);
  set.test_sup = load("test_sup.jsonl", Split::TestSupervised);
  set.test_zero = load("test_zero.jsonl", Split::TestZeroShot);
  if (std::filesystem::exists(dir / "noise_log.jsonl")) {
    set.noise_log = parse_noise_log(read_text_file(dir / "noise_log.jsonl"));
  }
  if (std::filesystem::exists(dir / "corpus.cfg")) {
    const auto kv = KeyValueConfig::load((dir / "corpus.cfg").string());
    set.train.noise_rate_applied = kv.get_double("noise", 0.0);
  }
  return set;
}

}  // namespace lcs
