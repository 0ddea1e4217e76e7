#pragma once

// Language identification and translation-quality metrics over token ids:
// exact range-majority detection, language rates with the
// Acc / To-Src / To-En / To-Other decomposition, windowed (interval) rates,
// corpus BLEU and exact-match accuracy.

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "lcs_mnmt/vocabulary.hpp"

namespace lcs {

class MetricError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline const std::string kUnknownLanguage = "unknown";
inline const std::string kEnglish = "en";

using Direction = std::pair<std::string, std::string>;  // (source, target)

inline std::string direction_name(const Direction& d) { return d.first + "-" + d.second; }

// The language whose id range covers a strict majority of the non-special
// tokens; "unknown" on ties, empty input or no majority.
inline std::string detect_language(const TokenSeq& tokens, const Vocabulary& vocab) {
  std::map<std::string, int> counts;
  int evidence = 0;
  for (int t : tokens) {
    if (vocab.is_special(t)) continue;
    ++evidence;
    if (auto lang = vocab.language_of(t)) ++counts[*lang];
  }
  for (const auto& [lang, count] : counts)
    if (2 * count > evidence) return lang;
  return kUnknownLanguage;
}

inline TokenSeq strip_special(const TokenSeq& tokens, const Vocabulary& vocab) {
  TokenSeq out;
  for (int t : tokens)
    if (!vocab.is_special(t)) out.push_back(t);
  return out;
}

struct LanguageRateReport {
  Direction direction;
  double acc = 0.0;
  double to_src = 0.0;
  double to_en = 0.0;
  double to_other = 0.0;
  std::size_t n = 0;

  double total() const { return acc + to_src + to_en + to_other; }
};

// Buckets are exclusive and checked in order target, source, English, other,
// so supervised directions (where English is the source or target) still sum
// to 100.
enum class RateBucket { Acc, ToSrc, ToEn, ToOther };

inline RateBucket classify(const std::string& detected, const Direction& dir) {
  if (detected == dir.second) return RateBucket::Acc;
  if (detected == dir.first) return RateBucket::ToSrc;
  if (detected == kEnglish) return RateBucket::ToEn;
  return RateBucket::ToOther;
}

struct LanguageRates {
  std::vector<LanguageRateReport> per_direction;  // sorted by direction
  LanguageRateReport macro;                       // unweighted mean over directions
};

namespace detail {

struct BucketCounts {
  std::size_t acc = 0, to_src = 0, to_en = 0, to_other = 0, n = 0;

  void add(RateBucket b) {
    ++n;
    switch (b) {
      case RateBucket::Acc: ++acc; break;
      case RateBucket::ToSrc: ++to_src; break;
      case RateBucket::ToEn: ++to_en; break;
      case RateBucket::ToOther: ++to_other; break;
    }
  }

  LanguageRateReport report(const Direction& dir) const {
    LanguageRateReport r;
    r.direction = dir;
    r.n = n;
    const double scale = 100.0 / static_cast<double>(n);
    r.acc = static_cast<double>(acc) * scale;
    r.to_src = static_cast<double>(to_src) * scale;
    r.to_en = static_cast<double>(to_en) * scale;
    r.to_other = 100.0 - r.acc - r.to_src - r.to_en;
    if (r.to_other < 0.0) r.to_other = 0.0;
    return r;
  }
};

}  // namespace detail

inline LanguageRates language_rates(const std::vector<TokenSeq>& hypotheses, const std::vector<Direction>& directions,
                                    const Vocabulary& vocab) {
  if (hypotheses.size() != directions.size()) throw MetricError("language_rates: hypotheses and directions differ");
  if (hypotheses.empty()) throw MetricError("language_rates: no hypotheses");
  std::map<Direction, detail::BucketCounts> counts;
  for (std::size_t i = 0; i < hypotheses.size(); ++i)
    counts[directions[i]].add(classify(detect_language(hypotheses[i], vocab), directions[i]));
  LanguageRates out;
  for (const auto& [dir, c] : counts) out.per_direction.push_back(c.report(dir));
  out.macro.direction = {"avg", "avg"};
  for (const auto& r : out.per_direction) {
    out.macro.acc += r.acc;
    out.macro.to_src += r.to_src;
    out.macro.to_en += r.to_en;
    out.macro.n += r.n;
  }
  const double k = static_cast<double>(out.per_direction.size());
  out.macro.acc /= k;
  out.macro.to_src /= k;
  out.macro.to_en /= k;
  out.macro.to_other = std::max(0.0, 100.0 - out.macro.acc - out.macro.to_src - out.macro.to_en);
  return out;
}

// ---------------------------------------------------------------------------
// Interval rates along generated sentences.

struct IntervalRates {
  std::size_t index = 0;
  LanguageRateReport buckets;                 // direction is ("all", "all")
  std::map<std::string, double> lang_rates;   // detected language -> %
};

struct IntervalRateCurve {
  std::size_t window = 5;
  std::vector<IntervalRates> intervals;
};

// Consecutive windows of `window` tokens. A trailing partial window keeps its
// own interval when it holds at least ceil(window/2) tokens (or is the only
// window); otherwise it is merged into the previous window.
inline std::vector<std::pair<std::size_t, std::size_t>> split_windows(std::size_t length, std::size_t window) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  if (length == 0) return out;
  const std::size_t full = length / window;
  const std::size_t rem = length % window;
  for (std::size_t k = 0; k < full; ++k) out.emplace_back(k * window, (k + 1) * window);
  if (rem > 0) {
    if (full == 0 || rem >= (window + 1) / 2) {
      out.emplace_back(full * window, length);
    } else {
      out.back().second = length;
    }
  }
  return out;
}

inline IntervalRateCurve interval_rates(const std::vector<TokenSeq>& hypotheses,
                                        const std::vector<Direction>& directions, const Vocabulary& vocab,
                                        std::size_t window = 5) {
  if (window < 1) throw MetricError("interval_rates: window must be >= 1");
  if (hypotheses.size() != directions.size()) throw MetricError("interval_rates: hypotheses and directions differ");
  std::vector<detail::BucketCounts> counts;
  std::vector<std::map<std::string, std::size_t>> langs;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    const TokenSeq content = strip_special(hypotheses[i], vocab);
    const auto windows = split_windows(content.size(), window);
    for (std::size_t k = 0; k < windows.size(); ++k) {
      if (counts.size() <= k) {
        counts.resize(k + 1);
        langs.resize(k + 1);
      }
      const TokenSeq piece(content.begin() + static_cast<long>(windows[k].first),
                           content.begin() + static_cast<long>(windows[k].second));
      const std::string lang = detect_language(piece, vocab);
      counts[k].add(classify(lang, directions[i]));
      ++langs[k][lang];
    }
  }
  IntervalRateCurve curve;
  curve.window = window;
  for (std::size_t k = 0; k < counts.size(); ++k) {
    IntervalRates ir;
    ir.index = k;
    ir.buckets = counts[k].report({"all", "all"});
    for (const auto& [lang, c] : langs[k])
      ir.lang_rates[lang] = 100.0 * static_cast<double>(c) / static_cast<double>(counts[k].n);
    curve.intervals.push_back(std::move(ir));
  }
  return curve;
}

// ---------------------------------------------------------------------------
// Corpus BLEU on token ids.

enum class BleuSmoothing { None, Exp };

struct BleuResult {
  double score = 0.0;
  std::vector<double> precisions;  // percentages
  double brevity_penalty = 0.0;
  std::size_t hyp_length = 0;
  std::size_t ref_length = 0;
};

namespace detail {

inline std::map<std::vector<int>, std::size_t> ngram_counts(const TokenSeq& seq, std::size_t n) {
  std::map<std::vector<int>, std::size_t> out;
  if (seq.size() < n) return out;
  for (std::size_t i = 0; i + n <= seq.size(); ++i)
    ++out[std::vector<int>(seq.begin() + static_cast<long>(i), seq.begin() + static_cast<long>(i + n))];
  return out;
}

}  // namespace detail

// Geometric mean of clipped n-gram precisions times the brevity penalty.
// Exp smoothing replaces each zero-match precision by 1 / (2^k * total), where
// k counts the zero-match orders so far.
inline BleuResult bleu(const std::vector<TokenSeq>& hypotheses, const std::vector<TokenSeq>& references,
                       std::size_t max_n = 4, BleuSmoothing smoothing = BleuSmoothing::Exp) {
  if (hypotheses.size() != references.size()) throw MetricError("bleu: hypotheses and references differ in count");
  if (hypotheses.empty()) throw MetricError("bleu: empty corpus");
  std::vector<std::size_t> correct(max_n, 0), totals(max_n, 0);
  BleuResult res;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    res.hyp_length += hypotheses[i].size();
    res.ref_length += references[i].size();
    for (std::size_t n = 1; n <= max_n; ++n) {
      const auto hyp = detail::ngram_counts(hypotheses[i], n);
      const auto ref = detail::ngram_counts(references[i], n);
      for (const auto& [gram, count] : hyp) {
        totals[n - 1] += count;
        if (auto it = ref.find(gram); it != ref.end()) correct[n - 1] += std::min(count, it->second);
      }
    }
  }
  res.precisions.assign(max_n, 0.0);
  double smooth = 1.0;
  for (std::size_t n = 0; n < max_n; ++n) {
    if (totals[n] == 0) break;
    if (correct[n] == 0) {
      if (smoothing == BleuSmoothing::Exp) {
        smooth *= 2.0;
        res.precisions[n] = 100.0 / (smooth * static_cast<double>(totals[n]));
      }
    } else {
      res.precisions[n] = 100.0 * static_cast<double>(correct[n]) / static_cast<double>(totals[n]);
    }
  }
  if (res.hyp_length == 0) {
    res.brevity_penalty = 0.0;
  } else if (res.hyp_length >= res.ref_length) {
    res.brevity_penalty = 1.0;
  } else {
    res.brevity_penalty =
        std::exp(1.0 - static_cast<double>(res.ref_length) / static_cast<double>(res.hyp_length));
  }
  if (std::any_of(res.precisions.begin(), res.precisions.end(), [](double p) { return p <= 0.0; })) {
    res.score = 0.0;
    return res;
  }
  double log_sum = 0.0;
  for (double p : res.precisions) log_sum += std::log(p / 100.0);
  res.score = 100.0 * res.brevity_penalty * std::exp(log_sum / static_cast<double>(max_n));
  return res;
}

inline double exact_match(const std::vector<TokenSeq>& hypotheses, const std::vector<TokenSeq>& references) {
  if (hypotheses.size() != references.size()) throw MetricError("exact_match: lists differ in length");
  if (hypotheses.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) hits += hypotheses[i] == references[i] ? 1 : 0;
  return 100.0 * static_cast<double>(hits) / static_cast<double>(hypotheses.size());
}

}  // namespace lcs
