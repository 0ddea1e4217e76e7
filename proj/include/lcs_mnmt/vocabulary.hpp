#pragma once

// Shared vocabulary of the synthetic cipher languages.
//
// Layout: four special tokens, one tag per language, then one disjoint id
// range per language. Each language renders a concept sequence by a bijective
// concept->surface permutation followed by a word-order transform, so the
// language of any surface token is known exactly.

#include <algorithm>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "lcs_mnmt/util.hpp"

namespace lcs {

class VocabularyError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using TokenSeq = std::vector<int>;

enum class OrderTransform { Identity, Reverse, Rotate, SwapPairs };

inline std::string to_string(OrderTransform t) {
  switch (t) {
    case OrderTransform::Identity: return "identity";
    case OrderTransform::Reverse: return "reverse";
    case OrderTransform::Rotate: return "rotate";
    case OrderTransform::SwapPairs: return "swap-pairs";
  }
  return "identity";
}

inline OrderTransform parse_order_transform(std::string_view s) {
  if (s == "identity") return OrderTransform::Identity;
  if (s == "reverse") return OrderTransform::Reverse;
  if (s == "rotate") return OrderTransform::Rotate;
  if (s == "swap-pairs") return OrderTransform::SwapPairs;
  throw ConfigError("unknown order transform: " + std::string(s));
}

struct SyntheticLanguage {
  std::string code;
  int tag_id = 0;
  int range_begin = 0;  // half-open [range_begin, range_end)
  int range_end = 0;
  std::vector<int> permutation;  // concept id -> offset inside the range
  OrderTransform order = OrderTransform::Identity;
  int rotate_by = 0;

  bool owns(int token) const { return token >= range_begin && token < range_end; }
};

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr int kFirstTag = 4;

  // Language codes: "en" first, then "aa", "bb", ... Word-order transforms
  // cycle through reverse / rotate / swap-pairs for the non-English languages.
  static std::vector<std::string> default_codes(int n_langs) {
    if (n_langs < 1 || n_langs > 27) throw ConfigError("number of languages must lie in [1, 27]");
    std::vector<std::string> codes{"en"};
    for (int i = 1; i < n_langs; ++i) {
      const char c = static_cast<char>('a' + i - 1);
      codes.push_back(std::string(2, c));
    }
    return codes;
  }

  static Vocabulary build(const std::vector<std::string>& codes, int grammar_size, int range_width,
                          std::uint64_t seed) {
    if (grammar_size < 1) throw ConfigError("grammar size must be positive");
    if (range_width < grammar_size) {
      throw ConfigError("grammar size " + std::to_string(grammar_size) + " exceeds per-language range width " +
                        std::to_string(range_width));
    }
    Vocabulary v;
    v.grammar_size_ = grammar_size;
    v.range_width_ = range_width;
    Rng rng(seed ^ 0x5eed5eedULL);
    const int n = static_cast<int>(codes.size());
    for (int i = 0; i < n; ++i) {
      SyntheticLanguage lang;
      lang.code = codes[static_cast<std::size_t>(i)];
      lang.tag_id = kFirstTag + i;
      lang.range_begin = kFirstTag + n + i * range_width;
      lang.range_end = lang.range_begin + range_width;
      lang.permutation.resize(static_cast<std::size_t>(grammar_size));
      std::iota(lang.permutation.begin(), lang.permutation.end(), 0);
      rng.shuffle(lang.permutation);
      if (i == 0) {
        lang.order = OrderTransform::Identity;
      } else {
        switch ((i - 1) % 3) {
          case 0: lang.order = OrderTransform::Reverse; break;
          case 1:
            lang.order = OrderTransform::Rotate;
            lang.rotate_by = 2 + (i - 1) / 3;
            break;
          default: lang.order = OrderTransform::SwapPairs; break;
        }
      }
      v.languages_.push_back(std::move(lang));
    }
    v.validate();
    return v;
  }

  void validate() const {
    for (std::size_t i = 0; i < languages_.size(); ++i) {
      const auto& a = languages_[i];
      if (a.range_end - a.range_begin < grammar_size_) {
        throw ConfigError("language " + a.code + " range is narrower than the grammar");
      }
      std::vector<int> sorted = a.permutation;
      std::sort(sorted.begin(), sorted.end());
      for (int c = 0; c < static_cast<int>(sorted.size()); ++c) {
        if (sorted[static_cast<std::size_t>(c)] != c || static_cast<int>(sorted.size()) != grammar_size_) {
          throw ConfigError("language " + a.code + " permutation is not a bijection over the grammar");
        }
      }
      for (std::size_t j = i + 1; j < languages_.size(); ++j) {
        const auto& b = languages_[j];
        if (a.code == b.code) throw ConfigError("duplicate language code " + a.code);
        if (a.range_begin < b.range_end && b.range_begin < a.range_end) {
          throw ConfigError("overlapping id ranges for languages " + a.code + " and " + b.code);
        }
      }
    }
  }

  int size() const {
    int top = kFirstTag + static_cast<int>(languages_.size());
    for (const auto& l : languages_) top = std::max(top, l.range_end);
    return top;
  }
  int grammar_size() const { return grammar_size_; }
  int range_width() const { return range_width_; }
  const std::vector<SyntheticLanguage>& languages() const { return languages_; }
  std::vector<std::string> codes() const {
    std::vector<std::string> out;
    for (const auto& l : languages_) out.push_back(l.code);
    return out;
  }

  bool has_language(std::string_view code) const {
    return std::any_of(languages_.begin(), languages_.end(), [&](const auto& l) { return l.code == code; });
  }

  const SyntheticLanguage& language(std::string_view code) const {
    for (const auto& l : languages_)
      if (l.code == code) return l;
    throw VocabularyError("unknown language: " + std::string(code));
  }

  int tag(std::string_view code) const { return language(code).tag_id; }

  bool is_tag(int token) const {
    return token >= kFirstTag && token < kFirstTag + static_cast<int>(languages_.size());
  }

  // Specials and language tags carry no language evidence.
  bool is_special(int token) const {
    return token < kFirstTag + static_cast<int>(languages_.size());
  }

  std::optional<std::string> language_of(int token) const {
    for (const auto& l : languages_)
      if (l.owns(token)) return l.code;
    return std::nullopt;
  }

  std::string to_text() const {
    KeyValueConfig kv;
    std::string codes_joined;
    for (const auto& l : languages_) codes_joined += (codes_joined.empty() ? "" : ",") + l.code;
    kv.set("languages", codes_joined);
    kv.set("grammar_size", std::to_string(grammar_size_));
    kv.set("range_width", std::to_string(range_width_));
    for (const auto& l : languages_) {
      kv.set("lang." + l.code + ".order", to_string(l.order));
      kv.set("lang." + l.code + ".rotate_by", std::to_string(l.rotate_by));
      std::string perm;
      for (int p : l.permutation) perm += (perm.empty() ? "" : " ") + std::to_string(p);
      kv.set("lang." + l.code + ".permutation", perm);
    }
    return kv.to_text();
  }

  static Vocabulary from_config(const KeyValueConfig& kv) {
    Vocabulary v;
    v.grammar_size_ = static_cast<int>(kv.get_int("grammar_size"));
    v.range_width_ = static_cast<int>(kv.get_int("range_width"));
    const auto codes = split(kv.get("languages"), ',');
    const int n = static_cast<int>(codes.size());
    for (int i = 0; i < n; ++i) {
      SyntheticLanguage lang;
      lang.code = codes[static_cast<std::size_t>(i)];
      lang.tag_id = kFirstTag + i;
      lang.range_begin = kFirstTag + n + i * v.range_width_;
      lang.range_end = lang.range_begin + v.range_width_;
      lang.order = parse_order_transform(kv.get("lang." + lang.code + ".order"));
      lang.rotate_by = static_cast<int>(kv.get_int("lang." + lang.code + ".rotate_by", 0));
      for (const auto& p : split(kv.get("lang." + lang.code + ".permutation"), ' '))
        lang.permutation.push_back(static_cast<int>(KeyValueConfig::to_int("permutation", p)));
      v.languages_.push_back(std::move(lang));
    }
    v.validate();
    return v;
  }

  static Vocabulary from_text(std::string_view text) { return from_config(KeyValueConfig::parse(text)); }

  bool operator==(const Vocabulary& other) const { return to_text() == other.to_text(); }

 private:
  int grammar_size_ = 0;
  int range_width_ = 0;
  std::vector<SyntheticLanguage> languages_;
};

namespace detail {

inline std::vector<int> apply_order(std::vector<int> seq, const SyntheticLanguage& lang) {
  const std::size_t n = seq.size();
  switch (lang.order) {
    case OrderTransform::Identity: break;
    case OrderTransform::Reverse: std::reverse(seq.begin(), seq.end()); break;
    case OrderTransform::Rotate:
      if (n > 0) std::rotate(seq.begin(), seq.begin() + static_cast<long>(lang.rotate_by % n), seq.end());
      break;
    case OrderTransform::SwapPairs:
      for (std::size_t i = 0; i + 1 < n; i += 2) std::swap(seq[i], seq[i + 1]);
      break;
  }
  return seq;
}

inline std::vector<int> undo_order(std::vector<int> seq, const SyntheticLanguage& lang) {
  const std::size_t n = seq.size();
  switch (lang.order) {
    case OrderTransform::Rotate:
      if (n > 0) std::rotate(seq.begin(), seq.end() - static_cast<long>(lang.rotate_by % n), seq.end());
      return seq;
    default: return apply_order(std::move(seq), lang);  // the other transforms are involutions
  }
}

}  // namespace detail

// Concept ids -> surface token ids of `lang`.
inline TokenSeq render(const std::vector<int>& concepts, const SyntheticLanguage& lang) {
  TokenSeq out;
  out.reserve(concepts.size());
  for (int c : concepts) {
    if (c < 0 || c >= static_cast<int>(lang.permutation.size())) {
      throw VocabularyError("concept " + std::to_string(c) + " is outside the grammar");
    }
    out.push_back(lang.range_begin + lang.permutation[static_cast<std::size_t>(c)]);
  }
  return detail::apply_order(std::move(out), lang);
}

inline std::vector<int> unrender(const TokenSeq& tokens, const SyntheticLanguage& lang) {
  std::vector<int> inverse(lang.permutation.size());
  for (std::size_t c = 0; c < lang.permutation.size(); ++c)
    inverse[static_cast<std::size_t>(lang.permutation[c])] = static_cast<int>(c);
  std::vector<int> concepts;
  concepts.reserve(tokens.size());
  for (int t : detail::undo_order(tokens, lang)) {
    if (!lang.owns(t) || t - lang.range_begin >= static_cast<int>(inverse.size())) {
      throw VocabularyError("token " + std::to_string(t) + " is not a surface form of " + lang.code);
    }
    concepts.push_back(inverse[static_cast<std::size_t>(t - lang.range_begin)]);
  }
  return concepts;
}

}  // namespace lcs
