#pragma once

// Language-tag strategies: where tags go on the encoder and decoder inputs,
// and which encoder layers receive the target-language embedding (converter
// layers), hide the tag (mask schedule) or get it back (restore / swap).

#include <algorithm>
#include <cmath>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "lcs_mnmt/autodiff.hpp"
#include "lcs_mnmt/plan.hpp"
#include "lcs_mnmt/util.hpp"
#include "lcs_mnmt/vocabulary.hpp"

namespace lcs {

enum class StrategyName { TEnc, SEncTDec, STEnc, STEncTDec, TEncTDec, TEncMask, LCS, LCSVariant };
enum class TagKind { Source, Target };

inline const std::vector<StrategyName>& all_strategy_names() {
  static const std::vector<StrategyName> names = {StrategyName::TEnc,      StrategyName::SEncTDec,
                                                  StrategyName::STEnc,     StrategyName::STEncTDec,
                                                  StrategyName::TEncTDec,  StrategyName::TEncMask,
                                                  StrategyName::LCS,       StrategyName::LCSVariant};
  return names;
}

inline std::string to_string(StrategyName n) {
  switch (n) {
    case StrategyName::TEnc: return "T-Enc";
    case StrategyName::SEncTDec: return "S-Enc-T-Dec";
    case StrategyName::STEnc: return "ST-Enc";
    case StrategyName::STEncTDec: return "ST-Enc-T-Dec";
    case StrategyName::TEncTDec: return "T-Enc-T-Dec";
    case StrategyName::TEncMask: return "T-Enc-Mask";
    case StrategyName::LCS: return "LCS";
    case StrategyName::LCSVariant: return "LCS-variant";
  }
  return "?";
}

inline StrategyName parse_strategy_name(std::string_view s) {
  for (StrategyName n : all_strategy_names())
    if (to_string(n) == s) return n;
  throw ConfigError("unknown strategy '" + std::string(s) + "'");
}

inline std::string to_string(std::optional<TagKind> t) {
  if (!t) return "none";
  return *t == TagKind::Source ? "S" : "T";
}

// Accepts S / T / none (also source / target / _).
inline std::optional<TagKind> parse_tag_kind(std::string_view s) {
  if (s == "S" || s == "s" || s == "source") return TagKind::Source;
  if (s == "T" || s == "t" || s == "target") return TagKind::Target;
  if (s == "none" || s == "_" || s.empty()) return std::nullopt;
  throw ConfigError("tag must be S, T or none, got '" + std::string(s) + "'");
}

// Layers masked and restored by the T-Enc-Mask probe: the tag is hidden in
// layers 0..L-3 and its initial embedding is added back before layer L-2.
struct MaskSchedule {
  std::set<int> layers;
  std::optional<int> restore_layer;

  bool empty() const { return layers.empty() && !restore_layer; }
};

// Converter depth used when none is given: 2 for a 6-layer encoder, otherwise
// about 15% of the depth, at least 1.
inline int default_converter_k(int enc_layers) {
  if (enc_layers == 6) return 2;
  return std::max(1, static_cast<int>(std::lround(0.15 * enc_layers)));
}

struct StrategySpec {
  StrategyName name = StrategyName::TEnc;
  std::vector<TagKind> encoder_tags;
  std::optional<TagKind> decoder_tag;
  int converter_k = 0;
  std::optional<TagKind> converter_stage_tag;
  std::optional<TagKind> shallow_stage_tag;
  std::set<int> mask_schedule;
  std::optional<int> restore_layer;
  bool inject_target_embedding = false;

  bool is_lcs_family() const { return name == StrategyName::LCS || name == StrategyName::LCSVariant; }

  // Table-style label: "LCS", "LCS-variant(sS-cT)", "LCS-variant(sS-cS-Remove)".
  std::string label() const {
    if (name != StrategyName::LCSVariant) return to_string(name);
    auto letter = [](std::optional<TagKind> t) { return t ? (*t == TagKind::Source ? "S" : "T") : "_"; };
    std::string s = std::string("s") + letter(shallow_stage_tag) + "-c" + letter(converter_stage_tag);
    if (!decoder_tag) s += "-Remove";
    else if (*decoder_tag == TagKind::Source) s += "-dS";
    if (!inject_target_embedding) s += "-noinject";
    return "LCS-variant(" + s + ")";
  }

  void validate(int enc_layers) const {
    if (converter_k < 0) throw ConfigError("converter k must be >= 0");
    if (converter_k > enc_layers) throw ConfigError("converter k exceeds the number of encoder layers");
    if (!is_lcs_family() && converter_k != 0) throw ConfigError("converter k applies to LCS strategies only");
    if (is_lcs_family()) {
      if (converter_stage_tag && !shallow_stage_tag) {
        throw ConfigError("a converter-stage tag requires a shallow-stage tag to replace");
      }
    }
    for (int l : mask_schedule)
      if (l < 0 || l >= enc_layers) throw ConfigError("mask schedule layer out of range");
    if (restore_layer && (*restore_layer < 0 || *restore_layer >= enc_layers)) {
      throw ConfigError("restore layer out of range");
    }
    if (encoder_tags.size() > 2) throw ConfigError("at most two encoder tags are supported");
  }

  KeyValueConfig to_config() const {
    KeyValueConfig kv;
    kv.set("strategy.name", to_string(name));
    std::string enc;
    for (std::size_t i = 0; i < encoder_tags.size(); ++i) enc += (i ? "," : "") + to_string(encoder_tags[i]);
    kv.set("strategy.encoder_tags", enc);
    kv.set("strategy.decoder_tag", to_string(decoder_tag));
    kv.set("strategy.k", std::to_string(converter_k));
    kv.set("strategy.shallow_tag", to_string(shallow_stage_tag));
    kv.set("strategy.converter_tag", to_string(converter_stage_tag));
    std::string mask;
    for (int l : mask_schedule) mask += (mask.empty() ? "" : ",") + std::to_string(l);
    kv.set("strategy.mask_schedule", mask);
    kv.set("strategy.restore_layer", restore_layer ? std::to_string(*restore_layer) : "none");
    kv.set("strategy.inject", inject_target_embedding ? "true" : "false");
    return kv;
  }

  static StrategySpec from_config(const KeyValueConfig& kv) {
    StrategySpec s;
    s.name = parse_strategy_name(kv.get("strategy.name"));
    for (const auto& t : kv.get_list("strategy.encoder_tags", {}))
      if (auto k = parse_tag_kind(t)) s.encoder_tags.push_back(*k);
    s.decoder_tag = parse_tag_kind(kv.get("strategy.decoder_tag", "none"));
    s.converter_k = static_cast<int>(kv.get_int("strategy.k", 0));
    s.shallow_stage_tag = parse_tag_kind(kv.get("strategy.shallow_tag", "none"));
    s.converter_stage_tag = parse_tag_kind(kv.get("strategy.converter_tag", "none"));
    for (const auto& l : kv.get_list("strategy.mask_schedule", {}))
      s.mask_schedule.insert(static_cast<int>(KeyValueConfig::to_int("strategy.mask_schedule", l)));
    const std::string restore = kv.get("strategy.restore_layer", "none");
    if (restore != "none") s.restore_layer = static_cast<int>(KeyValueConfig::to_int("strategy.restore_layer", restore));
    s.inject_target_embedding = kv.get_bool("strategy.inject", false);
    return s;
  }

  bool operator==(const StrategySpec&) const = default;

  static StrategySpec t_enc() {
    StrategySpec s;
    s.name = StrategyName::TEnc;
    s.encoder_tags = {TagKind::Target};
    return s;
  }
  static StrategySpec s_enc_t_dec() {
    StrategySpec s;
    s.name = StrategyName::SEncTDec;
    s.encoder_tags = {TagKind::Source};
    s.decoder_tag = TagKind::Target;
    return s;
  }
  static StrategySpec st_enc() {
    StrategySpec s;
    s.name = StrategyName::STEnc;
    s.encoder_tags = {TagKind::Source, TagKind::Target};
    return s;
  }
  static StrategySpec st_enc_t_dec() {
    StrategySpec s = st_enc();
    s.name = StrategyName::STEncTDec;
    s.decoder_tag = TagKind::Target;
    return s;
  }
  static StrategySpec t_enc_t_dec() {
    StrategySpec s = t_enc();
    s.name = StrategyName::TEncTDec;
    s.decoder_tag = TagKind::Target;
    return s;
  }
  static StrategySpec t_enc_mask(int enc_layers);
  static StrategySpec lcs(int k) {
    StrategySpec s;
    s.name = StrategyName::LCS;
    s.encoder_tags = {TagKind::Source};
    s.shallow_stage_tag = TagKind::Source;
    s.converter_stage_tag = TagKind::Source;
    s.decoder_tag = TagKind::Target;
    s.converter_k = k;
    s.inject_target_embedding = true;
    return s;
  }
  // Placement variants: shallow / converter stage tags (nullopt = no tag) and
  // an optional decoder tag (nullopt = "Remove").
  static StrategySpec lcs_variant(std::optional<TagKind> shallow, std::optional<TagKind> converter,
                                  std::optional<TagKind> decoder, int k, bool inject = true) {
    StrategySpec s;
    s.name = StrategyName::LCSVariant;
    s.shallow_stage_tag = shallow;
    s.converter_stage_tag = converter;
    if (shallow) s.encoder_tags = {*shallow};
    s.decoder_tag = decoder;
    s.converter_k = k;
    s.inject_target_embedding = inject;
    return s;
  }
};

inline MaskSchedule build_mask_schedule(const StrategySpec& spec, int enc_layers) {
  MaskSchedule m;
  if (spec.name != StrategyName::TEncMask) return m;
  if (enc_layers < 3) throw ConfigError("T-Enc-Mask needs at least 3 encoder layers");
  for (int l = 0; l <= enc_layers - 3; ++l) m.layers.insert(l);
  m.restore_layer = enc_layers - 2;
  return m;
}

inline StrategySpec StrategySpec::t_enc_mask(int enc_layers) {
  StrategySpec s = t_enc();
  s.name = StrategyName::TEncMask;
  const MaskSchedule m = build_mask_schedule(s, enc_layers);
  s.mask_schedule = m.layers;
  s.restore_layer = m.restore_layer;
  return s;
}

// Strategy from a name plus optional overrides, as selected on the command
// line. Unset overrides keep the strategy's defaults.
struct StrategyOverrides {
  std::optional<int> k;
  std::optional<std::string> shallow_tag;
  std::optional<std::string> converter_tag;
  std::optional<std::string> decoder_tag;
};

inline StrategySpec make_strategy(std::string_view name, int enc_layers, const StrategyOverrides& o = {}) {
  const StrategyName n = parse_strategy_name(name);
  const int k = o.k.value_or(default_converter_k(enc_layers));
  StrategySpec s;
  switch (n) {
    case StrategyName::TEnc: s = StrategySpec::t_enc(); break;
    case StrategyName::SEncTDec: s = StrategySpec::s_enc_t_dec(); break;
    case StrategyName::STEnc: s = StrategySpec::st_enc(); break;
    case StrategyName::STEncTDec: s = StrategySpec::st_enc_t_dec(); break;
    case StrategyName::TEncTDec: s = StrategySpec::t_enc_t_dec(); break;
    case StrategyName::TEncMask: s = StrategySpec::t_enc_mask(enc_layers); break;
    case StrategyName::LCS: s = StrategySpec::lcs(k); break;
    case StrategyName::LCSVariant:
      s = StrategySpec::lcs_variant(TagKind::Source, TagKind::Source, TagKind::Target, k);
      break;
  }
  if (s.is_lcs_family()) {
    const bool custom = o.shallow_tag || o.converter_tag || o.decoder_tag;
    if (custom && n == StrategyName::LCS) s.name = StrategyName::LCSVariant;
    if (o.shallow_tag) {
      s.shallow_stage_tag = parse_tag_kind(*o.shallow_tag);
      s.encoder_tags.clear();
      if (s.shallow_stage_tag) s.encoder_tags = {*s.shallow_stage_tag};
    }
    if (o.converter_tag) s.converter_stage_tag = parse_tag_kind(*o.converter_tag);
    if (o.decoder_tag) s.decoder_tag = parse_tag_kind(*o.decoder_tag);
  } else if (o.shallow_tag || o.converter_tag) {
    throw ConfigError("--shallow-tag and --converter-tag apply to LCS strategies only");
  } else if (o.decoder_tag) {
    s.decoder_tag = parse_tag_kind(*o.decoder_tag);
  }
  if (o.k && !s.is_lcs_family()) throw ConfigError("--k applies to LCS strategies only");
  s.validate(enc_layers);
  return s;
}

// Converter injection: every row of h shifted by e_t.
inline ad::Tensor converter_inject(const ad::Tensor& h, const ad::Tensor& e_t) {
  if (h.rank() != 2 || e_t.rank() != 1 || h.dim(1) != e_t.dim(0)) {
    throw ad::DimensionError("converter_inject: expected h [seq, d] and e_t [d]");
  }
  return ad::add_bias(h, e_t);
}

inline PreparedExample prepare_example(const TokenSeq& src, const TokenSeq& tgt, const std::string& src_lang,
                                       const std::string& tgt_lang, const StrategySpec& spec, const Vocabulary& vocab,
                                       int enc_layers) {
  const int src_tag = vocab.tag(src_lang);
  const int tgt_tag = vocab.tag(tgt_lang);
  auto tag_of = [&](TagKind k) { return k == TagKind::Source ? src_tag : tgt_tag; };
  spec.validate(enc_layers);

  PreparedExample ex;
  ex.src_lang = src_lang;
  ex.tgt_lang = tgt_lang;
  for (TagKind k : spec.encoder_tags) ex.enc_input_ids.push_back(tag_of(k));
  ex.enc_input_ids.insert(ex.enc_input_ids.end(), src.begin(), src.end());
  ex.dec_input_ids.push_back(spec.decoder_tag ? tag_of(*spec.decoder_tag) : Vocabulary::kBos);
  ex.dec_input_ids.insert(ex.dec_input_ids.end(), tgt.begin(), tgt.end());
  ex.dec_target_ids = tgt;
  ex.dec_target_ids.push_back(Vocabulary::kEos);

  InjectionPlan& plan = ex.plan;
  for (int l : spec.mask_schedule) plan.mask_schedule.insert({l, 0});
  if (spec.restore_layer) plan.restore = TagEdit{*spec.restore_layer, 0, tgt_tag};
  if (spec.is_lcs_family() && spec.converter_k > 0) {
    const int boundary = enc_layers - spec.converter_k;
    for (int l = boundary; l < enc_layers; ++l) plan.converter_layers.insert(l);
    if (spec.inject_target_embedding) plan.injected_embedding_id = tgt_tag;
    if (spec.shallow_stage_tag) {
      if (!spec.converter_stage_tag) {
        for (int l = boundary; l < enc_layers; ++l) plan.mask_schedule.insert({l, 0});
      } else if (*spec.converter_stage_tag != *spec.shallow_stage_tag) {
        plan.swap = TagEdit{boundary, 0, tag_of(*spec.converter_stage_tag)};
      }
    }
  }
  return ex;
}

}  // namespace lcs
