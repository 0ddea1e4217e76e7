#pragma once

// Layer-wise cross-lingual similarity of encoder representations and export
// of mean-pooled per-layer sentence vectors.
//
// A sentence representation at layer l is the mean over all positions (tags
// included) of that layer's output states. For a translation pair (x in A,
// y in B), x is encoded as the direction A->B and y as B->A.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "lcs_mnmt/checkpoint.hpp"
#include "lcs_mnmt/corpus.hpp"
#include "lcs_mnmt/langid.hpp"
#include "lcs_mnmt/strategies.hpp"
#include "lcs_mnmt/transformer.hpp"

namespace lcs {

struct SentencePair {
  TokenSeq x;
  std::string lang_x;
  TokenSeq y;
  std::string lang_y;
};

struct SimilarityPoint {
  int layer = 0;
  double value = 0.0;
  std::size_t pairs_used = 0;
};

struct SimilarityCurve {
  std::vector<SimilarityPoint> points;
  std::size_t excluded = 0;  // pair-layer cases dropped for a zero-norm pooled vector
};

struct PooledRepresentation {
  std::string lang;
  Direction direction;
  std::vector<std::vector<double>> layers;  // [enc_layers][d_model]
};

inline std::vector<double> mean_pool(const ad::Tensor& states) {
  const std::size_t rows = states.dim(0), d = states.dim(1);
  std::vector<double> out(d, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < d; ++i) out[i] += states.data()[r * d + i];
  for (double& v : out) v /= static_cast<double>(rows);
  return out;
}

// Cosine similarity; nullopt when either vector has zero norm.
inline std::optional<double> cosine(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ad::DimensionError("cosine: vectors differ in length");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return std::nullopt;
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

inline PooledRepresentation pooled_representation(const ModelCheckpoint& ckpt, const StrategySpec& spec,
                                                  const TokenSeq& tokens, const Direction& dir) {
  ad::NoGradGuard no_grad;
  const PreparedExample ex =
      prepare_example(tokens, {}, dir.first, dir.second, spec, ckpt.vocab, ckpt.config.enc_layers);
  const EncoderTrace trace = encode(ex.enc_input_ids, ex.plan, ckpt.params, ckpt.config);
  PooledRepresentation rep;
  rep.lang = dir.first;
  rep.direction = dir;
  for (const auto& [layer, states] : trace.layers) {
    (void)layer;
    rep.layers.push_back(mean_pool(states));
  }
  return rep;
}

inline SimilarityCurve similarity_from_representations(const std::vector<PooledRepresentation>& xs,
                                                       const std::vector<PooledRepresentation>& ys) {
  if (xs.size() != ys.size()) throw MetricError("similarity: representation lists differ in length");
  if (xs.empty()) throw MetricError("similarity: no sentence pairs");
  SimilarityCurve curve;
  const std::size_t layers = xs.front().layers.size();
  for (std::size_t l = 0; l < layers; ++l) {
    double sum = 0.0;
    std::size_t used = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      if (auto c = cosine(xs[i].layers.at(l), ys[i].layers.at(l))) {
        sum += *c;
        ++used;
      } else {
        ++curve.excluded;
      }
    }
    curve.points.push_back({static_cast<int>(l), used ? sum / static_cast<double>(used) : 0.0, used});
  }
  return curve;
}

inline SimilarityCurve layer_similarity(const ModelCheckpoint& ckpt, const std::vector<SentencePair>& pairs,
                                        const StrategySpec& spec) {
  std::vector<PooledRepresentation> xs, ys;
  for (const auto& p : pairs) {
    xs.push_back(pooled_representation(ckpt, spec, p.x, {p.lang_x, p.lang_y}));
    ys.push_back(pooled_representation(ckpt, spec, p.y, {p.lang_y, p.lang_x}));
  }
  return similarity_from_representations(xs, ys);
}

struct SentenceToEncode {
  TokenSeq tokens;
  Direction direction;
};

inline std::vector<PooledRepresentation> export_encoder_representations(const ModelCheckpoint& ckpt,
                                                                         const std::vector<SentenceToEncode>& sentences,
                                                                         const StrategySpec& spec) {
  std::vector<PooledRepresentation> out;
  out.reserve(sentences.size());
  for (const auto& s : sentences) out.push_back(pooled_representation(ckpt, spec, s.tokens, s.direction));
  return out;
}

// One row per (sentence, layer): index,lang,direction,layer,v0..v{d-1}.
// Values are written with 17 significant digits so they parse back exactly.
inline std::string representations_csv(const std::vector<PooledRepresentation>& reps) {
  std::ostringstream out;
  const std::size_t d = reps.empty() || reps.front().layers.empty() ? 0 : reps.front().layers.front().size();
  out << "index,lang,direction,layer";
  for (std::size_t i = 0; i < d; ++i) out << ",v" << i;
  out << "\n" << std::setprecision(17);
  for (std::size_t s = 0; s < reps.size(); ++s) {
    for (std::size_t l = 0; l < reps[s].layers.size(); ++l) {
      out << s << "," << reps[s].lang << "," << direction_name(reps[s].direction) << "," << l;
      for (double v : reps[s].layers[l]) out << "," << v;
      out << "\n";
    }
  }
  return out.str();
}

inline std::vector<PooledRepresentation> parse_representations_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || !line.starts_with("index,lang,direction,layer")) {
    throw ConfigError("representation CSV: missing header");
  }
  std::vector<PooledRepresentation> reps;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split(line, ',');
    if (cells.size() < 4) throw ConfigError("representation CSV: short row");
    const auto index = static_cast<std::size_t>(KeyValueConfig::to_int("index", cells[0]));
    if (index >= reps.size()) reps.resize(index + 1);
    auto& rep = reps[index];
    rep.lang = cells[1];
    const auto dash = cells[2].find('-');
    if (dash == std::string::npos) throw ConfigError("representation CSV: bad direction " + cells[2]);
    rep.direction = {cells[2].substr(0, dash), cells[2].substr(dash + 1)};
    const auto layer = static_cast<std::size_t>(KeyValueConfig::to_int("layer", cells[3]));
    if (layer >= rep.layers.size()) rep.layers.resize(layer + 1);
    for (std::size_t i = 4; i < cells.size(); ++i) rep.layers[layer].push_back(KeyValueConfig::to_double("v", cells[i]));
  }
  return reps;
}

// Translation pairs from a zero-shot split: x = source sentence, y = reference.
inline std::vector<SentencePair> sentence_pairs(const std::vector<Example>& examples) {
  std::vector<SentencePair> out;
  out.reserve(examples.size());
  for (const auto& e : examples) out.push_back({e.src, e.src_lang, e.tgt, e.tgt_lang});
  return out;
}

}  // namespace lcs
