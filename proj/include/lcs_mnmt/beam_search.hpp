#pragma once

// Length-penalized beam search and greedy decoding over any step model.
//
// A step model exposes:
//   std::size_t vocab_size() const;
//   void start();                                  // one empty hypothesis
//   std::vector<std::vector<double>> log_probs();  // one row per live hypothesis
//   void advance(std::span<const std::size_t> parents, std::span<const int> tokens);
// Tokens whose log-probability is -inf are never expanded.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

namespace lcs {

struct BeamConfig {
  int beam_size = 5;
  double length_penalty = 1.0;
  int max_len = 32;  // generated tokens, EOS included
  int eos = 2;
};

struct BeamHypothesis {
  std::vector<int> tokens;  // generated tokens; ends with EOS unless truncated
  double log_prob = 0.0;
  double score = 0.0;
  bool truncated = false;
};

template <class M>
concept StepModel = requires(M m, const M cm, std::span<const std::size_t> parents, std::span<const int> tokens) {
  { cm.vocab_size() } -> std::convertible_to<std::size_t>;
  m.start();
  { m.log_probs() } -> std::convertible_to<std::vector<std::vector<double>>>;
  m.advance(parents, tokens);
};

// GNMT normalization: log_prob / ((5 + length) / 6)^alpha.
inline double length_normalized_score(double log_prob, std::size_t length, double alpha) {
  if (alpha == 0.0) return log_prob;
  return log_prob / std::pow((5.0 + static_cast<double>(length)) / 6.0, alpha);
}

namespace detail {

// Higher score first; ties prefer finished over truncated, then shorter and
// lexicographically smaller token sequences.
inline bool better(const BeamHypothesis& a, const BeamHypothesis& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.truncated != b.truncated) return !a.truncated;
  return a.tokens < b.tokens;
}

}  // namespace detail

// Each step ranks every (hypothesis, token) extension by cumulative
// log-probability (ties: lower token id, then lower parent index). EOS
// extensions ranked inside the top `beam_size` are finalized; the best
// `beam_size` non-EOS extensions stay live. Search stops once `beam_size`
// hypotheses are finalized, no live hypothesis remains, or `max_len` is hit,
// in which case live hypotheses join the pool flagged as truncated.
template <StepModel Model>
BeamHypothesis beam_search(Model& model, const BeamConfig& cfg) {
  if (cfg.beam_size < 1) throw std::invalid_argument("beam_size must be >= 1");
  if (cfg.max_len < 1) throw std::invalid_argument("max_len must be >= 1");
  const auto k = static_cast<std::size_t>(cfg.beam_size);
  model.start();
  std::vector<BeamHypothesis> alive(1);
  std::vector<BeamHypothesis> finished;

  struct Candidate {
    double log_prob;
    int token;
    std::size_t parent;
  };
  std::vector<Candidate> cands;
  for (int step = 1; step <= cfg.max_len && !alive.empty(); ++step) {
    const auto lp = model.log_probs();
    cands.clear();
    for (std::size_t i = 0; i < alive.size(); ++i)
      for (std::size_t v = 0; v < lp[i].size(); ++v)
        if (lp[i][v] != -std::numeric_limits<double>::infinity())
          cands.push_back({alive[i].log_prob + lp[i][v], static_cast<int>(v), i});
    const std::size_t keep = std::min(cands.size(), 2 * k);
    std::partial_sort(cands.begin(), cands.begin() + static_cast<long>(keep), cands.end(),
                      [](const Candidate& a, const Candidate& b) {
                        if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
                        if (a.token != b.token) return a.token < b.token;
                        return a.parent < b.parent;
                      });
    std::vector<BeamHypothesis> next;
    std::vector<std::size_t> parents;
    std::vector<int> tokens;
    for (std::size_t r = 0; r < keep; ++r) {
      const auto& c = cands[r];
      BeamHypothesis h;
      h.tokens = alive[c.parent].tokens;
      h.tokens.push_back(c.token);
      h.log_prob = c.log_prob;
      if (c.token == cfg.eos) {
        if (r < k) {
          h.score = length_normalized_score(h.log_prob, h.tokens.size(), cfg.length_penalty);
          finished.push_back(std::move(h));
        }
      } else if (next.size() < k) {
        next.push_back(std::move(h));
        parents.push_back(c.parent);
        tokens.push_back(c.token);
      }
    }
    alive = std::move(next);
    if (finished.size() >= k) break;
    if (step == cfg.max_len) {
      for (auto& h : alive) {
        h.truncated = true;
        h.score = length_normalized_score(h.log_prob, h.tokens.size(), cfg.length_penalty);
        finished.push_back(std::move(h));
      }
      break;
    }
    if (!alive.empty()) model.advance(parents, tokens);
  }
  if (finished.empty()) {
    BeamHypothesis empty;
    empty.truncated = true;
    return empty;
  }
  return *std::min_element(finished.begin(), finished.end(), detail::better);
}

// Argmax at every step (lowest token id on ties) until EOS or max_len.
template <StepModel Model>
BeamHypothesis greedy_decode(Model& model, const BeamConfig& cfg) {
  model.start();
  BeamHypothesis h;
  for (int step = 1; step <= cfg.max_len; ++step) {
    const auto lp = model.log_probs().front();
    std::size_t best = 0;
    for (std::size_t v = 1; v < lp.size(); ++v)
      if (lp[v] > lp[best]) best = v;
    h.tokens.push_back(static_cast<int>(best));
    h.log_prob += lp[best];
    if (static_cast<int>(best) == cfg.eos) break;
    if (step == cfg.max_len) {
      h.truncated = true;
      break;
    }
    const std::size_t parent = 0;
    const int token = static_cast<int>(best);
    model.advance(std::span<const std::size_t>(&parent, 1), std::span<const int>(&token, 1));
  }
  h.score = length_normalized_score(h.log_prob, h.tokens.size(), cfg.length_penalty);
  return h;
}

}  // namespace lcs
