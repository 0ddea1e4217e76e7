#pragma once

// Inference without the tape: an incremental decoder that caches per-layer
// self-attention keys/values for every live hypothesis, a step-model adapter
// for beam search, and sentence-level translation under a tag strategy.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "lcs_mnmt/beam_search.hpp"
#include "lcs_mnmt/langid.hpp"
#include "lcs_mnmt/strategies.hpp"
#include "lcs_mnmt/transformer.hpp"

namespace lcs {

class IncrementalDecoder {
 public:
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Map = Eigen::Map<const RowMat>;
  using VecMap = Eigen::Map<const Eigen::RowVectorXd>;

  // `memory` is the final encoder output [mem_len, d_model] of one sentence.
  IncrementalDecoder(const ModelParams& p, const ModelConfig& cfg, const ad::Tensor& memory,
                     std::vector<std::uint8_t> memory_mask)
      : p_(p), cfg_(cfg), d_(static_cast<std::size_t>(cfg.d_model)), mem_mask_(std::move(memory_mask)) {
    mem_len_ = memory.dim(0);
    if (memory.dim(1) != d_ || mem_mask_.size() != mem_len_) {
      throw ad::DimensionError("IncrementalDecoder: memory does not match model");
    }
    Map mem(memory.data().data(), static_cast<long>(mem_len_), static_cast<long>(d_));
    for (int l = 0; l < cfg.dec_layers; ++l) {
      const std::string pre = "dec." + std::to_string(l) + ".cross";
      cross_k_.push_back(mem * w(pre + ".k.weight"));
      cross_v_.push_back((mem * w(pre + ".v.weight")).rowwise() + b(pre + ".v.bias"));
    }
  }

  std::size_t vocab_size() const { return static_cast<std::size_t>(cfg_.vocab_size); }
  std::size_t live() const { return pending_.size(); }
  std::size_t position() const { return pos_; }

  // A single hypothesis whose prefix is `first_token`.
  void start(int first_token) {
    pending_ = {first_token};
    pos_ = 0;
    self_k_.assign(static_cast<std::size_t>(cfg_.dec_layers), std::vector<std::vector<double>>(1));
    self_v_ = self_k_;
  }

  // Next-token logits for every live hypothesis: [live, V].
  RowMat logits() {
    const auto n = static_cast<long>(pending_.size());
    if (n == 0) throw ad::ContractError("IncrementalDecoder: no live hypotheses");
    if (pos_ >= static_cast<std::size_t>(cfg_.max_len)) throw LengthError("decoder prefix longer than max_len");
    const long d = static_cast<long>(d_);
    const ad::Tensor& emb = detail::param(p_, "embed.weight");
    const double scale = std::sqrt(static_cast<double>(d_));
    const std::vector<double>& table = detail::sinusoid_table(pos_ + 1, d_);
    RowMat x(n, d);
    for (long r = 0; r < n; ++r)
      for (long i = 0; i < d; ++i)
        x(r, i) = emb.data()[static_cast<std::size_t>(pending_[static_cast<std::size_t>(r)]) * d_ +
                             static_cast<std::size_t>(i)] * scale +
                  table[pos_ * d_ + static_cast<std::size_t>(i)];
    for (int l = 0; l < cfg_.dec_layers; ++l) {
      const std::string pre = "dec." + std::to_string(l);
      RowMat q = (x * w(pre + ".self.q.weight")).rowwise() + b(pre + ".self.q.bias");
      RowMat k = x * w(pre + ".self.k.weight");
      RowMat v = (x * w(pre + ".self.v.weight")).rowwise() + b(pre + ".self.v.bias");
      auto& ks = self_k_[static_cast<std::size_t>(l)];
      auto& vs = self_v_[static_cast<std::size_t>(l)];
      RowMat a(n, d);
      for (long r = 0; r < n; ++r) {
        auto& kr = ks[static_cast<std::size_t>(r)];
        auto& vr = vs[static_cast<std::size_t>(r)];
        kr.insert(kr.end(), k.row(r).data(), k.row(r).data() + d);
        vr.insert(vr.end(), v.row(r).data(), v.row(r).data() + d);
        Map km(kr.data(), static_cast<long>(pos_ + 1), d);
        Map vm(vr.data(), static_cast<long>(pos_ + 1), d);
        attend(q.row(r), km, vm, nullptr, a.row(r));
      }
      RowMat o = (a * w(pre + ".self.o.weight")).rowwise() + b(pre + ".self.o.bias");
      x = layer_norm(x + o, pre + ".self_ln");

      q = (x * w(pre + ".cross.q.weight")).rowwise() + b(pre + ".cross.q.bias");
      for (long r = 0; r < n; ++r)
        attend(q.row(r), cross_k_[static_cast<std::size_t>(l)], cross_v_[static_cast<std::size_t>(l)],
               mem_mask_.data(), a.row(r));
      o = (a * w(pre + ".cross.o.weight")).rowwise() + b(pre + ".cross.o.bias");
      x = layer_norm(x + o, pre + ".cross_ln");

      RowMat f = ((x * w(pre + ".ffn.fc1.weight")).rowwise() + b(pre + ".ffn.fc1.bias")).cwiseMax(0.0);
      RowMat g = (f * w(pre + ".ffn.fc2.weight")).rowwise() + b(pre + ".ffn.fc2.bias");
      x = layer_norm(x + g, pre + ".ffn_ln");
    }
    return x * Map(emb.data().data(), static_cast<long>(emb.dim(0)), d).transpose();
  }

  // Keeps hypothesis parents[i] extended by tokens[i] as the new i-th hypothesis.
  void advance(std::span<const std::size_t> parents, std::span<const int> tokens) {
    if (parents.size() != tokens.size()) throw ad::ContractError("advance: parents and tokens differ in length");
    for (auto* cache : {&self_k_, &self_v_}) {
      for (auto& layer : *cache) {
        std::vector<std::vector<double>> next;
        next.reserve(parents.size());
        for (std::size_t par : parents) next.push_back(layer.at(par));
        layer = std::move(next);
      }
    }
    pending_.assign(tokens.begin(), tokens.end());
    ++pos_;
  }

 private:
  Map w(const std::string& name) const {
    const ad::Tensor& t = detail::param(p_, name);
    return Map(t.data().data(), static_cast<long>(t.dim(0)), static_cast<long>(t.dim(1)));
  }
  VecMap b(const std::string& name) const {
    const ad::Tensor& t = detail::param(p_, name);
    return VecMap(t.data().data(), static_cast<long>(t.numel()));
  }

  RowMat layer_norm(const RowMat& x, const std::string& prefix) const {
    const VecMap gain = b(prefix + ".gain");
    const VecMap bias = b(prefix + ".bias");
    RowMat y(x.rows(), x.cols());
    for (long r = 0; r < x.rows(); ++r) {
      const double mean = x.row(r).mean();
      const double var = (x.row(r).array() - mean).square().mean();
      const double inv = 1.0 / std::sqrt(var + 1e-5);
      y.row(r) = ((x.row(r).array() - mean) * inv * gain.array() + bias.array()).matrix();
    }
    return y;
  }

  template <class Q, class K, class V, class Out>
  void attend(const Q& q, const K& k, const V& v, const std::uint8_t* mask, Out&& out) const {
    const auto heads = static_cast<long>(cfg_.n_heads);
    const long dh = static_cast<long>(d_) / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    const long len = k.rows();
    out.setZero();
    std::vector<double> s(static_cast<std::size_t>(len));
    for (long h = 0; h < heads; ++h) {
      double mx = -std::numeric_limits<double>::infinity();
      for (long j = 0; j < len; ++j) {
        if (mask && !mask[j]) continue;
        s[static_cast<std::size_t>(j)] = q.segment(h * dh, dh).dot(k.row(j).segment(h * dh, dh)) * inv_sqrt;
        mx = std::max(mx, s[static_cast<std::size_t>(j)]);
      }
      if (mx == -std::numeric_limits<double>::infinity()) continue;
      double z = 0.0;
      for (long j = 0; j < len; ++j) {
        if (mask && !mask[j]) continue;
        z += (s[static_cast<std::size_t>(j)] = std::exp(s[static_cast<std::size_t>(j)] - mx));
      }
      for (long j = 0; j < len; ++j) {
        if (mask && !mask[j]) continue;
        out.segment(h * dh, dh) += (s[static_cast<std::size_t>(j)] / z) * v.row(j).segment(h * dh, dh);
      }
    }
  }

  const ModelParams& p_;
  ModelConfig cfg_;
  std::size_t d_;
  std::size_t mem_len_ = 0;
  std::vector<std::uint8_t> mem_mask_;
  std::vector<RowMat> cross_k_, cross_v_;
  std::vector<std::vector<std::vector<double>>> self_k_, self_v_;  // [layer][hyp] -> t * d
  std::vector<int> pending_;
  std::size_t pos_ = 0;
};

// Beam-search step model over an IncrementalDecoder. Tokens that can never be
// generated (padding, BOS, language tags) get -inf log-probability.
class NmtStepModel {
 public:
  NmtStepModel(IncrementalDecoder& dec, int first_token, const Vocabulary& vocab) : dec_(dec), first_(first_token) {
    banned_.assign(dec.vocab_size(), 0);
    banned_[Vocabulary::kPad] = 1;
    banned_[Vocabulary::kBos] = 1;
    for (std::size_t t = 0; t < banned_.size(); ++t)
      if (vocab.is_tag(static_cast<int>(t))) banned_[t] = 1;
  }

  std::size_t vocab_size() const { return dec_.vocab_size(); }
  void start() { dec_.start(first_); }

  std::vector<std::vector<double>> log_probs() {
    const auto logits = dec_.logits();
    std::vector<std::vector<double>> out(static_cast<std::size_t>(logits.rows()));
    for (long r = 0; r < logits.rows(); ++r) {
      auto& row = out[static_cast<std::size_t>(r)];
      row.assign(logits.row(r).data(), logits.row(r).data() + logits.cols());
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t v = 0; v < row.size(); ++v)
        if (!banned_[v]) mx = std::max(mx, row[v]);
      double z = 0.0;
      for (std::size_t v = 0; v < row.size(); ++v)
        if (!banned_[v]) z += std::exp(row[v] - mx);
      const double lse = mx + std::log(z);
      for (std::size_t v = 0; v < row.size(); ++v)
        row[v] = banned_[v] ? -std::numeric_limits<double>::infinity() : row[v] - lse;
    }
    return out;
  }

  void advance(std::span<const std::size_t> parents, std::span<const int> tokens) { dec_.advance(parents, tokens); }

 private:
  IncrementalDecoder& dec_;
  int first_;
  std::vector<std::uint8_t> banned_;
};

struct DecodeConfig {
  int beam_size = 5;
  double length_penalty = 1.0;
  int max_decode_len = 0;  // 0: 2 * source length + 10, capped by the model's max_len

  void validate() const {
    if (beam_size < 1) throw ConfigError("beam_size must be >= 1");
    if (max_decode_len < 0) throw ConfigError("max_decode_len must be >= 0");
  }
};

struct Translation {
  TokenSeq tokens;  // without EOS
  double score = 0.0;
  bool truncated = false;
};

inline Translation translate(const ModelParams& p, const ModelConfig& cfg, const Vocabulary& vocab,
                             const StrategySpec& spec, const TokenSeq& src, const Direction& dir,
                             const DecodeConfig& dc) {
  dc.validate();
  if (src.empty()) throw ad::ContractError("translate: empty source sentence");
  ad::NoGradGuard no_grad;
  const PreparedExample ex = prepare_example(src, {}, dir.first, dir.second, spec, vocab, cfg.enc_layers);
  const EncoderTrace trace = encode(ex.enc_input_ids, ex.plan, p, cfg);
  IncrementalDecoder dec(p, cfg, trace.final_output, trace.memory_mask);
  NmtStepModel model(dec, ex.dec_input_ids.front(), vocab);
  BeamConfig bc;
  bc.beam_size = dc.beam_size;
  bc.length_penalty = dc.length_penalty;
  bc.eos = Vocabulary::kEos;
  const int automatic = 2 * static_cast<int>(src.size()) + 10;
  bc.max_len = std::min(cfg.max_len, dc.max_decode_len > 0 ? dc.max_decode_len : automatic);
  const BeamHypothesis best = beam_search(model, bc);
  Translation t;
  t.tokens = best.tokens;
  if (!t.tokens.empty() && t.tokens.back() == Vocabulary::kEos) t.tokens.pop_back();
  t.score = best.score;
  t.truncated = best.truncated;
  return t;
}

}  // namespace lcs
