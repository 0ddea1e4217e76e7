#pragma once

// Post-norm transformer encoder-decoder with a shared token embedding
// (encoder input, decoder input and output projection).
//
// Encoder layer l, given input states h:
//   h  <- plan edits for layer l (tag swap, tag restore, h + e^t injection)
//   s   = LayerNorm(h + SelfAttn(h))          masked tag positions are hidden
//   out = LayerNorm(s + FFN(s))

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "lcs_mnmt/autodiff.hpp"
#include "lcs_mnmt/plan.hpp"
#include "lcs_mnmt/util.hpp"

namespace lcs {

class LengthError : public std::length_error {
 public:
  using std::length_error::length_error;
};

struct ModelConfig {
  int enc_layers = 2;
  int dec_layers = 2;
  int d_model = 64;
  int n_heads = 4;
  int d_ff = 128;
  int vocab_size = 0;
  int max_len = 64;
  double dropout = 0.0;
  double label_smoothing = 0.1;
  bool post_norm = true;

  void validate() const {
    if (enc_layers < 1 || dec_layers < 1) throw ConfigError("model needs at least one encoder and decoder layer");
    if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0) {
      throw ConfigError("d_model must be a positive multiple of n_heads");
    }
    if (d_ff < 1) throw ConfigError("d_ff must be positive");
    if (vocab_size < 1) throw ConfigError("vocab_size must be positive");
    if (max_len < 2) throw ConfigError("max_len must be at least 2");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must lie in [0, 1)");
    if (label_smoothing < 0.0 || label_smoothing >= 1.0) throw ConfigError("label smoothing must lie in [0, 1)");
    if (!post_norm) throw ConfigError("only the post-norm layout is supported");
  }

  KeyValueConfig to_config() const {
    KeyValueConfig kv;
    kv.set("model.enc_layers", std::to_string(enc_layers));
    kv.set("model.dec_layers", std::to_string(dec_layers));
    kv.set("model.d_model", std::to_string(d_model));
    kv.set("model.n_heads", std::to_string(n_heads));
    kv.set("model.d_ff", std::to_string(d_ff));
    kv.set("model.vocab_size", std::to_string(vocab_size));
    kv.set("model.max_len", std::to_string(max_len));
    kv.set("model.dropout", format_double(dropout));
    kv.set("model.label_smoothing", format_double(label_smoothing));
    kv.set("model.post_norm", post_norm ? "true" : "false");
    return kv;
  }

  static ModelConfig from_config(const KeyValueConfig& kv) {
    ModelConfig c;
    c.enc_layers = static_cast<int>(kv.get_int("model.enc_layers"));
    c.dec_layers = static_cast<int>(kv.get_int("model.dec_layers"));
    c.d_model = static_cast<int>(kv.get_int("model.d_model"));
    c.n_heads = static_cast<int>(kv.get_int("model.n_heads"));
    c.d_ff = static_cast<int>(kv.get_int("model.d_ff"));
    c.vocab_size = static_cast<int>(kv.get_int("model.vocab_size"));
    c.max_len = static_cast<int>(kv.get_int("model.max_len"));
    c.dropout = kv.get_double("model.dropout");
    c.label_smoothing = kv.get_double("model.label_smoothing");
    c.post_norm = kv.get_bool("model.post_norm", true);
    c.validate();
    return c;
  }

  bool operator==(const ModelConfig&) const = default;
};

using ModelParams = ad::NamedTensors;

// Linear weights are stored [in, out] and applied as x @ W + b. Key
// projections carry no bias: a key bias shifts every score of a query row by
// the same amount and cancels in the softmax.
inline std::map<std::string, ad::Shape> parameter_shapes(const ModelConfig& cfg) {
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto ff = static_cast<std::size_t>(cfg.d_ff);
  std::map<std::string, ad::Shape> shapes;
  shapes["embed.weight"] = {static_cast<std::size_t>(cfg.vocab_size), d};
  auto attn = [&](const std::string& p) {
    shapes[p + ".q.weight"] = {d, d};
    shapes[p + ".q.bias"] = {d};
    shapes[p + ".k.weight"] = {d, d};
    shapes[p + ".v.weight"] = {d, d};
    shapes[p + ".v.bias"] = {d};
    shapes[p + ".o.weight"] = {d, d};
    shapes[p + ".o.bias"] = {d};
  };
  auto norm = [&](const std::string& p) {
    shapes[p + ".gain"] = {d};
    shapes[p + ".bias"] = {d};
  };
  auto ffn = [&](const std::string& p) {
    shapes[p + ".fc1.weight"] = {d, ff};
    shapes[p + ".fc1.bias"] = {ff};
    shapes[p + ".fc2.weight"] = {ff, d};
    shapes[p + ".fc2.bias"] = {d};
  };
  for (int l = 0; l < cfg.enc_layers; ++l) {
    const std::string p = "enc." + std::to_string(l);
    attn(p + ".attn");
    norm(p + ".attn_ln");
    ffn(p + ".ffn");
    norm(p + ".ffn_ln");
  }
  for (int l = 0; l < cfg.dec_layers; ++l) {
    const std::string p = "dec." + std::to_string(l);
    attn(p + ".self");
    norm(p + ".self_ln");
    attn(p + ".cross");
    norm(p + ".cross_ln");
    ffn(p + ".ffn");
    norm(p + ".ffn_ln");
  }
  return shapes;
}

// Xavier-uniform linear weights, N(0, d^-1/2) embeddings, zero biases, unit gains.
inline ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed ^ 0x1a17ULL);
  ModelParams params;
  for (const auto& [name, shape] : parameter_shapes(cfg)) {
    std::vector<double> data(ad::numel(shape), 0.0);
    const bool is_bias = name.ends_with(".bias");
    if (name == "embed.weight") {
      const double sd = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
      for (double& v : data) v = rng.normal() * sd;
    } else if (name.ends_with(".gain")) {
      std::fill(data.begin(), data.end(), 1.0);
    } else if (!is_bias) {
      const double limit = std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1]));
      for (double& v : data) v = (2.0 * rng.uniform01() - 1.0) * limit;
    }
    params.emplace(name, ad::Tensor(shape, std::move(data), true));
  }
  return params;
}

inline std::size_t parameter_count(const ModelParams& params) {
  std::size_t n = 0;
  for (const auto& [name, t] : params) {
    (void)name;
    n += t.numel();
  }
  return n;
}

struct ForwardOptions {
  std::uint64_t dropout_seed = 0;
  std::uint64_t step = 0;
};

struct EncoderTrace {
  std::vector<std::pair<int, ad::Tensor>> layers;  // (layer index, [seq, d_model])
  ad::Tensor final_output;
  std::vector<std::uint8_t> memory_mask;  // positions visible to cross-attention
};

struct BatchEncoding {
  std::size_t batch = 0;
  std::size_t max_len = 0;
  std::vector<std::size_t> lengths;
  std::vector<ad::Tensor> layer_outputs;  // each [batch * max_len, d_model]
  std::vector<ad::Tensor> layer_inputs;   // states entering self-attention, after plan edits
  std::vector<std::uint8_t> memory_mask;  // [batch, max_len]

  const ad::Tensor& final_output() const { return layer_outputs.back(); }
};

namespace detail {

inline const ad::Tensor& param(const ModelParams& p, const std::string& name) {
  auto it = p.find(name);
  if (it == p.end()) throw ConfigError("missing model parameter " + name);
  return it->second;
}

inline ad::Tensor linear(const ad::Tensor& x, const ModelParams& p, const std::string& prefix, bool bias = true) {
  ad::Tensor y = ad::matmul(x, param(p, prefix + ".weight"));
  return bias ? ad::add_bias(y, param(p, prefix + ".bias")) : y;
}

inline ad::Tensor norm(const ad::Tensor& x, const ModelParams& p, const std::string& prefix) {
  return ad::layer_norm(x, param(p, prefix + ".gain"), param(p, prefix + ".bias"), 1e-5);
}

inline ad::Tensor attention_block(const ad::Tensor& x_q, const ad::Tensor& x_kv, const ModelParams& p,
                                  const std::string& prefix, const ad::AttentionDims& dims,
                                  const std::vector<std::uint8_t>& allowed) {
  ad::Tensor q = linear(x_q, p, prefix + ".q");
  ad::Tensor k = linear(x_kv, p, prefix + ".k", false);
  ad::Tensor v = linear(x_kv, p, prefix + ".v");
  return linear(ad::attention(q, k, v, dims, allowed), p, prefix + ".o");
}

inline double sinusoid(std::size_t pos, std::size_t i, std::size_t d) {
  const double rate = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(d));
  return i % 2 == 0 ? std::sin(static_cast<double>(pos) * rate) : std::cos(static_cast<double>(pos) * rate);
}

// Positions [0, len) x d of the sinusoid table, cached per thread.
inline const std::vector<double>& sinusoid_table(std::size_t len, std::size_t d) {
  thread_local std::vector<double> table;
  thread_local std::size_t table_d = 0, table_len = 0;
  if (table_d != d || table_len < len) {
    table_d = d;
    table_len = std::max(len, table_len);
    table.resize(table_len * d);
    for (std::size_t pos = 0; pos < table_len; ++pos)
      for (std::size_t i = 0; i < d; ++i) table[pos * d + i] = sinusoid(pos, i, d);
  }
  return table;
}

// Scaled token embeddings plus sinusoidal positions for a padded [B, L] batch.
inline ad::Tensor embed_batch(const std::vector<TokenSeq>& seqs, std::size_t max_len, const ModelParams& p,
                              const ModelConfig& cfg) {
  const auto d = static_cast<std::size_t>(cfg.d_model);
  std::vector<long> flat(seqs.size() * max_len, Vocabulary::kPad);
  for (std::size_t b = 0; b < seqs.size(); ++b)
    for (std::size_t t = 0; t < seqs[b].size(); ++t) {
      const int id = seqs[b][t];
      if (id < 0 || id >= cfg.vocab_size) {
        throw ad::DimensionError("token id " + std::to_string(id) + " outside vocabulary");
      }
      flat[b * max_len + t] = id;
    }
  ad::Tensor x = ad::scale(ad::embedding(param(p, "embed.weight"), flat), std::sqrt(static_cast<double>(d)));
  const std::vector<double>& table = sinusoid_table(max_len, d);
  std::vector<double> pos(flat.size() * d);
  for (std::size_t r = 0; r < seqs.size(); ++r)
    std::copy(table.begin(), table.begin() + static_cast<long>(max_len * d), pos.begin() + static_cast<long>(r * max_len * d));
  return ad::add(x, ad::Tensor({flat.size(), d}, std::move(pos)));
}

// Scaled initial embeddings gathered per row; rows with id -1 stay zero.
inline ad::Tensor tag_rows(const std::vector<long>& ids, const ModelParams& p, const ModelConfig& cfg) {
  return ad::scale(ad::embedding(param(p, "embed.weight"), ids), std::sqrt(static_cast<double>(cfg.d_model)));
}

inline void check_plan(const InjectionPlan& plan, std::size_t len, const ModelConfig& cfg) {
  auto layer_ok = [&](int l) { return l >= 0 && l < cfg.enc_layers; };
  auto pos_ok = [&](int pos) { return pos >= 0 && static_cast<std::size_t>(pos) < len; };
  for (int l : plan.converter_layers)
    if (!layer_ok(l)) throw ad::ContractError("plan converter layer " + std::to_string(l) + " out of range");
  for (const auto& [l, pos] : plan.mask_schedule) {
    if (!layer_ok(l)) throw ad::ContractError("plan mask layer " + std::to_string(l) + " out of range");
    if (!pos_ok(pos)) throw ad::ContractError("plan masks tag position " + std::to_string(pos) + " absent from input");
  }
  for (const auto* edit : {&plan.restore, &plan.swap}) {
    if (!edit->has_value()) continue;
    if (!layer_ok((*edit)->layer)) throw ad::ContractError("plan tag edit layer out of range");
    if (!pos_ok((*edit)->position)) throw ad::ContractError("plan edits tag position absent from input");
    if ((*edit)->tag_id < 0 || (*edit)->tag_id >= cfg.vocab_size) throw ad::ContractError("plan tag id out of range");
  }
  if (plan.injected_embedding_id &&
      (*plan.injected_embedding_id < 0 || *plan.injected_embedding_id >= cfg.vocab_size)) {
    throw ad::ContractError("plan injected embedding id out of range");
  }
}

}  // namespace detail

inline BatchEncoding encode_batch(const std::vector<TokenSeq>& inputs, const std::vector<InjectionPlan>& plans,
                                  const ModelParams& p, const ModelConfig& cfg, const ForwardOptions& opts = {}) {
  if (inputs.empty()) throw ad::ContractError("encode: empty batch");
  if (plans.size() != inputs.size()) throw ad::ContractError("encode: one plan per input required");
  BatchEncoding enc;
  enc.batch = inputs.size();
  for (const auto& s : inputs) {
    if (s.empty()) throw ad::ContractError("encode: empty input sequence");
    if (s.size() > static_cast<std::size_t>(cfg.max_len)) throw LengthError("encoder input longer than max_len");
    enc.lengths.push_back(s.size());
    enc.max_len = std::max(enc.max_len, s.size());
  }
  for (std::size_t b = 0; b < inputs.size(); ++b) detail::check_plan(plans[b], inputs[b].size(), cfg);
  const std::size_t B = enc.batch, L = enc.max_len, N = B * L;
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const ad::AttentionDims dims{B, L, L, static_cast<std::size_t>(cfg.n_heads)};
  std::uint64_t stream = opts.step * 1000;

  ad::Tensor h = ad::dropout(detail::embed_batch(inputs, L, p, cfg), cfg.dropout, opts.dropout_seed, stream++);
  for (int l = 0; l < cfg.enc_layers; ++l) {
    std::vector<long> swap_ids(N, -1), restore_ids(N, -1), inject_ids(N, -1);
    std::vector<std::uint8_t> swap_mask;
    bool any_swap = false, any_restore = false, any_inject = false;
    for (std::size_t b = 0; b < B; ++b) {
      const auto& plan = plans[b];
      if (plan.swap && plan.swap->layer == l) {
        if (!any_swap) swap_mask.assign(N * d, 0);
        const std::size_t row = b * L + static_cast<std::size_t>(plan.swap->position);
        swap_ids[row] = plan.swap->tag_id;
        std::fill_n(swap_mask.begin() + static_cast<long>(row * d), d, std::uint8_t{1});
        any_swap = true;
      }
      if (plan.restore && plan.restore->layer == l) {
        restore_ids[b * L + static_cast<std::size_t>(plan.restore->position)] = plan.restore->tag_id;
        any_restore = true;
      }
      if (plan.injects_at(l)) {
        for (std::size_t t = 0; t < enc.lengths[b]; ++t) inject_ids[b * L + t] = *plan.injected_embedding_id;
        any_inject = true;
      }
    }
    if (any_swap) h = ad::add(ad::masked_fill(h, swap_mask, 0.0), detail::tag_rows(swap_ids, p, cfg));
    if (any_restore) h = ad::add(h, detail::tag_rows(restore_ids, p, cfg));
    if (any_inject) h = ad::add(h, detail::tag_rows(inject_ids, p, cfg));
    enc.layer_inputs.push_back(h);

    std::vector<std::uint8_t> allowed(B * L * L, 0);
    for (std::size_t b = 0; b < B; ++b) {
      const auto& plan = plans[b];
      for (std::size_t i = 0; i < L; ++i) {
        if (plan.masked(l, static_cast<int>(i))) continue;
        for (std::size_t j = 0; j < enc.lengths[b]; ++j)
          allowed[(b * L + i) * L + j] = plan.masked(l, static_cast<int>(j)) ? 0 : 1;
      }
    }
    const std::string pre = "enc." + std::to_string(l);
    ad::Tensor a = detail::attention_block(h, h, p, pre + ".attn", dims, allowed);
    ad::Tensor s = detail::norm(ad::add(h, ad::dropout(a, cfg.dropout, opts.dropout_seed, stream++)), p,
                                pre + ".attn_ln");
    ad::Tensor f = detail::linear(ad::relu(detail::linear(s, p, pre + ".ffn.fc1")), p, pre + ".ffn.fc2");
    h = detail::norm(ad::add(s, ad::dropout(f, cfg.dropout, opts.dropout_seed, stream++)), p, pre + ".ffn_ln");
    enc.layer_outputs.push_back(h);
  }
  enc.memory_mask.assign(B * L, 0);
  const int last = cfg.enc_layers - 1;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t j = 0; j < enc.lengths[b]; ++j)
      enc.memory_mask[b * L + j] = plans[b].masked(last, static_cast<int>(j)) ? 0 : 1;
  return enc;
}

inline EncoderTrace encode(const TokenSeq& input, const InjectionPlan& plan, const ModelParams& p,
                           const ModelConfig& cfg) {
  const BatchEncoding enc = encode_batch({input}, {plan}, p, cfg);
  EncoderTrace trace;
  for (int l = 0; l < cfg.enc_layers; ++l) trace.layers.emplace_back(l, enc.layer_outputs[static_cast<std::size_t>(l)]);
  trace.final_output = enc.final_output();
  trace.memory_mask = enc.memory_mask;
  return trace;
}

// Teacher-forced decoder over padded prefixes; returns logits [B * T, V].
inline ad::Tensor decode_batch(const ad::Tensor& memory, std::size_t mem_len,
                               const std::vector<std::uint8_t>& memory_mask, const std::vector<TokenSeq>& prefixes,
                               const ModelParams& p, const ModelConfig& cfg, const ForwardOptions& opts = {}) {
  const std::size_t B = prefixes.size();
  if (B == 0) throw ad::ContractError("decode: empty batch");
  std::size_t T = 0;
  for (const auto& s : prefixes) {
    if (s.empty()) throw ad::ContractError("decode: empty decoder prefix");
    if (s.size() > static_cast<std::size_t>(cfg.max_len)) throw LengthError("decoder prefix longer than max_len");
    T = std::max(T, s.size());
  }
  if (memory.dim(0) != B * mem_len || memory_mask.size() != B * mem_len) {
    throw ad::DimensionError("decode: memory does not match batch");
  }
  std::uint64_t stream = opts.step * 1000 + 500;
  const auto heads = static_cast<std::size_t>(cfg.n_heads);
  std::vector<std::uint8_t> self_allowed(B * T * T, 0), cross_allowed(B * T * mem_len, 0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < T; ++i) {
      for (std::size_t j = 0; j <= i && j < prefixes[b].size(); ++j) self_allowed[(b * T + i) * T + j] = 1;
      for (std::size_t j = 0; j < mem_len; ++j) cross_allowed[(b * T + i) * mem_len + j] = memory_mask[b * mem_len + j];
    }
  ad::Tensor y = ad::dropout(detail::embed_batch(prefixes, T, p, cfg), cfg.dropout, opts.dropout_seed, stream++);
  for (int l = 0; l < cfg.dec_layers; ++l) {
    const std::string pre = "dec." + std::to_string(l);
    ad::Tensor a = detail::attention_block(y, y, p, pre + ".self", {B, T, T, heads}, self_allowed);
    y = detail::norm(ad::add(y, ad::dropout(a, cfg.dropout, opts.dropout_seed, stream++)), p, pre + ".self_ln");
    ad::Tensor c = detail::attention_block(y, memory, p, pre + ".cross", {B, T, mem_len, heads}, cross_allowed);
    y = detail::norm(ad::add(y, ad::dropout(c, cfg.dropout, opts.dropout_seed, stream++)), p, pre + ".cross_ln");
    ad::Tensor f = detail::linear(ad::relu(detail::linear(y, p, pre + ".ffn.fc1")), p, pre + ".ffn.fc2");
    y = detail::norm(ad::add(y, ad::dropout(f, cfg.dropout, opts.dropout_seed, stream++)), p, pre + ".ffn_ln");
  }
  return ad::matmul(y, detail::param(p, "embed.weight"), /*transpose_b=*/true);
}

namespace detail {

inline ad::Tensor last_row_logits(const ad::Tensor& memory, const std::vector<std::uint8_t>& memory_mask,
                                  const TokenSeq& prefix, const ModelParams& p, const ModelConfig& cfg) {
  if (prefix.empty()) throw ad::ContractError("decode_step: empty prefix");
  if (prefix.size() > static_cast<std::size_t>(cfg.max_len)) throw LengthError("decoder prefix longer than max_len");
  const ad::Tensor logits = decode_batch(memory, memory.dim(0), memory_mask, {prefix}, p, cfg);
  const auto v = static_cast<std::size_t>(cfg.vocab_size);
  const auto first = logits.data().begin() + static_cast<long>((prefix.size() - 1) * v);
  return ad::Tensor({v}, std::vector<double>(first, first + static_cast<long>(v)));
}

}  // namespace detail

// Next-token logits [V] after `prefix`, with every memory position visible.
inline ad::Tensor decode_step(const ad::Tensor& enc_final, const TokenSeq& prefix, const ModelParams& p,
                              const ModelConfig& cfg) {
  return detail::last_row_logits(enc_final, std::vector<std::uint8_t>(enc_final.dim(0), 1), prefix, p, cfg);
}

inline ad::Tensor decode_step(const EncoderTrace& trace, const TokenSeq& prefix, const ModelParams& p,
                              const ModelConfig& cfg) {
  return detail::last_row_logits(trace.final_output, trace.memory_mask, prefix, p, cfg);
}

// Mean label-smoothed NLL over all non-padding target tokens of the batch.
inline ad::Tensor forward_loss(const std::vector<PreparedExample>& batch, const ModelParams& p, const ModelConfig& cfg,
                               const ForwardOptions& opts = {}) {
  if (batch.empty()) throw ad::ContractError("forward_loss: empty batch");
  std::vector<TokenSeq> enc_in, dec_in;
  std::vector<InjectionPlan> plans;
  for (const auto& ex : batch) {
    if (ex.dec_input_ids.size() != ex.dec_target_ids.size()) {
      throw ad::ContractError("forward_loss: decoder input and target lengths differ");
    }
    enc_in.push_back(ex.enc_input_ids);
    dec_in.push_back(ex.dec_input_ids);
    plans.push_back(ex.plan);
  }
  const BatchEncoding enc = encode_batch(enc_in, plans, p, cfg, opts);
  ad::Tensor logits = decode_batch(enc.final_output(), enc.max_len, enc.memory_mask, dec_in, p, cfg, opts);
  const std::size_t T = logits.dim(0) / batch.size();
  std::vector<long> targets(logits.dim(0), -1);
  for (std::size_t b = 0; b < batch.size(); ++b)
    for (std::size_t t = 0; t < batch[b].dec_target_ids.size(); ++t) targets[b * T + t] = batch[b].dec_target_ids[t];
  return ad::cross_entropy(logits, targets, cfg.label_smoothing, -1);
}

}  // namespace lcs
