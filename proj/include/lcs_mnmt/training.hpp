#pragma once

// Seeded training: Adam with inverse-square-root warmup, token-budget batches
// drawn from length-sorted buckets, periodic snapshots averaged into the final
// checkpoint, and fine-tuning of an existing checkpoint under a new strategy.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <deque>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "lcs_mnmt/checkpoint.hpp"
#include "lcs_mnmt/corpus.hpp"
#include "lcs_mnmt/strategies.hpp"
#include "lcs_mnmt/transformer.hpp"

namespace lcs {

class TrainingDivergence : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  int max_steps = 5000;
  int batch_tokens = 256;
  double lr_peak = 1e-3;
  int warmup_steps = 1000;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-9;
  double label_smoothing = 0.1;
  double clip_norm = 1.0;  // 0 disables global-norm clipping
  std::uint64_t seed = 1;
  int checkpoint_every = 500;
  int average_last = 5;

  void validate() const {
    if (max_steps < 0) throw ConfigError("max_steps must be >= 0");
    if (batch_tokens < 1) throw ConfigError("batch_tokens must be >= 1");
    if (!(lr_peak > 0.0)) throw ConfigError("lr_peak must be > 0");
    if (warmup_steps < 1) throw ConfigError("warmup_steps must be >= 1");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) throw ConfigError("adam betas must lie in [0, 1)");
    if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be > 0");
    if (label_smoothing < 0.0 || label_smoothing >= 1.0) throw ConfigError("label_smoothing must lie in [0, 1)");
    if (clip_norm < 0.0) throw ConfigError("clip_norm must be >= 0");
    if (checkpoint_every < 1) throw ConfigError("checkpoint_every must be >= 1");
    if (average_last < 1) throw ConfigError("average_last must be >= 1");
  }

  KeyValueConfig to_config() const {
    KeyValueConfig kv;
    kv.set("train.max_steps", std::to_string(max_steps));
    kv.set("train.batch_tokens", std::to_string(batch_tokens));
    kv.set("train.lr_peak", format_double(lr_peak));
    kv.set("train.warmup_steps", std::to_string(warmup_steps));
    kv.set("train.beta1", format_double(beta1));
    kv.set("train.beta2", format_double(beta2));
    kv.set("train.adam_eps", format_double(adam_eps));
    kv.set("train.label_smoothing", format_double(label_smoothing));
    kv.set("train.clip_norm", format_double(clip_norm));
    kv.set("train.seed", std::to_string(seed));
    kv.set("train.checkpoint_every", std::to_string(checkpoint_every));
    kv.set("train.average_last", std::to_string(average_last));
    return kv;
  }

  // Keys absent from `kv` keep the values of `base`.
  static TrainConfig from_config(const KeyValueConfig& kv);
  static TrainConfig from_config(const KeyValueConfig& kv, TrainConfig base) {
    TrainConfig c = base;
    c.max_steps = static_cast<int>(kv.get_int("train.max_steps", c.max_steps));
    c.batch_tokens = static_cast<int>(kv.get_int("train.batch_tokens", c.batch_tokens));
    c.lr_peak = kv.get_double("train.lr_peak", c.lr_peak);
    c.warmup_steps = static_cast<int>(kv.get_int("train.warmup_steps", c.warmup_steps));
    c.beta1 = kv.get_double("train.beta1", c.beta1);
    c.beta2 = kv.get_double("train.beta2", c.beta2);
    c.adam_eps = kv.get_double("train.adam_eps", c.adam_eps);
    c.label_smoothing = kv.get_double("train.label_smoothing", c.label_smoothing);
    c.clip_norm = kv.get_double("train.clip_norm", c.clip_norm);
    c.seed = static_cast<std::uint64_t>(kv.get_int("train.seed", static_cast<long>(c.seed)));
    c.checkpoint_every = static_cast<int>(kv.get_int("train.checkpoint_every", c.checkpoint_every));
    c.average_last = static_cast<int>(kv.get_int("train.average_last", c.average_last));
    c.validate();
    return c;
  }
};

inline TrainConfig TrainConfig::from_config(const KeyValueConfig& kv) { return from_config(kv, TrainConfig()); }

// Linear warmup to lr_peak at `warmup_steps`, then lr_peak * sqrt(warmup / step).
// Steps count from 1.
inline double learning_rate(const TrainConfig& cfg, int step) {
  if (step < 1) return 0.0;
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(cfg.warmup_steps);
  if (step < cfg.warmup_steps) return cfg.lr_peak * s / w;
  return cfg.lr_peak * std::sqrt(w / s);
}

class Adam {
 public:
  Adam(double beta1, double beta2, double eps) : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  // One bias-corrected update of every parameter that holds a gradient.
  void step(ModelParams& params, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (auto& [name, p] : params) {
      if (!p.has_grad()) continue;
      auto& st = state_[name];
      if (st.m.empty()) {
        st.m.assign(p.numel(), 0.0);
        st.v.assign(p.numel(), 0.0);
      }
      const auto g = p.grad();
      auto x = p.mutable_data();
      for (std::size_t i = 0; i < x.size(); ++i) {
        st.m[i] = beta1_ * st.m[i] + (1.0 - beta1_) * g[i];
        st.v[i] = beta2_ * st.v[i] + (1.0 - beta2_) * g[i] * g[i];
        x[i] -= lr * (st.m[i] / c1) / (std::sqrt(st.v[i] / c2) + eps_);
      }
    }
  }

  long steps() const { return t_; }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  double beta1_, beta2_, eps_;
  long t_ = 0;
  std::map<std::string, Moments> state_;
};

// Scales all gradients so their global L2 norm is at most `max_norm`; returns
// the norm before scaling.
inline double clip_gradients(ModelParams& params, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, p] : params) {
    (void)name;
    for (double g : p.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (auto& [name, p] : params) {
      (void)name;
      if (!p.has_grad()) continue;
      auto& g = p.node()->grad;
      for (double& v : g) v *= f;
    }
  }
  return norm;
}

// Token cost of one example inside a padded batch.
inline std::size_t example_tokens(const PreparedExample& ex) {
  return std::max(ex.enc_input_ids.size(), ex.dec_input_ids.size());
}

// Shuffles, stable-sorts by length, cuts batches whose padded size
// (sentences x longest example) stays within `batch_tokens`, then shuffles
// the batch order.
inline std::vector<std::vector<std::size_t>> make_batches(const std::vector<PreparedExample>& examples,
                                                          int batch_tokens, Rng& rng) {
  std::vector<std::size_t> order(examples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return example_tokens(examples[a]) < example_tokens(examples[b]);
  });
  std::vector<std::vector<std::size_t>> batches;
  std::vector<std::size_t> cur;
  std::size_t longest = 0;
  const auto budget = static_cast<std::size_t>(batch_tokens);
  for (std::size_t idx : order) {
    const std::size_t len = example_tokens(examples[idx]);
    const std::size_t next_longest = std::max(longest, len);
    if (!cur.empty() && next_longest * (cur.size() + 1) > budget) {
      batches.push_back(std::move(cur));
      cur.clear();
      longest = 0;
    }
    cur.push_back(idx);
    longest = std::max(longest, len);
  }
  if (!cur.empty()) batches.push_back(std::move(cur));
  rng.shuffle(batches);
  return batches;
}

struct StepLog {
  int step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double grad_norm = 0.0;
  std::size_t sentences = 0;
  std::size_t tokens = 0;
  double seconds = 0.0;  // wall time since training start
};

inline std::string step_log_csv(const std::vector<StepLog>& log) {
  std::ostringstream out;
  out.precision(10);
  out << "step,lr,loss,grad_norm,sentences,tokens,seconds\n";
  for (const auto& s : log)
    out << s.step << "," << s.lr << "," << s.loss << "," << s.grad_norm << "," << s.sentences << "," << s.tokens << ","
        << s.seconds << "\n";
  return out.str();
}

struct TrainResult {
  ModelCheckpoint checkpoint;
  std::vector<StepLog> log;
  int snapshots_averaged = 0;
};

using StepCallback = std::function<void(const StepLog&)>;

inline std::vector<PreparedExample> prepare_corpus(const ParallelCorpus& corpus, const StrategySpec& spec,
                                                   const Vocabulary& vocab, int enc_layers) {
  std::vector<PreparedExample> out;
  out.reserve(corpus.examples.size());
  for (const auto& ex : corpus.examples)
    out.push_back(prepare_example(ex.src, ex.tgt, ex.src_lang, ex.tgt_lang, spec, vocab, enc_layers));
  return out;
}

namespace detail {

inline ModelParams copy_params(const ModelParams& p) {
  ModelParams out;
  for (const auto& [name, t] : p) out.emplace(name, ad::Tensor(t.shape(), t.values(), true));
  return out;
}

inline TrainResult run_training(ModelCheckpoint ckpt, const ParallelCorpus& corpus, const StrategySpec& spec,
                                const TrainConfig& tc, const StepCallback& on_step) {
  tc.validate();
  ckpt.config.label_smoothing = tc.label_smoothing;
  ckpt.config.validate();
  if (corpus.examples.empty()) throw ConfigError("training corpus is empty");
  if (ckpt.vocab.size() != ckpt.config.vocab_size) throw ConfigError("vocabulary does not match model vocab_size");
  spec.validate(ckpt.config.enc_layers);
  const auto examples = prepare_corpus(corpus, spec, ckpt.vocab, ckpt.config.enc_layers);
  for (const auto& ex : examples) {
    if (ex.enc_input_ids.size() > static_cast<std::size_t>(ckpt.config.max_len) ||
        ex.dec_input_ids.size() > static_cast<std::size_t>(ckpt.config.max_len)) {
      throw LengthError("training example longer than model max_len");
    }
  }

  TrainResult result;
  Rng rng(tc.seed * 0x9E3779B97F4A7C15ULL + 17);
  Adam adam(tc.beta1, tc.beta2, tc.adam_eps);
  std::deque<ModelParams> snapshots;
  std::vector<std::vector<std::size_t>> batches;
  std::size_t next_batch = 0;
  const auto start = std::chrono::steady_clock::now();
  for (int step = 1; step <= tc.max_steps; ++step) {
    if (next_batch >= batches.size()) {
      batches = make_batches(examples, tc.batch_tokens, rng);
      next_batch = 0;
    }
    std::vector<PreparedExample> batch;
    std::size_t tokens = 0;
    for (std::size_t idx : batches[next_batch]) {
      batch.push_back(examples[idx]);
      tokens += examples[idx].dec_target_ids.size();
    }
    ++next_batch;
    for (auto& [name, p] : ckpt.params) {
      (void)name;
      p.zero_grad();
    }
    ForwardOptions fo;
    fo.dropout_seed = tc.seed ^ 0xD50F7ULL;
    fo.step = static_cast<std::uint64_t>(step);
    double loss_value = 0.0;
    try {
      ad::Tensor loss = forward_loss(batch, ckpt.params, ckpt.config, fo);
      loss_value = loss.item();
      if (!std::isfinite(loss_value)) throw ad::NumericError("loss is not finite");
      ad::backward(loss);
    } catch (const ad::NumericError& e) {
      throw TrainingDivergence("training diverged at step " + std::to_string(step) + " (lr " +
                               std::to_string(learning_rate(tc, step)) + "): " + e.what());
    }
    const double norm = clip_gradients(ckpt.params, tc.clip_norm);
    if (!std::isfinite(norm)) {
      throw TrainingDivergence("training diverged at step " + std::to_string(step) + ": gradient norm is not finite");
    }
    const double lr = learning_rate(tc, step);
    adam.step(ckpt.params, lr);

    StepLog entry;
    entry.step = step;
    entry.lr = lr;
    entry.loss = loss_value;
    entry.grad_norm = norm;
    entry.sentences = batch.size();
    entry.tokens = tokens;
    entry.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.log.push_back(entry);
    if (on_step) on_step(entry);

    if (step % tc.checkpoint_every == 0 || step == tc.max_steps) {
      snapshots.push_back(copy_params(ckpt.params));
      while (snapshots.size() > static_cast<std::size_t>(tc.average_last)) snapshots.pop_front();
    }
  }
  for (auto& [name, p] : ckpt.params) {
    (void)name;
    p.zero_grad();
  }
  if (!snapshots.empty()) {
    ckpt.params = average_parameters(std::vector<ModelParams>(snapshots.begin(), snapshots.end()));
  }
  result.snapshots_averaged = static_cast<int>(snapshots.size());
  const KeyValueConfig sk = spec.to_config();
  for (const auto& [k, v] : sk.values()) ckpt.meta.set(k, v);
  const KeyValueConfig tk = tc.to_config();
  for (const auto& [k, v] : tk.values()) ckpt.meta.set(k, v);
  ckpt.meta.set("train.steps_done", std::to_string(tc.max_steps));
  result.checkpoint = std::move(ckpt);
  return result;
}

}  // namespace detail

inline TrainResult train(const ParallelCorpus& corpus, const Vocabulary& vocab, ModelConfig cfg,
                         const StrategySpec& spec, const TrainConfig& tc, const StepCallback& on_step = {}) {
  cfg.vocab_size = vocab.size();
  cfg.label_smoothing = tc.label_smoothing;
  cfg.validate();
  ModelCheckpoint ckpt{cfg, vocab, init_params(cfg, tc.seed), {}};
  return detail::run_training(std::move(ckpt), corpus, spec, tc, on_step);
}

// Continues training `ckpt` under `spec` with fresh optimizer state. With
// max_steps = 0 the parameters are returned unchanged.
inline TrainResult finetune(const ModelCheckpoint& ckpt, const StrategySpec& spec, const ParallelCorpus& corpus,
                            const TrainConfig& tc, const StepCallback& on_step = {}) {
  const auto report = compare_parameters(ckpt.config, ckpt.params);
  if (!report.ok()) throw CheckpointError("finetune: checkpoint parameters do not match its config");
  if (ckpt.vocab.size() != ckpt.config.vocab_size) throw CheckpointError("finetune: vocabulary mismatch");
  ModelCheckpoint start = ckpt.clone();
  start.meta.set("finetuned_from", ckpt.meta.get("strategy.name", "unknown"));
  return detail::run_training(std::move(start), corpus, spec, tc, on_step);
}

}  // namespace lcs
