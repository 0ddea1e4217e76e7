#include <gtest/gtest.h>

#include <filesystem>

#include "test_support.hpp"

using namespace lcs;

namespace {

struct Tiny {
  CorpusSet set;
  ModelConfig model;

  Tiny() {
    CorpusConfig c;
    c.grammar_size = 12;
    c.pairs_per_direction = 8;
    c.valid_pairs = 1;
    c.test_pairs = 2;
    c.min_len = 3;
    c.max_len = 4;
    c.seed = 3;
    set = build_corpus(c);
    model = lcs::testing::small_model(set.vocab);
    model.dropout = 0.0;
  }

  TrainConfig train_cfg(int steps) const {
    TrainConfig t;
    t.max_steps = steps;
    t.batch_tokens = 64;
    t.lr_peak = 3e-3;
    t.warmup_steps = 20;
    t.checkpoint_every = 10;
    t.average_last = 1;
    t.seed = 4;
    return t;
  }
};

void expect_same_params(const ModelParams& a, const ModelParams& b, double tol = 0.0) {
  ASSERT_EQ(a.size(), b.size());
  for (const auto& [name, t] : a) {
    ASSERT_TRUE(b.count(name)) << name;
    EXPECT_LE(lcs::testing::max_abs_diff(t.values(), b.at(name).values()), tol) << name;
  }
}

}  // namespace

TEST(Schedule, WarmupThenInverseSqrt) {
  TrainConfig t;
  t.lr_peak = 1e-3;
  t.warmup_steps = 100;
  EXPECT_EQ(learning_rate(t, 0), 0.0);
  EXPECT_NEAR(learning_rate(t, 50), 5e-4, 1e-15);
  EXPECT_NEAR(learning_rate(t, 100), 1e-3, 1e-15);
  EXPECT_NEAR(learning_rate(t, 400), 5e-4, 1e-15);
}

TEST(Training, OverfitsTinyCorpus) {
  Tiny f;
  TrainConfig t = f.train_cfg(1500);
  t.label_smoothing = 0.0;
  const auto res = train(f.set.train, f.set.vocab, f.model, StrategySpec::s_enc_t_dec(), t);
  double tail = 0.0;
  for (std::size_t i = res.log.size() - 20; i < res.log.size(); ++i) tail += res.log[i].loss;
  EXPECT_LT(tail / 20.0, 0.1);
  EXPECT_LT(tail / 20.0, res.log.front().loss);
}

TEST(Training, IsBitwiseDeterministic) {
  Tiny f;
  f.model.dropout = 0.1;
  const auto a = train(f.set.train, f.set.vocab, f.model, StrategySpec::lcs(1), f.train_cfg(15));
  const auto b = train(f.set.train, f.set.vocab, f.model, StrategySpec::lcs(1), f.train_cfg(15));
  expect_same_params(a.checkpoint.params, b.checkpoint.params);
  for (std::size_t i = 0; i < a.log.size(); ++i) EXPECT_EQ(a.log[i].loss, b.log[i].loss);
}

TEST(Training, AveragesTheLastSnapshots) {
  Tiny f;
  const auto spec = StrategySpec::t_enc();
  const auto at10 = train(f.set.train, f.set.vocab, f.model, spec, f.train_cfg(10));
  const auto at20 = train(f.set.train, f.set.vocab, f.model, spec, f.train_cfg(20));
  TrainConfig two = f.train_cfg(20);
  two.average_last = 2;
  const auto avg = train(f.set.train, f.set.vocab, f.model, spec, two);
  EXPECT_EQ(avg.snapshots_averaged, 2);
  ModelParams expected;
  for (const auto& [name, t] : at10.checkpoint.params) {
    std::vector<double> v = t.values();
    const auto& w = at20.checkpoint.params.at(name).values();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = (v[i] + w[i]) / 2.0;
    expected.emplace(name, ad::Tensor(t.shape(), v));
  }
  expect_same_params(avg.checkpoint.params, expected, 1e-15);
}

TEST(Training, FinetuneWithZeroStepsIsIdentity) {
  Tiny f;
  const auto base = train(f.set.train, f.set.vocab, f.model, StrategySpec::s_enc_t_dec(), f.train_cfg(5));
  const auto tuned = finetune(base.checkpoint, StrategySpec::lcs(1), f.set.train, f.train_cfg(0));
  expect_same_params(tuned.checkpoint.params, base.checkpoint.params);
  EXPECT_EQ(tuned.checkpoint.meta.get("finetuned_from"), "S-Enc-T-Dec");
}

TEST(Training, RejectsEmptyCorpusAndBadConfig) {
  Tiny f;
  EXPECT_THROW(train(ParallelCorpus{}, f.set.vocab, f.model, StrategySpec::t_enc(), f.train_cfg(1)), ConfigError);
  TrainConfig bad = f.train_cfg(1);
  bad.lr_peak = 0.0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Checkpoint, RoundTripAndCrossStrategyLoad) {
  Tiny f;
  const auto res = train(f.set.train, f.set.vocab, f.model, StrategySpec::s_enc_t_dec(), f.train_cfg(3));
  const auto path = std::filesystem::temp_directory_path() / "lcs_mnmt_ckpt_test.ckpt";
  save_checkpoint(res.checkpoint, path);
  const ModelCheckpoint back = load_checkpoint(path);
  std::filesystem::remove(path);
  expect_same_params(back.params, res.checkpoint.params);
  EXPECT_EQ(back.vocab, res.checkpoint.vocab);
  EXPECT_EQ(back.meta.get("strategy.name"), "S-Enc-T-Dec");
  const auto report = compare_parameters(back.config, back.params);
  EXPECT_TRUE(report.missing.empty());
  EXPECT_TRUE(report.unexpected.empty());
  EXPECT_NO_THROW(finetune(back, StrategySpec::lcs(1), f.set.train, f.train_cfg(1)));
}

TEST(Checkpoint, DetectsMissingAndUnexpectedParameters) {
  Tiny f;
  ModelParams p = init_params(f.model, 1);
  p.erase("dec.0.ffn.fc1.weight");
  p.emplace("extra.weight", ad::Tensor({1}, {0.0}));
  const auto r = compare_parameters(f.model, p);
  EXPECT_EQ(r.missing, std::vector<std::string>{"dec.0.ffn.fc1.weight"});
  EXPECT_EQ(r.unexpected, std::vector<std::string>{"extra.weight"});
  EXPECT_FALSE(r.ok());
}

TEST(Checkpoint, CorruptFileIsRejected) {
  const auto path = std::filesystem::temp_directory_path() / "lcs_mnmt_bad.ckpt";
  write_text_file(path, "not a checkpoint\n");
  EXPECT_THROW(load_checkpoint(path), CheckpointError);
  std::filesystem::remove(path);
}
