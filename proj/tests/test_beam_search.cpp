#include <gtest/gtest.h>

#include <cmath>

#include "test_support.hpp"

using namespace lcs;
using lcs::testing::TableModel;
using lcs::testing::exhaustive_search;

TEST(BeamSearch, BeamOneEqualsGreedy) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    TableModel a(8, seed, 1.0), b(8, seed, 1.0);
    BeamConfig cfg;
    cfg.beam_size = 1;
    cfg.max_len = 10;
    const auto beam = beam_search(a, cfg);
    const auto greedy = greedy_decode(b, cfg);
    EXPECT_EQ(beam.tokens, greedy.tokens) << seed;
    EXPECT_NEAR(beam.log_prob, greedy.log_prob, 1e-12);
    EXPECT_EQ(beam.truncated, greedy.truncated);
  }
}

TEST(BeamSearch, WideBeamMatchesExhaustiveSearch) {
  for (double alpha : {0.0, 1.0}) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      TableModel m(8, seed);
      BeamConfig cfg;
      cfg.beam_size = 512;
      cfg.max_len = 3;
      cfg.length_penalty = alpha;
      const auto oracle = exhaustive_search(m, cfg);
      const auto found = beam_search(m, cfg);
      EXPECT_EQ(found.tokens, oracle.tokens) << seed;
      EXPECT_NEAR(found.score, oracle.score, 1e-12);
    }
  }
}

TEST(BeamSearch, LengthPenaltyZeroIsRawLogProb) {
  EXPECT_EQ(length_normalized_score(-3.5, 7, 0.0), -3.5);
  EXPECT_NEAR(length_normalized_score(-3.0, 1, 1.0), -3.0, 1e-15);
  EXPECT_NEAR(length_normalized_score(-3.0, 7, 1.0), -1.5, 1e-15);
}

TEST(BeamSearch, FlagsTruncation) {
  TableModel m(8, 3, -50.0);
  BeamConfig cfg;
  cfg.beam_size = 4;
  cfg.max_len = 3;
  const auto h = beam_search(m, cfg);
  EXPECT_TRUE(h.truncated);
  EXPECT_EQ(h.tokens.size(), 3u);
  cfg.beam_size = 0;
  EXPECT_THROW(beam_search(m, cfg), std::invalid_argument);
}

TEST(BeamSearch, RandomTransformerBeamOneEqualsGreedy) {
  const Vocabulary vocab = lcs::testing::small_vocab();
  const ModelConfig cfg = lcs::testing::small_model(vocab);
  Rng rng(5);
  ad::NoGradGuard guard;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const ModelParams params = init_params(cfg, seed);
    const TokenSeq src = lcs::testing::random_sentence(vocab, "aa", 5, rng);
    const auto ex = prepare_example(src, {}, "aa", "bb", StrategySpec::lcs(1), vocab, cfg.enc_layers);
    const auto trace = encode(ex.enc_input_ids, ex.plan, params, cfg);
    BeamConfig bc;
    bc.beam_size = 1;
    bc.max_len = 12;
    IncrementalDecoder d1(params, cfg, trace.final_output, trace.memory_mask);
    IncrementalDecoder d2(params, cfg, trace.final_output, trace.memory_mask);
    NmtStepModel m1(d1, ex.dec_input_ids.front(), vocab), m2(d2, ex.dec_input_ids.front(), vocab);
    EXPECT_EQ(beam_search(m1, bc).tokens, greedy_decode(m2, bc).tokens) << seed;
  }
}

TEST(Translate, NeverEmitsSpecialsAndRespectsLength) {
  const Vocabulary vocab = lcs::testing::small_vocab();
  const ModelConfig cfg = lcs::testing::small_model(vocab);
  const ModelParams params = init_params(cfg, 1);
  DecodeConfig dc;
  dc.beam_size = 3;
  dc.max_decode_len = 6;
  const auto t = translate(params, cfg, vocab, StrategySpec::t_enc(), {20, 21, 22}, {"aa", "bb"}, dc);
  EXPECT_LE(t.tokens.size(), 6u);
  for (int tok : t.tokens) {
    EXPECT_NE(tok, Vocabulary::kPad);
    EXPECT_NE(tok, Vocabulary::kBos);
    EXPECT_FALSE(vocab.is_tag(tok));
  }
  EXPECT_THROW(translate(params, cfg, vocab, StrategySpec::t_enc(), {}, {"aa", "bb"}, dc), ad::ContractError);
}
