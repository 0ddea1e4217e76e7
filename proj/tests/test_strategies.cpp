#include <gtest/gtest.h>

#include "test_support.hpp"

using namespace lcs;

namespace {

struct Layouts : ::testing::Test {
  Vocabulary vocab = lcs::testing::small_vocab();
  TokenSeq src{20, 21, 22};
  TokenSeq tgt{40, 41};
  int s_tag = 0, t_tag = 0;

  void SetUp() override {
    s_tag = vocab.tag("aa");
    t_tag = vocab.tag("bb");
  }

  PreparedExample prep(const StrategySpec& spec, int layers = 6) {
    return prepare_example(src, tgt, "aa", "bb", spec, vocab, layers);
  }
};

}  // namespace

TEST_F(Layouts, TagPlacementPerStrategy) {
  const int bos = Vocabulary::kBos;
  struct Case {
    StrategySpec spec;
    TokenSeq enc_prefix;
    int dec_first;
  };
  const std::vector<Case> cases{
      {StrategySpec::t_enc(), {t_tag}, bos},
      {StrategySpec::s_enc_t_dec(), {s_tag}, t_tag},
      {StrategySpec::st_enc(), {s_tag, t_tag}, bos},
      {StrategySpec::st_enc_t_dec(), {s_tag, t_tag}, t_tag},
      {StrategySpec::t_enc_t_dec(), {t_tag}, t_tag},
      {StrategySpec::t_enc_mask(6), {t_tag}, bos},
      {StrategySpec::lcs(2), {s_tag}, t_tag},
  };
  for (const auto& c : cases) {
    const PreparedExample ex = prep(c.spec);
    TokenSeq expected_enc = c.enc_prefix;
    expected_enc.insert(expected_enc.end(), src.begin(), src.end());
    EXPECT_EQ(ex.enc_input_ids, expected_enc) << c.spec.label();
    EXPECT_EQ(ex.dec_input_ids, (TokenSeq{c.dec_first, 40, 41})) << c.spec.label();
    EXPECT_EQ(ex.dec_target_ids, (TokenSeq{40, 41, Vocabulary::kEos})) << c.spec.label();
  }
}

TEST_F(Layouts, TEncMaskHidesShallowLayersAndRestores) {
  const PreparedExample ex = prep(StrategySpec::t_enc_mask(6));
  for (int l = 0; l < 4; ++l) EXPECT_TRUE(ex.plan.masked(l, 0)) << l;
  EXPECT_FALSE(ex.plan.masked(4, 0));
  ASSERT_TRUE(ex.plan.restore.has_value());
  EXPECT_EQ(*ex.plan.restore, (TagEdit{4, 0, t_tag}));
  EXPECT_THROW(StrategySpec::t_enc_mask(2), ConfigError);
}

TEST_F(Layouts, LcsInjectsTargetEmbeddingInTopLayers) {
  const PreparedExample ex = prep(StrategySpec::lcs(2));
  EXPECT_EQ(ex.plan.converter_layers, (std::set<int>{4, 5}));
  ASSERT_TRUE(ex.plan.injected_embedding_id.has_value());
  EXPECT_EQ(*ex.plan.injected_embedding_id, t_tag);
  EXPECT_TRUE(ex.plan.mask_schedule.empty());
  EXPECT_FALSE(ex.plan.swap.has_value());
}

TEST_F(Layouts, LcsVariantsSwapOrMaskTheConverterTag) {
  const auto swap = prep(StrategySpec::lcs_variant(TagKind::Source, TagKind::Target, TagKind::Target, 2));
  ASSERT_TRUE(swap.plan.swap.has_value());
  EXPECT_EQ(*swap.plan.swap, (TagEdit{4, 0, t_tag}));
  const auto hidden = prep(StrategySpec::lcs_variant(TagKind::Source, std::nullopt, TagKind::Target, 2));
  EXPECT_TRUE(hidden.plan.masked(4, 0));
  EXPECT_TRUE(hidden.plan.masked(5, 0));
  EXPECT_FALSE(hidden.plan.masked(3, 0));
  const auto removed = prep(StrategySpec::lcs_variant(TagKind::Source, TagKind::Source, std::nullopt, 2));
  EXPECT_EQ(removed.dec_input_ids.front(), Vocabulary::kBos);
  EXPECT_THROW(prep(StrategySpec::lcs_variant(std::nullopt, TagKind::Target, TagKind::Target, 2)), ConfigError);
}

TEST_F(Layouts, LcsWithoutConverterReducesToSEncTDec) {
  const auto reduced = prep(StrategySpec::lcs_variant(TagKind::Source, TagKind::Source, TagKind::Target, 0, false));
  EXPECT_EQ(reduced, prep(StrategySpec::s_enc_t_dec()));
  const auto k0 = prep(StrategySpec::lcs(0));
  EXPECT_TRUE(k0.plan.empty());
}

TEST(Strategies, DefaultConverterDepth) {
  EXPECT_EQ(default_converter_k(6), 2);
  EXPECT_EQ(default_converter_k(12), 2);
  EXPECT_EQ(default_converter_k(2), 1);
  EXPECT_EQ(default_converter_k(20), 3);
}

TEST(Strategies, MakeStrategyOverridesAndErrors) {
  StrategyOverrides o;
  o.k = 3;
  EXPECT_EQ(make_strategy("LCS", 6, o).converter_k, 3);
  EXPECT_THROW(make_strategy("T-Enc", 6, o), ConfigError);
  o.k = 7;
  EXPECT_THROW(make_strategy("LCS", 6, o), ConfigError);
  StrategyOverrides tags;
  tags.converter_tag = "T";
  const StrategySpec v = make_strategy("LCS", 6, tags);
  EXPECT_EQ(v.name, StrategyName::LCSVariant);
  EXPECT_EQ(v.label(), "LCS-variant(sS-cT)");
  EXPECT_THROW(make_strategy("Bogus", 6), ConfigError);
  EXPECT_THROW(parse_tag_kind("X"), ConfigError);
}

TEST(Strategies, ConfigRoundTripForEveryStrategy) {
  for (StrategyName n : all_strategy_names()) {
    const StrategySpec s = make_strategy(to_string(n), 6);
    EXPECT_EQ(StrategySpec::from_config(s.to_config()), s) << to_string(n);
  }
}

TEST(Strategies, ConverterInjectShiftsEveryRow) {
  ad::Tensor h({2, 3}, {1, 2, 3, 4, 5, 6});
  ad::Tensor e({3}, {10, 20, 30});
  EXPECT_EQ(converter_inject(h, e).values(), (std::vector<double>{11, 22, 33, 14, 25, 36}));
  EXPECT_THROW(converter_inject(h, ad::Tensor({2}, {1, 2})), ad::DimensionError);
}

TEST(Strategies, ZeroTargetEmbeddingMatchesNoInjection) {
  Vocabulary vocab = lcs::testing::small_vocab();
  ModelConfig cfg = lcs::testing::small_model(vocab);
  ModelParams params = init_params(cfg, 2);
  auto& w = params.at("embed.weight");
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const int t_tag = vocab.tag("bb");
  for (std::size_t j = 0; j < d; ++j) w.mutable_data()[static_cast<std::size_t>(t_tag) * d + j] = 0.0;
  const TokenSeq src{20, 21, 22, 23};
  const auto lcs_ex = prepare_example(src, {}, "aa", "bb", StrategySpec::lcs(1), vocab, 2);
  const auto plain = prepare_example(src, {}, "aa", "bb",
                                     StrategySpec::lcs_variant(TagKind::Source, TagKind::Source, TagKind::Target, 1, false),
                                     vocab, 2);
  const auto a = encode(lcs_ex.enc_input_ids, lcs_ex.plan, params, cfg);
  const auto b = encode(plain.enc_input_ids, plain.plan, params, cfg);
  EXPECT_LE(lcs::testing::max_abs_diff(a.final_output.values(), b.final_output.values()), 1e-12);
}
