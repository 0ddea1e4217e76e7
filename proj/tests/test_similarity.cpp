#include <gtest/gtest.h>

#include "test_support.hpp"

using namespace lcs;

namespace {

struct Model {
  Vocabulary vocab = lcs::testing::small_vocab();
  ModelCheckpoint ckpt;
  std::vector<SentencePair> pairs;

  Model() {
    ModelConfig cfg = lcs::testing::small_model(vocab, 3);
    ckpt = ModelCheckpoint{cfg, vocab, init_params(cfg, 6), {}};
    Rng rng(12);
    for (int i = 0; i < 6; ++i) {
      std::vector<int> c;
      for (int j = 0; j < 4 + i % 3; ++j) c.push_back(rng.uniform_int(0, vocab.grammar_size() - 1));
      pairs.push_back({render(c, vocab.language("aa")), "aa", render(c, vocab.language("bb")), "bb"});
    }
  }
};

}  // namespace

TEST(Cosine, Oracles) {
  EXPECT_DOUBLE_EQ(*cosine({1, 2, 3}, {1, 2, 3}), 1.0);
  EXPECT_DOUBLE_EQ(*cosine({1, 0}, {0, 5}), 0.0);
  EXPECT_DOUBLE_EQ(*cosine({1, 1}, {-2, -2}), -1.0);
  EXPECT_FALSE(cosine({0, 0}, {1, 1}).has_value());
  EXPECT_THROW(cosine({1}, {1, 2}), ad::DimensionError);
}

TEST(Similarity, IdenticalSentencesGiveOne) {
  Model m;
  std::vector<SentencePair> same;
  for (const auto& p : m.pairs) same.push_back({p.x, "aa", p.x, "aa"});
  const auto curve = layer_similarity(m.ckpt, same, StrategySpec::s_enc_t_dec());
  ASSERT_EQ(curve.points.size(), 3u);
  for (const auto& pt : curve.points) EXPECT_NEAR(pt.value, 1.0, 1e-12);
}

TEST(Similarity, MatchesRecomputationFromExport) {
  Model m;
  const auto spec = StrategySpec::lcs(1);
  const auto curve = layer_similarity(m.ckpt, m.pairs, spec);
  std::vector<SentenceToEncode> xs, ys;
  for (const auto& p : m.pairs) {
    xs.push_back({p.x, {p.lang_x, p.lang_y}});
    ys.push_back({p.y, {p.lang_y, p.lang_x}});
  }
  const auto rx = parse_representations_csv(representations_csv(export_encoder_representations(m.ckpt, xs, spec)));
  const auto ry = parse_representations_csv(representations_csv(export_encoder_representations(m.ckpt, ys, spec)));
  ASSERT_EQ(rx.size(), m.pairs.size());
  ASSERT_EQ(rx.front().layers.front().size(), 16u);
  for (std::size_t l = 0; l < curve.points.size(); ++l) {
    double sum = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
      const auto& a = rx[i].layers[l];
      const auto& b = ry[i].layers[l];
      double dot = 0, na = 0, nb = 0;
      for (std::size_t j = 0; j < a.size(); ++j) {
        dot += a[j] * b[j];
        na += a[j] * a[j];
        nb += b[j] * b[j];
      }
      sum += dot / std::sqrt(na * nb);
    }
    EXPECT_NEAR(curve.points[l].value, sum / static_cast<double>(rx.size()), 1e-9) << l;
    EXPECT_EQ(curve.points[l].pairs_used, m.pairs.size());
  }
}

TEST(Similarity, CsvRoundTripIsExact) {
  Model m;
  std::vector<SentenceToEncode> xs;
  for (const auto& p : m.pairs) xs.push_back({p.x, {"aa", "bb"}});
  const auto reps = export_encoder_representations(m.ckpt, xs, StrategySpec::t_enc());
  const auto back = parse_representations_csv(representations_csv(reps));
  ASSERT_EQ(back.size(), reps.size());
  for (std::size_t i = 0; i < reps.size(); ++i) {
    EXPECT_EQ(back[i].lang, "aa");
    EXPECT_EQ(back[i].direction, (Direction{"aa", "bb"}));
    EXPECT_EQ(back[i].layers, reps[i].layers);
  }
  EXPECT_THROW(parse_representations_csv("bogus\n"), ConfigError);
}

TEST(Similarity, IsDeterministic) {
  Model m;
  const auto a = layer_similarity(m.ckpt, m.pairs, StrategySpec::t_enc());
  const auto b = layer_similarity(m.ckpt, m.pairs, StrategySpec::t_enc());
  for (std::size_t l = 0; l < a.points.size(); ++l) EXPECT_EQ(a.points[l].value, b.points[l].value);
  EXPECT_THROW(layer_similarity(m.ckpt, {}, StrategySpec::t_enc()), MetricError);
}
