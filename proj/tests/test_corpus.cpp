#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "test_support.hpp"

using namespace lcs;

namespace {

CorpusConfig tiny(double noise = 0.0) {
  CorpusConfig c;
  c.grammar_size = 40;
  c.pairs_per_direction = 60;
  c.valid_pairs = 5;
  c.test_pairs = 10;
  c.noise = noise;
  c.seed = 11;
  return c;
}

}  // namespace

TEST(Vocabulary, DefaultCodesStartWithEnglish) {
  EXPECT_EQ(Vocabulary::default_codes(4), (std::vector<std::string>{"en", "aa", "bb", "cc"}));
}

TEST(Vocabulary, RangesAreDisjointAndTagsSpecial) {
  const Vocabulary v = lcs::testing::small_vocab(4, 30);
  std::set<int> seen;
  for (const auto& lang : v.languages()) {
    EXPECT_TRUE(v.is_tag(lang.tag_id));
    EXPECT_TRUE(v.is_special(lang.tag_id));
    for (int t = lang.range_begin; t < lang.range_end; ++t) {
      EXPECT_TRUE(seen.insert(t).second);
      EXPECT_EQ(v.language_of(t), lang.code);
    }
  }
  EXPECT_EQ(v.size(), *seen.rbegin() + 1);
}

TEST(Vocabulary, RenderUnrenderRoundTrip) {
  const Vocabulary v = lcs::testing::small_vocab(4, 30);
  Rng rng(3);
  for (const auto& code : v.codes()) {
    for (int len : {1, 2, 5, 8}) {
      std::vector<int> concepts;
      for (int i = 0; i < len; ++i) concepts.push_back(rng.uniform_int(0, 29));
      EXPECT_EQ(unrender(render(concepts, v.language(code)), v.language(code)), concepts) << code;
    }
  }
}

TEST(Vocabulary, TextRoundTrip) {
  const Vocabulary v = lcs::testing::small_vocab(4, 30);
  EXPECT_EQ(Vocabulary::from_text(v.to_text()), v);
}

TEST(Corpus, DirectionsAreEnglishCentric) {
  const auto codes = Vocabulary::default_codes(4);
  EXPECT_EQ(supervised_directions(codes).size(), 6u);
  const auto zero = zero_shot_directions(codes);
  EXPECT_EQ(zero.size(), 6u);
  for (const auto& [s, t] : zero) {
    EXPECT_NE(s, "en");
    EXPECT_NE(t, "en");
    EXPECT_NE(s, t);
  }
}

TEST(Corpus, BuildIsDeterministicAndSized) {
  const CorpusSet a = build_corpus(tiny()), b = build_corpus(tiny());
  EXPECT_EQ(a.train.examples, b.train.examples);
  EXPECT_EQ(a.test_zero.examples, b.test_zero.examples);
  EXPECT_EQ(a.train.size(), 6u * 60u);
  EXPECT_EQ(a.test_zero.size(), 6u * 10u);
  CorpusConfig other = tiny();
  other.seed = 12;
  EXPECT_NE(build_corpus(other).train.examples, a.train.examples);
}

TEST(Corpus, PairsAreTranslationsAndSplitsDisjoint) {
  const CorpusSet set = build_corpus(tiny());
  std::set<std::vector<int>> train_concepts;
  for (const auto& e : set.train.examples) {
    const auto c = unrender(e.src, set.vocab.language(e.src_lang));
    EXPECT_EQ(c, unrender(e.tgt, set.vocab.language(e.tgt_lang)));
    train_concepts.insert(c);
  }
  for (const auto& e : set.test_zero.examples)
    EXPECT_EQ(train_concepts.count(unrender(e.src, set.vocab.language(e.src_lang))), 0u);
}

TEST(Corpus, NoiseLogAndDenoiseAgree) {
  const CorpusSet clean = build_corpus(tiny());
  const CorpusSet noisy = build_corpus(tiny(0.2));
  ASSERT_FALSE(noisy.noise_log.empty());
  std::set<std::size_t> corrupted;
  for (const auto& r : noisy.noise_log) {
    corrupted.insert(r.index);
    EXPECT_NE(r.rendered_lang, r.tgt_lang);
    EXPECT_EQ(detect_language(noisy.train.examples[r.index].tgt, noisy.vocab), r.rendered_lang);
  }
  std::vector<Example> expected;
  for (std::size_t i = 0; i < clean.train.size(); ++i)
    if (!corrupted.count(i)) expected.push_back(clean.train.examples[i]);
  EXPECT_EQ(denoise_filter(noisy.train, noisy.vocab).examples, expected);
  EXPECT_EQ(denoise_filter(clean.train, clean.vocab).examples, clean.train.examples);
}

TEST(Corpus, NoiseZeroIsIdentity) {
  const CorpusSet set = build_corpus(tiny());
  const auto [out, log] = inject_noise(set.train, set.vocab, 0.0, 1);
  EXPECT_EQ(out.examples, set.train.examples);
  EXPECT_TRUE(log.empty());
  EXPECT_THROW(inject_noise(set.train, set.vocab, 1.0, 1), ConfigError);
}

TEST(Corpus, JsonlAndDirectoryRoundTrip) {
  const CorpusSet set = build_corpus(tiny(0.2));
  const auto dir = std::filesystem::temp_directory_path() / "lcs_mnmt_corpus_test";
  std::filesystem::remove_all(dir);
  write_corpus(set, tiny(0.2), dir);
  for (const char* f : kCorpusFiles) EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  const CorpusSet back = load_corpus(dir);
  EXPECT_EQ(back.vocab, set.vocab);
  EXPECT_EQ(back.train.examples, set.train.examples);
  EXPECT_EQ(back.test_sup.examples, set.test_sup.examples);
  EXPECT_EQ(back.noise_log.size(), set.noise_log.size());
  EXPECT_DOUBLE_EQ(back.train.noise_rate_applied, 0.2);
  std::filesystem::remove_all(dir);
}

TEST(Corpus, ConfigValidation) {
  CorpusConfig c = tiny();
  c.n_langs = 2;
  EXPECT_THROW(build_corpus(c), ConfigError);
  EXPECT_EQ(CorpusConfig::from_config(tiny().to_config("corpus."), "corpus.").to_config().to_text(),
            tiny().to_config().to_text());
}
