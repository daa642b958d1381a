#include <catch2/catch_amalgamated.hpp>
#include <cstdio>
#include <fstream>

#include "mtasr/lm.hpp"

using namespace mtasr;
using namespace mtasr::lm;

namespace {
model::Vocabulary word_vocab(std::size_t n_base = 8) {
  std::vector<std::string> toks;
  for (std::size_t i = 0; i < n_base; ++i)
    toks.push_back("w" + std::to_string(i));
  model::Vocabulary v(toks);
  v.extend();
  return v;
}

LmConfig tiny_lm_config() {
  LmConfig c;
  c.num_blocks = 1;
  c.model_dim = 16;
  c.heads = 2;
  c.ffn_units = 24;
  c.context_len = 32;
  return c;
}

TextCorpus random_corpus(std::size_t sentences, std::size_t n_base, Rng& rng,
                         bool tagged = false) {
  TextCorpus out;
  std::uniform_int_distribution<int> tok(0, static_cast<int>(n_base) - 1);
  std::uniform_int_distribution<int> len(2, 5);
  std::uniform_int_distribution<int> dia(0, 2);
  for (std::size_t i = 0; i < sentences; ++i) {
    Sentence s;
    int L = len(rng);
    for (int k = 0; k < L; ++k) s.tokens.push_back(tok(rng));
    if (tagged) s.dialect = static_cast<std::size_t>(dia(rng));
    out.push_back(std::move(s));
  }
  return out;
}
}  // namespace

TEST_CASE("prefix scores are a distribution and satisfy the chain rule") {
  Rng rng(1);
  Lm lm(word_vocab(), tiny_lm_config(), rng);
  std::vector<int> prefix = {lm.vocab.sos(), 1, 2};
  Tensor lp = lm_score_prefix(lm, prefix);
  double sum = 0.0;
  for (std::size_t c = 0; c < lp.cols(); ++c) sum += std::exp(lp.at(0, c));
  CHECK_THAT(sum, Catch::Matchers::WithinAbs(1.0, 1e-9));

  // Chain rule: prefix increments reproduce the full-sequence likelihood.
  std::vector<int> seq = {lm.vocab.sos(), 1, 2, 4, lm.vocab.eos()};
  NoGradGuard ng;
  Tensor full = lm.net.forward(std::vector<int>(seq.begin(), seq.end() - 1));
  double ll_full = 0.0;
  for (std::size_t k = 0; k + 1 < seq.size(); ++k)
    ll_full += full.at(k, seq[k + 1]);
  double ll_chain = 0.0;
  for (std::size_t k = 0; k + 1 < seq.size(); ++k) {
    std::vector<int> p(seq.begin(), seq.begin() + k + 1);
    ll_chain += lm_score_prefix(lm, p).at(0, seq[k + 1]);
  }
  CHECK_THAT(ll_chain, Catch::Matchers::WithinAbs(ll_full, 1e-9));

  // Deterministic across calls.
  CHECK(lm_score_prefix(lm, prefix).at(0, 3) ==
        lm_score_prefix(lm, prefix).at(0, 3));

  std::vector<int> overlong(40, 1);
  overlong[0] = lm.vocab.sos();
  CHECK_THROWS_AS(lm_score_prefix(lm, overlong), DataError);
}

TEST_CASE("uniform model perplexity equals the id-space size") {
  Rng rng(2);
  Lm lm(word_vocab(), tiny_lm_config(), rng);
  std::fill(lm.net.out.w.data().begin(), lm.net.out.w.data().end(), 0.0);
  std::fill(lm.net.out.b.data().begin(), lm.net.out.b.data().end(), 0.0);
  TextCorpus corpus = random_corpus(5, 8, rng);
  CHECK_THAT(perplexity(lm, corpus),
             Catch::Matchers::WithinRel(
                 double(lm.vocab.decoder_vocab()), 1e-9));
}

TEST_CASE("perplexity computed two ways agrees") {
  Rng rng(3);
  Lm lm(word_vocab(), tiny_lm_config(), rng);
  TextCorpus corpus = random_corpus(4, 8, rng, true);
  CHECK_THAT(perplexity(lm, corpus),
             Catch::Matchers::WithinAbs(perplexity_chain(lm, corpus), 1e-9));
}

TEST_CASE("single repeated sentence overfits toward perplexity one") {
  Rng rng(4);
  Lm lm(word_vocab(), tiny_lm_config(), rng);
  TextCorpus corpus = {{{1, 2, 3, 4}, std::nullopt}};
  LmTrainConfig tc;
  tc.steps = 300;
  tc.batch = 1;
  tc.optim.warmup_steps = 30;
  train_lm(lm, corpus, tc);
  CHECK(perplexity(lm, corpus) < 1.3);
}

TEST_CASE("pretraining reduces perplexity on a synthetic corpus") {
  Rng rng(5);
  Lm lm(word_vocab(), tiny_lm_config(), rng);
  TextCorpus corpus = random_corpus(20, 8, rng);
  double before = perplexity(lm, corpus);
  LmTrainConfig tc;
  tc.steps = 200;
  tc.batch = 4;
  tc.optim.warmup_steps = 40;
  train_lm(lm, corpus, tc);
  CHECK(perplexity(lm, corpus) < before);
}

TEST_CASE("corpus stage preconditions") {
  Rng rng(6);
  Lm lm(word_vocab(), tiny_lm_config(), rng);
  TextCorpus tagged = random_corpus(3, 8, rng, true);
  TextCorpus untagged = random_corpus(3, 8, rng, false);
  CHECK_THROWS_AS(train_lm(lm, tagged), DataError);
  CHECK_THROWS_AS(train_lm(lm, {}), DataError);
  CHECK_THROWS_AS(finetune_lm(lm, untagged), DataError);
  CHECK_THROWS_AS(finetune_lm(lm, {}), DataError);
}

TEST_CASE("corpus file parsing reports line numbers") {
  model::Vocabulary v = word_vocab();
  {
    std::ofstream os("lm_corpus.txt");
    os << "w0 w1 w2\n";
    os << "[CO] w3 w4\n";
    os << "\n";
    os << "w5\n";
  }
  TextCorpus c = load_corpus("lm_corpus.txt", v);
  REQUIRE(c.size() == 3);
  CHECK(c[0].tokens == std::vector<int>{0, 1, 2});
  CHECK(!c[0].dialect);
  REQUIRE(c[1].dialect);
  CHECK(*c[1].dialect == 1);
  CHECK(c[1].tokens == std::vector<int>{3, 4});

  // Round trip through save_corpus.
  save_corpus("lm_corpus2.txt", c, v);
  TextCorpus c2 = load_corpus("lm_corpus2.txt", v);
  REQUIRE(c2.size() == c.size());
  for (std::size_t i = 0; i < c.size(); ++i) {
    CHECK(c2[i].tokens == c[i].tokens);
    CHECK(c2[i].dialect == c[i].dialect);
  }
  std::remove("lm_corpus2.txt");

  {
    std::ofstream os("lm_corpus.txt");
    os << "w0 w1\nw2 nonesuch\n";
  }
  try {
    load_corpus("lm_corpus.txt", v);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
  {
    std::ofstream os("lm_corpus.txt");
    os << "w0 [CO] w1\n";
  }
  CHECK_THROWS_AS(load_corpus("lm_corpus.txt", v), DataError);
  std::remove("lm_corpus.txt");
}

TEST_CASE("deduplication keeps first occurrences") {
  TextCorpus c = {{{1, 2}, std::nullopt},
                  {{1, 2}, 0},
                  {{1, 2}, std::nullopt},
                  {{3}, 0}};
  TextCorpus d = dedup_corpus(c);
  REQUIRE(d.size() == 3);
  CHECK(d[0].tokens == std::vector<int>{1, 2});
  CHECK(!d[0].dialect);
  CHECK(d[1].dialect == std::optional<std::size_t>(0));
}

TEST_CASE("fine-tuning learns dialect structure and stays compatible") {
  Rng rng(7);
  model::Vocabulary v = word_vocab();
  Lm lm(v, tiny_lm_config(), rng);

  // Stage 1 text: all words, no tags.
  TextCorpus stage1 = random_corpus(30, 8, rng);
  LmTrainConfig tc;
  tc.steps = 150;
  tc.batch = 4;
  tc.optim.warmup_steps = 30;
  train_lm(lm, stage1, tc);
  lm.save("lm_stage1.ictx");

  // Stage 2: balanced tagged corpus with a dialect-exclusive marker word:
  // w7 appears only under [CO] (dialect 1), w6 only under [UL].
  TextCorpus stage2;
  Rng crng(8);
  std::uniform_int_distribution<int> tok(0, 5);
  for (int i = 0; i < 30; ++i)
    for (std::size_t d = 0; d < 3; ++d) {
      Sentence s;
      s.dialect = d;
      s.tokens = {tok(crng), d == 1 ? 7 : (d == 0 ? 6 : tok(crng)),
                  tok(crng)};
      stage2.push_back(s);
    }
  double before = perplexity(lm, stage2);
  tc.steps = 500;  // the tag prior needs convergence, not just improvement
  finetune_lm(lm, stage2, tc);
  double after = perplexity(lm, stage2);
  CHECK(after < 0.9 * before);

  // Tag prior approaches the balanced corpus frequency.
  Tensor tag_lp = lm_score_prefix(lm, {v.sos()});
  for (std::size_t d = 0; d < 3; ++d) {
    double p = std::exp(tag_lp.at(0, v.tag_id(d)));
    CHECK_THAT(p, Catch::Matchers::WithinAbs(1.0 / 3.0, 0.15));
  }

  // Marker word: w7 likelier under [CO] than [UL].
  double p_co = lm_score_prefix(lm, {v.sos(), v.tag_id(1)}).at(0, 7);
  double p_ul = lm_score_prefix(lm, {v.sos(), v.tag_id(0)}).at(0, 7);
  CHECK(p_co > p_ul);

  // Checkpoint compatibility: the stage-1 file restores into the
  // fine-tuned model without shape errors.
  CHECK_NOTHROW(lm.load("lm_stage1.ictx"));
  std::remove("lm_stage1.ictx");
}
