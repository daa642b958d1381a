#include <catch2/catch_amalgamated.hpp>

#include "mtasr/decoder.hpp"

using namespace mtasr;
using namespace mtasr::decode;
namespace O = mtasr::ops;

namespace {
model::Vocabulary toy_vocab(std::size_t n_base) {
  std::vector<std::string> toks;
  for (std::size_t i = 0; i < n_base; ++i)
    toks.push_back("w" + std::to_string(i));
  model::Vocabulary v(toks);
  v.extend();
  return v;
}

struct Fixture {
  model::Vocabulary vocab;
  blocks::TransformerDecoder dec;
  Tensor h;             // encoder memory
  Tensor ctc_logprobs;  // frames x ctc_vocab

  Fixture(std::size_t n_base, std::size_t frames, unsigned seed)
      : vocab(toy_vocab(n_base)) {
    Rng rng(seed);
    blocks::DecoderConfig dc;
    dc.num_blocks = 1;
    dc.model_dim = 8;
    dc.heads = 2;
    dc.ffn_units = 12;
    dc.vocab_size = vocab.decoder_vocab();
    dec = blocks::TransformerDecoder(dc, rng);
    h = Tensor::randn({frames, 8}, rng);
    NoGradGuard ng;
    ctc_logprobs =
        O::log_softmax_rows(Tensor::randn({frames, vocab.ctc_vocab()}, rng));
  }

  blocks::CausalTransformer make_lm(unsigned seed,
                                    std::size_t vocab_size = 0) const {
    Rng rng(seed);
    blocks::DecoderConfig dc;
    dc.num_blocks = 1;
    dc.model_dim = 8;
    dc.heads = 2;
    dc.ffn_units = 12;
    dc.vocab_size = vocab_size ? vocab_size : vocab.decoder_vocab();
    return blocks::CausalTransformer(dc, rng);
  }
};

std::vector<int> greedy_attention(const Fixture& fx, std::size_t max_len) {
  NoGradGuard ng;
  std::vector<int> tokens = {fx.vocab.sos()};
  for (std::size_t step = 0; step < max_len; ++step) {
    Tensor lp = fx.dec.step(fx.h, tokens);
    // argmax over emittable symbols: every vocabulary token plus eos (sos is
    // never re-emitted).
    int best = 0;
    for (std::size_t c = 1; c < lp.cols(); ++c) {
      if (static_cast<int>(c) == fx.vocab.sos()) continue;
      if (lp.at(0, c) > lp.at(0, best)) best = static_cast<int>(c);
    }
    tokens.push_back(best);
    if (best == fx.vocab.eos()) break;
  }
  return tokens;
}
}  // namespace

TEST_CASE("beam one with zero ctc and lm weights is greedy attention") {
  for (unsigned seed : {1u, 2u, 3u, 4u, 5u}) {
    Fixture fx(4, 6, seed);
    BeamConfig cfg;
    cfg.beam = 1;
    cfg.w_ctc = 0.0;
    cfg.w_lm = 0.0;
    cfg.max_len = 12;
    auto nbest = joint_beam_search(fx.h, fx.ctc_logprobs, fx.dec, nullptr,
                                   fx.vocab, cfg);
    REQUIRE(!nbest.empty());
    std::vector<int> greedy = greedy_attention(fx, cfg.max_len);
    if (nbest[0].finished)
      CHECK(nbest[0].tokens == greedy);
    else
      CHECK(std::equal(nbest[0].tokens.begin(), nbest[0].tokens.end(),
                       greedy.begin()));
  }
}

TEST_CASE("pure ctc beam matches exhaustive enumeration on a toy") {
  for (unsigned seed : {11u, 12u, 13u}) {
    Fixture fx(2, 3, seed);  // 3 frames, |V'| = 5
    BeamConfig cfg;
    cfg.beam = 8;
    cfg.w_ctc = 1.0;
    cfg.w_lm = 0.0;
    cfg.max_len = 4;  // room for three tokens plus eos
    auto nbest = joint_beam_search(fx.h, fx.ctc_logprobs, fx.dec, nullptr,
                                   fx.vocab, cfg);
    REQUIRE(!nbest.empty());
    REQUIRE(nbest[0].finished);

    // Exhaustive: score every label sequence of length 0..3 over V'.
    double best_score = kLogZero;
    std::vector<int> best_seq;
    std::vector<std::vector<int>> seqs = {{}};
    const int n = static_cast<int>(fx.vocab.size());
    for (std::size_t len = 1; len <= 3; ++len) {
      std::vector<int> s(len, 0);
      while (true) {
        seqs.push_back(s);
        std::size_t i = 0;
        while (i < len && s[i] == n - 1) s[i++] = 0;
        if (i == len) break;
        ++s[i];
      }
    }
    for (const auto& s : seqs) {
      std::vector<int> ctc_seq;
      for (int t : s) ctc_seq.push_back(t + 1);
      double score;
      if (ctc_seq.empty()) {
        score = 0.0;
        for (std::size_t t = 0; t < 3; ++t)
          score += fx.ctc_logprobs.at(t, 0);
      } else {
        if (ctc::min_frames(ctc_seq) > 3) continue;
        score = -ctc::loss(fx.ctc_logprobs, ctc_seq).item();
      }
      if (score > best_score) {
        best_score = score;
        best_seq = s;
      }
    }
    std::vector<int> got(nbest[0].tokens.begin() + 1,
                         nbest[0].tokens.end() - 1);  // strip sos/eos
    CHECK(got == best_seq);
    CHECK_THAT(nbest[0].ctc, Catch::Matchers::WithinAbs(best_score, 1e-9));
  }
}

TEST_CASE("finished scores decompose into teacher-forced parts") {
  Fixture fx(4, 6, 21);
  BeamConfig cfg;
  cfg.beam = 4;
  cfg.max_len = 8;
  auto nbest = joint_beam_search(fx.h, fx.ctc_logprobs, fx.dec, nullptr,
                                 fx.vocab, cfg);
  NoGradGuard ng;
  for (const auto& hyp : nbest) {
    if (!hyp.finished) continue;
    // Attention score = teacher-forced log-likelihood of the sequence.
    Tensor lp = fx.dec.forward(fx.h, std::vector<int>(hyp.tokens.begin(),
                                                      hyp.tokens.end() - 1));
    double ll = 0.0;
    for (std::size_t k = 0; k + 1 < hyp.tokens.size(); ++k)
      ll += lp.at(k, hyp.tokens[k + 1]);
    CHECK_THAT(hyp.att, Catch::Matchers::WithinAbs(ll, 1e-9));
    // CTC score = -ctc_loss of the emitted sequence (tags included).
    std::vector<int> ctc_seq;
    for (std::size_t k = 1; k + 1 < hyp.tokens.size(); ++k)
      ctc_seq.push_back(hyp.tokens[k] + 1);
    double expect;
    if (ctc_seq.empty()) {
      expect = 0.0;
      for (std::size_t t = 0; t < fx.ctc_logprobs.rows(); ++t)
        expect += fx.ctc_logprobs.at(t, 0);
    } else if (ctc::min_frames(ctc_seq) <=
               static_cast<int>(fx.ctc_logprobs.rows())) {
      expect = -ctc::loss(fx.ctc_logprobs, ctc_seq).item();
    } else {
      continue;  // infeasible sequences carry -inf-like scores
    }
    CHECK_THAT(hyp.ctc, Catch::Matchers::WithinAbs(expect, 1e-6));
  }
}

TEST_CASE("beam widening never hurts the best score") {
  Fixture fx(4, 6, 31);
  BeamConfig cfg;
  cfg.max_len = 8;
  double prev = kLogZero;
  for (std::size_t beam = 1; beam <= 5; ++beam) {
    cfg.beam = beam;
    auto nbest = joint_beam_search(fx.h, fx.ctc_logprobs, fx.dec, nullptr,
                                   fx.vocab, cfg);
    REQUIRE(nbest[0].finished);
    double best = nbest[0].combined(cfg);
    CHECK(best >= prev - 1e-12);
    prev = best;
  }
}

TEST_CASE("zero lm weight with an attached lm changes nothing") {
  Fixture fx(4, 6, 41);
  blocks::CausalTransformer lm = fx.make_lm(42);
  BeamConfig cfg;
  cfg.beam = 4;
  cfg.max_len = 8;
  cfg.w_lm = 0.0;
  auto with_lm = joint_beam_search(fx.h, fx.ctc_logprobs, fx.dec, &lm,
                                   fx.vocab, cfg);
  auto without = joint_beam_search(fx.h, fx.ctc_logprobs, fx.dec, nullptr,
                                   fx.vocab, cfg);
  REQUIRE(with_lm.size() == without.size());
  for (std::size_t i = 0; i < with_lm.size(); ++i) {
    CHECK(with_lm[i].tokens == without[i].tokens);
    CHECK(with_lm[i].combined(cfg) == without[i].combined(cfg));
  }
}

TEST_CASE("uniform lm shifts scores but not the ranking") {
  Fixture fx(4, 6, 51);
  // Zeroed output projection makes the LM exactly uniform at every step.
  blocks::CausalTransformer lm = fx.make_lm(52);
  std::fill(lm.out.w.data().begin(), lm.out.w.data().end(), 0.0);
  std::fill(lm.out.b.data().begin(), lm.out.b.data().end(), 0.0);
  BeamConfig cfg;
  cfg.beam = 4;
  cfg.max_len = 8;
  cfg.w_lm = 0.3;
  auto fused = joint_beam_search(fx.h, fx.ctc_logprobs, fx.dec, &lm,
                                 fx.vocab, cfg);
  cfg.w_lm = 0.0;
  auto plain = joint_beam_search(fx.h, fx.ctc_logprobs, fx.dec, nullptr,
                                 fx.vocab, cfg);
  REQUIRE(!fused.empty());
  CHECK(fused[0].tokens == plain[0].tokens);
  // Each fused hypothesis' LM part is exactly -|emitted+1| * log|V'+2|.
  double step_lp = -std::log(double(fx.vocab.decoder_vocab()));
  for (const auto& hyp : fused)
    if (hyp.finished)
      CHECK_THAT(hyp.lm, Catch::Matchers::WithinAbs(
                              step_lp * double(hyp.emitted()), 1e-9));
}

TEST_CASE("lm vocabulary mismatch is a fusion error") {
  Fixture fx(4, 6, 61);
  blocks::CausalTransformer lm = fx.make_lm(62, fx.vocab.decoder_vocab() + 1);
  BeamConfig cfg;
  CHECK_THROWS_AS(joint_beam_search(fx.h, fx.ctc_logprobs, fx.dec, &lm,
                                    fx.vocab, cfg),
                  DataError);
}

TEST_CASE("decoding is deterministic") {
  Fixture fx(4, 6, 71);
  BeamConfig cfg;
  cfg.beam = 5;
  cfg.max_len = 8;
  auto a = joint_beam_search(fx.h, fx.ctc_logprobs, fx.dec, nullptr, fx.vocab,
                             cfg);
  auto b = joint_beam_search(fx.h, fx.ctc_logprobs, fx.dec, nullptr, fx.vocab,
                             cfg);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].tokens == b[i].tokens);
    CHECK(a[i].att == b[i].att);
    CHECK(a[i].ctc == b[i].ctc);
  }
}

TEST_CASE("tag stripping") {
  model::Vocabulary v = toy_vocab(4);  // tags at 4,5,6
  int co = v.tag_id(1), ul = v.tag_id(0);

  StripResult r = strip_tag({v.sos(), co, 0, 1, v.eos()}, v);
  REQUIRE(r.dialect.has_value());
  CHECK(*r.dialect == 1);
  CHECK(r.text == std::vector<int>{0, 1});
  CHECK(!r.malformed);

  r = strip_tag({0, 1}, v);
  CHECK(!r.dialect.has_value());
  CHECK(r.text == std::vector<int>{0, 1});

  r = strip_tag({co, 0, ul, 1}, v);
  REQUIRE(r.dialect.has_value());
  CHECK(*r.dialect == 1);
  CHECK(r.text == std::vector<int>{0, 1});
  CHECK(r.malformed);
}

TEST_CASE("forced tag first constrains the first emission") {
  Fixture fx(4, 6, 81);
  BeamConfig cfg;
  cfg.beam = 3;
  cfg.max_len = 8;
  cfg.force_tag_first = true;
  auto nbest = joint_beam_search(fx.h, fx.ctc_logprobs, fx.dec, nullptr,
                                 fx.vocab, cfg);
  for (const auto& hyp : nbest)
    if (hyp.tokens.size() > 1 && hyp.tokens[1] != fx.vocab.eos())
      CHECK(fx.vocab.is_tag(hyp.tokens[1]));
}

TEST_CASE("invalid beam configuration is rejected") {
  BeamConfig cfg;
  cfg.beam = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.beam = 1;
  cfg.max_len = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
