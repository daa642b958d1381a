#include <catch2/catch_amalgamated.hpp>
#include <cstdio>
#include <fstream>

#include "mtasr/gradcheck.hpp"
#include "mtasr/model.hpp"

using namespace mtasr;
using namespace mtasr::model;
namespace O = mtasr::ops;

namespace {
Vocabulary small_vocab(std::size_t n_base = 6) {
  std::vector<std::string> toks;
  for (std::size_t i = 0; i < n_base; ++i)
    toks.push_back("w" + std::to_string(i));
  Vocabulary v(toks);
  v.extend();
  return v;
}

ModelConfig tiny_config(interctc::TapAssignment taps = {}) {
  ModelConfig cfg;
  cfg.feat_dim = 4;
  cfg.encoder.num_blocks = 2;
  cfg.encoder.model_dim = 8;
  cfg.encoder.heads = 2;
  cfg.encoder.ffn_units = 12;
  cfg.encoder.cgmlp_units = 12;
  cfg.encoder.conv_kernel = 3;
  cfg.decoder_blocks = 1;
  cfg.decoder_ffn = 12;
  cfg.taps = std::move(taps);
  return cfg;
}

Utterance random_utterance(const std::string& id, std::size_t frames,
                           std::vector<int> text, std::size_t dialect,
                           Rng& rng) {
  Utterance u;
  u.id = id;
  u.features = Tensor::randn({frames, 4}, rng);
  u.text = std::move(text);
  u.dialect = dialect;
  return u;
}
}  // namespace

TEST_CASE("vocabulary extension appends three tags") {
  std::vector<std::string> toks;
  for (int i = 0; i < 50; ++i) toks.push_back("t" + std::to_string(i));
  Vocabulary v(toks);
  CHECK(v.size() == 50);
  CHECK(!v.extended());
  v.extend();
  CHECK(v.size() == 53);
  CHECK(v.id("[UL]") == 50);
  CHECK(v.id("[CO]") == 51);
  CHECK(v.id("[MU]") == 52);
  CHECK(v.id("t0") == 0);  // base ids unchanged
  CHECK(v.tag_id(1) == 51);
  CHECK(v.is_tag(51));
  CHECK(!v.is_tag(49));
  CHECK(v.sos() == 53);
  CHECK(v.eos() == 54);
  CHECK(v.ctc_vocab() == 54);
  CHECK(v.decoder_vocab() == 55);
  CHECK_THROWS_AS(v.extend(), DataError);  // double extension
  Vocabulary w({"a", "[UL]"});
  CHECK_THROWS_AS(w.extend(), DataError);  // tag already present
}

TEST_CASE("vocabulary file round trip preserves ordering") {
  Vocabulary v = small_vocab();
  std::string path = "vocab_roundtrip.txt";
  v.save(path);
  Vocabulary w = Vocabulary::load(path);
  CHECK(w.items == v.items);
  CHECK(w.n_base == v.n_base);
  std::remove(path.c_str());

  std::ofstream bad("vocab_bad.txt");
  bad << "a\n[UL]\nb\n";  // base token after a tag
  bad.close();
  CHECK_THROWS_AS(Vocabulary::load("vocab_bad.txt"), DataError);
  std::remove("vocab_bad.txt");
}

TEST_CASE("target construction for the three heads") {
  Vocabulary v = small_vocab();
  UtteranceTargets tg = build_targets(v, {0, 3, 2}, 1);  // dialect CO
  int tag = v.tag_id(1);
  CHECK(tg.decoder == std::vector<int>{v.sos(), tag, 0, 3, 2, v.eos()});
  CHECK(tg.final_ctc == std::vector<int>{tag + 1, 1, 4, 3});
  CHECK(tg.asr_inter == tg.final_ctc);
  CHECK(tg.did_inter == std::vector<int>{tag + 1});
  CHECK(tg.did_inter.size() == 1);

  UtteranceTargets empty = build_targets(v, {}, 0);
  CHECK(empty.final_ctc == std::vector<int>{v.tag_id(0) + 1});

  CHECK_THROWS_AS(build_targets(v, {0}, 7), DataError);  // unknown dialect
  int tag_as_text = v.tag_id(0);
  CHECK_THROWS_AS(build_targets(v, {tag_as_text}, 0), DataError);
}

TEST_CASE("target round trip recovers the text") {
  Vocabulary v = small_vocab();
  std::vector<int> text = {5, 1, 1, 0};
  UtteranceTargets tg = build_targets(v, text, 2);
  // Strip sos/eos/tag from the decoder target.
  std::vector<int> recovered(tg.decoder.begin() + 2, tg.decoder.end() - 1);
  CHECK(recovered == text);
  // Strip tag and unshift the CTC target.
  std::vector<int> from_ctc;
  for (std::size_t i = 1; i < tg.final_ctc.size(); ++i)
    from_ctc.push_back(tg.final_ctc[i] - 1);
  CHECK(from_ctc == text);
}

TEST_CASE("no-tap training loss is the plain hybrid objective") {
  Rng rng(21);
  Model m(small_vocab(), tiny_config(), rng);
  TrainBatch batch = {random_utterance("u0", 20, {1, 2}, 0, rng)};
  TrainResult res = m.forward_train(batch);
  CHECK(res.report.inter.empty());
  CHECK(res.report.total ==
        res.report.l_ctc * 0.3 + res.report.l_dec * (1.0 - 0.3));
  CHECK(res.report.recompose_total() == res.report.total);
}

TEST_CASE("tapped training loss recomposes bitwise from its parts") {
  Rng rng(22);
  interctc::TapAssignment taps{{{1, {interctc::Objective::kAsr,
                                     interctc::Objective::kDid}}}};
  Model m(small_vocab(), tiny_config(taps), rng);
  TrainBatch batch = {random_utterance("u0", 20, {1, 2}, 0, rng),
                      random_utterance("u1", 24, {3}, 2, rng)};
  TrainResult res = m.forward_train(batch);
  CHECK(res.report.inter.size() == 2);
  CHECK(res.report.recompose_ctc() == res.report.l_ctc_composed);
  CHECK(res.report.recompose_total() == res.report.total);
  CHECK(std::isfinite(res.report.total));
}

TEST_CASE("decoder component equals teacher-forced log-likelihood") {
  Rng rng(23);
  ModelConfig cfg = tiny_config();
  cfg.label_smoothing = 0.0;
  Model m(small_vocab(), cfg, rng);
  Utterance u = random_utterance("u0", 20, {1, 2, 4}, 1, rng);
  TrainResult res = m.forward_train({u});

  NoGradGuard ng;
  UtteranceTargets tg = build_targets(m.vocab, u.text, u.dialect);
  Model::Encoded enc = m.encode(u.features);
  std::vector<int> dec_in(tg.decoder.begin(), tg.decoder.end() - 1);
  double ll = 0.0;
  for (std::size_t k = 0; k < dec_in.size(); ++k) {
    std::vector<int> prefix(dec_in.begin(), dec_in.begin() + k + 1);
    ll += m.decoder.step(enc.h, prefix).at(0, tg.decoder[k + 1]);
  }
  CHECK_THAT(res.report.l_dec, Catch::Matchers::WithinAbs(-ll, 1e-9));
}

TEST_CASE("infeasible subsampled target names the utterance") {
  Rng rng(24);
  Model m(small_vocab(), tiny_config(), rng);
  // 4 frames subsample to 1; a 3-token text cannot fit.
  TrainBatch batch = {random_utterance("bad-utt", 4, {1, 2, 3}, 0, rng)};
  try {
    m.forward_train(batch);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("bad-utt") != std::string::npos);
  }
}

TEST_CASE("did prediction from constructed tap posteriors") {
  Vocabulary v = small_vocab();  // tags at 6,7,8 -> ctc symbols 7,8,9
  Rng rng(25);
  interctc::TapAssignment taps{{{1, {interctc::Objective::kDid}}}};
  Model m(v, tiny_config(taps), rng);

  auto frames_to_lp = [&](const std::vector<int>& syms) {
    Tensor lp = Tensor::full({syms.size(), v.ctc_vocab()}, -30.0);
    for (std::size_t t = 0; t < syms.size(); ++t) lp.at(t, syms[t]) = -0.01;
    return lp;
  };
  int co = v.tag_id(1) + 1, ul = v.tag_id(0) + 1;

  interctc::TapActivations clean;
  clean.logprobs[1][interctc::Objective::kDid] = frames_to_lp({0, co, co, 0});
  DidPrediction p = m.predict_did(clean);
  CHECK(p.dialect == 1);
  CHECK(p.source == DidSource::kTapClean);

  // Ambiguous collapse ([UL],[CO]): mass decides. UL occupies 2 frames vs
  // CO's 1, so UL wins.
  interctc::TapActivations ambi;
  ambi.logprobs[1][interctc::Objective::kDid] =
      frames_to_lp({ul, ul, 0, co});
  p = m.predict_did(ambi);
  CHECK(p.dialect == 0);
  CHECK(p.source == DidSource::kTapMassFallback);
  CHECK(p.diagnostic.find("fallback") != std::string::npos);

  // All blanks: fallback over near-uniform tiny masses, ties to lowest tag.
  interctc::TapActivations blank;
  blank.logprobs[1][interctc::Objective::kDid] = frames_to_lp({0, 0, 0});
  p = m.predict_did(blank);
  CHECK(p.source == DidSource::kTapMassFallback);

  // No DID tap anywhere.
  interctc::TapActivations none;
  CHECK_THROWS_AS(m.predict_did(none), ConfigError);
}

TEST_CASE("full model gradient check") {
  Rng rng(26);
  interctc::TapAssignment taps{{{1, {interctc::Objective::kAsr,
                                     interctc::Objective::kDid}}}};
  Model m(small_vocab(), tiny_config(taps), rng);
  TrainBatch batch = {random_utterance("u0", 16, {1, 2}, 0, rng)};
  std::vector<Tensor> params = blocks::param_list(m.params());
  auto f = [&] { return m.forward_train(batch).total; };
  CHECK(grad_check(f, params) < 1e-3);
}

TEST_CASE("overfit smoke: loss decreases over 50 steps on a fixed batch") {
  Rng rng(27);
  interctc::TapAssignment taps{{{1, {interctc::Objective::kDid}}}};
  Model m(small_vocab(), tiny_config(taps), rng);
  TrainBatch batch;
  std::uniform_int_distribution<int> tok(0, 5);
  std::uniform_int_distribution<int> dia(0, 2);
  for (int i = 0; i < 16; ++i)
    batch.push_back(random_utterance("u" + std::to_string(i), 16,
                                     {tok(rng), tok(rng)}, dia(rng), rng));
  OptimConfig oc;
  oc.warmup_steps = 20;
  Adam opt(oc, blocks::param_list(m.params()));
  double first = 0.0, last = 0.0;
  for (int step = 0; step < 50; ++step) {
    double total = train_step(m, batch, opt).total;
    if (step == 0) first = total;
    last = total;
  }
  CHECK(last < first);
  CHECK(last < 0.8 * first);
}

TEST_CASE("training is deterministic for a fixed seed") {
  auto run = [] {
    Rng rng(28);
    Model m(small_vocab(), tiny_config(), rng);
    TrainBatch batch = {random_utterance("u0", 16, {1, 4}, 2, rng)};
    Adam opt(OptimConfig{}, blocks::param_list(m.params()));
    double last = 0.0;
    for (int i = 0; i < 5; ++i) last = train_step(m, batch, opt).total;
    return last;
  };
  CHECK(run() == run());
}

TEST_CASE("checkpoint round trip restores the model") {
  Rng rng(29);
  Model a(small_vocab(), tiny_config(), rng);
  Rng rng2(999);
  Model b(small_vocab(), tiny_config(), rng2);
  std::string path = "model_roundtrip.ictx";
  a.save(path);
  b.load(path);
  // Same parameters after load: save again and compare bytes.
  std::string path2 = "model_roundtrip2.ictx";
  b.save(path2);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::string s1((std::istreambuf_iterator<char>(f1)),
                 std::istreambuf_iterator<char>());
  std::string s2((std::istreambuf_iterator<char>(f2)),
                 std::istreambuf_iterator<char>());
  CHECK(s1 == s2);
  CHECK(!s1.empty());
  std::remove(path.c_str());
  std::remove(path2.c_str());
}
