#include <catch2/catch_amalgamated.hpp>

#include "mtasr/segmentation.hpp"

using namespace mtasr;
using namespace mtasr::seg;
namespace O = mtasr::ops;

namespace {
// One-hot-ish log-posteriors: probability ~1 on the given symbol per frame.
Tensor onehot_lp(const std::vector<int>& frame_syms, std::size_t n_syms,
                 double peak = 0.0, double rest = -1e9) {
  Tensor lp = Tensor::full({frame_syms.size(), n_syms}, rest);
  for (std::size_t t = 0; t < frame_syms.size(); ++t)
    lp.at(t, frame_syms[t]) = peak;
  return lp;
}

Tensor random_lp(std::size_t n, std::size_t c, Rng& rng) {
  NoGradGuard ng;
  return O::log_softmax_rows(Tensor::randn({n, c}, rng, 1.5));
}

// Exhaustive best stay/advance path: per frame emit blank, repeat the
// current token, or advance to the next. A path ends the moment the last
// token is emitted (the backtrack starts from the most probable timing of
// the last token, so trailing frames are not consumed).
struct OraclePath {
  double score = kLogZero;
  std::vector<std::size_t> frames;
};

void oracle_walk(const Tensor& lp, const std::vector<int>& syms,
                 std::size_t t, std::size_t j, double acc,
                 std::vector<std::size_t>& frames, OraclePath& best) {
  if (j == syms.size()) {
    if (acc > best.score) {
      best.score = acc;
      best.frames = frames;
    }
    return;
  }
  if (t == lp.rows()) return;
  oracle_walk(lp, syms, t + 1, j, acc + lp.at(t, 0), frames, best);  // blank
  if (j > 0)
    oracle_walk(lp, syms, t + 1, j, acc + lp.at(t, syms[j - 1]), frames,
                best);  // repeat
  frames.push_back(t);
  oracle_walk(lp, syms, t + 1, j + 1, acc + lp.at(t, syms[j]), frames, best);
  frames.pop_back();
}

OraclePath oracle_best(const Tensor& lp, const std::vector<int>& syms) {
  OraclePath best;
  std::vector<std::size_t> frames;
  oracle_walk(lp, syms, 0, 0, 0.0, frames, best);
  return best;
}
}  // namespace

TEST_CASE("ideal posteriors give a zero-score path and exact timings") {
  // Tokens 1, 2, 3 at frames 1, 4, 7; blanks elsewhere.
  std::vector<int> stream = {0, 1, 0, 0, 2, 0, 0, 3, 0};
  Tensor lp = onehot_lp(stream, 4);
  Trellis tr = build_trellis(lp, {1, 2, 3});
  std::vector<std::size_t> frames = backtrack(tr);
  CHECK(frames == std::vector<std::size_t>{1, 4, 7});
  // Best last-token cell score is 0 (certainty) at its timing.
  CHECK_THAT(tr.at(8, 3), Catch::Matchers::WithinAbs(0.0, 1e-12));
}

TEST_CASE("single token peak is located") {
  Tensor lp = Tensor::full({3, 2}, std::log(0.4));
  lp.at(0, 0) = std::log(0.9);
  lp.at(0, 1) = std::log(0.1);
  lp.at(1, 0) = std::log(0.8);
  lp.at(1, 1) = std::log(0.2);
  lp.at(2, 0) = std::log(0.1);
  lp.at(2, 1) = std::log(0.9);
  Trellis tr = build_trellis(lp, {1});
  CHECK(backtrack(tr) == std::vector<std::size_t>{2});
}

TEST_CASE("trellis agrees with exhaustive path enumeration") {
  Rng rng(11);
  int done = 0;
  for (int rep = 0; rep < 60; ++rep) {
    std::size_t n = 3 + rep % 4;  // up to 6 frames
    std::size_t m = 1 + rep % 3;  // up to 3 tokens
    if (m > n) continue;
    Tensor lp = random_lp(n, 4, rng);
    std::vector<int> syms;
    std::uniform_int_distribution<int> tok(1, 3);
    for (std::size_t i = 0; i < m; ++i) syms.push_back(tok(rng));
    Trellis tr = build_trellis(lp, syms);
    std::vector<std::size_t> frames = backtrack(tr);
    OraclePath best = oracle_best(lp, syms);
    // Recompute the path score up to the last token's timing from the
    // returned assignments.
    double got = 0.0;
    std::size_t j = 0;
    for (std::size_t t = 0; t <= frames.back(); ++t) {
      if (j < m && frames[j] == t) {
        got += lp.at(t, syms[j]);
        ++j;
      } else {
        double stay = lp.at(t, 0);
        if (j > 0) stay = std::max(stay, lp.at(t, syms[j - 1]));
        got += stay;
      }
    }
    CHECK_THAT(got, Catch::Matchers::WithinAbs(best.score, 1e-9));
    CHECK(frames == best.frames);
    ++done;
  }
  CHECK(done > 40);
}

TEST_CASE("infeasible token counts are rejected") {
  Rng rng(12);
  Tensor lp = random_lp(2, 3, rng);
  CHECK_THROWS_AS(build_trellis(lp, {1, 2, 1}), InfeasibleTargetError);
  CHECK_THROWS_AS(build_trellis(lp, {0}), DataError);  // blank is not a token
}

TEST_CASE("tie in last-token timing resolves to the earliest frame") {
  Tensor lp = Tensor::full({2, 2}, std::log(0.5));  // fully uniform
  Trellis tr = build_trellis(lp, {1});
  CHECK(backtrack(tr) == std::vector<std::size_t>{0});
}

TEST_CASE("all-blank posteriors align but score low confidence") {
  std::vector<int> stream(6, 0);
  Tensor lp = onehot_lp(stream, 3, std::log(0.98), std::log(0.01));
  Trellis tr = build_trellis(lp, {1});
  std::vector<std::size_t> frames = backtrack(tr);
  CHECK(frames.size() == 1);
  CHECK(confidence(lp, {1}, frames) < 0.05);
}

TEST_CASE("confidence windows") {
  // One-hot correct posteriors: confidence 1.
  std::vector<int> stream = {1, 2, 3};
  Tensor lp = onehot_lp(stream, 4);
  CHECK_THAT(confidence(lp, {1, 2, 3}, {0, 1, 2}),
             Catch::Matchers::WithinAbs(1.0, 1e-12));
  // One token forced to probability 0.1 with window 1.
  lp.at(1, 2) = std::log(0.1);
  CHECK_THAT(confidence(lp, {1, 2, 3}, {0, 1, 2}, 1),
             Catch::Matchers::WithinAbs(0.1, 1e-12));
}

TEST_CASE("corrupted middle utterance scores strictly lowest") {
  // Three utterances of two tokens each at known frames.
  std::vector<int> stream = {1, 2, 0, 1, 2, 0, 1, 2};
  Tensor lp = onehot_lp(stream, 3, std::log(0.97), std::log(0.015));
  // Corrupt the middle utterance's emissions.
  lp.at(3, 1) = std::log(0.3);
  lp.at(4, 2) = std::log(0.25);
  std::vector<UtteranceText> texts = {
      {"a", {1, 2}}, {"b", {1, 2}}, {"c", {1, 2}}};
  auto infer = [&](const Tensor&) { return lp; };
  // Feature stream is a stand-in; the infer closure ignores it.
  Tensor feats({stream.size() * 4, 1});
  auto segs = align_corpus(feats, infer, texts);
  REQUIRE(segs.size() == 3);
  CHECK(segs[1].confidence < segs[0].confidence);
  CHECK(segs[1].confidence < segs[2].confidence);
}

TEST_CASE("partitioned inference: pass-through and exact reassembly") {
  Rng rng(13);
  Tensor feats = Tensor::randn({400, 3}, rng);
  // Frame-local stand-in inference: average each 4-frame group.
  auto infer = [](const Tensor& f) {
    std::size_t n = posterior_length(f.rows());
    Tensor out({n, 3});
    for (std::size_t p = 0; p < n; ++p) {
      std::size_t lo = 4 * p, hi = std::min(lo + 4, f.rows());
      for (std::size_t c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (std::size_t t = lo; t < hi; ++t) acc += f.at(t, c);
        out.at(p, c) = acc / double(hi - lo);
      }
    }
    return out;
  };
  Tensor direct = infer(feats);

  PartitionConfig big;  // 100 posterior frames fit in one chunk
  Tensor pass = partition_infer(feats, infer, big);
  for (std::size_t i = 0; i < direct.size(); ++i)
    CHECK(pass.at(i) == direct.at(i));

  for (std::size_t max_frames : {30u, 40u, 64u}) {
    PartitionConfig cfg;
    cfg.max_frames = max_frames;
    cfg.overlap = 10;
    Tensor part = partition_infer(feats, infer, cfg);
    REQUIRE(part.rows() == direct.rows());
    for (std::size_t i = 0; i < direct.size(); ++i)
      CHECK_THAT(part.at(i), Catch::Matchers::WithinAbs(direct.at(i), 1e-12));
  }

  PartitionConfig bad;
  bad.max_frames = 20;
  bad.overlap = 10;
  CHECK_THROWS_AS(partition_infer(feats, infer, bad), ConfigError);
}

TEST_CASE("corpus alignment: ordering, boundaries, thresholds") {
  // Five utterances with silence gaps; emissions at known frames.
  std::vector<int> stream;
  std::vector<std::size_t> expect_first;
  for (int u = 0; u < 5; ++u) {
    stream.push_back(0);
    stream.push_back(0);
    expect_first.push_back(stream.size());
    stream.push_back(1);
    stream.push_back(2);
    stream.push_back(0);
  }
  Tensor lp = onehot_lp(stream, 3, std::log(0.97), std::log(0.015));
  auto infer = [&](const Tensor&) { return lp; };
  Tensor feats({stream.size() * 4, 1});
  std::vector<UtteranceText> texts;
  for (int u = 0; u < 5; ++u)
    texts.push_back({"utt" + std::to_string(u), {1, 2}});

  auto segs = align_corpus(feats, infer, texts);
  REQUIRE(segs.size() == 5);
  for (std::size_t u = 0; u < 5; ++u) {
    CHECK(segs[u].id == "utt" + std::to_string(u));
    // Segment covers its tokens' frames.
    CHECK(segs[u].start <= expect_first[u]);
    CHECK(segs[u].end > expect_first[u] + 1);
    if (u > 0) CHECK(segs[u].start == segs[u - 1].end);  // non-overlapping
    // Interior boundary = midpoint of the 3-frame blank run.
    if (u > 0) {
      std::size_t prev_last = expect_first[u - 1] + 1;
      CHECK(segs[u].start == (prev_last + 1 + expect_first[u] + 1) / 2);
    }
  }
  CHECK(segs.front().start == 0);
  CHECK(segs.back().end == stream.size());

  AlignConfig none;
  none.threshold = 1.1;
  CHECK(align_corpus(feats, infer, texts, none).empty());
  AlignConfig all;
  all.threshold = 0.0;
  CHECK(align_corpus(feats, infer, texts, all).size() == 5);

  CHECK_THROWS_AS(align_corpus(feats, infer, {}), ContractError);
  CHECK_THROWS_AS(align_corpus(feats, infer, {{"x", {}}}), ContractError);
}
