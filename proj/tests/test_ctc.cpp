#include <catch2/catch_amalgamated.hpp>

#include "mtasr/ctc.hpp"
#include "mtasr/gradcheck.hpp"

using namespace mtasr;
namespace O = mtasr::ops;

namespace {
Tensor random_logprobs(std::size_t n, std::size_t c, Rng& rng) {
  Tensor logits = Tensor::randn({n, c}, rng, 1.5);
  NoGradGuard ng;
  return O::log_softmax_rows(logits);
}
}  // namespace

TEST_CASE("uniform 2-frame example matches hand enumeration") {
  // uniform over {blank, a, b}: paths collapsing to "a" are aa, a-, -a.
  double u = -std::log(3.0);
  Tensor lp = Tensor::from({2, 3}, {u, u, u, u, u, u});
  Tensor l = ctc::loss(lp, {1});
  CHECK_THAT(l.item(), Catch::Matchers::WithinAbs(std::log(3.0), 1e-12));
  CHECK_THAT(ctc::loss_bruteforce(lp, {1}),
             Catch::Matchers::WithinAbs(std::log(3.0), 1e-12));
}

TEST_CASE("infeasible targets raise") {
  double u = -std::log(3.0);
  Tensor one = Tensor::from({1, 3}, {u, u, u});
  CHECK_THROWS_AS(ctc::loss(one, {1, 2}), InfeasibleTargetError);
  Tensor two = Tensor::from({2, 3}, {u, u, u, u, u, u});
  // "aa" needs a separating blank: minimum 3 frames.
  CHECK_THROWS_AS(ctc::loss(two, {1, 1}), InfeasibleTargetError);
}

TEST_CASE("single frame single token") {
  Tensor lp = Tensor::from({1, 3}, {std::log(0.2), std::log(0.5),
                                    std::log(0.3)});
  CHECK_THAT(ctc::loss(lp, {2}).item(),
             Catch::Matchers::WithinAbs(-std::log(0.3), 1e-12));
  CHECK_THAT(ctc::loss_bruteforce(lp, {2}),
             Catch::Matchers::WithinAbs(-std::log(0.3), 1e-12));
}

TEST_CASE("oracle equivalence over random instances") {
  Rng rng(123);
  int done = 0;
  for (int seed = 0; seed < 200; ++seed) {
    std::size_t n = 2 + seed % 5;        // 2..6 frames
    std::size_t v = 1 + seed % 3;        // labels 1..3
    Tensor lp = random_logprobs(n, v + 1, rng);
    std::uniform_int_distribution<int> len(0, static_cast<int>(n));
    std::uniform_int_distribution<int> tok(1, static_cast<int>(v));
    std::vector<int> target;
    int L = len(rng);
    for (int i = 0; i < L; ++i) target.push_back(tok(rng));
    if (target.empty() || ctc::min_frames(target) > n) continue;
    double dp = ctc::loss(lp, target).item();
    double bf = ctc::loss_bruteforce(lp, target);
    CHECK_THAT(dp, Catch::Matchers::WithinAbs(bf, 1e-6));
    ++done;
  }
  CHECK(done > 100);
}

TEST_CASE("brute force rejects oversized instances") {
  Tensor lp = Tensor::full({9, 3}, -1.0);
  CHECK_THROWS_AS(ctc::loss_bruteforce(lp, {1}), ContractError);
}

TEST_CASE("ctc gradient vs finite differences") {
  Rng rng(7);
  Tensor logits = Tensor::randn({4, 3}, rng, 1.0, true);
  std::vector<int> target = {1, 2};
  auto f = [&] { return ctc::loss(O::log_softmax_rows(logits), target); };
  CHECK(grad_check(f, {logits}) < 1e-4);
}

TEST_CASE("total probability over feasible targets bounded by one") {
  Rng rng(31);
  for (int rep = 0; rep < 5; ++rep) {
    std::size_t n = 2 + rep % 3;  // up to 4 frames
    Tensor lp = random_logprobs(n, 3, rng);  // labels {1,2}
    double total = 0.0;
    // enumerate all target sequences over {1,2} up to length n
    std::vector<std::vector<int>> targets = {{}};
    for (std::size_t l = 1; l <= n; ++l) {
      std::vector<int> t(l, 1);
      while (true) {
        targets.push_back(t);
        std::size_t i = 0;
        while (i < l && t[i] == 2) t[i++] = 1;
        if (i == l) break;
        ++t[i];
      }
    }
    for (const auto& t : targets) {
      if (t.empty()) {
        double lpz = 0.0;
        for (std::size_t fr = 0; fr < n; ++fr) lpz += lp.at(fr, 0);
        total += std::exp(lpz);
        continue;
      }
      if (ctc::min_frames(t) > n) continue;
      total += std::exp(-ctc::loss(lp, t).item());
    }
    CHECK(total <= 1.0 + 1e-9);
    CHECK(total >= 1.0 - 1e-9);  // all sequences enumerated
  }
}

TEST_CASE("greedy decode collapse rules") {
  auto onehot = [](const std::vector<int>& frames, std::size_t c) {
    Tensor lp = Tensor::full({frames.size(), c}, -10.0);
    for (std::size_t t = 0; t < frames.size(); ++t) lp.at(t, frames[t]) = -0.1;
    return lp;
  };
  CHECK(ctc::greedy_decode(onehot({1, 1, 0, 2}, 3)) ==
        std::vector<int>{1, 2});
  CHECK(ctc::greedy_decode(onehot({0, 0, 0}, 3)).empty());
  CHECK(ctc::greedy_decode(onehot({1, 0, 1}, 3)) == std::vector<int>{1, 1});
}

TEST_CASE("greedy decode tie-breaks to lowest id") {
  Tensor lp = Tensor::full({1, 3}, -1.0);
  CHECK(ctc::greedy_decode(lp) == std::vector<int>{});  // blank wins ties
  Tensor lp2 = Tensor::from({1, 3}, {-2.0, -1.0, -1.0});
  CHECK(ctc::greedy_decode(lp2) == std::vector<int>{1});
}

TEST_CASE("greedy decode of one-hot posteriors returns exact collapse") {
  Rng rng(17);
  for (int rep = 0; rep < 20; ++rep) {
    std::size_t n = 3 + rep % 5;
    std::vector<int> frames;
    std::uniform_int_distribution<int> tok(0, 3);
    for (std::size_t t = 0; t < n; ++t) frames.push_back(tok(rng));
    Tensor lp = Tensor::full({n, 4}, -20.0);
    for (std::size_t t = 0; t < n; ++t) lp.at(t, frames[t]) = 0.0;
    std::vector<int> collapse;
    int prev = -1;
    for (int c : frames) {
      if (c != prev && c != 0) collapse.push_back(c);
      prev = c;
    }
    CHECK(ctc::greedy_decode(lp) == collapse);
  }
}

TEST_CASE("prefix score increments sum to the sequence likelihood") {
  Rng rng(55);
  for (int rep = 0; rep < 30; ++rep) {
    std::size_t n = 3 + rep % 4;
    Tensor lp = random_logprobs(n, 4, rng);
    std::vector<int> seq;
    std::uniform_int_distribution<int> tok(1, 3);
    std::uniform_int_distribution<int> len(1, 2);
    int L = len(rng);
    for (int i = 0; i < L; ++i) seq.push_back(tok(rng));
    if (ctc::min_frames(seq) > n) continue;
    ctc::PrefixScorer scorer(lp);
    ctc::PrefixState st = scorer.initial();
    double acc = 0.0;
    for (int c : seq) {
      auto [ns, inc] = scorer.extend(st, c);
      acc += inc;
      st = ns;
    }
    acc += scorer.finish(st);
    double expect = -ctc::loss(lp, seq).item();
    CHECK_THAT(acc, Catch::Matchers::WithinAbs(expect, 1e-6));
  }
}

TEST_CASE("prefix probability is monotone non-increasing") {
  Rng rng(77);
  Tensor lp = random_logprobs(6, 4, rng);
  ctc::PrefixScorer scorer(lp);
  ctc::PrefixState st = scorer.initial();
  double prev = st.score;
  for (int c : {1, 2, 2, 3}) {
    auto [ns, inc] = scorer.extend(st, c);
    CHECK(ns.score <= prev + 1e-12);
    prev = ns.score;
    st = ns;
  }
}

TEST_CASE("empty prefix completion equals all-blank probability") {
  Rng rng(99);
  Tensor lp = random_logprobs(4, 3, rng);
  ctc::PrefixScorer scorer(lp);
  double allblank = 0.0;
  for (std::size_t t = 0; t < 4; ++t) allblank += lp.at(t, 0);
  CHECK_THAT(scorer.complete(scorer.initial()),
             Catch::Matchers::WithinAbs(allblank, 1e-9));
}

TEST_CASE("blank proposed as label is a contract error") {
  Rng rng(1);
  Tensor lp = random_logprobs(3, 3, rng);
  ctc::PrefixScorer scorer(lp);
  CHECK_THROWS_AS(scorer.extend(scorer.initial(), 0), ContractError);
}
