#pragma once

#include "mtasr/ops.hpp"

namespace mtasr {
namespace ctc {

// Token ids in CTC symbol space: 0 is blank, labels are >= 1.
inline constexpr int kBlank = 0;

// Minimum frames needed: one per label plus one per adjacent repeat.
inline std::size_t min_frames(const std::vector<int>& target) {
  std::size_t need = target.size();
  for (std::size_t i = 1; i < target.size(); ++i)
    if (target[i] == target[i - 1]) ++need;
  return need;
}

inline void check_target(const Tensor& logprobs,
                         const std::vector<int>& target) {
  const std::size_t N = logprobs.rows(), C = logprobs.cols();
  for (int t : target)
    if (t <= 0 || static_cast<std::size_t>(t) >= C)
      throw DataError("ctc: label id " + std::to_string(t) +
                      " outside 1.." + std::to_string(C - 1));
  if (min_frames(target) > N)
    throw InfeasibleTargetError(
        "ctc: target of length " + std::to_string(target.size()) +
        " (needs " + std::to_string(min_frames(target)) +
        " frames) infeasible in " + std::to_string(N) + " frames");
}

// CTC negative log-likelihood via the forward-backward recursion over the
// blank-interleaved expanded target. Gradient with respect to the log
// probabilities is computed from the occupancy sums.
inline Tensor loss(const Tensor& logprobs, const std::vector<int>& target) {
  if (logprobs.rank() != 2) throw ShapeError("ctc_loss: rank-2 required");
  check_target(logprobs, target);
  const std::size_t N = logprobs.rows(), C = logprobs.cols();
  const std::size_t U = target.size();
  const std::size_t S = 2 * U + 1;  // expanded: blank t1 blank t2 ... blank
  auto lab = [&](std::size_t s) -> int {
    return (s % 2 == 0) ? kBlank : target[s / 2];
  };
  auto y = [&](std::size_t t, int c) { return logprobs.at(t, c); };

  // alpha[t][s]: log-prob of consuming frames 0..t ending in state s
  // (emission at t included).
  std::vector<double> alpha(N * S, kLogZero), beta(N * S, kLogZero);
  alpha[0] = y(0, lab(0));
  if (S > 1) alpha[1] = y(0, lab(1));
  for (std::size_t t = 1; t < N; ++t) {
    for (std::size_t s = 0; s < S; ++s) {
      double acc = alpha[(t - 1) * S + s];
      if (s >= 1) acc = log_add(acc, alpha[(t - 1) * S + s - 1]);
      if (s >= 2 && lab(s) != kBlank && lab(s) != lab(s - 2))
        acc = log_add(acc, alpha[(t - 1) * S + s - 2]);
      alpha[t * S + s] = acc <= kLogZero ? kLogZero : acc + y(t, lab(s));
    }
  }
  double logp = log_add(alpha[(N - 1) * S + S - 1],
                        S > 1 ? alpha[(N - 1) * S + S - 2] : kLogZero);
  if (logp <= kLogZero / 2)
    throw InfeasibleTargetError("ctc: no feasible alignment path");

  // beta[t][s]: log-prob of the suffix from frame t+1 onward, given state s
  // at frame t (emission at t excluded).
  beta[(N - 1) * S + S - 1] = 0.0;
  if (S > 1) beta[(N - 1) * S + S - 2] = 0.0;
  for (std::size_t t = N - 1; t-- > 0;) {
    for (std::size_t s = 0; s < S; ++s) {
      double acc = kLogZero;
      double b0 = beta[(t + 1) * S + s];
      if (b0 > kLogZero) acc = log_add(acc, b0 + y(t + 1, lab(s)));
      if (s + 1 < S) {
        double b1 = beta[(t + 1) * S + s + 1];
        if (b1 > kLogZero) acc = log_add(acc, b1 + y(t + 1, lab(s + 1)));
      }
      if (s + 2 < S && lab(s + 2) != kBlank && lab(s + 2) != lab(s)) {
        double b2 = beta[(t + 1) * S + s + 2];
        if (b2 > kLogZero) acc = log_add(acc, b2 + y(t + 1, lab(s + 2)));
      }
      beta[t * S + s] = acc;
    }
  }

  Tensor out = Tensor::scalar(-logp);
  record(out, {logprobs},
         [logprobs, alpha, beta, logp, target, N, S, C](TensorNode& self) {
           auto labf = [&](std::size_t s) -> int {
             return (s % 2 == 0) ? kBlank : target[s / 2];
           };
           auto& g = logprobs.grad();
           double gs = self.grad[0];
           for (std::size_t t = 0; t < N; ++t) {
             std::vector<double> occ(C, kLogZero);
             for (std::size_t s = 0; s < S; ++s) {
               double a = alpha[t * S + s], b = beta[t * S + s];
               if (a <= kLogZero || b <= kLogZero) continue;
               int c = labf(s);
               occ[c] = log_add(occ[c], a + b);
             }
             // dL/dy[t][c] = -exp(occ[t][c] - logp); L = -logp.
             for (std::size_t c = 0; c < C; ++c)
               if (occ[c] > kLogZero)
                 g[t * C + c] -= gs * std::exp(occ[c] - logp);
           }
         });
  return out;
}

// Exhaustive-path oracle for small instances: enumerate all C^N alignment
// paths and sum the probabilities of those that collapse to the target.
inline double loss_bruteforce(const Tensor& logprobs,
                              const std::vector<int>& target) {
  const std::size_t N = logprobs.rows(), C = logprobs.cols();
  if (N > 8 || C > 5)
    throw ContractError("ctc_loss_bruteforce: instance too large (N <= 8, "
                        "C <= 5 required)");
  std::vector<int> path(N, 0);
  double total = kLogZero;
  while (true) {
    // collapse: drop repeats, then blanks
    std::vector<int> collapsed;
    int prev = -1;
    for (int c : path) {
      if (c != prev && c != kBlank) collapsed.push_back(c);
      prev = c;
    }
    if (collapsed == target) {
      double lp = 0.0;
      for (std::size_t t = 0; t < N; ++t) lp += logprobs.at(t, path[t]);
      total = log_add(total, lp);
    }
    std::size_t i = 0;
    while (i < N && path[i] == static_cast<int>(C) - 1) path[i++] = 0;
    if (i == N) break;
    ++path[i];
  }
  if (total <= kLogZero)
    throw InfeasibleTargetError("ctc_loss_bruteforce: no matching paths");
  return -total;
}

// Per-frame argmax, collapse repeats, drop blanks. Ties break toward the
// lowest token id.
inline std::vector<int> greedy_decode(const Tensor& logprobs) {
  const std::size_t N = logprobs.rows(), C = logprobs.cols();
  std::vector<int> out;
  int prev = -1;
  for (std::size_t t = 0; t < N; ++t) {
    int best = 0;
    for (std::size_t c = 1; c < C; ++c)
      if (logprobs.at(t, c) > logprobs.at(t, best)) best = static_cast<int>(c);
    if (best != prev && best != kBlank) out.push_back(best);
    prev = best;
  }
  return out;
}

// Incremental prefix scoring for label-synchronous beam search.
// r_blank[t] / r_nonblank[t] hold log-probs of alignments of the current
// prefix over frames 0..t ending in blank / in the prefix's last label.
struct PrefixState {
  std::vector<double> r_blank;
  std::vector<double> r_nonblank;
  int last = -1;           // last label of the prefix, -1 for empty
  double score = 0.0;      // log prefix probability psi
};

class PrefixScorer {
 public:
  explicit PrefixScorer(Tensor logprobs) : lp_(std::move(logprobs)) {
    if (lp_.rank() != 2) throw ShapeError("PrefixScorer: rank-2 required");
  }

  std::size_t frames() const { return lp_.rows(); }

  PrefixState initial() const {
    const std::size_t N = frames();
    PrefixState st;
    st.r_blank.resize(N);
    st.r_nonblank.assign(N, kLogZero);
    double acc = 0.0;
    for (std::size_t t = 0; t < N; ++t) {
      acc += lp_.at(t, kBlank);
      st.r_blank[t] = acc;
    }
    st.last = -1;
    st.score = 0.0;  // every label sequence has the empty prefix
    return st;
  }

  // Extends the prefix with label c (> 0). Returns the new state and the
  // incremental log-score psi(g+c) - psi(g).
  std::pair<PrefixState, double> extend(const PrefixState& st, int c) const {
    if (c == kBlank)
      throw ContractError("PrefixScorer: blank is not a label");
    const std::size_t N = frames(), C = lp_.cols();
    if (c < 0 || static_cast<std::size_t>(c) >= C)
      throw DataError("PrefixScorer: label id out of range");
    if (st.r_blank.size() != N)
      throw ContractError("PrefixScorer: state frame count mismatch");
    PrefixState ns;
    ns.r_blank.assign(N, kLogZero);
    ns.r_nonblank.assign(N, kLogZero);
    ns.last = c;
    // phi[t]: paths of prefix g over frames 0..t that a fresh c can follow.
    auto phi = [&](std::size_t t) {
      double p = st.r_blank[t];
      if (c != st.last) p = log_add(p, st.r_nonblank[t]);
      return p;
    };
    double psi = kLogZero;
    for (std::size_t t = 0; t < N; ++t) {
      // A fresh c at frame t follows an alignment of g over frames < t;
      // at t=0 only the empty prefix can precede it.
      double start = (t == 0) ? (st.last == -1 ? 0.0 : kLogZero) : phi(t - 1);
      double emit = lp_.at(t, c);
      if (start > kLogZero) psi = log_add(psi, start + emit);
      double stay = (t == 0) ? kLogZero : ns.r_nonblank[t - 1];
      double nb = log_add(stay, start);
      ns.r_nonblank[t] = nb > kLogZero ? nb + emit : kLogZero;
      double from = (t == 0) ? kLogZero
                             : log_add(ns.r_blank[t - 1], ns.r_nonblank[t - 1]);
      ns.r_blank[t] = from > kLogZero ? from + lp_.at(t, kBlank) : kLogZero;
    }
    ns.score = psi;
    return {ns, psi - st.score};
  }

  // Log-probability of exactly the prefix (sequence complete).
  double complete(const PrefixState& st) const {
    const std::size_t N = frames();
    return log_add(st.r_blank[N - 1], st.r_nonblank[N - 1]);
  }

  // Incremental score contributed by ending the sequence here.
  double finish(const PrefixState& st) const {
    return complete(st) - st.score;
  }

 private:
  Tensor lp_;
};

}  // namespace ctc
}  // namespace mtasr
