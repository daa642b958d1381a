#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mtasr/ctc.hpp"
#include "mtasr/tensor.hpp"

namespace mtasr::seg {

// Best-path trellis over (frames consumed) x (tokens consumed). Cell (t, j)
// holds the best log-score of consuming the first j tokens within the first
// t frames; transitions are stay (emit blank or repeat the current token)
// and advance (emit the next token).
struct Trellis {
  std::size_t frames = 0;  // N
  std::size_t tokens = 0;  // M
  std::vector<double> score;       // (N+1) x (M+1)
  std::vector<unsigned char> bp;   // 0 = stay, 1 = advance

  double& at(std::size_t t, std::size_t j) { return score[t * (tokens + 1) + j]; }
  double at(std::size_t t, std::size_t j) const {
    return score[t * (tokens + 1) + j];
  }
  unsigned char& bp_at(std::size_t t, std::size_t j) {
    return bp[t * (tokens + 1) + j];
  }
  unsigned char bp_at(std::size_t t, std::size_t j) const {
    return bp[t * (tokens + 1) + j];
  }
};

// `syms` are CTC symbols (blank excluded); O(N*M) forward pass.
inline Trellis build_trellis(const Tensor& logprobs,
                             const std::vector<int>& syms) {
  if (logprobs.rank() != 2)
    throw ShapeError("build_trellis: logprobs must be [frames, symbols]");
  const std::size_t n = logprobs.rows(), m = syms.size();
  for (int s : syms)
    if (s <= 0 || static_cast<std::size_t>(s) >= logprobs.cols())
      throw DataError("build_trellis: symbol " + std::to_string(s) +
                      " out of range");
  if (m > n)
    throw InfeasibleTargetError("build_trellis: " + std::to_string(m) +
                                " tokens cannot fit in " + std::to_string(n) +
                                " frames");
  Trellis tr;
  tr.frames = n;
  tr.tokens = m;
  tr.score.assign((n + 1) * (m + 1), kLogZero);
  tr.bp.assign((n + 1) * (m + 1), 0);
  tr.at(0, 0) = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t j = 0; j <= m; ++j) {
      double base = tr.at(t, j);
      if (base <= kLogZero / 2) continue;
      // Stay: blank, or a repeat of the most recent token.
      double stay = logprobs.at(t, 0);
      if (j > 0) stay = std::max(stay, logprobs.at(t, syms[j - 1]));
      if (base + stay > tr.at(t + 1, j)) {
        tr.at(t + 1, j) = base + stay;
        tr.bp_at(t + 1, j) = 0;
      }
      // Advance: emit token j+1 at frame t.
      if (j < m) {
        double adv = base + logprobs.at(t, syms[j]);
        if (adv > tr.at(t + 1, j + 1)) {
          tr.at(t + 1, j + 1) = adv;
          tr.bp_at(t + 1, j + 1) = 1;
        }
      }
    }
  }
  return tr;
}

// Frame (0-based) at which each token was emitted on the most probable
// path, backtracking from the most probable timing of the last token
// (earliest frame on ties).
inline std::vector<std::size_t> backtrack(const Trellis& tr) {
  if (tr.tokens == 0) return {};
  const std::size_t m = tr.tokens;
  std::size_t t_star = 0;
  double best = kLogZero;
  for (std::size_t t = 1; t <= tr.frames; ++t) {
    if (tr.bp_at(t, m) != 1) continue;
    if (tr.at(t, m) > best) {  // strict: earliest frame wins ties
      best = tr.at(t, m);
      t_star = t;
    }
  }
  if (t_star == 0)
    throw InfeasibleTargetError("backtrack: no feasible alignment");
  std::vector<std::size_t> frames(m, 0);
  std::size_t t = t_star, j = m;
  while (j > 0) {
    if (tr.bp_at(t, j) == 1) {
      frames[j - 1] = t - 1;
      --j;
    }
    --t;
  }
  return frames;
}

// Minimum over W-token sliding windows of the mean per-token emission
// log-probability at the assigned frames, mapped through exp into [0, 1].
inline double confidence(const Tensor& logprobs, const std::vector<int>& syms,
                         const std::vector<std::size_t>& frames,
                         std::size_t window = 3) {
  if (syms.size() != frames.size())
    throw ContractError("confidence: token/frame count mismatch");
  if (syms.empty()) return 0.0;
  if (window < 1) throw ConfigError("confidence: window must be >= 1");
  const std::size_t m = syms.size();
  const std::size_t w = std::min(window, m);
  double worst = 0.0;
  bool first = true;
  for (std::size_t start = 0; start + w <= m; ++start) {
    double mean = 0.0;
    for (std::size_t k = 0; k < w; ++k)
      mean += logprobs.at(frames[start + k], syms[start + k]);
    mean /= static_cast<double>(w);
    if (first || mean < worst) worst = mean;
    first = false;
  }
  return std::exp(worst);
}

// Maps a feature stream to CTC log-posteriors; chunk lengths are given in
// posterior frames (the encoder subsamples 4x, so posterior frame p covers
// feature frames [4p, 4p+4)).
using InferFn = std::function<Tensor(const Tensor& features)>;

struct PartitionConfig {
  std::size_t max_frames = 6000;  // posterior frames per chunk
  std::size_t overlap = 10;       // posterior frames shared between chunks

  void validate() const {
    if (overlap >= max_frames / 2)
      throw ConfigError("partition: overlap must be < max_frames / 2");
  }
};

inline std::size_t posterior_length(std::size_t feature_frames) {
  return (feature_frames + 3) / 4;  // two stride-2 convolutions
}

// Runs inference on overlapping chunks and concatenates the posteriors,
// discarding half the overlap on each side of interior joins. Streams not
// longer than max_frames pass through untouched.
inline Tensor partition_infer(const Tensor& features, const InferFn& infer,
                              const PartitionConfig& cfg = {}) {
  cfg.validate();
  if (features.rank() != 2)
    throw ShapeError("partition_infer: features must be [frames, dim]");
  const std::size_t total = posterior_length(features.rows());
  if (total <= cfg.max_frames) return infer(features);

  NoGradGuard ng;
  const std::size_t lo_cut = cfg.overlap / 2;
  const std::size_t hi_cut = cfg.overlap - lo_cut;
  const std::size_t step = cfg.max_frames - cfg.overlap;
  Tensor out;
  std::size_t written = 0;
  for (std::size_t s = 0;; s += step) {
    std::size_t e = std::min(s + cfg.max_frames, total);
    std::size_t f_lo = 4 * s;
    std::size_t f_hi = std::min(4 * e, features.rows());
    Tensor chunk_lp = infer(ops::slice_rows(features, f_lo, f_hi));
    if (chunk_lp.rows() != e - s)
      throw ContractError("partition_infer: chunk posterior length mismatch");
    std::size_t keep_lo = (s == 0) ? 0 : lo_cut;
    std::size_t keep_hi = (e == total) ? (e - s) : (e - s) - hi_cut;
    Tensor kept = ops::slice_rows(chunk_lp, keep_lo, keep_hi);
    out = out.defined() ? ops::concat_rows({out, kept}) : kept;
    written += keep_hi - keep_lo;
    if (e == total) break;
  }
  if (written != total)
    throw ContractError("partition_infer: concatenated length " +
                        std::to_string(written) + " != " +
                        std::to_string(total));
  return out;
}

struct SegmentResult {
  std::string id;
  std::size_t start = 0;  // posterior frames, half-open [start, end)
  std::size_t end = 0;
  double confidence = 0.0;
  std::vector<int> syms;
};

struct AlignConfig {
  PartitionConfig partition;
  double threshold = 0.0;  // keep segments with confidence >= threshold
  std::size_t window = 3;
};

struct UtteranceText {
  std::string id;
  std::vector<int> syms;  // CTC symbols
};

// Aligns a concatenated stream against known utterance texts: partitioned
// inference, one trellis over the full stream, backtrack, per-utterance
// boundaries at the midpoint of the separating blank run, confidence
// filtering.
inline std::vector<SegmentResult> align_corpus(
    const Tensor& features, const InferFn& infer,
    const std::vector<UtteranceText>& texts, const AlignConfig& cfg = {}) {
  if (texts.empty()) throw ContractError("align_corpus: no texts");
  for (const auto& t : texts)
    if (t.syms.empty())
      throw ContractError("align_corpus: empty text for utterance " + t.id);
  Tensor lp = partition_infer(features, infer, cfg.partition);

  std::vector<int> all;
  for (const auto& t : texts)
    all.insert(all.end(), t.syms.begin(), t.syms.end());
  Trellis tr = build_trellis(lp, all);
  std::vector<std::size_t> frames = backtrack(tr);

  std::vector<SegmentResult> out;
  std::size_t offset = 0;
  std::size_t prev_last = 0;
  for (std::size_t u = 0; u < texts.size(); ++u) {
    const std::size_t m = texts[u].syms.size();
    SegmentResult seg;
    seg.id = texts[u].id;
    seg.syms = texts[u].syms;
    std::size_t first = frames[offset];
    std::size_t last = frames[offset + m - 1];
    seg.start = (u == 0) ? 0 : (prev_last + 1 + first + 1) / 2;
    seg.end = lp.rows();  // fixed up by the next utterance's start
    if (!out.empty()) out.back().end = seg.start;
    std::vector<int> syms(texts[u].syms);
    std::vector<std::size_t> fr(frames.begin() + offset,
                                frames.begin() + offset + m);
    seg.confidence = confidence(lp, syms, fr, cfg.window);
    out.push_back(std::move(seg));
    prev_last = last;
    offset += m;
  }
  std::vector<SegmentResult> kept;
  for (auto& seg : out)
    if (seg.confidence >= cfg.threshold) kept.push_back(std::move(seg));
  return kept;
}

}  // namespace mtasr::seg
