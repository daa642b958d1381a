#pragma once

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

#include "mtasr/common.hpp"

namespace mtasr::metrics {

struct MetricError : DataError {
  using DataError::DataError;
};

// Levenshtein edit distance with unit substitution/insertion/deletion costs.
template <typename T>
std::size_t edit_distance(const std::vector<T>& ref,
                          const std::vector<T>& hyp) {
  const std::size_t n = ref.size(), m = hyp.size();
  std::vector<std::size_t> prev(m + 1), cur(m + 1);
  for (std::size_t j = 0; j <= m; ++j) prev[j] = j;
  for (std::size_t i = 1; i <= n; ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= m; ++j) {
      std::size_t sub = prev[j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

// Single-utterance word error rate: edit distance over reference length.
template <typename T>
double wer(const std::vector<T>& ref, const std::vector<T>& hyp) {
  if (ref.empty()) throw MetricError("wer: empty reference");
  return static_cast<double>(edit_distance(ref, hyp)) /
         static_cast<double>(ref.size());
}

// Corpus WER pools edit distances and reference lengths before dividing.
template <typename T>
double corpus_wer(const std::vector<std::vector<T>>& refs,
                  const std::vector<std::vector<T>>& hyps) {
  if (refs.size() != hyps.size())
    throw MetricError("corpus_wer: " + std::to_string(refs.size()) +
                      " references vs " + std::to_string(hyps.size()) +
                      " hypotheses");
  if (refs.empty()) throw MetricError("corpus_wer: empty corpus");
  std::size_t dist = 0, len = 0;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    if (refs[i].empty())
      throw MetricError("corpus_wer: empty reference at index " +
                        std::to_string(i));
    dist += edit_distance(refs[i], hyps[i]);
    len += refs[i].size();
  }
  return static_cast<double>(dist) / static_cast<double>(len);
}

inline double did_accuracy(const std::vector<std::size_t>& labels,
                           const std::vector<std::size_t>& predictions) {
  if (labels.size() != predictions.size())
    throw MetricError("did_accuracy: " + std::to_string(labels.size()) +
                      " labels vs " + std::to_string(predictions.size()) +
                      " predictions");
  if (labels.empty()) throw MetricError("did_accuracy: empty inputs");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] == predictions[i]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

}  // namespace mtasr::metrics
