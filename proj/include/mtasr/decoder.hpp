#pragma once

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include "mtasr/blocks.hpp"
#include "mtasr/ctc.hpp"
#include "mtasr/model.hpp"

namespace mtasr::decode {

struct BeamConfig {
  std::size_t beam = 10;
  double w_ctc = 0.3;
  double w_lm = 0.3;
  double length_bonus = 0.0;
  std::size_t max_len = 50;  // emitted tokens, excluding sos
  bool force_tag_first = false;

  void validate() const {
    if (beam < 1) throw ConfigError("beam search: beam must be >= 1");
    if (!std::isfinite(w_ctc) || !std::isfinite(w_lm) ||
        !std::isfinite(length_bonus))
      throw ConfigError("beam search: weights must be finite");
    if (max_len < 1) throw ConfigError("beam search: max_len must be >= 1");
  }
};

// One beam-search hypothesis. `tokens` starts at sos and, when finished,
// ends at eos; scores are unweighted per-scorer log-probabilities.
struct Hypothesis {
  std::vector<int> tokens;
  double att = 0.0;
  double ctc = 0.0;  // prefix score while open; full sequence score at eos
  double lm = 0.0;
  ctc::PrefixState ctc_state;
  bool finished = false;
  bool truncated = false;

  std::size_t emitted() const { return tokens.size() - 1; }
  double combined(const BeamConfig& cfg) const {
    return (1.0 - cfg.w_ctc) * att + cfg.w_ctc * ctc + cfg.w_lm * lm +
           cfg.length_bonus * static_cast<double>(emitted());
  }
};

namespace detail {
inline bool better(const Hypothesis& a, const Hypothesis& b,
                   const BeamConfig& cfg) {
  double sa = a.combined(cfg), sb = b.combined(cfg);
  if (sa != sb) return sa > sb;
  return a.tokens < b.tokens;  // deterministic tie-break by token ids
}
}  // namespace detail

// Label-synchronous beam search over the attention decoder, CTC prefix
// scores, and an optional fused LM. Returns up to `beam` finished
// hypotheses ranked by combined score; if nothing finishes within max_len,
// the best open hypothesis is returned with the truncation flag set.
inline std::vector<Hypothesis> joint_beam_search(
    const Tensor& h, const Tensor& ctc_logprobs,
    const blocks::TransformerDecoder& dec, const blocks::CausalTransformer* lm,
    const model::Vocabulary& vocab, const BeamConfig& cfg) {
  cfg.validate();
  if (lm && lm->cfg.vocab_size != vocab.decoder_vocab())
    throw DataError("shallow fusion: LM vocabulary size " +
                    std::to_string(lm->cfg.vocab_size) +
                    " != decoder vocabulary " +
                    std::to_string(vocab.decoder_vocab()));
  NoGradGuard ng;
  ctc::PrefixScorer scorer(ctc_logprobs);

  Hypothesis root;
  root.tokens = {vocab.sos()};
  root.ctc_state = scorer.initial();
  std::vector<Hypothesis> beam = {root};

  // Finished hypotheses keep their beam slots and compete on combined score
  // (so beam = 1 degenerates to greedy decoding); the search ends when the
  // whole beam is finished or the token budget runs out.
  const int n_tokens = static_cast<int>(vocab.size());
  for (std::size_t step = 0; step < cfg.max_len; ++step) {
    bool any_open = false;
    for (const auto& hyp : beam)
      if (!hyp.finished) any_open = true;
    if (!any_open) break;

    std::vector<Hypothesis> candidates;
    for (const Hypothesis& hyp : beam) {
      if (hyp.finished) {
        candidates.push_back(hyp);
        continue;
      }
      Tensor att_lp = dec.step(h, hyp.tokens);
      Tensor lm_lp;
      if (lm && cfg.w_lm != 0.0) lm_lp = lm->forward(hyp.tokens);

      auto lm_score = [&](int tok) {
        if (!lm || cfg.w_lm == 0.0) return 0.0;
        return lm_lp.at(lm_lp.rows() - 1, tok);
      };

      // eos: close the hypothesis, folding in the CTC completion score.
      {
        Hypothesis fin = hyp;
        fin.tokens.push_back(vocab.eos());
        fin.att += att_lp.at(0, vocab.eos());
        fin.ctc = scorer.complete(hyp.ctc_state);
        fin.lm += lm_score(vocab.eos());
        fin.finished = true;
        candidates.push_back(std::move(fin));
      }
      for (int tok = 0; tok < n_tokens; ++tok) {
        if (cfg.force_tag_first && step == 0 && !vocab.is_tag(tok)) continue;
        Hypothesis ext = hyp;
        ext.tokens.push_back(tok);
        ext.att += att_lp.at(0, tok);
        auto [state, inc] = scorer.extend(hyp.ctc_state, tok + 1);
        ext.ctc_state = state;
        ext.ctc += inc;
        ext.lm += lm_score(tok);
        candidates.push_back(std::move(ext));
      }
    }
    std::sort(candidates.begin(), candidates.end(),
              [&](const Hypothesis& a, const Hypothesis& b) {
                return detail::better(a, b, cfg);
              });
    if (candidates.size() > cfg.beam) candidates.resize(cfg.beam);
    beam = std::move(candidates);
  }

  std::vector<Hypothesis> finished;
  for (const auto& hyp : beam)
    if (hyp.finished) finished.push_back(hyp);
  if (finished.empty()) {
    Hypothesis best = beam.front();  // beam is sorted
    best.truncated = true;
    finished.push_back(std::move(best));
  }
  return finished;
}

// Splits a decoded token sequence into its dialect tag and tag-free text.
// Accepts sequences with or without sos/eos. A tag anywhere past the first
// position marks the hypothesis malformed; such tags are dropped from the
// text.
struct StripResult {
  std::optional<std::size_t> dialect;
  std::vector<int> text;
  bool malformed = false;
};

inline StripResult strip_tag(const std::vector<int>& tokens,
                             const model::Vocabulary& vocab) {
  StripResult out;
  bool first_content = true;
  for (int tok : tokens) {
    if (tok == vocab.sos() || tok == vocab.eos()) continue;
    if (vocab.is_tag(tok)) {
      if (first_content)
        out.dialect = vocab.dialect_of_tag(tok);
      else
        out.malformed = true;  // non-initial tag: note and drop
      first_content = false;
      continue;
    }
    out.text.push_back(tok);
    first_content = false;
  }
  return out;
}

}  // namespace mtasr::decode
