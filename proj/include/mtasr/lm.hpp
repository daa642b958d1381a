#pragma once

#include <algorithm>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mtasr/blocks.hpp"
#include "mtasr/model.hpp"

namespace mtasr::lm {

struct Sentence {
  std::vector<int> tokens;  // base-vocabulary ids
  std::optional<std::size_t> dialect;
};

using TextCorpus = std::vector<Sentence>;

// One sentence per line, whitespace-separated tokens; tagged lines carry a
// bracketed dialect tag as the first token. Unknown tokens are reported
// with their 1-based line number.
inline TextCorpus load_corpus(const std::string& path,
                              const model::Vocabulary& vocab) {
  std::ifstream is(path);
  if (!is) throw DataError("corpus: cannot read " + path);
  TextCorpus out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::istringstream ls(line);
    Sentence s;
    std::string tok;
    bool first = true;
    while (ls >> tok) {
      if (!vocab.contains(tok))
        throw DataError("corpus: unknown token '" + tok + "' at line " +
                        std::to_string(lineno));
      int id = vocab.id(tok);
      if (vocab.is_tag(id)) {
        if (!first)
          throw DataError("corpus: tag " + tok +
                          " in non-initial position at line " +
                          std::to_string(lineno));
        s.dialect = vocab.dialect_of_tag(id);
      } else {
        s.tokens.push_back(id);
      }
      first = false;
    }
    if (s.tokens.empty() && !s.dialect) continue;  // blank line
    out.push_back(std::move(s));
  }
  return out;
}

inline void save_corpus(const std::string& path, const TextCorpus& corpus,
                        const model::Vocabulary& vocab) {
  std::ofstream os(path);
  if (!os) throw DataError("corpus: cannot write " + path);
  for (const auto& s : corpus) {
    bool first = true;
    if (s.dialect) {
      os << vocab.token(vocab.tag_id(*s.dialect));
      first = false;
    }
    for (int t : s.tokens) {
      if (!first) os << ' ';
      os << vocab.token(t);
      first = false;
    }
    os << '\n';
  }
}

// Exact-sentence deduplication, keeping first occurrences in order.
inline TextCorpus dedup_corpus(const TextCorpus& corpus) {
  TextCorpus out;
  std::set<std::pair<std::optional<std::size_t>, std::vector<int>>> seen;
  for (const auto& s : corpus)
    if (seen.emplace(s.dialect, s.tokens).second) out.push_back(s);
  return out;
}

struct LmConfig {
  std::size_t num_blocks = 2;
  std::size_t model_dim = 64;
  std::size_t heads = 4;
  std::size_t ffn_units = 256;
  std::size_t context_len = 128;
};

// Causal LM over the extended vocabulary. Tag embeddings exist from stage 1
// (reserved slots) so fine-tuning is checkpoint-compatible.
struct Lm {
  model::Vocabulary vocab;
  LmConfig cfg;
  blocks::CausalTransformer net;

  Lm(model::Vocabulary v, LmConfig c, Rng& rng)
      : vocab(std::move(v)), cfg(c), net(net_config(cfg, vocab), rng) {
    if (!vocab.extended())
      throw ConfigError("lm: vocabulary must carry dialect tags");
  }

  static blocks::DecoderConfig net_config(const LmConfig& c,
                                          const model::Vocabulary& v) {
    blocks::DecoderConfig d;
    d.num_blocks = c.num_blocks;
    d.model_dim = c.model_dim;
    d.heads = c.heads;
    d.ffn_units = c.ffn_units;
    d.vocab_size = v.decoder_vocab();
    return d;
  }

  ParamMap params() const {
    ParamMap m;
    net.collect("lm", m);
    return m;
  }
  void save(const std::string& path) const { checkpoint::save(path, params()); }
  void load(const std::string& path) {
    ParamMap mine = params();
    checkpoint::restore(checkpoint::load(path), mine);
  }
};

// Each sentence is one independent training example bracketed by sos/eos,
// the tag (when present) immediately after sos.
inline std::vector<int> sentence_sequence(const model::Vocabulary& vocab,
                                          const Sentence& s) {
  std::vector<int> seq = {vocab.sos()};
  if (s.dialect) seq.push_back(vocab.tag_id(*s.dialect));
  for (int t : s.tokens) seq.push_back(t);
  seq.push_back(vocab.eos());
  return seq;
}

// Next-token log-probabilities over the full id space given a prefix.
inline Tensor lm_score_prefix(const Lm& lm, const std::vector<int>& prefix) {
  if (prefix.empty()) throw ContractError("lm_score_prefix: empty prefix");
  if (prefix.size() >= lm.cfg.context_len)
    throw DataError("lm_score_prefix: prefix length " +
                    std::to_string(prefix.size()) + " exceeds context " +
                    std::to_string(lm.cfg.context_len));
  NoGradGuard ng;
  Tensor lp = lm.net.forward(prefix);
  return ops::slice_rows(lp, lp.rows() - 1, lp.rows());
}

// Perplexity as exp of the mean per-token negative log-likelihood; every
// position after sos (including eos) counts as one token.
inline double perplexity(const Lm& lm, const TextCorpus& corpus) {
  if (corpus.empty()) throw DataError("perplexity: empty corpus");
  NoGradGuard ng;
  double nll = 0.0;
  std::size_t count = 0;
  for (const auto& s : corpus) {
    std::vector<int> seq = sentence_sequence(lm.vocab, s);
    Tensor lp = lm.net.forward(
        std::vector<int>(seq.begin(), seq.end() - 1));
    for (std::size_t k = 0; k + 1 < seq.size(); ++k) nll -= lp.at(k, seq[k + 1]);
    count += seq.size() - 1;
  }
  return std::exp(nll / static_cast<double>(count));
}

// Same quantity accumulated prefix-by-prefix through the scoring interface;
// must agree with `perplexity` to within numerical identity.
inline double perplexity_chain(const Lm& lm, const TextCorpus& corpus) {
  if (corpus.empty()) throw DataError("perplexity: empty corpus");
  double nll = 0.0;
  std::size_t count = 0;
  for (const auto& s : corpus) {
    std::vector<int> seq = sentence_sequence(lm.vocab, s);
    for (std::size_t k = 0; k + 1 < seq.size(); ++k) {
      std::vector<int> prefix(seq.begin(), seq.begin() + k + 1);
      nll -= lm_score_prefix(lm, prefix).at(0, seq[k + 1]);
    }
    count += seq.size() - 1;
  }
  return std::exp(nll / static_cast<double>(count));
}

struct LmTrainConfig {
  std::size_t steps = 200;
  std::size_t batch = 8;
  model::OptimConfig optim;
};

namespace detail {
inline void run_training(Lm& lm, const TextCorpus& corpus,
                         const LmTrainConfig& cfg) {
  model::Adam opt(cfg.optim, blocks::param_list(lm.params()));
  std::size_t cursor = 0;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    zero_grad(opt.params);
    Tensor loss_sum;
    double tokens = 0.0;
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      const Sentence& s = corpus[cursor];
      cursor = (cursor + 1) % corpus.size();
      std::vector<int> seq = sentence_sequence(lm.vocab, s);
      std::vector<int> in(seq.begin(), seq.end() - 1);
      std::vector<int> out(seq.begin() + 1, seq.end());
      Tensor nll = ops::nll_loss(lm.net.forward(in), out);
      loss_sum = loss_sum.defined() ? ops::add(loss_sum, nll) : nll;
      tokens += static_cast<double>(out.size());
    }
    Tensor loss = ops::scale(loss_sum, 1.0 / tokens);
    backward(loss);
    opt.step();
  }
}
}  // namespace detail

// Stage 1: plain-text pretraining. The corpus must be untagged.
inline void train_lm(Lm& lm, const TextCorpus& corpus,
                     const LmTrainConfig& cfg = {}) {
  if (corpus.empty()) throw DataError("train_lm: empty corpus");
  for (std::size_t i = 0; i < corpus.size(); ++i)
    if (corpus[i].dialect)
      throw DataError("train_lm: sentence " + std::to_string(i + 1) +
                      " carries a dialect tag; stage-1 corpora are untagged");
  detail::run_training(lm, corpus, cfg);
}

// Stage 2: fine-tuning on dialect-tagged text. Every sentence must be
// tagged; shapes and vocabulary are unchanged (checkpoint-compatible).
inline void finetune_lm(Lm& lm, const TextCorpus& corpus,
                        const LmTrainConfig& cfg = {}) {
  if (corpus.empty()) throw DataError("finetune_lm: empty corpus");
  for (std::size_t i = 0; i < corpus.size(); ++i)
    if (!corpus[i].dialect)
      throw DataError("finetune_lm: sentence " + std::to_string(i + 1) +
                      " has no dialect tag");
  detail::run_training(lm, corpus, cfg);
}

}  // namespace mtasr::lm
