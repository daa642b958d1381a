#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mtasr/blocks.hpp"
#include "mtasr/checkpoint.hpp"
#include "mtasr/ctc.hpp"
#include "mtasr/interctc.hpp"

namespace mtasr::model {

inline const std::vector<std::string> kDefaultTags = {"[UL]", "[CO]", "[MU]"};

// Ordered token inventory. Ids: base tokens 0..n_base-1, dialect tags next,
// then start/end-of-sequence. The CTC symbol space puts blank at 0 and maps
// token id v to symbol v+1; sos/eos exist only on the decoder/LM side.
struct Vocabulary {
  std::vector<std::string> items;  // base tokens, then bracketed tags
  std::size_t n_base = 0;

  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> base_tokens)
      : items(std::move(base_tokens)), n_base(items.size()) {
    index_.clear();
    for (std::size_t i = 0; i < items.size(); ++i) {
      if (items[i].empty()) throw DataError("vocabulary: empty token");
      if (!index_.emplace(items[i], static_cast<int>(i)).second)
        throw DataError("vocabulary: duplicate token " + items[i]);
    }
  }

  std::size_t size() const { return items.size(); }  // |V'| once extended
  std::size_t num_tags() const { return items.size() - n_base; }
  bool extended() const { return num_tags() > 0; }

  void extend(const std::vector<std::string>& tags = kDefaultTags) {
    if (extended()) throw DataError("vocabulary: already extended with tags");
    for (const auto& t : tags) {
      if (t.size() < 3 || t.front() != '[' || t.back() != ']')
        throw DataError("vocabulary: tag must be bracketed: " + t);
      if (index_.count(t))
        throw DataError("vocabulary: duplicate tag " + t);
      index_.emplace(t, static_cast<int>(items.size()));
      items.push_back(t);
    }
  }

  int id(const std::string& token) const {
    auto it = index_.find(token);
    if (it == index_.end())
      throw DataError("vocabulary: unknown token " + token);
    return it->second;
  }
  bool contains(const std::string& token) const { return index_.count(token); }
  const std::string& token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= items.size())
      throw DataError("vocabulary: id out of range " + std::to_string(id));
    return items[id];
  }

  int sos() const { return static_cast<int>(items.size()); }
  int eos() const { return static_cast<int>(items.size()) + 1; }
  std::size_t decoder_vocab() const { return items.size() + 2; }
  std::size_t ctc_vocab() const { return items.size() + 1; }  // + blank

  bool is_tag(int id) const {
    return id >= 0 && static_cast<std::size_t>(id) >= n_base &&
           static_cast<std::size_t>(id) < items.size();
  }
  int tag_id(std::size_t dialect) const {
    if (dialect >= num_tags())
      throw DataError("vocabulary: dialect index out of range " +
                      std::to_string(dialect));
    return static_cast<int>(n_base + dialect);
  }
  std::size_t dialect_of_tag(int id) const {
    if (!is_tag(id)) throw DataError("vocabulary: id is not a tag");
    return static_cast<std::size_t>(id) - n_base;
  }

  // One token per line; tags are recognizable by their brackets and must
  // trail the base tokens.
  void save(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw DataError("vocabulary: cannot write " + path);
    for (const auto& t : items) os << t << "\n";
  }
  static Vocabulary load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("vocabulary: cannot read " + path);
    std::vector<std::string> base, tags;
    std::string line;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      bool bracketed = line.size() >= 3 && line.front() == '[' &&
                       line.back() == ']';
      if (bracketed) {
        tags.push_back(line);
      } else {
        if (!tags.empty())
          throw DataError("vocabulary: base token after tags in " + path);
        base.push_back(line);
      }
    }
    Vocabulary v(std::move(base));
    if (!tags.empty()) v.extend(tags);
    return v;
  }

 private:
  std::unordered_map<std::string, int> index_;
};

// Training targets for one utterance across the three output heads. Decoder
// targets live in decoder id space (with sos/eos); CTC targets live in the
// CTC symbol space (token id + 1, blank at 0).
struct UtteranceTargets {
  std::vector<int> decoder;    // [sos, tag, tokens..., eos]
  std::vector<int> final_ctc;  // [tag, tokens...] shifted into CTC space
  std::vector<int> asr_inter;  // same as final_ctc
  std::vector<int> did_inter;  // [tag] in CTC space
};

inline UtteranceTargets build_targets(const Vocabulary& vocab,
                                      const std::vector<int>& text,
                                      std::size_t dialect) {
  if (!vocab.extended())
    throw DataError("build_targets: vocabulary has no dialect tags");
  int tag = vocab.tag_id(dialect);
  for (int t : text)
    if (t < 0 || static_cast<std::size_t>(t) >= vocab.n_base)
      throw DataError("build_targets: token id " + std::to_string(t) +
                      " outside the base vocabulary");
  UtteranceTargets out;
  out.decoder.push_back(vocab.sos());
  out.decoder.push_back(tag);
  out.final_ctc.push_back(tag + 1);
  for (int t : text) {
    out.decoder.push_back(t);
    out.final_ctc.push_back(t + 1);
  }
  out.decoder.push_back(vocab.eos());
  out.asr_inter = out.final_ctc;
  out.did_inter = {tag + 1};
  return out;
}

struct Utterance {
  std::string id;
  Tensor features;  // T x F
  std::vector<int> text;  // base-vocabulary token ids
  std::size_t dialect = 0;
};

using TrainBatch = std::vector<Utterance>;

struct ModelConfig {
  std::size_t feat_dim = 16;
  blocks::EncoderConfig encoder;
  std::size_t decoder_blocks = 2;
  std::size_t decoder_ffn = 256;
  interctc::TapAssignment taps;
  double alpha = 0.5;            // intermediate-loss weight
  double lambda = 0.3;           // ctc/attention interpolation
  double label_smoothing = 0.1;  // decoder cross-entropy

  void validate() const {
    encoder.validate();
    taps.validate(encoder.num_blocks);
    if (alpha < 0.0 || alpha > 1.0 || lambda < 0.0 || lambda > 1.0)
      throw ConfigError("model: loss weights must lie in [0, 1]");
    if (label_smoothing < 0.0 || label_smoothing >= 1.0)
      throw ConfigError("model: label smoothing must lie in [0, 1)");
  }
};

struct TrainResult {
  Tensor total;  // differentiable scalar
  interctc::InterLossReport report;
};

enum class DidSource { kTapClean, kTapMassFallback };

struct DidPrediction {
  std::size_t dialect = 0;
  DidSource source = DidSource::kTapClean;
  std::string diagnostic;
};

// Full transducer: subsampling front-end, tapped encoder, final CTC head,
// attention decoder.
struct Model {
  Vocabulary vocab;
  ModelConfig cfg;
  blocks::Frontend frontend;
  blocks::Encoder encoder;
  interctc::InterCtc inter;
  blocks::Linear ctc_head;
  blocks::TransformerDecoder decoder;

  Model(Vocabulary v, ModelConfig c, Rng& rng)
      : vocab(std::move(v)),
        cfg(std::move(c)),
        frontend((cfg.validate(), require_tags(vocab), cfg.feat_dim),
                 cfg.encoder.model_dim, rng),
        encoder(cfg.encoder, rng),
        inter(cfg.taps, cfg.encoder.num_blocks, cfg.encoder.model_dim,
              vocab.ctc_vocab(), rng),
        ctc_head(cfg.encoder.model_dim, vocab.ctc_vocab(), rng),
        decoder(decoder_config(cfg, vocab), rng) {}

  static const Vocabulary& require_tags(const Vocabulary& v) {
    if (!v.extended())
      throw ConfigError("model: vocabulary must carry dialect tags");
    return v;
  }
  static blocks::DecoderConfig decoder_config(const ModelConfig& c,
                                              const Vocabulary& v) {
    blocks::DecoderConfig d;
    d.num_blocks = c.decoder_blocks;
    d.model_dim = c.encoder.model_dim;
    d.heads = c.encoder.heads;
    d.ffn_units = c.decoder_ffn;
    d.vocab_size = v.decoder_vocab();
    return d;
  }

  ParamMap params() const {
    ParamMap m;
    frontend.collect("frontend", m);
    encoder.collect("encoder", m);
    const_cast<interctc::InterCtc&>(inter).collect("inter", m);
    ctc_head.collect("ctc_head", m);
    decoder.collect("decoder", m);
    return m;
  }

  struct Encoded {
    Tensor h;             // N x d final embeddings
    Tensor ctc_logprobs;  // N x ctc_vocab
    interctc::TapActivations acts;
  };

  Encoded encode(const Tensor& features) {
    Encoded out;
    Tensor h = frontend(features);
    h = ops::add(h, blocks::positional_encoding(h.rows(),
                                                cfg.encoder.model_dim));
    out.h = encoder.forward(h, inter.assign.layers(), inter.hook(out.acts));
    out.ctc_logprobs = ops::log_softmax_rows(ctc_head(out.h));
    return out;
  }

  // One optimization objective over the batch: each loss component is
  // averaged across utterances, then composed.
  TrainResult forward_train(const TrainBatch& batch) {
    if (batch.empty()) throw ContractError("forward_train: empty batch");
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    Tensor l_ctc_sum, l_dec_sum;
    std::map<std::pair<std::size_t, interctc::Objective>, Tensor> inter_sum;
    for (const auto& utt : batch) {
      UtteranceTargets tg = build_targets(vocab, utt.text, utt.dialect);
      Encoded enc = encode(utt.features);
      Tensor l_ctc, l_dec;
      try {
        l_ctc = ctc::loss(enc.ctc_logprobs, tg.final_ctc);
      } catch (const InfeasibleTargetError& e) {
        throw DataError("utterance " + utt.id + ": " + e.what());
      }
      std::vector<int> dec_in(tg.decoder.begin(), tg.decoder.end() - 1);
      std::vector<int> dec_out(tg.decoder.begin() + 1, tg.decoder.end());
      l_dec = ops::nll_loss(decoder.forward(enc.h, dec_in), dec_out,
                            cfg.label_smoothing);
      std::map<interctc::Objective, std::vector<int>> targets = {
          {interctc::Objective::kAsr, tg.asr_inter},
          {interctc::Objective::kDid, tg.did_inter}};
      std::vector<interctc::InterLoss> il;
      try {
        il = interctc::intermediate_losses(enc.acts, targets);
      } catch (const InfeasibleTargetError& e) {
        throw DataError("utterance " + utt.id + ": " + e.what());
      }
      l_ctc_sum = l_ctc_sum.defined() ? ops::add(l_ctc_sum, l_ctc) : l_ctc;
      l_dec_sum = l_dec_sum.defined() ? ops::add(l_dec_sum, l_dec) : l_dec;
      for (auto& part : il) {
        auto key = std::make_pair(part.layer, part.objective);
        auto it = inter_sum.find(key);
        if (it == inter_sum.end())
          inter_sum.emplace(key, part.loss);
        else
          it->second = ops::add(it->second, part.loss);
      }
    }
    Tensor l_ctc = ops::scale(l_ctc_sum, inv_b);
    Tensor l_dec = ops::scale(l_dec_sum, inv_b);
    std::vector<interctc::InterLoss> inter_losses;
    for (auto& [key, sum] : inter_sum)
      inter_losses.push_back({key.first, key.second, ops::scale(sum, inv_b)});
    Tensor composed = interctc::compose_ctc_loss(inter_losses, l_ctc,
                                                 cfg.alpha);
    Tensor total = interctc::compose_total_loss(composed, l_dec, cfg.lambda);
    if (!std::isfinite(total.item()))
      throw NumericalError("forward_train: non-finite loss");

    TrainResult res;
    res.total = total;
    res.report.alpha = cfg.alpha;
    res.report.lambda = cfg.lambda;
    res.report.l_ctc = l_ctc.item();
    res.report.l_dec = l_dec.item();
    double inter_acc = 0.0;
    for (auto& part : inter_losses) {
      res.report.inter.emplace_back(part.layer, part.objective,
                                    part.loss.item());
      inter_acc += part.loss.item();
    }
    res.report.l_inter_mean =
        inter_losses.empty() ? 0.0
                             : inter_acc / double(inter_losses.size());
    res.report.l_ctc_composed = composed.item();
    res.report.total = total.item();
    return res;
  }

  // Reads the dialect off the lowest DID-tapped layer: greedy CTC decode;
  // if the collapse is exactly one tag, that is the prediction; otherwise
  // fall back to the tag with the greatest summed frame posterior mass.
  DidPrediction predict_did(const interctc::TapActivations& acts) const {
    const Tensor* lp = nullptr;
    std::size_t tap_layer = 0;
    for (const auto& [layer, by_obj] : acts.logprobs) {
      auto it = by_obj.find(interctc::Objective::kDid);
      if (it != by_obj.end()) {
        lp = &it->second;
        tap_layer = layer;
        break;  // maps iterate in ascending layer order
      }
    }
    if (!lp)
      throw ConfigError("predict_did: no tap carries a DID objective");
    std::vector<int> collapsed = ctc::greedy_decode(*lp);
    DidPrediction out;
    if (collapsed.size() == 1 && vocab.is_tag(collapsed[0] - 1)) {
      out.dialect = vocab.dialect_of_tag(collapsed[0] - 1);
      out.source = DidSource::kTapClean;
      out.diagnostic = "clean greedy collapse at tap layer " +
                       std::to_string(tap_layer);
      return out;
    }
    // Summed posterior mass per tag over all frames; ties to lowest tag.
    double best = -1.0;
    std::size_t best_tag = 0;
    for (std::size_t d = 0; d < vocab.num_tags(); ++d) {
      std::size_t sym = static_cast<std::size_t>(vocab.tag_id(d)) + 1;
      double mass = 0.0;
      for (std::size_t t = 0; t < lp->rows(); ++t)
        mass += std::exp(lp->at(t, sym));
      if (mass > best + 1e-15) {
        best = mass;
        best_tag = d;
      }
    }
    out.dialect = best_tag;
    out.source = DidSource::kTapMassFallback;
    out.diagnostic = "ambiguous collapse (" + std::to_string(collapsed.size()) +
                     " symbols) at tap layer " + std::to_string(tap_layer) +
                     "; posterior-mass fallback";
    return out;
  }

  void save(const std::string& path) const { checkpoint::save(path, params()); }
  void load(const std::string& path) {
    ParamMap mine = params();
    checkpoint::restore(checkpoint::load(path), mine);
  }
};

// Adaptive-moment optimizer with a warmup-then-inverse-square-root learning
// rate schedule and global gradient-norm clipping.
struct OptimConfig {
  double peak_lr = 1e-3;
  std::size_t warmup_steps = 200;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
  double clip_norm = 5.0;  // <= 0 disables clipping
};

struct Adam {
  OptimConfig cfg;
  std::vector<Tensor> params;
  std::vector<std::vector<double>> m, v;
  std::size_t t = 0;

  Adam(OptimConfig c, std::vector<Tensor> p) : cfg(c), params(std::move(p)) {
    for (const auto& par : params) {
      m.emplace_back(par.size(), 0.0);
      v.emplace_back(par.size(), 0.0);
    }
  }

  double rate(std::size_t step) const {
    double s = static_cast<double>(step);
    double w = static_cast<double>(cfg.warmup_steps);
    return cfg.peak_lr * std::min(s / w, std::sqrt(w / s));
  }

  void step() {
    ++t;
    if (cfg.clip_norm > 0.0) {
      double sq = 0.0;
      for (const auto& p : params)
        for (double g : p.grad()) sq += g * g;
      double norm = std::sqrt(sq);
      if (norm > cfg.clip_norm) {
        double s = cfg.clip_norm / norm;
        for (auto& p : params)
          for (double& g : p.grad()) g *= s;
      }
    }
    double lr = rate(t);
    double bc1 = 1.0 - std::pow(cfg.beta1, double(t));
    double bc2 = 1.0 - std::pow(cfg.beta2, double(t));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i].data();
      const auto& g = params[i].grad();
      for (std::size_t j = 0; j < p.size(); ++j) {
        m[i][j] = cfg.beta1 * m[i][j] + (1.0 - cfg.beta1) * g[j];
        v[i][j] = cfg.beta2 * v[i][j] + (1.0 - cfg.beta2) * g[j] * g[j];
        p[j] -= lr * (m[i][j] / bc1) / (std::sqrt(v[i][j] / bc2) + cfg.eps);
      }
    }
    zero_grad(params);
  }
};

inline interctc::InterLossReport train_step(Model& model,
                                            const TrainBatch& batch,
                                            Adam& opt) {
  zero_grad(opt.params);
  TrainResult res = model.forward_train(batch);
  backward(res.total);
  opt.step();
  return res.report;
}

}  // namespace mtasr::model
