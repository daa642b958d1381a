#pragma once

#include <map>
#include <set>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "mtasr/blocks.hpp"
#include "mtasr/ctc.hpp"

namespace mtasr::interctc {

enum class Objective { kAsr, kDid };

inline const char* objective_name(Objective o) {
  return o == Objective::kAsr ? "asr" : "did";
}

// Which encoder layers carry intermediate CTC objectives, and which
// objectives each carries. A layer with both objectives is the "multi-task"
// setting. Layer indices are 1-based block numbers and must lie strictly
// below the final layer (the final layer feeds the main CTC head instead).
struct TapAssignment {
  std::map<std::size_t, std::set<Objective>> taps;

  void validate(std::size_t num_blocks) const {
    for (const auto& [layer, objs] : taps) {
      if (layer == 0 || layer >= num_blocks)
        throw ConfigError("tap layer " + std::to_string(layer) +
                          " must be in [1, " + std::to_string(num_blocks - 1) +
                          "]");
      if (objs.empty())
        throw ConfigError("tap layer " + std::to_string(layer) +
                          " has an empty objective set");
    }
  }

  std::set<std::size_t> layers() const {
    std::set<std::size_t> out;
    for (const auto& [layer, objs] : taps) out.insert(layer);
    return out;
  }

  bool empty() const { return taps.empty(); }
};

// Parameters for one tapped layer: a shared pre-injection layer norm plus,
// per objective, a CTC projection head and a posterior re-injection linear.
struct TapModule {
  blocks::LayerNorm nrm;
  struct ObjectiveHead {
    blocks::Linear head;    // model_dim -> ctc_vocab (incl. blank)
    blocks::Linear inject;  // ctc_vocab -> model_dim
    ObjectiveHead(std::size_t model_dim, std::size_t ctc_vocab, Rng& rng)
        : head(model_dim, ctc_vocab, rng), inject(ctc_vocab, model_dim, rng) {}
  };
  std::map<Objective, ObjectiveHead> heads;

  TapModule(const std::set<Objective>& objs, std::size_t model_dim,
            std::size_t ctc_vocab, Rng& rng)
      : nrm(model_dim) {
    for (Objective o : objs) heads.emplace(o, ObjectiveHead(model_dim, ctc_vocab, rng));
  }

  void collect(const std::string& prefix, ParamMap& out) {
    nrm.collect(prefix + ".nrm", out);
    for (auto& [obj, h] : heads) {
      std::string p = prefix + "." + objective_name(obj);
      h.head.collect(p + ".head", out);
      h.inject.collect(p + ".inject", out);
    }
  }
};

// Normalized embedding plus the sum of per-objective linear injections of
// the tap posteriors. Feeds the encoder layers above the tap.
inline Tensor self_condition(TapModule& tap, const Tensor& h_e,
                             const std::map<Objective, Tensor>& posteriors) {
  Tensor out = tap.nrm(h_e);
  for (auto& [obj, head] : tap.heads) {
    auto it = posteriors.find(obj);
    if (it == posteriors.end())
      throw ContractError(std::string("self_condition: missing posteriors for ") +
                          objective_name(obj));
    out = ops::add(out, head.inject(it->second));
  }
  return out;
}

// Log-posteriors captured at each tap during one encoder pass.
struct TapActivations {
  std::map<std::size_t, std::map<Objective, Tensor>> logprobs;
};

// The full intermediate-CTC assembly for one encoder.
struct InterCtc {
  TapAssignment assign;
  std::map<std::size_t, TapModule> modules;

  InterCtc(TapAssignment a, std::size_t num_blocks, std::size_t model_dim,
           std::size_t ctc_vocab, Rng& rng)
      : assign(std::move(a)) {
    assign.validate(num_blocks);
    for (const auto& [layer, objs] : assign.taps)
      modules.emplace(layer,
                      TapModule(objs, model_dim, ctc_vocab, rng));
  }

  void collect(const std::string& prefix, ParamMap& out) {
    for (auto& [layer, mod] : modules)
      mod.collect(prefix + ".tap" + std::to_string(layer), out);
  }

  // Encoder hook: projects the intermediate embedding through each
  // objective's CTC head, records log-posteriors in `acts`, and returns the
  // self-conditioned embedding for the layers above.
  blocks::TapHook hook(TapActivations& acts) {
    return [this, &acts](std::size_t layer, const Tensor& h_e) {
      TapModule& mod = modules.at(layer);
      std::map<Objective, Tensor> post;
      for (auto& [obj, head] : mod.heads) {
        Tensor logits = head.head(h_e);
        acts.logprobs[layer][obj] = ops::log_softmax_rows(logits);
        post[obj] = ops::softmax_rows(logits);
      }
      return self_condition(mod, h_e, post);
    };
  }
};

// One CTC loss per (layer, objective) pair, in ascending layer order with
// ASR before DID within a layer. Targets are given per objective in the CTC
// symbol space (blank excluded).
struct InterLoss {
  std::size_t layer;
  Objective objective;
  Tensor loss;
};

inline std::vector<InterLoss> intermediate_losses(
    const TapActivations& acts,
    const std::map<Objective, std::vector<int>>& targets) {
  std::vector<InterLoss> out;
  for (const auto& [layer, by_obj] : acts.logprobs)
    for (const auto& [obj, lp] : by_obj) {
      auto it = targets.find(obj);
      if (it == targets.end())
        throw ContractError(std::string("intermediate_losses: no target for ") +
                            objective_name(obj));
      out.push_back({layer, obj, ctc::loss(lp, it->second)});
    }
  return out;
}

// alpha * mean(inter losses) + (1 - alpha) * final CTC loss. An empty list
// leaves the final loss untouched. The summation order (ascending layer,
// ASR before DID) is part of the contract so the composition can be
// re-evaluated bitwise from the reported parts.
inline Tensor compose_ctc_loss(const std::vector<InterLoss>& inter,
                               const Tensor& l_ctc, double alpha) {
  if (alpha < 0.0 || alpha > 1.0)
    throw ConfigError("intermediate loss weight must lie in [0, 1]");
  if (inter.empty()) return l_ctc;
  Tensor sum = inter[0].loss;
  for (std::size_t i = 1; i < inter.size(); ++i)
    sum = ops::add(sum, inter[i].loss);
  Tensor mean = ops::scale(sum, 1.0 / static_cast<double>(inter.size()));
  return ops::add(ops::scale(mean, alpha), ops::scale(l_ctc, 1.0 - alpha));
}

// lambda * composed CTC loss + (1 - lambda) * decoder loss.
inline Tensor compose_total_loss(const Tensor& l_ctc_prime,
                                 const Tensor& l_dec, double lambda = 0.3) {
  if (lambda < 0.0 || lambda > 1.0)
    throw ConfigError("ctc/attention interpolation weight must lie in [0, 1]");
  return ops::add(ops::scale(l_ctc_prime, lambda),
                  ops::scale(l_dec, 1.0 - lambda));
}

// Scalar record of one loss evaluation, sufficient to re-derive the
// composed values by re-running the same arithmetic.
struct InterLossReport {
  std::vector<std::tuple<std::size_t, Objective, double>> inter;
  double l_ctc = 0.0;
  double l_dec = 0.0;
  double alpha = 0.5;
  double lambda = 0.3;
  double l_inter_mean = 0.0;
  double l_ctc_composed = 0.0;
  double total = 0.0;

  // Re-runs the same compose functions on the recorded parts, so agreement
  // with the reported values is exact (same code path, same rounding — a
  // hand-written scalar expression could be contracted into FMA and drift in
  // the last bit).
  double recompose_ctc() const {
    NoGradGuard ng;
    std::vector<InterLoss> parts;
    for (const auto& [layer, obj, v] : inter)
      parts.push_back({layer, obj, Tensor::scalar(v)});
    return compose_ctc_loss(parts, Tensor::scalar(l_ctc), alpha).item();
  }
  double recompose_total() const {
    NoGradGuard ng;
    return compose_total_loss(Tensor::scalar(recompose_ctc()),
                              Tensor::scalar(l_dec), lambda)
        .item();
  }
};

// The seven tap layouts of the layer-assignment experiment, re-indexed from
// a 12-layer encoder's {3, 6, 9} pattern to a 6-layer one's {2, 3, 5}
// (layer l of 12 maps to ceil(l/2) of 6). "mt" marks a layer carrying both
// objectives.
inline std::vector<std::pair<std::string, TapAssignment>> sweep_presets() {
  using O = Objective;
  const std::set<O> did = {O::kDid};
  const std::set<O> mt = {O::kAsr, O::kDid};
  return {
      {"plain", TapAssignment{{}}},
      {"did-2-3-5", TapAssignment{{{2, did}, {3, did}, {5, did}}}},
      {"did-2-3", TapAssignment{{{2, did}, {3, did}}}},
      {"did-2", TapAssignment{{{2, did}}}},
      {"mt-5-did-2-3", TapAssignment{{{2, did}, {3, did}, {5, mt}}}},
      {"mt-3-5-did-2", TapAssignment{{{2, did}, {3, mt}, {5, mt}}}},
      {"mt-2-3-5", TapAssignment{{{2, mt}, {3, mt}, {5, mt}}}},
  };
}

inline TapAssignment preset(const std::string& name) {
  for (auto& [n, a] : sweep_presets())
    if (n == name) return a;
  throw ConfigError("unknown tap preset: " + name);
}

}  // namespace mtasr::interctc
