#pragma once

#include <cstdio>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mtasr/corpus.hpp"
#include "mtasr/decoder.hpp"
#include "mtasr/interctc.hpp"
#include "mtasr/lm.hpp"
#include "mtasr/metrics.hpp"
#include "mtasr/model.hpp"

namespace mtasr::exp {

struct TrainConfig {
  std::size_t steps = 2000;
  std::size_t batch = 8;
  std::uint64_t seed = 1;
  model::OptimConfig optim;
  std::size_t log_every = 50;  // 0 disables logging

  void validate() const {
    if (steps == 0 || batch == 0)
      throw ConfigError("train: steps and batch must be positive");
  }
};

struct LossPoint {
  std::size_t step = 0;
  double total = 0.0;
  double l_ctc = 0.0;
  double l_dec = 0.0;
};

// Mini-batch training with a deterministic per-epoch shuffle; returns the
// per-step loss history. Progress lines go to `log` when set.
inline std::vector<LossPoint> train_model(model::Model& m,
                                          const model::TrainBatch& data,
                                          const TrainConfig& cfg,
                                          std::ostream* log = nullptr) {
  cfg.validate();
  if (data.empty()) throw DataError("train: empty training set");
  model::Adam opt(cfg.optim, blocks::param_list(m.params()));

  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::size_t cursor = 0, epoch = 0;
  {
    Rng rng(mix_seed(cfg.seed, 0));
    std::shuffle(order.begin(), order.end(), rng);
  }

  std::vector<LossPoint> history;
  history.reserve(cfg.steps);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    model::TrainBatch batch;
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      if (cursor == order.size()) {
        cursor = 0;
        Rng rng(mix_seed(cfg.seed, ++epoch));
        std::shuffle(order.begin(), order.end(), rng);
      }
      batch.push_back(data[order[cursor++]]);
    }
    interctc::InterLossReport rep = model::train_step(m, batch, opt);
    history.push_back({step, rep.total, rep.l_ctc, rep.l_dec});
    if (log && cfg.log_every > 0 &&
        ((step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps))
      (*log) << "step " << (step + 1) << "/" << cfg.steps << " loss "
             << rep.total << " ctc " << rep.l_ctc << " dec " << rep.l_dec
             << "\n";
  }
  return history;
}

struct UtteranceEval {
  std::string id;
  std::size_t dialect = 0;                 // ground truth
  std::optional<std::size_t> tag_dialect;  // from the decoded tag
  std::optional<std::size_t> tap_dialect;  // from the DID tap
  std::vector<int> ref;                    // base-vocabulary tokens
  std::vector<int> hyp;
  double att = 0.0, ctc = 0.0, lm = 0.0;   // hypothesis score parts
  std::size_t edit = 0;
  bool truncated = false;
  bool malformed = false;
};

struct EvalReport {
  double overall_wer = 0.0;
  std::map<std::size_t, double> per_dialect_wer;
  double did_tag_accuracy = 0.0;                 // decoded-tag channel
  std::optional<double> did_tap_accuracy;        // absent without a DID tap
  std::vector<UtteranceEval> utterances;
};

// Decodes every utterance with the joint beam search and scores WER plus
// both dialect-identification channels. A missing decoded tag counts as a
// wrong dialect prediction.
inline EvalReport evaluate(model::Model& m, const model::TrainBatch& data,
                           const decode::BeamConfig& beam,
                           const lm::Lm* fusion_lm = nullptr) {
  if (data.empty()) throw DataError("evaluate: empty evaluation set");
  const bool has_did_tap = [&] {
    for (const auto& [layer, objs] : m.cfg.taps.taps)
      if (objs.count(interctc::Objective::kDid)) return true;
    return false;
  }();

  EvalReport rep;
  std::size_t pooled_edit = 0, pooled_len = 0;
  std::map<std::size_t, std::pair<std::size_t, std::size_t>> by_dialect;
  std::size_t tag_hits = 0, tap_hits = 0;
  NoGradGuard ng;
  for (const auto& u : data) {
    model::Model::Encoded enc = m.encode(u.features);
    auto hyps = decode::joint_beam_search(
        enc.h, enc.ctc_logprobs, m.decoder,
        fusion_lm ? &fusion_lm->net : nullptr, m.vocab, beam);
    const decode::Hypothesis& best = hyps.front();
    decode::StripResult strip = decode::strip_tag(best.tokens, m.vocab);

    UtteranceEval ue;
    ue.id = u.id;
    ue.dialect = u.dialect;
    ue.ref = u.text;
    ue.hyp = strip.text;
    ue.tag_dialect = strip.dialect;
    ue.att = best.att;
    ue.ctc = best.ctc;
    ue.lm = best.lm;
    ue.truncated = best.truncated;
    ue.malformed = strip.malformed;
    if (has_did_tap) ue.tap_dialect = m.predict_did(enc.acts).dialect;

    if (u.text.empty())
      throw DataError("evaluate: empty reference for utterance " + u.id);
    ue.edit = metrics::edit_distance(ue.ref, ue.hyp);
    pooled_edit += ue.edit;
    pooled_len += ue.ref.size();
    auto& [d_edit, d_len] = by_dialect[u.dialect];
    d_edit += ue.edit;
    d_len += ue.ref.size();
    if (ue.tag_dialect && *ue.tag_dialect == u.dialect) ++tag_hits;
    if (ue.tap_dialect && *ue.tap_dialect == u.dialect) ++tap_hits;
    rep.utterances.push_back(std::move(ue));
  }
  rep.overall_wer =
      static_cast<double>(pooled_edit) / static_cast<double>(pooled_len);
  for (const auto& [d, dist_len] : by_dialect)
    rep.per_dialect_wer[d] = static_cast<double>(dist_len.first) /
                             static_cast<double>(dist_len.second);
  rep.did_tag_accuracy =
      static_cast<double>(tag_hits) / static_cast<double>(data.size());
  if (has_did_tap)
    rep.did_tap_accuracy =
        static_cast<double>(tap_hits) / static_cast<double>(data.size());
  return rep;
}

struct SweepRow {
  std::string preset;
  bool failed = false;
  std::string message;
  EvalReport eval;
  std::vector<LossPoint> history;
};

struct SweepConfig {
  model::ModelConfig base;  // taps replaced per preset
  TrainConfig train;
  decode::BeamConfig beam;
  std::uint64_t model_seed = 7;
};

// Trains one model per preset with identical data, seeds, and budgets, then
// evaluates each on the held-out set. A failing run is recorded as a failed
// row instead of aborting the sweep.
inline std::vector<SweepRow> run_sweep(
    const std::vector<std::pair<std::string, interctc::TapAssignment>>&
        presets,
    const model::TrainBatch& train_set, const model::TrainBatch& eval_set,
    const SweepConfig& cfg, const model::Vocabulary& vocab,
    std::ostream* log = nullptr) {
  std::vector<SweepRow> rows;
  for (const auto& [name, taps] : presets) {
    SweepRow row;
    row.preset = name;
    try {
      model::ModelConfig mc = cfg.base;
      mc.taps = taps;
      mc.validate();
      Rng rng(mix_seed(cfg.model_seed, 0));
      model::Model m(vocab, mc, rng);
      if (log) (*log) << "[sweep] training preset " << name << "\n";
      row.history = train_model(m, train_set, cfg.train, log);
      row.eval = evaluate(m, eval_set, cfg.beam);
    } catch (const std::exception& e) {
      row.failed = true;
      row.message = e.what();
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

// Table-shaped report: one row per preset with DID accuracy and overall plus
// per-dialect WER.
inline std::string sweep_table(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << "preset               DID(tap)  DID(tag)  WER     ";
  std::size_t n_dialects = 0;
  for (const auto& r : rows)
    if (!r.failed) n_dialects = std::max(n_dialects,
                                         r.eval.per_dialect_wer.size());
  for (std::size_t d = 0; d < n_dialects; ++d)
    os << "D" << (d + 1) << "      ";
  os << "\n";
  auto fmt = [](double v) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return std::string(buf);
  };
  for (const auto& r : rows) {
    os << r.preset;
    for (std::size_t i = r.preset.size(); i < 21; ++i) os << ' ';
    if (r.failed) {
      os << "FAILED: " << r.message << "\n";
      continue;
    }
    os << (r.eval.did_tap_accuracy ? fmt(*r.eval.did_tap_accuracy)
                                   : std::string("-     "))
       << "    " << fmt(r.eval.did_tag_accuracy) << "    "
       << fmt(r.eval.overall_wer) << "  ";
    for (const auto& [d, w] : r.eval.per_dialect_wer) os << fmt(w) << "  ";
    os << "\n";
  }
  return os.str();
}

}  // namespace mtasr::exp
