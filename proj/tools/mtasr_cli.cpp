// Command-line surface: corpus generation, model and LM training, joint
// decoding with optional shallow fusion, forced alignment, evaluation, and
// the tap-layout sweep. Every flag has a JSON config-file equivalent
// (--config); explicit flags override file values.
//
// Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime
// failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "mtasr/experiment.hpp"
#include "mtasr/segmentation.hpp"

using namespace mtasr;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// --config support: flags not given on the command line are filled from the
// JSON file; unknown keys are rejected by name.
struct ConfigMerge {
  CLI::App* cmd;
  std::string path;
  std::map<std::string, std::function<void(const json&)>> setters;

  explicit ConfigMerge(CLI::App* c) : cmd(c) {
    cmd->add_option("--config", path, "JSON config file; flags override it");
  }

  template <typename T>
  CLI::Option* bind(const std::string& flag, T& value,
                    const std::string& help) {
    CLI::Option* opt = cmd->add_option(flag, value, help);
    std::string key = flag.substr(flag.find_last_of('-', 1) == 0 ? 2 : 0);
    while (!key.empty() && key[0] == '-') key.erase(key.begin());
    setters[key] = [opt, &value](const json& v) {
      if (opt->count() > 0) return;  // explicit flag wins
      value = v.get<T>();
    };
    return opt;
  }

  void apply() {
    if (path.empty()) return;
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot read " + path);
    json j;
    try {
      is >> j;
    } catch (const std::exception& e) {
      throw ConfigError("config: " + path + ": " + e.what());
    }
    if (!j.is_object()) throw ConfigError("config: " + path + " not an object");
    for (const auto& [key, value] : j.items()) {
      auto it = setters.find(key);
      if (it == setters.end())
        throw ConfigError("config: unknown key '" + key + "' in " + path);
      try {
        it->second(value);
      } catch (const std::exception& e) {
        throw ConfigError("config: bad value for key '" + key + "': " +
                          e.what());
      }
    }
  }
};

json taps_to_json(const interctc::TapAssignment& taps) {
  json out = json::object();
  for (const auto& [layer, objs] : taps.taps) {
    json names = json::array();
    for (auto o : objs) names.push_back(interctc::objective_name(o));
    out[std::to_string(layer)] = names;
  }
  return out;
}

interctc::TapAssignment taps_from_json(const json& j) {
  interctc::TapAssignment taps;
  for (const auto& [key, names] : j.items()) {
    std::set<interctc::Objective> objs;
    for (const auto& n : names) {
      std::string s = n.get<std::string>();
      if (s == "asr")
        objs.insert(interctc::Objective::kAsr);
      else if (s == "did")
        objs.insert(interctc::Objective::kDid);
      else
        throw ConfigError("model config: unknown objective '" + s + "'");
    }
    taps.taps[std::stoul(key)] = std::move(objs);
  }
  return taps;
}

json model_config_to_json(const model::ModelConfig& c) {
  return json{
      {"feat_dim", c.feat_dim},
      {"encoder_variant",
       c.encoder.variant == blocks::EncoderVariant::kConformerLite
           ? "conformer"
           : "ebranchformer"},
      {"encoder_blocks", c.encoder.num_blocks},
      {"model_dim", c.encoder.model_dim},
      {"heads", c.encoder.heads},
      {"ffn_units", c.encoder.ffn_units},
      {"cgmlp_units", c.encoder.cgmlp_units},
      {"conv_kernel", c.encoder.conv_kernel},
      {"decoder_blocks", c.decoder_blocks},
      {"decoder_ffn", c.decoder_ffn},
      {"taps", taps_to_json(c.taps)},
      {"alpha", c.alpha},
      {"lambda", c.lambda},
      {"label_smoothing", c.label_smoothing}};
}

model::ModelConfig model_config_from_json(const json& j) {
  model::ModelConfig c;
  c.feat_dim = j.at("feat_dim").get<std::size_t>();
  std::string var = j.at("encoder_variant").get<std::string>();
  if (var == "conformer")
    c.encoder.variant = blocks::EncoderVariant::kConformerLite;
  else if (var == "ebranchformer")
    c.encoder.variant = blocks::EncoderVariant::kEBranchformerLite;
  else
    throw ConfigError("model config: unknown encoder variant '" + var + "'");
  c.encoder.num_blocks = j.at("encoder_blocks").get<std::size_t>();
  c.encoder.model_dim = j.at("model_dim").get<std::size_t>();
  c.encoder.heads = j.at("heads").get<std::size_t>();
  c.encoder.ffn_units = j.at("ffn_units").get<std::size_t>();
  c.encoder.cgmlp_units = j.at("cgmlp_units").get<std::size_t>();
  c.encoder.conv_kernel = j.at("conv_kernel").get<std::size_t>();
  c.decoder_blocks = j.at("decoder_blocks").get<std::size_t>();
  c.decoder_ffn = j.at("decoder_ffn").get<std::size_t>();
  c.taps = taps_from_json(j.at("taps"));
  c.alpha = j.at("alpha").get<double>();
  c.lambda = j.at("lambda").get<double>();
  c.label_smoothing = j.at("label_smoothing").get<double>();
  return c;
}

std::string sidecar_path(const std::string& checkpoint) {
  return checkpoint + ".json";
}

void write_sidecar(const std::string& checkpoint, const json& j) {
  std::ofstream os(sidecar_path(checkpoint));
  if (!os)
    throw DataError("cannot write " + sidecar_path(checkpoint));
  os << j.dump(2) << "\n";
}

json read_sidecar(const std::string& checkpoint) {
  std::ifstream is(sidecar_path(checkpoint));
  if (!is)
    throw DataError("cannot read model description " +
                    sidecar_path(checkpoint));
  json j;
  is >> j;
  return j;
}

model::Model load_model(const std::string& checkpoint,
                        const model::Vocabulary& vocab) {
  model::ModelConfig mc = model_config_from_json(read_sidecar(checkpoint));
  Rng rng(0);
  model::Model m(vocab, mc, rng);
  m.load(checkpoint);
  return m;
}

json lm_config_to_json(const lm::LmConfig& c) {
  return json{{"num_blocks", c.num_blocks},
              {"model_dim", c.model_dim},
              {"heads", c.heads},
              {"ffn_units", c.ffn_units},
              {"context_len", c.context_len}};
}

lm::LmConfig lm_config_from_json(const json& j) {
  lm::LmConfig c;
  c.num_blocks = j.at("num_blocks").get<std::size_t>();
  c.model_dim = j.at("model_dim").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.ffn_units = j.at("ffn_units").get<std::size_t>();
  c.context_len = j.at("context_len").get<std::size_t>();
  return c;
}

lm::Lm load_lm(const std::string& checkpoint,
               const model::Vocabulary& vocab) {
  lm::LmConfig lc = lm_config_from_json(read_sidecar(checkpoint));
  Rng rng(0);
  lm::Lm l(vocab, lc, rng);
  l.load(checkpoint);
  return l;
}

model::TrainBatch load_set(const std::string& manifest,
                           const std::string& data_dir,
                           const model::Vocabulary& vocab) {
  auto records = corpus::load_manifest(manifest);
  std::string dir =
      data_dir.empty() ? fs::path(manifest).parent_path().string() : data_dir;
  return corpus::load_utterances(records, dir, vocab);
}

std::string join_tokens(const model::Vocabulary& vocab,
                        const std::vector<int>& toks) {
  std::string out;
  for (std::size_t i = 0; i < toks.size(); ++i) {
    if (i) out += ' ';
    out += vocab.token(toks[i]);
  }
  return out;
}

json eval_report_to_json(const exp::EvalReport& rep,
                         const model::Vocabulary& vocab) {
  json per_d = json::object();
  for (const auto& [d, w] : rep.per_dialect_wer)
    per_d[std::to_string(d)] = w;
  json utts = json::array();
  for (const auto& u : rep.utterances) {
    json ju{{"id", u.id},
            {"dialect", u.dialect},
            {"ref", join_tokens(vocab, u.ref)},
            {"hyp", join_tokens(vocab, u.hyp)},
            {"edit", u.edit},
            {"truncated", u.truncated},
            {"malformed", u.malformed},
            {"score_att", u.att},
            {"score_ctc", u.ctc},
            {"score_lm", u.lm}};
    if (u.tag_dialect) ju["tag_dialect"] = *u.tag_dialect;
    if (u.tap_dialect) ju["tap_dialect"] = *u.tap_dialect;
    utts.push_back(std::move(ju));
  }
  json out{{"overall_wer", rep.overall_wer},
           {"per_dialect_wer", per_d},
           {"did_tag_accuracy", rep.did_tag_accuracy},
           {"utterances", utts}};
  if (rep.did_tap_accuracy) out["did_tap_accuracy"] = *rep.did_tap_accuracy;
  return out;
}

void print_eval_summary(const exp::EvalReport& rep) {
  std::cout << "overall WER " << rep.overall_wer << "\n";
  for (const auto& [d, w] : rep.per_dialect_wer)
    std::cout << "dialect D" << (d + 1) << " WER " << w << "\n";
  std::cout << "DID accuracy (decoded tag) " << rep.did_tag_accuracy << "\n";
  if (rep.did_tap_accuracy)
    std::cout << "DID accuracy (encoder tap) " << *rep.did_tap_accuracy
              << "\n";
}

int run(int argc, char** argv) {
  CLI::App app{"Hybrid CTC/attention speech transduction toolkit"};
  app.require_subcommand(1);

  // ----- generate ---------------------------------------------------------
  auto* g = app.add_subcommand("generate", "Generate a synthetic corpus");
  ConfigMerge gm(g);
  corpus::SynthConfig gcfg;
  std::string g_out = "corpus";
  double g_p_lex = 0.5, g_offset = 0.5;
  std::size_t g_rules = 4;
  gm.bind("--out", g_out, "output directory");
  gm.bind("--seed", gcfg.seed, "corpus seed");
  gm.bind("--speakers", gcfg.speakers_per_dialect, "speakers per dialect");
  gm.bind("--utterances", gcfg.utterances_per_speaker,
          "utterances per speaker");
  gm.bind("--vocab-size", gcfg.vocab_size, "base vocabulary size");
  gm.bind("--feat-dim", gcfg.feat_dim, "feature dimension");
  gm.bind("--frames-per-token", gcfg.frames_per_token,
          "feature frames per token");
  gm.bind("--noise-scale", gcfg.noise_scale, "acoustic noise stddev");
  gm.bind("--speaker-scale", gcfg.speaker_scale, "speaker offset stddev");
  gm.bind("--p-lex", g_p_lex, "lexical substitution probability");
  gm.bind("--offset-scale", g_offset, "dialect acoustic offset magnitude");
  gm.bind("--rules", g_rules, "substitution rules per dialect");

  // ----- train ------------------------------------------------------------
  auto* t = app.add_subcommand("train", "Train a transduction model");
  ConfigMerge tm(t);
  std::string t_manifest, t_data_dir, t_vocab, t_out = "model.ictx";
  std::string t_taps = "mt-3-5-did-2", t_variant = "conformer";
  model::ModelConfig t_mc;
  exp::TrainConfig t_tc;
  std::uint64_t t_model_seed = 7;
  tm.bind("--manifest", t_manifest, "training manifest")->required();
  tm.bind("--data-dir", t_data_dir, "feature root (default: manifest dir)");
  tm.bind("--vocab", t_vocab, "vocabulary file")->required();
  tm.bind("--out", t_out, "output checkpoint");
  tm.bind("--taps", t_taps, "tap preset name");
  tm.bind("--encoder-variant", t_variant, "conformer | ebranchformer");
  tm.bind("--encoder-blocks", t_mc.encoder.num_blocks, "encoder depth");
  tm.bind("--model-dim", t_mc.encoder.model_dim, "model width");
  tm.bind("--heads", t_mc.encoder.heads, "attention heads");
  tm.bind("--ffn-units", t_mc.encoder.ffn_units, "feed-forward width");
  tm.bind("--cgmlp-units", t_mc.encoder.cgmlp_units, "gated-mlp width");
  tm.bind("--conv-kernel", t_mc.encoder.conv_kernel, "conv kernel size");
  tm.bind("--decoder-blocks", t_mc.decoder_blocks, "decoder depth");
  tm.bind("--decoder-ffn", t_mc.decoder_ffn, "decoder feed-forward width");
  tm.bind("--alpha", t_mc.alpha, "intermediate-loss weight");
  tm.bind("--lambda", t_mc.lambda, "ctc/attention interpolation");
  tm.bind("--label-smoothing", t_mc.label_smoothing, "decoder smoothing");
  tm.bind("--steps", t_tc.steps, "training steps");
  tm.bind("--batch", t_tc.batch, "batch size");
  tm.bind("--seed", t_tc.seed, "data-order seed");
  tm.bind("--model-seed", t_model_seed, "weight-init seed");
  tm.bind("--peak-lr", t_tc.optim.peak_lr, "peak learning rate");
  tm.bind("--warmup", t_tc.optim.warmup_steps, "warmup steps");
  tm.bind("--clip-norm", t_tc.optim.clip_norm, "gradient clip norm");
  tm.bind("--log-every", t_tc.log_every, "loss log interval");

  // ----- shared decode options helper ------------------------------------
  struct DecodeArgs {
    std::string manifest, data_dir, vocab, model, lm, output;
    decode::BeamConfig beam;
    void bind(ConfigMerge& m, bool need_output) {
      m.bind("--manifest", manifest, "input manifest")->required();
      m.bind("--data-dir", data_dir, "feature root (default: manifest dir)");
      m.bind("--vocab", vocab, "vocabulary file")->required();
      m.bind("--model", model, "model checkpoint")->required();
      m.bind("--lm", lm, "language-model checkpoint for shallow fusion");
      m.bind("--beam", beam.beam, "beam width");
      m.bind("--w-ctc", beam.w_ctc, "joint-score CTC weight");
      m.bind("--lm-weight", beam.w_lm, "shallow-fusion weight");
      m.bind("--length-bonus", beam.length_bonus, "per-token length bonus");
      m.bind("--max-len", beam.max_len, "decode length cap");
      auto* o = m.bind("--output", output, "output file");
      if (need_output) o->required();
    }
  };

  auto* d = app.add_subcommand("decode", "Decode a manifest to hypotheses");
  ConfigMerge dm(d);
  DecodeArgs dargs;
  dargs.bind(dm, true);

  auto* e = app.add_subcommand("eval", "Decode and score a manifest");
  ConfigMerge em(e);
  DecodeArgs eargs;
  eargs.bind(em, false);

  // ----- align ------------------------------------------------------------
  auto* a = app.add_subcommand("align",
                               "Forced alignment of a concatenated stream");
  ConfigMerge am(a);
  std::string a_manifest, a_data_dir, a_vocab, a_model, a_output;
  seg::AlignConfig a_cfg;
  am.bind("--manifest", a_manifest, "manifest describing the stream order")
      ->required();
  am.bind("--data-dir", a_data_dir, "feature root (default: manifest dir)");
  am.bind("--vocab", a_vocab, "vocabulary file")->required();
  am.bind("--model", a_model, "model checkpoint")->required();
  am.bind("--output", a_output, "segment records output")->required();
  am.bind("--max-frames", a_cfg.partition.max_frames,
          "posterior frames per inference chunk");
  am.bind("--overlap", a_cfg.partition.overlap, "chunk overlap");
  am.bind("--threshold", a_cfg.threshold, "confidence threshold");
  am.bind("--window", a_cfg.window, "confidence window (tokens)");

  // ----- lm-train / lm-finetune ------------------------------------------
  auto* lt = app.add_subcommand("lm-train",
                                "Pretrain the LM on untagged text");
  ConfigMerge ltm(lt);
  std::string lt_corpus, lt_vocab, lt_out = "lm.ictx";
  lm::LmConfig lt_cfg;
  lm::LmTrainConfig lt_tc;
  std::uint64_t lt_seed = 17;
  ltm.bind("--corpus", lt_corpus, "text corpus, one sentence per line")
      ->required();
  ltm.bind("--vocab", lt_vocab, "vocabulary file")->required();
  ltm.bind("--out", lt_out, "output checkpoint");
  ltm.bind("--blocks", lt_cfg.num_blocks, "LM depth");
  ltm.bind("--model-dim", lt_cfg.model_dim, "LM width");
  ltm.bind("--heads", lt_cfg.heads, "attention heads");
  ltm.bind("--ffn-units", lt_cfg.ffn_units, "feed-forward width");
  ltm.bind("--context-len", lt_cfg.context_len, "context length");
  ltm.bind("--steps", lt_tc.steps, "training steps");
  ltm.bind("--batch", lt_tc.batch, "batch size");
  ltm.bind("--seed", lt_seed, "weight-init seed");
  ltm.bind("--peak-lr", lt_tc.optim.peak_lr, "peak learning rate");
  ltm.bind("--warmup", lt_tc.optim.warmup_steps, "warmup steps");

  auto* lf = app.add_subcommand("lm-finetune",
                                "Fine-tune the LM on tagged text");
  ConfigMerge lfm(lf);
  std::string lf_corpus, lf_vocab, lf_in, lf_out = "lm_tagged.ictx";
  lm::LmTrainConfig lf_tc;
  lfm.bind("--corpus", lf_corpus, "tagged text corpus")->required();
  lfm.bind("--vocab", lf_vocab, "vocabulary file")->required();
  lfm.bind("--lm", lf_in, "pretrained checkpoint")->required();
  lfm.bind("--out", lf_out, "output checkpoint");
  lfm.bind("--steps", lf_tc.steps, "training steps");
  lfm.bind("--batch", lf_tc.batch, "batch size");
  lfm.bind("--peak-lr", lf_tc.optim.peak_lr, "peak learning rate");
  lfm.bind("--warmup", lf_tc.optim.warmup_steps, "warmup steps");

  // ----- sweep ------------------------------------------------------------
  auto* s = app.add_subcommand(
      "sweep", "Train and evaluate every tap-layout preset");
  ConfigMerge sm(s);
  std::string s_train, s_eval, s_data_dir, s_vocab, s_out = "sweep";
  exp::SweepConfig s_cfg;
  s_cfg.beam.beam = 4;
  s_cfg.beam.max_len = 16;
  sm.bind("--train-manifest", s_train, "training manifest")->required();
  sm.bind("--eval-manifest", s_eval, "held-out manifest")->required();
  sm.bind("--data-dir", s_data_dir, "feature root (default: manifest dir)");
  sm.bind("--vocab", s_vocab, "vocabulary file")->required();
  sm.bind("--out", s_out, "report prefix (.txt table, .jsonl rows)");
  sm.bind("--steps", s_cfg.train.steps, "training steps per preset");
  sm.bind("--batch", s_cfg.train.batch, "batch size");
  sm.bind("--seed", s_cfg.train.seed, "data-order seed");
  sm.bind("--model-seed", s_cfg.model_seed, "weight-init seed");
  sm.bind("--model-dim", s_cfg.base.encoder.model_dim, "model width");
  sm.bind("--encoder-blocks", s_cfg.base.encoder.num_blocks, "encoder depth");
  sm.bind("--beam", s_cfg.beam.beam, "evaluation beam width");
  sm.bind("--max-len", s_cfg.beam.max_len, "decode length cap");
  sm.bind("--log-every", s_cfg.train.log_every, "loss log interval");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    int rc = app.exit(err);
    return rc == 0 ? 0 : 2;
  }
  for (ConfigMerge* m : {&gm, &tm, &dm, &em, &am, &ltm, &lfm, &sm}) m->apply();

  if (g->parsed()) {
    auto specs = corpus::default_dialect_specs(gcfg, g_p_lex, g_offset,
                                               g_rules);
    auto gc = corpus::generate_corpus(gcfg, specs);
    corpus::write_corpus(gc, g_out);
    corpus::Split sp = corpus::split_sets(gc.records);
    corpus::save_manifest((fs::path(g_out) / "train.jsonl").string(),
                          sp.train);
    corpus::save_manifest((fs::path(g_out) / "valid.jsonl").string(),
                          sp.valid);
    corpus::save_manifest((fs::path(g_out) / "test.jsonl").string(), sp.test);
    std::cout << "wrote " << gc.records.size() << " utterances to " << g_out
              << " (train/valid/test " << sp.train.size() << "/"
              << sp.valid.size() << "/" << sp.test.size() << ")\n";
    return 0;
  }

  if (t->parsed()) {
    model::Vocabulary vocab = model::Vocabulary::load(t_vocab);
    model::TrainBatch data = load_set(t_manifest, t_data_dir, vocab);
    if (t_variant == "conformer")
      t_mc.encoder.variant = blocks::EncoderVariant::kConformerLite;
    else if (t_variant == "ebranchformer")
      t_mc.encoder.variant = blocks::EncoderVariant::kEBranchformerLite;
    else
      throw ConfigError("train: unknown encoder variant '" + t_variant + "'");
    t_mc.taps = interctc::preset(t_taps);
    t_mc.validate();
    Rng rng(mix_seed(t_model_seed, 0));
    model::Model m(vocab, t_mc, rng);
    exp::train_model(m, data, t_tc, &std::cout);
    m.save(t_out);
    write_sidecar(t_out, model_config_to_json(t_mc));
    std::cout << "saved " << t_out << "\n";
    return 0;
  }

  auto run_decode = [&](const DecodeArgs& args, exp::EvalReport& rep,
                        model::Vocabulary& vocab) {
    vocab = model::Vocabulary::load(args.vocab);
    model::TrainBatch data = load_set(args.manifest, args.data_dir, vocab);
    model::Model m = load_model(args.model, vocab);
    std::optional<lm::Lm> fusion;
    if (!args.lm.empty()) fusion.emplace(load_lm(args.lm, vocab));
    rep = exp::evaluate(m, data, args.beam,
                        fusion ? &*fusion : nullptr);
  };

  if (d->parsed()) {
    exp::EvalReport rep;
    model::Vocabulary vocab;
    run_decode(dargs, rep, vocab);
    std::ofstream os(dargs.output);
    if (!os) throw DataError("decode: cannot write " + dargs.output);
    for (const auto& u : rep.utterances) {
      json ju{{"id", u.id},
              {"text", join_tokens(vocab, u.hyp)},
              {"truncated", u.truncated},
              {"score_att", u.att},
              {"score_ctc", u.ctc},
              {"score_lm", u.lm}};
      if (u.tag_dialect) ju["dialect"] = *u.tag_dialect;
      if (u.tap_dialect) ju["tap_dialect"] = *u.tap_dialect;
      os << ju.dump() << "\n";
    }
    std::cout << "decoded " << rep.utterances.size() << " utterances to "
              << dargs.output << "\n";
    return 0;
  }

  if (e->parsed()) {
    exp::EvalReport rep;
    model::Vocabulary vocab;
    run_decode(eargs, rep, vocab);
    print_eval_summary(rep);
    if (!eargs.output.empty()) {
      std::ofstream os(eargs.output);
      if (!os) throw DataError("eval: cannot write " + eargs.output);
      os << eval_report_to_json(rep, vocab).dump(2) << "\n";
      std::cout << "report written to " << eargs.output << "\n";
    }
    return 0;
  }

  if (a->parsed()) {
    model::Vocabulary vocab = model::Vocabulary::load(a_vocab);
    auto records = corpus::load_manifest(a_manifest);
    std::string dir = a_data_dir.empty()
                          ? fs::path(a_manifest).parent_path().string()
                          : a_data_dir;
    model::TrainBatch utts = corpus::load_utterances(records, dir, vocab);
    model::Model m = load_model(a_model, vocab);

    std::vector<Tensor> feats;
    std::vector<seg::UtteranceText> texts;
    for (const auto& u : utts) {
      feats.push_back(u.features);
      std::vector<int> syms;
      syms.push_back(static_cast<int>(vocab.tag_id(u.dialect)) + 1);
      for (int tok : u.text) syms.push_back(tok + 1);
      texts.push_back({u.id, std::move(syms)});
    }
    Tensor stream = ops::concat_rows(feats);
    seg::InferFn infer = [&](const Tensor& f) {
      return m.encode(f).ctc_logprobs;
    };
    auto segs = seg::align_corpus(stream, infer, texts, a_cfg);
    std::ofstream os(a_output);
    if (!os) throw DataError("align: cannot write " + a_output);
    for (const auto& sgm : segs) {
      std::vector<int> toks;
      for (int sym : sgm.syms) toks.push_back(sym - 1);
      os << json{{"id", sgm.id},
                 {"start_frame", sgm.start},
                 {"end_frame", sgm.end},
                 {"confidence", sgm.confidence},
                 {"text", join_tokens(vocab, toks)}}
                .dump()
         << "\n";
    }
    std::cout << "aligned " << segs.size() << " of " << texts.size()
              << " utterances to " << a_output << "\n";
    return 0;
  }

  if (lt->parsed()) {
    model::Vocabulary vocab = model::Vocabulary::load(lt_vocab);
    lm::TextCorpus corpus = lm::dedup_corpus(lm::load_corpus(lt_corpus,
                                                             vocab));
    Rng rng(mix_seed(lt_seed, 0));
    lm::Lm l(vocab, lt_cfg, rng);
    double before = lm::perplexity(l, corpus);
    lm::train_lm(l, corpus, lt_tc);
    double after = lm::perplexity(l, corpus);
    l.save(lt_out);
    write_sidecar(lt_out, lm_config_to_json(lt_cfg));
    std::cout << "perplexity " << before << " -> " << after << "; saved "
              << lt_out << "\n";
    return 0;
  }

  if (lf->parsed()) {
    model::Vocabulary vocab = model::Vocabulary::load(lf_vocab);
    lm::TextCorpus corpus = lm::dedup_corpus(lm::load_corpus(lf_corpus,
                                                             vocab));
    lm::Lm l = load_lm(lf_in, vocab);
    double before = lm::perplexity(l, corpus);
    lm::finetune_lm(l, corpus, lf_tc);
    double after = lm::perplexity(l, corpus);
    l.save(lf_out);
    write_sidecar(lf_out, lm_config_to_json(load_lm(lf_in, vocab).cfg));
    std::cout << "perplexity " << before << " -> " << after << "; saved "
              << lf_out << "\n";
    return 0;
  }

  if (s->parsed()) {
    model::Vocabulary vocab = model::Vocabulary::load(s_vocab);
    model::TrainBatch train_set = load_set(s_train, s_data_dir, vocab);
    model::TrainBatch eval_set = load_set(s_eval, s_data_dir, vocab);
    auto rows = exp::run_sweep(interctc::sweep_presets(), train_set, eval_set,
                               s_cfg, vocab, &std::cout);
    std::string table = exp::sweep_table(rows);
    std::cout << table;
    {
      std::ofstream os(s_out + ".txt");
      os << table;
    }
    {
      std::ofstream os(s_out + ".jsonl");
      for (const auto& row : rows) {
        json jr{{"preset", row.preset}, {"failed", row.failed}};
        if (row.failed) {
          jr["message"] = row.message;
        } else {
          jr["did_tag_accuracy"] = row.eval.did_tag_accuracy;
          if (row.eval.did_tap_accuracy)
            jr["did_tap_accuracy"] = *row.eval.did_tap_accuracy;
          jr["overall_wer"] = row.eval.overall_wer;
          json per_d = json::object();
          for (const auto& [dd, w] : row.eval.per_dialect_wer)
            per_d[std::to_string(dd)] = w;
          jr["per_dialect_wer"] = per_d;
          json losses = json::array();
          for (const auto& p : row.history) losses.push_back(p.total);
          jr["loss_history"] = losses;
        }
        os << jr.dump() << "\n";
      }
    }
    bool any_failed = false;
    for (const auto& row : rows)
      if (row.failed) any_failed = true;
    if (any_failed) {
      std::cerr << "sweep: one or more presets failed\n";
      return 4;
    }
    return 0;
  }

  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
}
