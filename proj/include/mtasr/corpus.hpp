#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mtasr/model.hpp"
#include "mtasr/tensor.hpp"

namespace mtasr::corpus {

struct SplitError : DataError {
  using DataError::DataError;
};

// ---------------------------------------------------------------------------
// Feature files: magic "FEAT1", frame count and dim as unsigned 64-bit
// little-endian, float32 row-major payload.
// ---------------------------------------------------------------------------

namespace detail {
inline void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}
}  // namespace detail

inline void save_features(const std::string& path, const Tensor& feats) {
  if (feats.rank() != 2)
    throw ShapeError("save_features: features must be [frames, dim]");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("save_features: cannot write " + path);
  os.write("FEAT1", 5);
  detail::put_u64(os, feats.rows());
  detail::put_u64(os, feats.cols());
  for (std::size_t i = 0; i < feats.size(); ++i) {
    float f = static_cast<float>(feats.at(i));
    os.write(reinterpret_cast<const char*>(&f), sizeof(float));
  }
  if (!os) throw DataError("save_features: write failed for " + path);
}

inline Tensor load_features(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("load_features: cannot read " + path);
  char magic[5];
  is.read(magic, 5);
  if (!is || std::string(magic, 5) != "FEAT1")
    throw DataError("load_features: bad magic in " + path);
  std::uint64_t rows = detail::get_u64(is);
  std::uint64_t cols = detail::get_u64(is);
  Tensor out({static_cast<std::size_t>(rows), static_cast<std::size_t>(cols)});
  for (std::size_t i = 0; i < out.size(); ++i) {
    float f;
    is.read(reinterpret_cast<char*>(&f), sizeof(float));
    out.at(i) = static_cast<double>(f);
  }
  if (!is) throw DataError("load_features: truncated file " + path);
  return out;
}

// ---------------------------------------------------------------------------
// Manifest: line-delimited JSON records.
// ---------------------------------------------------------------------------

struct ManifestRecord {
  std::string id;
  std::string speaker;
  std::size_t dialect = 0;
  std::string text;  // space-separated tokens
  std::string path;  // feature file, relative to the manifest directory
  std::size_t frames = 0;
};

namespace detail {
inline std::string json_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '"' || c == '\\') out.push_back('\\');
    out.push_back(c);
  }
  return out;
}

// Minimal parser for the flat string/number objects this module writes.
inline std::map<std::string, std::string> parse_flat_json(
    const std::string& line, std::size_t lineno) {
  std::map<std::string, std::string> out;
  std::size_t i = 0;
  auto fail = [&](const std::string& why) {
    throw DataError("manifest: " + why + " at line " + std::to_string(lineno));
  };
  auto skip_ws = [&] {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i])))
      ++i;
  };
  auto parse_string = [&] {
    if (line[i] != '"') fail("expected string");
    ++i;
    std::string s;
    while (i < line.size() && line[i] != '"') {
      if (line[i] == '\\' && i + 1 < line.size()) ++i;
      s.push_back(line[i++]);
    }
    if (i >= line.size()) fail("unterminated string");
    ++i;
    return s;
  };
  skip_ws();
  if (i >= line.size() || line[i] != '{') fail("expected object");
  ++i;
  skip_ws();
  if (i < line.size() && line[i] == '}') return out;
  for (;;) {
    skip_ws();
    std::string key = parse_string();
    skip_ws();
    if (i >= line.size() || line[i] != ':') fail("expected ':'");
    ++i;
    skip_ws();
    std::string value;
    if (i < line.size() && line[i] == '"') {
      value = parse_string();
    } else {
      std::size_t start = i;
      while (i < line.size() && line[i] != ',' && line[i] != '}') ++i;
      value = line.substr(start, i - start);
      while (!value.empty() && std::isspace(static_cast<unsigned char>(
                                   value.back())))
        value.pop_back();
      if (value.empty()) fail("empty value");
    }
    out[key] = value;
    skip_ws();
    if (i < line.size() && line[i] == ',') {
      ++i;
      continue;
    }
    if (i < line.size() && line[i] == '}') break;
    fail("expected ',' or '}'");
  }
  return out;
}
}  // namespace detail

inline std::string to_json(const ManifestRecord& r) {
  std::ostringstream os;
  os << "{\"id\":\"" << detail::json_escape(r.id) << "\",\"speaker\":\""
     << detail::json_escape(r.speaker) << "\",\"dialect\":" << r.dialect
     << ",\"text\":\"" << detail::json_escape(r.text) << "\",\"path\":\""
     << detail::json_escape(r.path) << "\",\"frames\":" << r.frames << "}";
  return os.str();
}

inline void save_manifest(const std::string& path,
                          const std::vector<ManifestRecord>& records) {
  std::ofstream os(path);
  if (!os) throw DataError("save_manifest: cannot write " + path);
  for (const auto& r : records) os << to_json(r) << '\n';
}

inline std::vector<ManifestRecord> load_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("load_manifest: cannot read " + path);
  std::vector<ManifestRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto kv = detail::parse_flat_json(line, lineno);
    for (const char* key : {"id", "speaker", "dialect", "text", "path",
                            "frames"})
      if (!kv.count(key))
        throw DataError("manifest: missing field '" + std::string(key) +
                        "' at line " + std::to_string(lineno));
    ManifestRecord r;
    r.id = kv["id"];
    r.speaker = kv["speaker"];
    r.dialect = static_cast<std::size_t>(std::stoull(kv["dialect"]));
    r.text = kv["text"];
    r.path = kv["path"];
    r.frames = static_cast<std::size_t>(std::stoull(kv["frames"]));
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpus generation.
// ---------------------------------------------------------------------------

struct DialectSpec {
  std::string name;                                // D1/D2/D3
  std::vector<std::pair<int, int>> substitutions;  // token -> dialect variant
  double p_lex = 0.5;              // probability a rule fires
  std::vector<double> offset;      // acoustic offset, length feat_dim
  double duration = 1.0;           // frames-per-token multiplier
};

struct SynthConfig {
  std::uint64_t seed = 1;
  std::size_t speakers_per_dialect = 10;
  std::size_t utterances_per_speaker = 200;
  std::size_t vocab_size = 50;   // base tokens
  std::size_t feat_dim = 16;
  std::size_t frames_per_token = 8;
  double noise_scale = 0.3;
  double speaker_scale = 0.1;
  std::size_t min_tokens = 3;
  std::size_t max_tokens = 8;

  void validate() const {
    if (speakers_per_dialect == 0 || utterances_per_speaker == 0 ||
        vocab_size == 0 || feat_dim == 0 || frames_per_token == 0)
      throw ConfigError("synth: counts and dims must be positive");
    if (min_tokens == 0 || min_tokens > max_tokens)
      throw ConfigError("synth: need 0 < min_tokens <= max_tokens");
    if (noise_scale < 0.0 || speaker_scale < 0.0)
      throw ConfigError("synth: scales must be non-negative");
  }
};

// Base tokens w0..w{n-1} plus the dialect tags.
inline model::Vocabulary make_vocab(std::size_t n_base) {
  std::vector<std::string> toks;
  for (std::size_t i = 0; i < n_base; ++i)
    toks.push_back("w" + std::to_string(i));
  model::Vocabulary v(std::move(toks));
  v.extend();
  return v;
}

// Three dialects with disjoint lexical substitution rules (source tokens from
// the front of the vocabulary, dialect-exclusive variants from the back) and
// acoustic offsets along seed-derived random directions of the given
// magnitude. Duration multipliers 0.9 / 1.0 / 1.1.
inline std::vector<DialectSpec> default_dialect_specs(
    const SynthConfig& cfg, double p_lex = 0.5, double offset_scale = 0.5,
    std::size_t rules_per_dialect = 4) {
  // Shared source tokens at the front, 3 * rules distinct variants at the back.
  if (cfg.vocab_size < rules_per_dialect + 3 * rules_per_dialect)
    throw ConfigError("dialect specs: vocabulary of " +
                      std::to_string(cfg.vocab_size) +
                      " is too small for " +
                      std::to_string(rules_per_dialect) +
                      " substitution rules per dialect");
  const int n = static_cast<int>(cfg.vocab_size);
  std::vector<DialectSpec> specs(3);
  const double durations[3] = {0.9, 1.0, 1.1};
  for (std::size_t d = 0; d < 3; ++d) {
    specs[d].name = "D" + std::to_string(d + 1);
    specs[d].p_lex = p_lex;
    specs[d].duration = durations[d];
    for (std::size_t j = 0; j < rules_per_dialect; ++j)
      specs[d].substitutions.emplace_back(
          static_cast<int>(j),
          n - 1 - static_cast<int>(d * rules_per_dialect + j));
    Rng rng(mix_seed(cfg.seed, 900 + d));
    std::normal_distribution<double> gauss(0.0, 1.0);
    double norm = 0.0;
    specs[d].offset.resize(cfg.feat_dim);
    for (double& x : specs[d].offset) {
      x = gauss(rng);
      norm += x * x;
    }
    norm = std::sqrt(norm);
    for (double& x : specs[d].offset) x = offset_scale * x / norm;
  }
  return specs;
}

struct GeneratedCorpus {
  model::Vocabulary vocab;
  std::vector<ManifestRecord> records;   // canonical order by id
  std::vector<Tensor> features;          // parallel to records
};

namespace detail {
inline std::string zero_pad(std::size_t v, int width) {
  std::string s = std::to_string(v);
  while (static_cast<int>(s.size()) < width) s.insert(s.begin(), '0');
  return s;
}
}  // namespace detail

// Utterances sampled from a token bigram source (each token has a small set
// of seed-derived successors), dialect-transformed lexically, and rendered
// acoustically as token prototype + speaker offset + dialect offset +
// Gaussian noise, with frames-per-token jittered and scaled by the dialect's
// duration multiplier. Fully reproducible from the seed: every utterance
// draws from its own seed derived from (seed, utterance index).
inline GeneratedCorpus generate_corpus(const SynthConfig& cfg,
                                       const std::vector<DialectSpec>& specs) {
  cfg.validate();
  if (specs.empty()) throw ConfigError("generate_corpus: no dialect specs");
  const int n = static_cast<int>(cfg.vocab_size);
  for (const auto& sp : specs) {
    for (auto [src, dst] : sp.substitutions)
      if (src < 0 || src >= n || dst < 0 || dst >= n)
        throw ConfigError("generate_corpus: substitution rule " +
                          std::to_string(src) + "->" + std::to_string(dst) +
                          " outside the vocabulary");
    if (sp.offset.size() != cfg.feat_dim)
      throw ConfigError("generate_corpus: offset dim mismatch for " + sp.name);
    if (sp.p_lex < 0.0 || sp.p_lex > 1.0)
      throw ConfigError("generate_corpus: p_lex must be in [0, 1]");
    if (sp.duration <= 0.0)
      throw ConfigError("generate_corpus: duration must be positive");
  }

  GeneratedCorpus out;
  out.vocab = make_vocab(cfg.vocab_size);

  // Corpus-level structure: token prototypes, bigram successors, speaker
  // offsets — all from seeds derived deterministically from the base seed.
  Rng proto_rng(mix_seed(cfg.seed, 1));
  NoGradGuard ng;
  Tensor protos = Tensor::randn(
      {cfg.vocab_size, cfg.feat_dim}, proto_rng);
  // The bigram source draws only from tokens that are not dialect variants,
  // so substitution targets stay exclusive to their dialect's text.
  std::set<int> variant;
  for (const auto& sp : specs)
    for (auto [src, dst] : sp.substitutions) variant.insert(dst);
  std::vector<int> source_tokens;
  for (int t = 0; t < n; ++t)
    if (!variant.count(t)) source_tokens.push_back(t);
  if (source_tokens.empty())
    throw ConfigError("generate_corpus: no non-variant tokens left");
  Rng gram_rng(mix_seed(cfg.seed, 2));
  constexpr std::size_t kSuccessors = 4;
  std::vector<std::vector<int>> succ(cfg.vocab_size);
  {
    std::uniform_int_distribution<std::size_t> tok(0, source_tokens.size() - 1);
    for (auto& row : succ) {
      row.resize(kSuccessors);
      for (auto& t : row) t = source_tokens[tok(gram_rng)];
    }
  }
  const std::size_t n_speakers = specs.size() * cfg.speakers_per_dialect;
  std::vector<std::vector<double>> spk_offset(n_speakers);
  for (std::size_t s = 0; s < n_speakers; ++s) {
    Rng rng(mix_seed(cfg.seed, 100 + s));
    std::normal_distribution<double> gauss(0.0, cfg.speaker_scale);
    spk_offset[s].resize(cfg.feat_dim);
    for (double& x : spk_offset[s]) x = gauss(rng);
  }

  std::size_t global = 0;
  for (std::size_t d = 0; d < specs.size(); ++d) {
    for (std::size_t s = 0; s < cfg.speakers_per_dialect; ++s) {
      const std::size_t spk = d * cfg.speakers_per_dialect + s;
      for (std::size_t u = 0; u < cfg.utterances_per_speaker; ++u, ++global) {
        Rng rng(mix_seed(cfg.seed, 1000003 + global));
        std::uniform_int_distribution<std::size_t> tok(
            0, source_tokens.size() - 1);
        std::uniform_int_distribution<std::size_t> len(cfg.min_tokens,
                                                       cfg.max_tokens);
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        std::uniform_int_distribution<std::size_t> pick(0, kSuccessors - 1);
        std::uniform_int_distribution<int> jitter(-1, 1);
        std::normal_distribution<double> gauss(0.0, 1.0);

        // Bigram text, then lexical dialect transformation.
        std::vector<int> text;
        std::size_t L = len(rng);
        int prev = source_tokens[tok(rng)];
        text.push_back(prev);
        for (std::size_t k = 1; k < L; ++k) {
          prev = succ[prev][pick(rng)];
          text.push_back(prev);
        }
        for (int& t : text)
          for (auto [src, dst] : specs[d].substitutions)
            if (t == src && unit(rng) < specs[d].p_lex) {
              t = dst;
              break;
            }

        // Acoustic rendering.
        std::vector<std::size_t> tok_frames;
        std::size_t total = 0;
        for (std::size_t k = 0; k < text.size(); ++k) {
          double base = static_cast<double>(cfg.frames_per_token) *
                        specs[d].duration;
          long f = std::lround(base) + jitter(rng);
          std::size_t nf = f < 1 ? 1 : static_cast<std::size_t>(f);
          tok_frames.push_back(nf);
          total += nf;
        }
        Tensor feats({total, cfg.feat_dim});
        std::size_t row = 0;
        for (std::size_t k = 0; k < text.size(); ++k) {
          for (std::size_t f = 0; f < tok_frames[k]; ++f, ++row)
            for (std::size_t c = 0; c < cfg.feat_dim; ++c)
              feats.at(row, c) = protos.at(text[k], c) + spk_offset[spk][c] +
                                 specs[d].offset[c] +
                                 cfg.noise_scale * gauss(rng);
        }

        ManifestRecord r;
        r.id = "d" + std::to_string(d) + "_s" + detail::zero_pad(s, 3) +
               "_u" + detail::zero_pad(u, 5);
        r.speaker = "d" + std::to_string(d) + "_s" + detail::zero_pad(s, 3);
        r.dialect = d;
        std::ostringstream ts;
        for (std::size_t k = 0; k < text.size(); ++k) {
          if (k) ts << ' ';
          ts << out.vocab.token(text[k]);
        }
        r.text = ts.str();
        r.path = "feats/" + r.id + ".feat";
        r.frames = total;
        out.records.push_back(std::move(r));
        out.features.push_back(std::move(feats));
      }
    }
  }
  return out;
}

// Writes manifest.jsonl and the FEAT1 files under `dir`.
inline void write_corpus(const GeneratedCorpus& gc, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "feats");
  for (std::size_t i = 0; i < gc.records.size(); ++i)
    save_features((fs::path(dir) / gc.records[i].path).string(),
                  gc.features[i]);
  save_manifest((fs::path(dir) / "manifest.jsonl").string(), gc.records);
  gc.vocab.save((fs::path(dir) / "vocab.txt").string());
}

inline std::vector<int> parse_text(const model::Vocabulary& vocab,
                                   const std::string& text) {
  std::istringstream is(text);
  std::vector<int> out;
  std::string tok;
  while (is >> tok) {
    if (!vocab.contains(tok))
      throw DataError("parse_text: unknown token '" + tok + "'");
    out.push_back(vocab.id(tok));
  }
  return out;
}

// Manifest records to in-memory training utterances; features read from disk
// relative to `dir` unless an in-memory corpus is supplied.
inline model::TrainBatch to_utterances(const GeneratedCorpus& gc) {
  model::TrainBatch out;
  for (std::size_t i = 0; i < gc.records.size(); ++i) {
    model::Utterance u;
    u.id = gc.records[i].id;
    u.features = gc.features[i];
    u.text = parse_text(gc.vocab, gc.records[i].text);
    u.dialect = gc.records[i].dialect;
    out.push_back(std::move(u));
  }
  return out;
}

inline model::TrainBatch load_utterances(
    const std::vector<ManifestRecord>& records, const std::string& dir,
    const model::Vocabulary& vocab) {
  namespace fs = std::filesystem;
  model::TrainBatch out;
  for (const auto& r : records) {
    model::Utterance u;
    u.id = r.id;
    u.features = load_features((fs::path(dir) / r.path).string());
    if (u.features.rows() != r.frames)
      throw DataError("load_utterances: frame count mismatch for " + r.id);
    u.text = parse_text(vocab, r.text);
    u.dialect = r.dialect;
    out.push_back(std::move(u));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Train / valid / test split with disjoint speakers AND disjoint texts.
// ---------------------------------------------------------------------------

struct SplitRatios {
  double train = 0.8, valid = 0.1, test = 0.1;
};

struct Split {
  std::vector<ManifestRecord> train, valid, test;
};

// Speakers are assigned to sets per dialect by the ratios; each distinct text
// is then pinned to the set holding the majority of its utterances (ties
// prefer train, then valid), and utterances whose speaker set disagrees with
// their text's set are dropped. Per-dialect utterance proportions must land
// within 10% (absolute) of the ratios.
inline Split split_sets(const std::vector<ManifestRecord>& records,
                        const SplitRatios& ratios = {}) {
  if (records.empty()) throw SplitError("split: empty manifest");
  double rsum = ratios.train + ratios.valid + ratios.test;
  if (ratios.train <= 0 || ratios.valid <= 0 || ratios.test <= 0 ||
      std::abs(rsum - 1.0) > 1e-9)
    throw ConfigError("split: ratios must be positive and sum to 1");

  // Preconditions: >= 3 speakers and >= 3 distinct texts per dialect.
  std::map<std::size_t, std::set<std::string>> spk_by_d, txt_by_d;
  for (const auto& r : records) {
    spk_by_d[r.dialect].insert(r.speaker);
    txt_by_d[r.dialect].insert(r.text);
  }
  for (const auto& [d, spks] : spk_by_d)
    if (spks.size() < 3)
      throw SplitError("split: dialect " + std::to_string(d) + " has only " +
                       std::to_string(spks.size()) +
                       " speakers; need >= 3 (one per set)");
  for (const auto& [d, txts] : txt_by_d)
    if (txts.size() < 3)
      throw SplitError("split: dialect " + std::to_string(d) + " has only " +
                       std::to_string(txts.size()) +
                       " distinct texts; need >= 3 (one per set)");

  // Per-dialect speaker assignment: at least one speaker per set.
  std::map<std::string, int> spk_set;  // 0 train, 1 valid, 2 test
  for (const auto& [d, spks] : spk_by_d) {
    std::vector<std::string> ordered(spks.begin(), spks.end());
    std::size_t S = ordered.size();
    std::size_t n_valid = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::lround(ratios.valid * double(S))));
    std::size_t n_test = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::lround(ratios.test * double(S))));
    if (n_valid + n_test >= S) {
      n_valid = 1;
      n_test = 1;
    }
    for (std::size_t i = 0; i < S; ++i) {
      if (i < S - n_valid - n_test)
        spk_set[ordered[i]] = 0;
      else if (i < S - n_test)
        spk_set[ordered[i]] = 1;
      else
        spk_set[ordered[i]] = 2;
    }
  }

  // Pin each distinct text to the majority set of its utterances.
  std::map<std::string, std::array<std::size_t, 3>> votes;
  for (const auto& r : records) votes[r.text][spk_set.at(r.speaker)]++;
  std::map<std::string, int> txt_set;
  for (const auto& [txt, v] : votes) {
    int best = 0;
    for (int k = 1; k < 3; ++k)
      if (v[k] > v[best]) best = k;
    txt_set[txt] = best;
  }

  Split out;
  std::map<std::size_t, std::array<std::size_t, 3>> kept;
  std::map<std::size_t, std::size_t> dropped;
  for (const auto& r : records) {
    int set = spk_set.at(r.speaker);
    if (txt_set.at(r.text) != set) {
      dropped[r.dialect]++;
      continue;
    }
    (set == 0 ? out.train : set == 1 ? out.valid : out.test).push_back(r);
    kept[r.dialect][set]++;
  }

  const double targets[3] = {ratios.train, ratios.valid, ratios.test};
  for (const auto& [d, counts] : kept) {
    double total = double(counts[0] + counts[1] + counts[2]);
    if (total == 0.0)
      throw SplitError("split: dialect " + std::to_string(d) +
                       " lost all utterances to text-disjointness drops");
    for (int k = 0; k < 3; ++k)
      if (std::abs(double(counts[k]) / total - targets[k]) > 0.10)
        throw SplitError(
            "split: dialect " + std::to_string(d) + " set " +
            std::to_string(k) + " proportion " +
            std::to_string(double(counts[k]) / total) +
            " deviates more than 0.10 from target " +
            std::to_string(targets[k]) +
            " after text-disjointness drops");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Augmentations. Both leave the target text and dialect label unchanged.
// ---------------------------------------------------------------------------

// Time-axis resample: T' = round(T / factor), linear interpolation between
// neighbouring frames. Factor 1.0 is the identity (bitwise).
inline Tensor speed_perturb(const Tensor& feats, double factor) {
  if (feats.rank() != 2)
    throw ShapeError("speed_perturb: features must be [frames, dim]");
  if (factor <= 0.0) throw ConfigError("speed_perturb: factor must be > 0");
  const std::size_t t_in = feats.rows();
  const std::size_t t_out = static_cast<std::size_t>(
      std::llround(static_cast<double>(t_in) / factor));
  if (t_out == t_in) return feats;
  if (t_in == 0 || t_out == 0)
    throw DataError("speed_perturb: empty output");
  NoGradGuard ng;
  Tensor out({t_out, feats.cols()});
  for (std::size_t t = 0; t < t_out; ++t) {
    double pos = t_out == 1 ? 0.0
                            : static_cast<double>(t) *
                                  static_cast<double>(t_in - 1) /
                                  static_cast<double>(t_out - 1);
    std::size_t lo = static_cast<std::size_t>(pos);
    std::size_t hi = std::min(lo + 1, t_in - 1);
    double w = pos - static_cast<double>(lo);
    for (std::size_t c = 0; c < feats.cols(); ++c)
      out.at(t, c) = (1.0 - w) * feats.at(lo, c) + w * feats.at(hi, c);
  }
  return out;
}

// Masks `time_masks` runs of exactly `time_width` frames to the per-utterance
// mean vector, and `freq_masks` runs of `freq_width` coefficients to their
// per-coefficient means. Mask positions are drawn from the seed.
inline Tensor spec_augment(const Tensor& feats, std::size_t time_masks,
                           std::size_t time_width, std::size_t freq_masks,
                           std::size_t freq_width, std::uint64_t seed) {
  if (feats.rank() != 2)
    throw ShapeError("spec_augment: features must be [frames, dim]");
  const std::size_t t_in = feats.rows(), f_in = feats.cols();
  if ((time_masks > 0 && time_width > t_in) ||
      (freq_masks > 0 && freq_width > f_in))
    throw ConfigError("spec_augment: mask width exceeds feature dims");
  if (time_masks == 0 && freq_masks == 0) return feats;

  NoGradGuard ng;
  std::vector<double> mean(f_in, 0.0);
  for (std::size_t t = 0; t < t_in; ++t)
    for (std::size_t c = 0; c < f_in; ++c) mean[c] += feats.at(t, c);
  for (double& m : mean) m /= static_cast<double>(t_in);

  Tensor out = Tensor::from(feats.shape(), feats.data());
  Rng rng(seed);
  if (time_width > 0) {
    std::uniform_int_distribution<std::size_t> start(0, t_in - time_width);
    for (std::size_t k = 0; k < time_masks; ++k) {
      std::size_t s = start(rng);
      for (std::size_t t = s; t < s + time_width; ++t)
        for (std::size_t c = 0; c < f_in; ++c) out.at(t, c) = mean[c];
    }
  }
  if (freq_width > 0) {
    std::uniform_int_distribution<std::size_t> start(0, f_in - freq_width);
    for (std::size_t k = 0; k < freq_masks; ++k) {
      std::size_t s = start(rng);
      for (std::size_t c = s; c < s + freq_width; ++c)
        for (std::size_t t = 0; t < t_in; ++t) out.at(t, c) = mean[c];
    }
  }
  return out;
}

// Nearest-centroid dialect classification on mean feature vectors: a quick
// separability probe for generated corpora.
inline double centroid_did_accuracy(const GeneratedCorpus& gc) {
  if (gc.records.empty()) throw ContractError("centroid probe: empty corpus");
  const std::size_t f = gc.features.front().cols();
  std::map<std::size_t, std::vector<double>> centroid;
  std::map<std::size_t, std::size_t> count;
  std::vector<std::vector<double>> means(gc.records.size(),
                                         std::vector<double>(f, 0.0));
  for (std::size_t i = 0; i < gc.records.size(); ++i) {
    const Tensor& x = gc.features[i];
    for (std::size_t t = 0; t < x.rows(); ++t)
      for (std::size_t c = 0; c < f; ++c) means[i][c] += x.at(t, c);
    for (double& m : means[i]) m /= static_cast<double>(x.rows());
    auto& cen = centroid[gc.records[i].dialect];
    cen.resize(f, 0.0);
    for (std::size_t c = 0; c < f; ++c) cen[c] += means[i][c];
    count[gc.records[i].dialect]++;
  }
  for (auto& [d, cen] : centroid)
    for (double& v : cen) v /= static_cast<double>(count[d]);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < gc.records.size(); ++i) {
    double best = 0.0;
    std::size_t arg = 0;
    bool first = true;
    for (const auto& [d, cen] : centroid) {
      double dist = 0.0;
      for (std::size_t c = 0; c < f; ++c) {
        double diff = means[i][c] - cen[c];
        dist += diff * diff;
      }
      if (first || dist < best) {
        best = dist;
        arg = d;
      }
      first = false;
    }
    if (arg == gc.records[i].dialect) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(gc.records.size());
}

}  // namespace mtasr::corpus
