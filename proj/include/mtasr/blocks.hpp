#pragma once

#include <map>
#include <set>

#include "mtasr/ops.hpp"

namespace mtasr {

using ParamMap = std::map<std::string, Tensor>;

namespace blocks {

namespace O = ops;

struct Linear {
  Tensor w, b;

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng) {
    w = Tensor::randn({in, out}, rng, 1.0 / std::sqrt(double(in)), true);
    b = Tensor({out}, true);
  }
  Tensor operator()(const Tensor& x) const {
    return O::add(O::matmul(x, w), b);
  }
  void collect(const std::string& p, ParamMap& m) const {
    m[p + ".w"] = w;
    m[p + ".b"] = b;
  }
};

struct LayerNorm {
  Tensor gamma, beta;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t d) {
    gamma = Tensor::full({d}, 1.0, true);
    beta = Tensor({d}, true);
  }
  Tensor operator()(const Tensor& x) const {
    return O::layer_norm(x, gamma, beta);
  }
  void collect(const std::string& p, ParamMap& m) const {
    m[p + ".gamma"] = gamma;
    m[p + ".beta"] = beta;
  }
};

struct MultiHeadAttention {
  Linear wq, wk, wv, wo;
  std::size_t heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(std::size_t d, std::size_t nheads, Rng& rng)
      : wq(d, d, rng), wk(d, d, rng), wv(d, d, rng), wo(d, d, rng),
        heads(nheads) {
    if (d % nheads != 0)
      throw ConfigError("attention: model dim not divisible by head count");
  }
  Tensor operator()(const Tensor& q_in, const Tensor& kv_in, bool causal,
                    std::size_t kv_valid = 0) const {
    Tensor q = wq(q_in), k = wk(kv_in), v = wv(kv_in);
    return wo(O::attention(q, k, v, heads, causal, kv_valid));
  }
  void collect(const std::string& p, ParamMap& m) const {
    wq.collect(p + ".wq", m);
    wk.collect(p + ".wk", m);
    wv.collect(p + ".wv", m);
    wo.collect(p + ".wo", m);
  }
};

struct FeedForward {
  Linear lin1, lin2;

  FeedForward() = default;
  FeedForward(std::size_t d, std::size_t units, Rng& rng)
      : lin1(d, units, rng), lin2(units, d, rng) {}
  Tensor operator()(const Tensor& x) const {
    return lin2(O::swish(lin1(x)));
  }
  void collect(const std::string& p, ParamMap& m) const {
    lin1.collect(p + ".lin1", m);
    lin2.collect(p + ".lin2", m);
  }
};

// Conformer convolution module: pointwise to 2d, GLU gate, depthwise conv,
// layer norm, swish, pointwise back to d.
struct ConvModule {
  Linear pw1, pw2;
  Tensor dw_w, dw_b;
  LayerNorm norm;
  std::size_t d = 0;

  ConvModule() = default;
  ConvModule(std::size_t dim, std::size_t kernel, Rng& rng)
      : pw1(dim, 2 * dim, rng), pw2(dim, dim, rng), norm(dim), d(dim) {
    if (kernel % 2 == 0)
      throw ConfigError("conv module: kernel size must be odd");
    dw_w = Tensor::randn({kernel, dim}, rng, 1.0 / std::sqrt(double(kernel)),
                         true);
    dw_b = Tensor({dim}, true);
  }
  Tensor operator()(const Tensor& x, std::size_t n_valid = 0) const {
    Tensor h = pw1(x);
    Tensor a = O::slice_cols(h, 0, d);
    Tensor g = O::slice_cols(h, d, 2 * d);
    Tensor gated = O::zero_rows(O::mul(a, O::sigmoid(g)), n_valid);
    Tensor c = O::conv1d_depthwise(gated, dw_w, dw_b);
    return pw2(O::swish(norm(c)));
  }
  void collect(const std::string& p, ParamMap& m) const {
    pw1.collect(p + ".pw1", m);
    pw2.collect(p + ".pw2", m);
    m[p + ".dw_w"] = dw_w;
    m[p + ".dw_b"] = dw_b;
    norm.collect(p + ".norm", m);
  }
};

struct ConformerBlock {
  LayerNorm ln_ff1, ln_attn, ln_conv, ln_ff2, ln_out;
  FeedForward ff1, ff2;
  MultiHeadAttention attn;
  ConvModule conv;

  ConformerBlock() = default;
  ConformerBlock(std::size_t d, std::size_t heads, std::size_t ffn_units,
                 std::size_t conv_kernel, Rng& rng)
      : ln_ff1(d), ln_attn(d), ln_conv(d), ln_ff2(d), ln_out(d),
        ff1(d, ffn_units, rng), ff2(d, ffn_units, rng), attn(d, heads, rng),
        conv(d, conv_kernel, rng) {}

  Tensor operator()(const Tensor& x_in, std::size_t n_valid = 0) const {
    Tensor x = O::add(x_in, O::scale(ff1(ln_ff1(x_in)), 0.5));
    Tensor xa = ln_attn(x);
    x = O::add(x, attn(xa, xa, false, n_valid));
    x = O::add(x, conv(ln_conv(x), n_valid));
    x = O::add(x, O::scale(ff2(ln_ff2(x)), 0.5));
    return ln_out(x);
  }
  void collect(const std::string& p, ParamMap& m) const {
    ln_ff1.collect(p + ".ln_ff1", m);
    ln_attn.collect(p + ".ln_attn", m);
    ln_conv.collect(p + ".ln_conv", m);
    ln_ff2.collect(p + ".ln_ff2", m);
    ln_out.collect(p + ".ln_out", m);
    ff1.collect(p + ".ff1", m);
    ff2.collect(p + ".ff2", m);
    attn.collect(p + ".attn", m);
    conv.collect(p + ".conv", m);
  }
};

// Gated depthwise-convolution MLP branch (cgMLP).
struct CgMlp {
  Linear lin_in, lin_out;
  LayerNorm norm_gate;
  Tensor dw_w, dw_b;
  std::size_t half = 0;

  CgMlp() = default;
  CgMlp(std::size_t d, std::size_t units, std::size_t kernel, Rng& rng)
      : lin_in(d, units, rng), lin_out(units / 2, d, rng),
        norm_gate(units / 2), half(units / 2) {
    if (units % 2 != 0) throw ConfigError("cgMLP: units must be even");
    if (kernel % 2 == 0) throw ConfigError("cgMLP: kernel size must be odd");
    dw_w = Tensor::randn({kernel, half}, rng, 1.0 / std::sqrt(double(kernel)),
                         true);
    dw_b = Tensor({half}, true);
  }
  Tensor operator()(const Tensor& x, std::size_t n_valid = 0) const {
    Tensor h = O::swish(lin_in(x));
    Tensor a = O::slice_cols(h, 0, half);
    Tensor g = O::slice_cols(h, half, 2 * half);
    Tensor gate =
        O::conv1d_depthwise(O::zero_rows(norm_gate(g), n_valid), dw_w, dw_b);
    return lin_out(O::mul(a, gate));
  }
  void collect(const std::string& p, ParamMap& m) const {
    lin_in.collect(p + ".lin_in", m);
    lin_out.collect(p + ".lin_out", m);
    norm_gate.collect(p + ".norm_gate", m);
    m[p + ".dw_w"] = dw_w;
    m[p + ".dw_b"] = dw_b;
  }
};

// Attention and cgMLP branches over the same input, concatenated and merged
// by a depthwise conv plus linear projection, with a residual connection.
struct EBranchformerBlock {
  LayerNorm ln_attn, ln_mlp, ln_out;
  MultiHeadAttention attn;
  CgMlp cgmlp;
  Tensor merge_dw_w, merge_dw_b;
  Linear merge_proj;

  EBranchformerBlock() = default;
  EBranchformerBlock(std::size_t d, std::size_t heads, std::size_t cgmlp_units,
                     std::size_t kernel, Rng& rng)
      : ln_attn(d), ln_mlp(d), ln_out(d), attn(d, heads, rng),
        cgmlp(d, cgmlp_units, kernel, rng), merge_proj(2 * d, d, rng) {
    merge_dw_w = Tensor::randn({3, 2 * d}, rng, 1.0 / std::sqrt(3.0), true);
    merge_dw_b = Tensor({2 * d}, true);
  }
  Tensor operator()(const Tensor& x, std::size_t n_valid = 0) const {
    Tensor xa = ln_attn(x);
    Tensor branch_a = attn(xa, xa, false, n_valid);
    Tensor branch_g = cgmlp(ln_mlp(x), n_valid);
    Tensor cat = O::zero_rows(O::concat_cols(branch_a, branch_g), n_valid);
    Tensor merged =
        merge_proj(O::conv1d_depthwise(cat, merge_dw_w, merge_dw_b));
    return ln_out(O::add(x, merged));
  }
  void collect(const std::string& p, ParamMap& m) const {
    ln_attn.collect(p + ".ln_attn", m);
    ln_mlp.collect(p + ".ln_mlp", m);
    ln_out.collect(p + ".ln_out", m);
    attn.collect(p + ".attn", m);
    cgmlp.collect(p + ".cgmlp", m);
    m[p + ".merge_dw_w"] = merge_dw_w;
    m[p + ".merge_dw_b"] = merge_dw_b;
    merge_proj.collect(p + ".merge_proj", m);
  }
};

// Sinusoidal absolute positions, added after the front-end.
inline Tensor positional_encoding(std::size_t n, std::size_t d) {
  Tensor pe({n, d});
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t i = 0; i < d; ++i) {
      double angle =
          double(t) / std::pow(10000.0, 2.0 * double(i / 2) / double(d));
      pe.at(t, i) = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  return pe;
}

inline std::size_t subsampled_length(std::size_t t) {
  return (t + 1) / 2 == 0 ? 0 : ((t + 1) / 2 + 1) / 2;
}

// Two stride-2 convolutions over time: T frames in, ceil(ceil(T/2)/2) out.
struct Frontend {
  Tensor w1, b1, w2, b2;
  std::size_t feat_dim = 0, model_dim = 0;

  Frontend() = default;
  Frontend(std::size_t f, std::size_t d, Rng& rng) : feat_dim(f), model_dim(d) {
    w1 = Tensor::randn({3 * f, d}, rng, 1.0 / std::sqrt(3.0 * f), true);
    b1 = Tensor({d}, true);
    w2 = Tensor::randn({3 * d, d}, rng, 1.0 / std::sqrt(3.0 * d), true);
    b2 = Tensor({d}, true);
  }
  Tensor operator()(const Tensor& feats) const {
    if (feats.rank() != 2 || feats.cols() != feat_dim)
      throw ShapeError("frontend: expected [T," + std::to_string(feat_dim) +
                       "], got " + shape_str(feats.shape()));
    if (feats.rows() < 4)
      throw DataError("frontend: input too short (" +
                      std::to_string(feats.rows()) + " < 4 frames)");
    Tensor h = O::swish(O::conv1d(feats, w1, b1, 3, 2, 1));
    return O::swish(O::conv1d(h, w2, b2, 3, 2, 1));
  }
  void collect(const std::string& p, ParamMap& m) const {
    m[p + ".w1"] = w1;
    m[p + ".b1"] = b1;
    m[p + ".w2"] = w2;
    m[p + ".b2"] = b2;
  }
};

enum class EncoderVariant { kConformerLite, kEBranchformerLite };

struct EncoderConfig {
  EncoderVariant variant = EncoderVariant::kConformerLite;
  std::size_t num_blocks = 6;
  std::size_t model_dim = 64;
  std::size_t heads = 4;
  std::size_t ffn_units = 256;
  std::size_t cgmlp_units = 256;
  std::size_t conv_kernel = 15;

  void validate() const {
    if (model_dim % heads != 0)
      throw ConfigError("encoder: model_dim not divisible by heads");
    if (conv_kernel % 2 == 0)
      throw ConfigError("encoder: conv_kernel must be odd");
    if (num_blocks < 1) throw ConfigError("encoder: num_blocks must be >= 1");
  }
};

// Called after a tapped layer with (layer index, pre-conditioning output);
// returns the tensor fed to the next layer.
using TapHook = std::function<Tensor(std::size_t layer, const Tensor& h)>;

struct Encoder {
  EncoderConfig cfg;
  std::vector<ConformerBlock> conformer_blocks;
  std::vector<EBranchformerBlock> ebf_blocks;

  Encoder() = default;
  Encoder(EncoderConfig c, Rng& rng) : cfg(c) {
    cfg.validate();
    for (std::size_t i = 0; i < cfg.num_blocks; ++i) {
      if (cfg.variant == EncoderVariant::kConformerLite)
        conformer_blocks.emplace_back(cfg.model_dim, cfg.heads, cfg.ffn_units,
                                      cfg.conv_kernel, rng);
      else
        ebf_blocks.emplace_back(cfg.model_dim, cfg.heads, cfg.cgmlp_units,
                                cfg.conv_kernel, rng);
    }
  }

  // Tap layers are 1-based indices into 1..num_blocks-1; the final layer is
  // reserved for the final CTC head.
  Tensor forward(const Tensor& x, const std::set<std::size_t>& tap_layers,
                 const TapHook& hook, std::size_t n_valid = 0) const {
    for (std::size_t layer : tap_layers)
      if (layer < 1 || layer >= cfg.num_blocks)
        throw ConfigError("encoder: tap layer " + std::to_string(layer) +
                          " out of range 1.." +
                          std::to_string(cfg.num_blocks - 1));
    Tensor h = x;
    for (std::size_t i = 1; i <= cfg.num_blocks; ++i) {
      h = (cfg.variant == EncoderVariant::kConformerLite)
              ? conformer_blocks[i - 1](h, n_valid)
              : ebf_blocks[i - 1](h, n_valid);
      if (tap_layers.count(i)) h = hook(i, h);
    }
    return h;
  }

  void collect(const std::string& p, ParamMap& m) const {
    for (std::size_t i = 0; i < conformer_blocks.size(); ++i)
      conformer_blocks[i].collect(p + ".block" + std::to_string(i), m);
    for (std::size_t i = 0; i < ebf_blocks.size(); ++i)
      ebf_blocks[i].collect(p + ".block" + std::to_string(i), m);
  }
};

struct DecoderBlock {
  LayerNorm ln_self, ln_cross, ln_ff;
  MultiHeadAttention self_attn, cross_attn;
  FeedForward ff;

  DecoderBlock() = default;
  DecoderBlock(std::size_t d, std::size_t heads, std::size_t ffn_units,
               Rng& rng)
      : ln_self(d), ln_cross(d), ln_ff(d), self_attn(d, heads, rng),
        cross_attn(d, heads, rng), ff(d, ffn_units, rng) {}

  Tensor operator()(const Tensor& x_in, const Tensor& memory,
                    std::size_t mem_valid = 0) const {
    Tensor xs = ln_self(x_in);
    Tensor x = O::add(x_in, self_attn(xs, xs, true));
    x = O::add(x, cross_attn(ln_cross(x), memory, false, mem_valid));
    return O::add(x, ff(ln_ff(x)));
  }
  void collect(const std::string& p, ParamMap& m) const {
    ln_self.collect(p + ".ln_self", m);
    ln_cross.collect(p + ".ln_cross", m);
    ln_ff.collect(p + ".ln_ff", m);
    self_attn.collect(p + ".self_attn", m);
    cross_attn.collect(p + ".cross_attn", m);
    ff.collect(p + ".ff", m);
  }
};

struct DecoderConfig {
  std::size_t num_blocks = 2;
  std::size_t model_dim = 64;
  std::size_t heads = 4;
  std::size_t ffn_units = 256;
  std::size_t vocab_size = 0;  // full output space incl. tags, sos, eos

  void validate() const {
    if (model_dim % heads != 0)
      throw ConfigError("decoder: model_dim not divisible by heads");
    if (vocab_size == 0) throw ConfigError("decoder: vocab_size unset");
  }
};

// Autoregressive transformer decoder over encoder memory.
struct TransformerDecoder {
  DecoderConfig cfg;
  Tensor embed;
  std::vector<DecoderBlock> blocks;
  LayerNorm ln_final;
  Linear out;

  TransformerDecoder() = default;
  TransformerDecoder(DecoderConfig c, Rng& rng) : cfg(c) {
    cfg.validate();
    embed = Tensor::randn({cfg.vocab_size, cfg.model_dim}, rng,
                          1.0 / std::sqrt(double(cfg.model_dim)), true);
    for (std::size_t i = 0; i < cfg.num_blocks; ++i)
      blocks.emplace_back(cfg.model_dim, cfg.heads, cfg.ffn_units, rng);
    ln_final = LayerNorm(cfg.model_dim);
    out = Linear(cfg.model_dim, cfg.vocab_size, rng);
  }

  // Returns next-token log-probabilities for every prefix position:
  // row k predicts token k+1 given tokens[0..k].
  Tensor forward(const Tensor& memory, const std::vector<int>& tokens,
                 std::size_t mem_valid = 0) const {
    if (tokens.empty())
      throw ContractError("decoder: prefix must start with sos");
    Tensor x = O::add(O::embedding(embed, tokens),
                      positional_encoding(tokens.size(), cfg.model_dim));
    for (const auto& b : blocks) x = b(x, memory, mem_valid);
    return O::log_softmax_rows(out(ln_final(x)));
  }

  // Log-probabilities over the vocabulary for the next token after `prefix`.
  Tensor step(const Tensor& memory, const std::vector<int>& prefix,
              std::size_t mem_valid = 0) const {
    Tensor lp = forward(memory, prefix, mem_valid);
    return O::slice_rows(lp, lp.rows() - 1, lp.rows());
  }

  void collect(const std::string& p, ParamMap& m) const {
    m[p + ".embed"] = embed;
    for (std::size_t i = 0; i < blocks.size(); ++i)
      blocks[i].collect(p + ".block" + std::to_string(i), m);
    ln_final.collect(p + ".ln_final", m);
    out.collect(p + ".out", m);
  }
};

// Decoder-only causal transformer, the LM backbone.
struct CausalTransformer {
  DecoderConfig cfg;
  Tensor embed;
  struct SelfBlock {
    LayerNorm ln_self, ln_ff;
    MultiHeadAttention attn;
    FeedForward ff;
    SelfBlock() = default;
    SelfBlock(std::size_t d, std::size_t heads, std::size_t ffn, Rng& rng)
        : ln_self(d), ln_ff(d), attn(d, heads, rng), ff(d, ffn, rng) {}
    Tensor operator()(const Tensor& x_in) const {
      Tensor xs = ln_self(x_in);
      Tensor x = O::add(x_in, attn(xs, xs, true));
      return O::add(x, ff(ln_ff(x)));
    }
    void collect(const std::string& p, ParamMap& m) const {
      ln_self.collect(p + ".ln_self", m);
      ln_ff.collect(p + ".ln_ff", m);
      attn.collect(p + ".attn", m);
      ff.collect(p + ".ff", m);
    }
  };
  std::vector<SelfBlock> blocks;
  LayerNorm ln_final;
  Linear out;

  CausalTransformer() = default;
  CausalTransformer(DecoderConfig c, Rng& rng) : cfg(c) {
    cfg.validate();
    embed = Tensor::randn({cfg.vocab_size, cfg.model_dim}, rng,
                          1.0 / std::sqrt(double(cfg.model_dim)), true);
    for (std::size_t i = 0; i < cfg.num_blocks; ++i)
      blocks.emplace_back(cfg.model_dim, cfg.heads, cfg.ffn_units, rng);
    ln_final = LayerNorm(cfg.model_dim);
    out = Linear(cfg.model_dim, cfg.vocab_size, rng);
  }

  Tensor forward(const std::vector<int>& tokens) const {
    if (tokens.empty()) throw ContractError("lm: empty token sequence");
    Tensor x = O::add(O::embedding(embed, tokens),
                      positional_encoding(tokens.size(), cfg.model_dim));
    for (const auto& b : blocks) x = b(x);
    return O::log_softmax_rows(out(ln_final(x)));
  }

  void collect(const std::string& p, ParamMap& m) const {
    m[p + ".embed"] = embed;
    for (std::size_t i = 0; i < blocks.size(); ++i)
      blocks[i].collect(p + ".block" + std::to_string(i), m);
    ln_final.collect(p + ".ln_final", m);
    out.collect(p + ".out", m);
  }
};

inline std::vector<Tensor> param_list(const ParamMap& m) {
  std::vector<Tensor> out;
  out.reserve(m.size());
  for (const auto& [name, t] : m) out.push_back(t);
  return out;
}

}  // namespace blocks
}  // namespace mtasr
