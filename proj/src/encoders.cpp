#include "pcpe/encoders.hpp"

#include <algorithm>

namespace pcpe {

namespace {

constexpr double kInitStd = 0.02;
constexpr double kLayerNormEps = 1e-5;

Tensor ones(std::size_t n) { return Tensor::full({n}, 1.0, true); }
Tensor zeros(std::size_t n) { return Tensor::zeros({n}, true); }

std::vector<LayerWeights> make_layers(const EncoderConfig& cfg, std::mt19937_64& rng) {
  const std::size_t d = cfg.d, f = cfg.d * cfg.ffn_mult;
  std::vector<LayerWeights> layers;
  for (std::size_t i = 0; i < cfg.n_layers; ++i) {
    LayerWeights l;
    l.ln1_gain = ones(d);
    l.ln1_bias = zeros(d);
    l.w_qkv = Tensor::normal({d, 3 * d}, kInitStd, rng);
    l.b_qkv = zeros(3 * d);
    l.w_out = Tensor::normal({d, d}, kInitStd, rng);
    l.b_out = zeros(d);
    l.ln2_gain = ones(d);
    l.ln2_bias = zeros(d);
    l.w_ff1 = Tensor::normal({d, f}, kInitStd, rng);
    l.b_ff1 = zeros(f);
    l.w_ff2 = Tensor::normal({f, d}, kInitStd, rng);
    l.b_ff2 = zeros(d);
    layers.push_back(std::move(l));
  }
  return layers;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add_bias(matmul(x, w), b);
}

/// Pre-norm transformer stack over n padded sequences of length len.
Tensor run_layers(const EncoderWeights& w, const EncoderConfig& cfg, Tensor x, std::size_t n,
                  std::size_t len, const Mask& mask, const ForwardContext& ctx) {
  if (w.input_gain.defined()) x = layer_norm(x, w.input_gain, w.input_bias, kLayerNormEps);
  for (const auto& l : w.layers) {
    Tensor h = layer_norm(x, l.ln1_gain, l.ln1_bias, kLayerNormEps);
    Tensor att = self_attention(linear(h, l.w_qkv, l.b_qkv), n, len, cfg.n_heads, mask);
    x = x + ctx.maybe_dropout(linear(att, l.w_out, l.b_out));
    h = layer_norm(x, l.ln2_gain, l.ln2_bias, kLayerNormEps);
    Tensor ff = linear(gelu(linear(h, l.w_ff1, l.b_ff1)), l.w_ff2, l.b_ff2);
    x = x + ctx.maybe_dropout(ff);
  }
  return x;
}

}  // namespace

void EncoderConfig::validate(const Limits& limits) const {
  if (d == 0 || n_heads == 0 || d % n_heads != 0) {
    throw ConfigError("encoder: d=" + std::to_string(d) + " must be a positive multiple of n_heads=" +
                      std::to_string(n_heads));
  }
  if (ffn_mult == 0) throw ConfigError("encoder: ffn_mult must be positive");
  const std::size_t longest = std::max({limits.l_q, limits.l_p, limits.l_c});
  if (max_positions < longest) {
    throw ConfigError("encoder: max_positions=" + std::to_string(max_positions) +
                      " is shorter than the longest input (" + std::to_string(longest) + ")");
  }
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw ConfigError("encoder: dropout must be in [0, 1)");
}

std::shared_ptr<EncoderWeights> EncoderWeights::make_text(const EncoderConfig& cfg,
                                                          std::size_t vocab_size,
                                                          std::size_t n_segments,
                                                          std::mt19937_64& rng) {
  auto w = std::make_shared<EncoderWeights>();
  w->input = EncoderInput::Text;
  w->tokens = Tensor::normal({vocab_size, cfg.d}, kInitStd, rng);
  w->positions = Tensor::normal({cfg.max_positions, cfg.d}, kInitStd, rng);
  w->segments = Tensor::normal({n_segments, cfg.d}, kInitStd, rng);
  w->layers = make_layers(cfg, rng);
  return w;
}

std::shared_ptr<EncoderWeights> EncoderWeights::make_kv(const EncoderConfig& cfg,
                                                        std::size_t n_keys, std::size_t n_values,
                                                        std::size_t n_speakers,
                                                        std::mt19937_64& rng) {
  auto w = std::make_shared<EncoderWeights>();
  w->input = EncoderInput::Kv;
  w->keys = Tensor::normal({n_keys, cfg.d}, kInitStd, rng);
  w->values = Tensor::normal({n_values, cfg.d}, kInitStd, rng);
  w->speakers = Tensor::normal({n_speakers, cfg.d}, kInitStd, rng);
  w->layers = make_layers(cfg, rng);
  if (cfg.n_layers > 0) {
    w->input_gain = ones(cfg.d);
    w->input_bias = zeros(cfg.d);
  }
  return w;
}

void EncoderWeights::collect(const std::string& prefix, NamedTensors& out) const {
  auto put = [&](const std::string& name, const Tensor& t) {
    if (t.defined()) out.emplace_back(prefix + "." + name, t);
  };
  put("tokens", tokens);
  put("positions", positions);
  put("segments", segments);
  put("keys", keys);
  put("values", values);
  put("speakers", speakers);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const std::string p = "layer" + std::to_string(i) + ".";
    put(p + "ln1.gain", l.ln1_gain);
    put(p + "ln1.bias", l.ln1_bias);
    put(p + "attn.w_qkv", l.w_qkv);
    put(p + "attn.b_qkv", l.b_qkv);
    put(p + "attn.w_out", l.w_out);
    put(p + "attn.b_out", l.b_out);
    put(p + "ln2.gain", l.ln2_gain);
    put(p + "ln2.bias", l.ln2_bias);
    put(p + "ffn.w1", l.w_ff1);
    put(p + "ffn.b1", l.b_ff1);
    put(p + "ffn.w2", l.w_ff2);
    put(p + "ffn.b2", l.b_ff2);
  }
  put("input_norm.gain", input_gain);
  put("input_norm.bias", input_bias);
}

Tensor ForwardContext::maybe_dropout(const Tensor& x) const {
  if (!training || dropout_rate <= 0.0 || rng == nullptr) return x;
  return dropout(x, dropout_rate, *rng);
}

PaddedKv pad_kv(std::span<const std::vector<KvTriple>> entries) {
  PaddedKv p;
  p.n = entries.size();
  for (const auto& e : entries) p.len = std::max(p.len, e.size());
  if (p.n == 0 || p.len == 0) throw InputError("pad_kv: nothing to pad");
  p.keys.assign(p.n * p.len, 0);
  p.values.assign(p.n * p.len, 0);
  p.speakers.assign(p.n * p.len, 0);
  p.mask.assign(p.n * p.len, 0);
  for (std::size_t i = 0; i < p.n; ++i) {
    for (std::size_t j = 0; j < entries[i].size(); ++j) {
      const std::size_t k = i * p.len + j;
      p.keys[k] = entries[i][j].key;
      p.values[k] = entries[i][j].value;
      p.speakers[k] = entries[i][j].speaker;
      p.mask[k] = 1;
    }
  }
  return p;
}

Tensor encode_padded_text(const EncoderWeights& w, const EncoderConfig& cfg,
                          const PaddedSeqs& seqs, std::span<const std::size_t> segments,
                          const ForwardContext& ctx) {
  if (w.input != EncoderInput::Text) throw ConfigError("text input routed to a key-value encoder");
  if (seqs.len > w.positions.dim(0)) {
    throw InputError("encode_text: sequence length " + std::to_string(seqs.len) +
                     " exceeds max_positions " + std::to_string(w.positions.dim(0)));
  }
  if (!segments.empty() && segments.size() != seqs.n) {
    throw DimensionError("encode_text: one segment id per sequence required");
  }
  TokenIds pos(seqs.n * seqs.len);
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i % seqs.len;
  Tensor x = embedding(w.tokens, seqs.ids) + embedding(w.positions, pos);
  if (!segments.empty()) {
    TokenIds seg(seqs.n * seqs.len);
    for (std::size_t i = 0; i < seg.size(); ++i) seg[i] = segments[i / seqs.len];
    x = x + embedding(w.segments, seg);
  }
  return run_layers(w, cfg, std::move(x), seqs.n, seqs.len, seqs.mask, ctx);
}

Tensor encode_padded_kv(const EncoderWeights& w, const EncoderConfig& cfg, const PaddedKv& kv,
                        const ForwardContext& ctx) {
  if (w.input != EncoderInput::Kv) throw ConfigError("key-value input routed to a text encoder");
  Tensor x = embedding(w.keys, kv.keys) + embedding(w.values, kv.values) +
             embedding(w.speakers, kv.speakers);
  return run_layers(w, cfg, std::move(x), kv.n, kv.len, kv.mask, ctx);
}

Tensor encode_text(const TokenIds& tokens, const Mask& mask, const EncoderWeights& w,
                   const EncoderConfig& cfg, const ForwardContext& ctx) {
  if (tokens.empty() || mask.size() != tokens.size()) {
    throw InputError("encode_text: need a non-empty sequence with one mask byte per token");
  }
  PaddedSeqs p{1, tokens.size(), tokens, mask, {tokens.size()}};
  return encode_padded_text(w, cfg, p, {}, ctx);
}

Tensor encode_persona_text(const TokenIds& tokens, std::size_t segment, const EncoderWeights& w,
                           const EncoderConfig& cfg, const ForwardContext& ctx) {
  if (tokens.empty()) throw InputError("encode_persona_text: empty persona entry");
  PaddedSeqs p{1, tokens.size(), tokens, Mask(tokens.size(), 1), {tokens.size()}};
  const std::size_t seg[] = {segment};
  return encode_padded_text(w, cfg, p, seg, ctx);
}

Tensor encode_persona_kv(const std::vector<KvTriple>& pairs, const EncoderWeights& w,
                         const EncoderConfig& cfg, const ForwardContext& ctx) {
  const std::vector<KvTriple> one[] = {pairs};
  return encode_padded_kv(w, cfg, pad_kv(one), ctx);
}

Tensor reduce_candidate(const Tensor& word_embs, std::span<const std::uint8_t> mask) {
  return masked_mean_rows(word_embs, mask);
}

}  // namespace pcpe
