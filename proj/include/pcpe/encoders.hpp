#pragma once

// Transformer encoders: T1 (persona, text or key-value input), T2 (query)
// and T3 (candidate), plus the candidate word-to-sentence reduction.

#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "pcpe/corpus.hpp"
#include "pcpe/tensor.hpp"

namespace pcpe {

struct EncoderConfig {
  std::size_t d = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t ffn_mult = 4;
  std::size_t max_positions = 64;
  double dropout_rate = 0.1;
  bool share_t2_t3 = true;
  bool share_all = false;

  /// Throws ConfigError when d is not divisible by n_heads or the position
  /// table cannot hold the longest input.
  void validate(const Limits& limits) const;
};

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

struct LayerWeights {
  Tensor ln1_gain, ln1_bias;
  Tensor w_qkv, b_qkv;
  Tensor w_out, b_out;
  Tensor ln2_gain, ln2_bias;
  Tensor w_ff1, b_ff1;
  Tensor w_ff2, b_ff2;
};

enum class EncoderInput { Text, Kv };

struct EncoderWeights {
  EncoderInput input = EncoderInput::Text;
  // Text input.
  Tensor tokens;     // [V x d]
  Tensor positions;  // [max_positions x d]
  Tensor segments;   // [n_segments x d]
  // Key-value input (order-free: no position table).
  Tensor keys;
  Tensor values;
  Tensor speakers;
  std::vector<LayerWeights> layers;
  Tensor input_gain, input_bias;  // KV input with at least one layer

  static std::shared_ptr<EncoderWeights> make_text(const EncoderConfig& cfg,
                                                   std::size_t vocab_size,
                                                   std::size_t n_segments,
                                                   std::mt19937_64& rng);
  static std::shared_ptr<EncoderWeights> make_kv(const EncoderConfig& cfg, std::size_t n_keys,
                                                 std::size_t n_values, std::size_t n_speakers,
                                                 std::mt19937_64& rng);

  void collect(const std::string& prefix, NamedTensors& out) const;
};

/// Dropout state for one forward pass. Eval passes use the default (off).
struct ForwardContext {
  bool training = false;
  double dropout_rate = 0.0;
  std::mt19937_64* rng = nullptr;

  Tensor maybe_dropout(const Tensor& x) const;
};

/// KV entries right-padded to a common pair count.
struct PaddedKv {
  std::size_t n = 0;
  std::size_t len = 0;
  TokenIds keys, values, speakers;
  Mask mask;
};

PaddedKv pad_kv(std::span<const std::vector<KvTriple>> entries);

/// Contextual embeddings [(n*len) x d] for padded text. `segments` is either
/// empty or holds one segment id per sequence.
Tensor encode_padded_text(const EncoderWeights& w, const EncoderConfig& cfg,
                          const PaddedSeqs& seqs, std::span<const std::size_t> segments,
                          const ForwardContext& ctx);
Tensor encode_padded_kv(const EncoderWeights& w, const EncoderConfig& cfg, const PaddedKv& kv,
                        const ForwardContext& ctx);

/// Single sequence -> [l x d]. Masked positions still get rows, but they are
/// never attended to.
Tensor encode_text(const TokenIds& tokens, const Mask& mask, const EncoderWeights& w,
                   const EncoderConfig& cfg, const ForwardContext& ctx = {});
Tensor encode_persona_text(const TokenIds& tokens, std::size_t segment, const EncoderWeights& w,
                           const EncoderConfig& cfg, const ForwardContext& ctx = {});
Tensor encode_persona_kv(const std::vector<KvTriple>& pairs, const EncoderWeights& w,
                         const EncoderConfig& cfg, const ForwardContext& ctx = {});

/// Masked mean of candidate word embeddings -> [d].
Tensor reduce_candidate(const Tensor& word_embs, std::span<const std::uint8_t> mask);

}  // namespace pcpe
