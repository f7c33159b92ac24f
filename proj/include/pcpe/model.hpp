#pragma once

// The Persona-Coded Poly-Encoder scorer and its two baselines.

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pcpe/corpus.hpp"
#include "pcpe/encoders.hpp"
#include "pcpe/fusion.hpp"
#include "pcpe/streams.hpp"

namespace pcpe {

enum class Baseline {
  None,      // PCPE
  Poly,      // poly-coded stream only; personas pre-fused into the query
  PcpeText,  // PCPE with key-value personas flattened to text
};

Baseline parse_baseline(std::string_view s);
std::string to_string(Baseline b);
PersonaSchema parse_schema(std::string_view s);
std::string to_string(PersonaSchema s);

struct ModelConfig {
  EncoderConfig encoder;
  Limits limits;
  PersonaSchema schema = PersonaSchema::Text;
  Baseline baseline = Baseline::None;
  /// Poly baseline only: false withholds personas from its input entirely.
  bool prefuse_personas = true;
  std::size_t m = 0;
  FusionKind fusion = FusionKind::SAttn;
  Ablation ablation = Ablation::None;

  // Filled from the vocabularies.
  std::size_t vocab_size = 0;
  std::size_t n_keys = 0;
  std::size_t n_values = 0;
  std::size_t n_speakers = 0;
  std::size_t n_segments = 2;

  bool persona_stream() const { return baseline != Baseline::Poly; }
  bool kv_persona_encoder() const {
    return schema == PersonaSchema::Kv && baseline == Baseline::None;
  }
  PersonaRouting routing() const;
  EncodeOptions encode_options() const;
  void set_vocab_sizes(const Vocabularies& v);
  void validate() const;

  std::string to_json() const;
  static ModelConfig from_json(std::string_view text);
};

/// Query-side encodings of one dialogue.
struct ContextEncoding {
  Tensor query;         // [l x d]
  Mask mask;            // l bytes
  Tensor persona_vecs;  // [j x d]; undefined for the poly baseline
};

struct CandidateEncoding {
  Tensor sentence;  // [d]
  Tensor words;     // [l_c x d]
};

class Model {
 public:
  Model(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  const NamedTensors& parameters() const { return params_; }
  std::size_t parameter_count() const;
  /// Scalar count over the persona/query/candidate encoders only.
  std::size_t encoder_parameter_count() const;

  const EncoderWeights* persona_encoder() const { return t1_.get(); }
  const EncoderWeights& query_encoder() const { return *t2_; }
  const EncoderWeights& candidate_encoder() const { return *t3_; }
  const Tensor& w_p() const { return w_p_; }
  const Tensor& codes() const { return codes_; }
  const Tensor& w_f() const { return w_f_; }

  // ---- evaluation (no tape; safe to call concurrently) ----------------------

  /// Aggregated persona vector p_j for one entry -> [d].
  Tensor persona_vector(const PersonaEntry& entry) const;
  Tensor encode_query(const TokenIds& context) const;
  CandidateEncoding encode_candidate(const TokenIds& tokens) const;
  /// Query embeddings plus freshly computed persona vectors.
  ContextEncoding encode_context(const Dialogue& d) const;
  /// Query embeddings with externally supplied persona vectors [j x d].
  ContextEncoding encode_context(const Dialogue& d, Tensor persona_vecs) const;

  ScoreRow score(const ContextEncoding& ctx, std::span<const CandidateEncoding> cands) const;
  ScoreRow rank(const Dialogue& d) const;

  /// Logits [k] for one context against k candidates. `words` stacks the
  /// candidates' word embeddings in segments of `len` rows (Col-Fuse only).
  Tensor context_logits(const Tensor& query, std::span<const std::uint8_t> query_mask,
                        const Tensor& persona_vecs, const Tensor& cands, const Tensor& words,
                        std::size_t len, std::span<const std::uint8_t> word_mask) const;

  /// Detailed stream outputs for one context against candidates [k x d].
  StreamOutput streams(const Tensor& query, std::span<const std::uint8_t> query_mask,
                       const Tensor& persona_vecs, const Tensor& cands) const;

  // ---- training ---------------------------------------------------------------

  /// In-batch logits [B x B]: row i scores dialogue rows[i] against every
  /// true response in the batch.
  Tensor batch_logits(const Batch& batch, std::span<const Dialogue> dialogues,
                      const ForwardContext& fctx) const;
  Tensor loss(const Tensor& logits) const;

  /// SHA-256 over the config and every parameter (names, shapes, values).
  std::array<std::uint8_t, 32> fingerprint() const;

 private:
  ModelConfig config_;
  std::shared_ptr<EncoderWeights> t1_, t2_, t3_;
  Tensor w_p_, codes_, w_f_, w_cat_;
  NamedTensors params_;
  std::vector<std::string> encoder_prefixes_;
};

}  // namespace pcpe
