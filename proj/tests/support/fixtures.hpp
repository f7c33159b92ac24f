#pragma once

// Small synthetic setups shared by the unit and acceptance tests.

#include <utility>
#include <vector>

#include "pcpe/corpus.hpp"
#include "pcpe/model.hpp"

namespace pcpe::testing {

struct Setup {
  SynthCorpus raw;
  Vocabularies vocabs;
  ModelConfig config;
  std::vector<Dialogue> train;
  std::vector<Dialogue> valid;
};

/// Synthetic KV corpus encoded for `config` (vocabulary sizes are filled in).
inline Setup make_setup(const SynthSpec& spec, ModelConfig config) {
  Setup s;
  s.raw = generate_synthetic(spec);
  s.vocabs = build_vocabularies(s.raw.train, config.schema, 1);
  config.set_vocab_sizes(s.vocabs);
  s.config = config;
  s.train = encode_dialogues(s.raw.train, s.vocabs, config.encode_options());
  s.valid = encode_dialogues(s.raw.valid, s.vocabs, config.encode_options());
  return s;
}

/// d=8, two heads, l_q=l_p=l_c=4, no dropout.
inline ModelConfig tiny_config(std::size_t m, FusionKind fusion) {
  ModelConfig c;
  c.schema = PersonaSchema::Kv;
  c.encoder.d = 8;
  c.encoder.n_heads = 2;
  c.encoder.max_positions = 8;
  c.encoder.dropout_rate = 0.0;
  c.limits = {4, 4, 4};
  c.m = m;
  c.fusion = fusion;
  return c;
}

inline SynthSpec tiny_spec(std::size_t n_train = 12, std::size_t n_valid = 4) {
  SynthSpec s;
  s.n_dialogues = n_train;
  s.n_valid = n_valid;
  s.n_values_per_attribute = 4;
  s.n_attributes = 2;
  s.vocab_size = 10;
  s.n_candidates = 5;
  return s;
}

}  // namespace pcpe::testing
