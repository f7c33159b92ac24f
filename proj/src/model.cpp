#include "pcpe/model.hpp"

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include <numeric>

namespace pcpe {

using json = nlohmann::ordered_json;

namespace {
constexpr double kInitStd = 0.02;
}

Baseline parse_baseline(std::string_view s) {
  if (s == "none") return Baseline::None;
  if (s == "poly") return Baseline::Poly;
  if (s == "pcpe-text") return Baseline::PcpeText;
  throw ConfigError("unknown baseline '" + std::string(s) + "' (none, poly, pcpe-text)");
}

std::string to_string(Baseline b) {
  switch (b) {
    case Baseline::None: return "none";
    case Baseline::Poly: return "poly";
    case Baseline::PcpeText: return "pcpe-text";
  }
  return "?";
}

PersonaSchema parse_schema(std::string_view s) {
  if (s == "text" || s == "text_persona") return PersonaSchema::Text;
  if (s == "kv" || s == "kv_persona") return PersonaSchema::Kv;
  throw ConfigError("unknown schema '" + std::string(s) + "' (text, kv)");
}

std::string to_string(PersonaSchema s) { return s == PersonaSchema::Text ? "text" : "kv"; }

// ---- ModelConfig -------------------------------------------------------------

PersonaRouting ModelConfig::routing() const {
  switch (baseline) {
    case Baseline::Poly:
      return prefuse_personas ? PersonaRouting::Prefuse : PersonaRouting::Withhold;
    case Baseline::PcpeText:
      return PersonaRouting::FlattenToText;
    case Baseline::None:
      break;
  }
  return PersonaRouting::Structured;
}

EncodeOptions ModelConfig::encode_options() const { return {schema, routing(), limits}; }

void ModelConfig::set_vocab_sizes(const Vocabularies& v) {
  vocab_size = v.words.size();
  if (v.attributes) {
    n_keys = v.attributes->keys().size();
    n_values = v.attributes->values().size();
    n_speakers = v.attributes->speakers().size();
  }
}

void ModelConfig::validate() const {
  encoder.validate(limits);
  if (limits.l_q == 0 || limits.l_p == 0 || limits.l_c == 0) {
    throw ConfigError("l_q, l_p and l_c must be positive");
  }
  if (vocab_size <= Vocab::kReserved) throw ConfigError("model: word vocabulary is empty");
  if (baseline == Baseline::Poly && m == 0) {
    throw ConfigError("the poly-encoder baseline requires m > 0");
  }
  if (kv_persona_encoder() && (n_keys == 0 || n_values == 0 || n_speakers == 0)) {
    throw ConfigError("model: key-value personas need key, value and speaker vocabularies");
  }
  if (encoder.share_all && kv_persona_encoder()) {
    throw ConfigError("share_all needs text personas: a key-value T1 cannot share a text encoder");
  }
  if (ablation == Ablation::Margin && fusion == FusionKind::ColFuse) {
    // Margin loss works on any logits; nothing to reject.
  }
}

std::string ModelConfig::to_json() const {
  json j;
  j["d"] = encoder.d;
  j["n_layers"] = encoder.n_layers;
  j["n_heads"] = encoder.n_heads;
  j["ffn_mult"] = encoder.ffn_mult;
  j["max_positions"] = encoder.max_positions;
  j["dropout"] = encoder.dropout_rate;
  j["share_t2_t3"] = encoder.share_t2_t3;
  j["share_all"] = encoder.share_all;
  j["l_q"] = limits.l_q;
  j["l_p"] = limits.l_p;
  j["l_c"] = limits.l_c;
  j["schema"] = to_string(schema);
  j["baseline"] = to_string(baseline);
  j["prefuse_personas"] = prefuse_personas;
  j["m"] = m;
  j["fusion"] = to_string(fusion);
  j["ablation"] = to_string(ablation);
  j["vocab_size"] = vocab_size;
  j["n_keys"] = n_keys;
  j["n_values"] = n_values;
  j["n_speakers"] = n_speakers;
  j["n_segments"] = n_segments;
  return j.dump();
}

ModelConfig ModelConfig::from_json(std::string_view text) {
  try {
    json j = json::parse(text);
    ModelConfig c;
    c.encoder.d = j.at("d");
    c.encoder.n_layers = j.at("n_layers");
    c.encoder.n_heads = j.at("n_heads");
    c.encoder.ffn_mult = j.at("ffn_mult");
    c.encoder.max_positions = j.at("max_positions");
    c.encoder.dropout_rate = j.at("dropout");
    c.encoder.share_t2_t3 = j.at("share_t2_t3");
    c.encoder.share_all = j.at("share_all");
    c.limits.l_q = j.at("l_q");
    c.limits.l_p = j.at("l_p");
    c.limits.l_c = j.at("l_c");
    c.schema = parse_schema(j.at("schema").get<std::string>());
    c.baseline = parse_baseline(j.at("baseline").get<std::string>());
    c.prefuse_personas = j.at("prefuse_personas");
    c.m = j.at("m");
    c.fusion = parse_fusion(j.at("fusion").get<std::string>());
    c.ablation = parse_ablation(j.at("ablation").get<std::string>());
    c.vocab_size = j.at("vocab_size");
    c.n_keys = j.at("n_keys");
    c.n_values = j.at("n_values");
    c.n_speakers = j.at("n_speakers");
    c.n_segments = j.at("n_segments");
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config block: ") + e.what());
  }
}

// ---- Model -------------------------------------------------------------------

Model::Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  const auto& enc = config_.encoder;
  const std::size_t d = enc.d;
  std::mt19937_64 rng(seed);

  if (enc.share_all) {
    t2_ = EncoderWeights::make_text(enc, config_.vocab_size, config_.n_segments, rng);
    t3_ = t2_;
    if (config_.persona_stream()) t1_ = t2_;
    t2_->collect("shared_enc", params_);
    encoder_prefixes_.push_back("shared_enc.");
  } else {
    if (config_.kv_persona_encoder()) {
      t1_ = EncoderWeights::make_kv(enc, config_.n_keys, config_.n_values, config_.n_speakers, rng);
    } else if (config_.persona_stream()) {
      t1_ = EncoderWeights::make_text(enc, config_.vocab_size, config_.n_segments, rng);
    }
    if (t1_) {
      t1_->collect("persona_enc", params_);
      encoder_prefixes_.push_back("persona_enc.");
    }
    t2_ = EncoderWeights::make_text(enc, config_.vocab_size, config_.n_segments, rng);
    if (enc.share_t2_t3) {
      t3_ = t2_;
      t2_->collect("text_enc", params_);
      encoder_prefixes_.push_back("text_enc.");
    } else {
      t3_ = EncoderWeights::make_text(enc, config_.vocab_size, config_.n_segments, rng);
      t2_->collect("query_enc", params_);
      t3_->collect("cand_enc", params_);
      encoder_prefixes_.push_back("query_enc.");
      encoder_prefixes_.push_back("cand_enc.");
    }
  }
  if (config_.persona_stream()) {
    w_p_ = Tensor::normal({d, 1}, kInitStd, rng);
    params_.emplace_back("w_p", w_p_);
  }
  if (config_.m > 0) {
    codes_ = Tensor::normal({config_.m, d}, kInitStd, rng);
    params_.emplace_back("codes", codes_);
  }
  if (config_.fusion == FusionKind::SAttn) {
    w_f_ = Tensor::normal({d, 1}, kInitStd, rng);
    params_.emplace_back("w_f", w_f_);
  }
  if (config_.ablation == Ablation::Concat) {
    w_cat_ = Tensor::normal({2 * d, d}, kInitStd, rng);
    params_.emplace_back("w_cat", w_cat_);
  }
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params_) n += t.size();
  return n;
}

std::size_t Model::encoder_parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params_) {
    for (const auto& p : encoder_prefixes_) {
      if (name.starts_with(p)) n += t.size();
    }
  }
  return n;
}

Tensor Model::persona_vector(const PersonaEntry& entry) const {
  if (!t1_) throw ConfigError("this model has no persona encoder");
  NoGradGuard guard;
  const auto& enc = config_.encoder;
  Tensor embs = entry.is_kv() ? encode_persona_kv(entry.kv, *t1_, enc)
                              : encode_persona_text(entry.tokens, entry.segment, *t1_, enc);
  return aggregate_persona(embs, w_p_, Mask(embs.rows(), 1));
}

Tensor Model::encode_query(const TokenIds& context) const {
  NoGradGuard guard;
  return encode_text(context, Mask(context.size(), 1), *t2_, config_.encoder);
}

CandidateEncoding Model::encode_candidate(const TokenIds& tokens) const {
  NoGradGuard guard;
  Mask mask(tokens.size(), 1);
  CandidateEncoding c;
  c.words = encode_text(tokens, mask, *t3_, config_.encoder);
  c.sentence = reduce_candidate(c.words, mask);
  return c;
}

ContextEncoding Model::encode_context(const Dialogue& d) const {
  Tensor personas;
  if (config_.persona_stream()) {
    if (d.personas.empty()) {
      throw DataError("dialogue " + d.id + ": the persona-coded stream needs at least one persona entry");
    }
    std::vector<Tensor> vecs;
    for (const auto& e : d.personas) vecs.push_back(persona_vector(e));
    NoGradGuard guard;
    personas = concat_rows(vecs);
  }
  return encode_context(d, std::move(personas));
}

ContextEncoding Model::encode_context(const Dialogue& d, Tensor persona_vecs) const {
  ContextEncoding c;
  c.query = encode_query(d.context);
  c.mask.assign(d.context.size(), 1);
  c.persona_vecs = std::move(persona_vecs);
  return c;
}

StreamOutput Model::streams(const Tensor& query, std::span<const std::uint8_t> query_mask,
                            const Tensor& persona_vecs, const Tensor& cands) const {
  return run_streams(query, query_mask, persona_vecs, codes_, cands,
                     config_.persona_stream() ? StreamMode::Pcpe : StreamMode::PolyOnly);
}

Tensor Model::context_logits(const Tensor& query, std::span<const std::uint8_t> query_mask,
                             const Tensor& persona_vecs, const Tensor& cands, const Tensor& words,
                             std::size_t len, std::span<const std::uint8_t> word_mask) const {
  StreamOutput s = streams(query, query_mask, persona_vecs, cands);
  if (config_.fusion == FusionKind::ColFuse) {
    std::vector<Tensor> parts;
    if (s.has_pc()) parts.push_back(s.pc_queries);
    if (s.has_pe()) parts.push_back(s.pe_queries);
    Tensor coded = parts.size() == 1 ? parts[0] : concat_rows(parts);
    return colfuse_logits(coded, words, len, word_mask);
  }
  Tensor ctx = fused_context(s, config_.fusion, config_.ablation, w_f_, w_cat_, cands);
  return attention_logits(ctx, cands);
}

ScoreRow Model::score(const ContextEncoding& ctx, std::span<const CandidateEncoding> cands) const {
  if (cands.empty()) throw InputError("score: no candidates");
  NoGradGuard guard;
  std::vector<Tensor> sentences;
  for (const auto& c : cands) sentences.push_back(c.sentence);
  Tensor c_mat = concat_rows(sentences);

  Tensor words;
  Mask word_mask;
  std::size_t len = 0;
  if (config_.fusion == FusionKind::ColFuse) {
    for (const auto& c : cands) len = std::max(len, c.words.rows());
    std::vector<Tensor> blocks;
    for (const auto& c : cands) {
      const std::size_t l = c.words.rows();
      blocks.push_back(c.words);
      if (l < len) blocks.push_back(Tensor::zeros({len - l, config_.encoder.d}));
      word_mask.insert(word_mask.end(), l, 1);
      word_mask.insert(word_mask.end(), len - l, 0);
    }
    words = concat_rows(blocks);
  }
  Tensor logits = context_logits(ctx.query, ctx.mask, ctx.persona_vecs, c_mat, words, len, word_mask);
  std::vector<double> l(logits.data().begin(), logits.data().end());
  return make_score_row(std::move(l), config_.fusion != FusionKind::ColFuse);
}

ScoreRow Model::rank(const Dialogue& d) const {
  ContextEncoding ctx = encode_context(d);
  std::vector<CandidateEncoding> cands;
  cands.reserve(d.candidates.size());
  for (const auto& c : d.candidates) cands.push_back(encode_candidate(c));
  return score(ctx, cands);
}

Tensor Model::batch_logits(const Batch& batch, std::span<const Dialogue> dialogues,
                           const ForwardContext& fctx) const {
  if (!batch.pooled) throw ConfigError("batch_logits needs a pooled training batch");
  const auto& enc = config_.encoder;
  const std::size_t b = batch.rows.size();
  const std::size_t lq = batch.contexts.len, lc = batch.candidates.len;

  Tensor q_all = encode_padded_text(*t2_, enc, batch.contexts, {}, fctx);
  Tensor w_all = encode_padded_text(*t3_, enc, batch.candidates, {}, fctx);
  std::vector<Tensor> sentences;
  for (std::size_t i = 0; i < batch.candidates.n; ++i) {
    std::span<const std::uint8_t> m(batch.candidates.mask.data() + i * lc, lc);
    sentences.push_back(reduce_candidate(rows(w_all, i * lc, lc), m));
  }
  Tensor c_mat = concat_rows(sentences);

  // Persona entries of every row are encoded together, then pooled per entry.
  std::vector<Tensor> persona_rows(b);
  if (config_.persona_stream()) {
    std::vector<std::size_t> owner;
    std::vector<TokenIds> texts;
    std::vector<std::size_t> segs;
    std::vector<std::vector<KvTriple>> kvs;
    for (std::size_t r = 0; r < b; ++r) {
      const auto& d = dialogues[batch.rows[r]];
      if (d.personas.empty()) {
        throw DataError("dialogue " + d.id + ": the persona-coded stream needs at least one persona entry");
      }
      for (const auto& e : d.personas) {
        owner.push_back(r);
        if (e.is_kv()) {
          kvs.push_back(e.kv);
        } else {
          texts.push_back(e.tokens);
          segs.push_back(e.segment);
        }
      }
    }
    if (!kvs.empty() && !texts.empty()) throw DataError("batch mixes text and key-value personas");
    Tensor embs;
    std::size_t lp = 0;
    Mask pmask;
    if (!kvs.empty()) {
      PaddedKv p = pad_kv(kvs);
      embs = encode_padded_kv(*t1_, enc, p, fctx);
      lp = p.len;
      pmask = std::move(p.mask);
    } else {
      PaddedSeqs p = pad_sequences(texts);
      embs = encode_padded_text(*t1_, enc, p, segs, fctx);
      lp = p.len;
      pmask = std::move(p.mask);
    }
    std::vector<std::vector<Tensor>> grouped(b);
    for (std::size_t e = 0; e < owner.size(); ++e) {
      std::span<const std::uint8_t> m(pmask.data() + e * lp, lp);
      grouped[owner[e]].push_back(aggregate_persona(rows(embs, e * lp, lp), w_p_, m));
    }
    for (std::size_t r = 0; r < b; ++r) persona_rows[r] = concat_rows(grouped[r]);
  }

  std::vector<Tensor> logit_rows;
  for (std::size_t r = 0; r < b; ++r) {
    std::span<const std::uint8_t> qm(batch.contexts.mask.data() + r * lq, lq);
    logit_rows.push_back(context_logits(rows(q_all, r * lq, lq), qm, persona_rows[r], c_mat, w_all,
                                        lc, batch.candidates.mask));
  }
  return concat_rows(logit_rows);
}

Tensor Model::loss(const Tensor& logits) const {
  if (config_.ablation == Ablation::Margin) return margin_loss(logits, 1.0);
  return in_batch_loss(logits);
}

std::array<std::uint8_t, 32> Model::fingerprint() const {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) {
    throw Error("fingerprint: SHA-256 unavailable");
  }
  auto feed = [&](const void* p, std::size_t n) { EVP_DigestUpdate(ctx.get(), p, n); };
  const std::string cfg = config_.to_json();
  feed(cfg.data(), cfg.size());
  for (const auto& [name, t] : params_) {
    feed(name.data(), name.size());
    for (auto e : t.shape()) {
      std::uint64_t v = e;
      feed(&v, sizeof v);
    }
    feed(t.data().data(), t.size() * sizeof(double));
  }
  std::array<std::uint8_t, 32> out{};
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), out.data(), &len);
  return out;
}

}  // namespace pcpe
