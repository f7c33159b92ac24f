#include "pcpe/streams.hpp"

namespace pcpe {

Tensor aggregate_persona(const Tensor& entry_embs, const Tensor& w_p,
                         std::span<const std::uint8_t> mask) {
  const std::size_t l = entry_embs.rows();
  Tensor logits = reshape(matmul(entry_embs, w_p), {1, l});
  Tensor alpha = masked_softmax_last(logits, mask);
  return reshape(matmul(alpha, entry_embs), {entry_embs.cols()});
}

Tensor coded_queries(const Tensor& query, const Tensor& keys,
                     std::span<const std::uint8_t> query_mask) {
  Tensor weights = masked_softmax_last(matmul(keys, transpose(query)), query_mask);
  return matmul(weights, query);
}

Tensor persona_coded_query(const Tensor& query, const Tensor& persona_vec,
                           std::span<const std::uint8_t> query_mask) {
  Tensor key = reshape(persona_vec, {1, persona_vec.size()});
  return reshape(coded_queries(query, key, query_mask), {persona_vec.size()});
}

Tensor candidate_aware_context(const Tensor& coded, const Tensor& cands) {
  if (coded.rank() != 2) {
    throw DimensionError("candidate_aware_context: coded queries must be a matrix, got " +
                         shape_str(coded.shape()));
  }
  const bool single = cands.rank() == 1;
  Tensor c = single ? reshape(cands, {1, cands.size()}) : cands;
  Tensor out = matmul(softmax_last(matmul(c, transpose(coded))), coded);
  return single ? reshape(out, {coded.cols()}) : out;
}

StreamOutput run_streams(const Tensor& query, std::span<const std::uint8_t> query_mask,
                         const Tensor& persona_vecs, const Tensor& codes, const Tensor& cands,
                         StreamMode mode) {
  StreamOutput out;
  if (mode == StreamMode::Pcpe) {
    if (!persona_vecs.defined() || persona_vecs.rank() != 2) {
      throw ConfigError("persona-coded stream needs at least one persona entry (j >= 1)");
    }
    out.persona_vecs = persona_vecs;
    out.pc_queries = coded_queries(query, persona_vecs, query_mask);
    out.pc_context = candidate_aware_context(out.pc_queries, cands);
  } else if (!codes.defined()) {
    throw ConfigError("poly-coded baseline requires m > 0");
  }
  if (codes.defined()) {
    out.pe_queries = coded_queries(query, codes, query_mask);
    out.pe_context = candidate_aware_context(out.pe_queries, cands);
  }
  return out;
}

}  // namespace pcpe
