#pragma once

// The two context streams. The persona-coded stream attends the query over
// each aggregated persona entry and then lets the candidate attend over the
// resulting persona-coded queries; the poly-coded stream does the same with
// m trainable codes in place of persona entries.
//
// Candidate-dependent stages are batched: `cands` is [k x d] and every
// per-candidate output has k rows.

#include <optional>
#include <span>
#include <vector>

#include "pcpe/tensor.hpp"

namespace pcpe {

/// Self-attentive pooling of one persona entry's element embeddings [l x d]
/// with projection w_p [d x 1] -> [d].
Tensor aggregate_persona(const Tensor& entry_embs, const Tensor& w_p,
                         std::span<const std::uint8_t> mask);

/// Row r of the result is the query tokens [l_q x d] averaged under
/// softmax(keys[r] . q_i) over unmasked i. keys is [n x d] -> [n x d].
Tensor coded_queries(const Tensor& query, const Tensor& keys,
                     std::span<const std::uint8_t> query_mask);

/// Single-key form of coded_queries: [d].
Tensor persona_coded_query(const Tensor& query, const Tensor& persona_vec,
                           std::span<const std::uint8_t> query_mask);

/// softmax(c . coded_r) weighted sum of coded [n x d]. `cands` is [k x d]
/// (-> [k x d]) or a single [d] (-> [d]).
Tensor candidate_aware_context(const Tensor& coded, const Tensor& cands);

struct StreamOutput {
  Tensor persona_vecs;  // [j x d]
  Tensor pc_queries;    // [j x d]
  Tensor pe_queries;    // [m x d], undefined when m = 0
  Tensor pc_context;    // [k x d]
  Tensor pe_context;    // [k x d], undefined when m = 0

  bool has_pc() const { return pc_queries.defined(); }
  bool has_pe() const { return pe_queries.defined(); }
};

enum class StreamMode {
  Pcpe,      // persona-coded stream required, poly-coded stream iff m > 0
  PolyOnly,  // baseline: poly-coded stream only
};

/// `persona_vecs` is [j x d] (ignored for PolyOnly); `codes` is [m x d] or
/// undefined for m = 0.
StreamOutput run_streams(const Tensor& query, std::span<const std::uint8_t> query_mask,
                         const Tensor& persona_vecs, const Tensor& codes, const Tensor& cands,
                         StreamMode mode = StreamMode::Pcpe);

}  // namespace pcpe
