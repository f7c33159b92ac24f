#pragma once

// Post-fusion of the two streams, candidate scoring, ranking and losses.

#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "pcpe/streams.hpp"
#include "pcpe/tensor.hpp"

namespace pcpe {

enum class FusionKind { SAttn, MAttn, ColFuse };

/// Untuned alternatives kept for ablation runs only.
enum class Ablation { None, Mean, Sum, Concat, Margin };

FusionKind parse_fusion(std::string_view s);
std::string to_string(FusionKind f);
Ablation parse_ablation(std::string_view s);
std::string to_string(Ablation a);

/// Convex combination of q_pc and q_pe ([k x d] each). S-Attn weights come
/// from w_f [d x 1], M-Attn weights from the candidates [k x d].
Tensor fuse_attention(const Tensor& q_pc, const Tensor& q_pe, FusionKind kind,
                      const Tensor& w_f, const Tensor& cands);

/// mean / sum / concat-projection fusions (w_cat is [2d x d] for concat).
Tensor fuse_ablation(const Tensor& q_pc, const Tensor& q_pe, Ablation kind, const Tensor& w_cat);

/// Per-row dot product of q_ctxt [k x d] with cands [k x d] -> logits [k].
Tensor attention_logits(const Tensor& q_ctxt, const Tensor& cands);

struct CandidateScore {
  double logit = 0.0;
  double score = 0.0;
};
CandidateScore score_candidate(std::span<const double> q_ctxt, std::span<const double> c);

/// ColBERT-style late interaction. `coded` is [r x d] (persona-coded then
/// poly-coded queries); `words` stacks k candidates of `len` padded rows
/// each. Returns per-candidate sums of row maxima over unmasked words [k].
Tensor colfuse_logits(const Tensor& coded, const Tensor& words, std::size_t len,
                      std::span<const std::uint8_t> word_mask);

/// Single candidate Col-Fuse score; either coded block may be undefined.
double colfuse_score(const Tensor& pc_queries, const Tensor& pe_queries, const Tensor& cand_words,
                     std::span<const std::uint8_t> mask);

/// Fused context per candidate, or undefined for Col-Fuse.
Tensor fused_context(const StreamOutput& streams, FusionKind kind, Ablation ablation,
                     const Tensor& w_f, const Tensor& w_cat, const Tensor& cands);

/// Mean softmax cross-entropy with row i's target at column i.
Tensor in_batch_loss(const Tensor& logits);
/// Mean over rows and off-diagonal columns of max(0, margin - s_ii + s_ij).
Tensor margin_loss(const Tensor& logits, double margin);

struct ScoreRow {
  std::vector<double> scores;
  std::vector<double> logits;
  std::vector<std::size_t> ranking;

  std::size_t rank_of(std::size_t candidate) const;  // 1-based
};

/// Ranking sorted by logit descending, ties to the lower index. Scores are
/// sigmoid(logit) when `sigmoid_scores`, the raw logit otherwise.
ScoreRow make_score_row(std::vector<double> logits, bool sigmoid_scores);

}  // namespace pcpe
