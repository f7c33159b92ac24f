#include "pcpe/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace pcpe {

FusionKind parse_fusion(std::string_view s) {
  if (s == "s-attn") return FusionKind::SAttn;
  if (s == "m-attn") return FusionKind::MAttn;
  if (s == "col-fuse") return FusionKind::ColFuse;
  throw ConfigError("unknown fusion '" + std::string(s) + "' (s-attn, m-attn, col-fuse)");
}

std::string to_string(FusionKind f) {
  switch (f) {
    case FusionKind::SAttn: return "s-attn";
    case FusionKind::MAttn: return "m-attn";
    case FusionKind::ColFuse: return "col-fuse";
  }
  return "?";
}

Ablation parse_ablation(std::string_view s) {
  if (s == "none") return Ablation::None;
  if (s == "mean") return Ablation::Mean;
  if (s == "sum") return Ablation::Sum;
  if (s == "concat") return Ablation::Concat;
  if (s == "margin") return Ablation::Margin;
  throw ConfigError("unknown ablation '" + std::string(s) + "' (none, mean, sum, concat, margin)");
}

std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::None: return "none";
    case Ablation::Mean: return "mean";
    case Ablation::Sum: return "sum";
    case Ablation::Concat: return "concat";
    case Ablation::Margin: return "margin";
  }
  return "?";
}

Tensor fuse_attention(const Tensor& q_pc, const Tensor& q_pe, FusionKind kind, const Tensor& w_f,
                      const Tensor& cands) {
  const std::size_t k = q_pc.rows();
  Tensor a, b;
  switch (kind) {
    case FusionKind::SAttn:
      a = matmul(q_pc, w_f);
      b = matmul(q_pe, w_f);
      break;
    case FusionKind::MAttn:
      a = reshape(rowwise_dot(cands, q_pc), {k, 1});
      b = reshape(rowwise_dot(cands, q_pe), {k, 1});
      break;
    case FusionKind::ColFuse:
      throw ConfigError("fuse_attention: Col-Fuse has no fused context vector");
  }
  Tensor w = softmax_last(concat_cols({a, b}));
  return scale_rows(q_pc, reshape(cols(w, 0, 1), {k})) +
         scale_rows(q_pe, reshape(cols(w, 1, 1), {k}));
}

Tensor fuse_ablation(const Tensor& q_pc, const Tensor& q_pe, Ablation kind, const Tensor& w_cat) {
  switch (kind) {
    case Ablation::Mean: return scale(q_pc + q_pe, 0.5);
    case Ablation::Sum: return q_pc + q_pe;
    case Ablation::Concat: return matmul(concat_cols({q_pc, q_pe}), w_cat);
    default: throw ConfigError("fuse_ablation: not a fusion ablation");
  }
}

Tensor attention_logits(const Tensor& q_ctxt, const Tensor& cands) {
  return rowwise_dot(q_ctxt, cands);
}

CandidateScore score_candidate(std::span<const double> q_ctxt, std::span<const double> c) {
  if (q_ctxt.size() != c.size()) {
    throw DimensionError("score_candidate: " + std::to_string(q_ctxt.size()) + " vs " +
                         std::to_string(c.size()));
  }
  double logit = 0.0;
  for (std::size_t i = 0; i < c.size(); ++i) logit += q_ctxt[i] * c[i];
  return {logit, sigmoid(Tensor::scalar(logit)).item()};
}

Tensor colfuse_logits(const Tensor& coded, const Tensor& words, std::size_t len,
                      std::span<const std::uint8_t> word_mask) {
  Tensor sim = matmul(coded, transpose(words));
  return sum_rows(masked_segment_max(sim, len, word_mask));
}

double colfuse_score(const Tensor& pc_queries, const Tensor& pe_queries, const Tensor& cand_words,
                     std::span<const std::uint8_t> mask) {
  std::vector<Tensor> parts;
  if (pc_queries.defined()) parts.push_back(pc_queries);
  if (pe_queries.defined()) parts.push_back(pe_queries);
  if (parts.empty()) throw InputError("colfuse_score: j + m must be at least 1");
  Tensor coded = parts.size() == 1 ? parts[0] : concat_rows(parts);
  return colfuse_logits(coded, cand_words, cand_words.rows(), mask).item();
}

Tensor fused_context(const StreamOutput& s, FusionKind kind, Ablation ablation, const Tensor& w_f,
                     const Tensor& w_cat, const Tensor& cands) {
  if (kind == FusionKind::ColFuse) return {};
  if (!s.has_pc()) return s.pe_context;
  // With m = 0 the context is the persona-coded stream alone.
  if (!s.has_pe()) return s.pc_context;
  if (ablation == Ablation::Mean || ablation == Ablation::Sum || ablation == Ablation::Concat) {
    return fuse_ablation(s.pc_context, s.pe_context, ablation, w_cat);
  }
  return fuse_attention(s.pc_context, s.pe_context, kind, w_f, cands);
}

Tensor in_batch_loss(const Tensor& logits) {
  if (logits.rank() != 2 || logits.dim(0) != logits.dim(1)) {
    throw DimensionError("in_batch_loss: expected a square logit matrix, got " +
                         shape_str(logits.shape()));
  }
  std::vector<std::size_t> targets(logits.dim(0));
  std::iota(targets.begin(), targets.end(), 0);
  return softmax_cross_entropy(logits, targets);
}

Tensor margin_loss(const Tensor& logits, double margin) {
  const std::size_t b = logits.dim(0);
  if (b < 2 || logits.rank() != 2 || logits.dim(1) != b) {
    throw DimensionError("margin_loss: expected a square logit matrix with B >= 2");
  }
  // positives[i, j] = s_ii for every j.
  std::vector<Tensor> diag_rows;
  for (std::size_t i = 0; i < b; ++i) {
    Tensor sii = cols(rows(logits, i, 1), i, 1);
    diag_rows.push_back(concat_cols(std::vector<Tensor>(b, sii)));
  }
  Tensor hinge = relu(add_scalar(logits - concat_rows(diag_rows), margin));
  // Diagonal terms contribute exactly `margin` each; remove them.
  Tensor total = add_scalar(sum(hinge), -margin * static_cast<double>(b));
  return scale(total, 1.0 / static_cast<double>(b * (b - 1)));
}

std::size_t ScoreRow::rank_of(std::size_t candidate) const {
  auto it = std::find(ranking.begin(), ranking.end(), candidate);
  if (it == ranking.end()) throw InputError("rank_of: unknown candidate index");
  return static_cast<std::size_t>(it - ranking.begin()) + 1;
}

ScoreRow make_score_row(std::vector<double> logits, bool sigmoid_scores) {
  ScoreRow row;
  row.ranking.resize(logits.size());
  std::iota(row.ranking.begin(), row.ranking.end(), 0);
  std::stable_sort(row.ranking.begin(), row.ranking.end(),
                   [&](std::size_t a, std::size_t b) { return logits[a] > logits[b]; });
  row.scores.reserve(logits.size());
  for (double l : logits) {
    row.scores.push_back(sigmoid_scores ? sigmoid(Tensor::scalar(l)).item() : l);
  }
  row.logits = std::move(logits);
  return row;
}

}  // namespace pcpe
