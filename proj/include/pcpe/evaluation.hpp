#pragma once

// Ranking a validation set and reducing it to a MetricReport.

#include <functional>
#include <span>
#include <vector>

#include "pcpe/metrics.hpp"
#include "pcpe/model.hpp"

namespace pcpe {

using RankFn = std::function<ScoreRow(const Dialogue&)>;

struct Evaluation {
  MetricReport report;
  std::vector<ScoreRow> rows;
};

/// Ranks every dialogue with `rank` on up to `threads` workers (0 picks the
/// hardware count). Results do not depend on the worker count.
Evaluation evaluate_with(std::span<const Dialogue> dialogues, const RankFn& rank,
                         std::size_t threads = 0);

Evaluation evaluate(const Model& model, std::span<const Dialogue> dialogues,
                    std::size_t threads = 0);

ExampleOutcome outcome_of(const Dialogue& d, const ScoreRow& row);

}  // namespace pcpe
