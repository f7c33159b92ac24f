#pragma once

// Retrieval and text-overlap metrics and their aggregate report.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "pcpe/corpus.hpp"

namespace pcpe {

/// Fraction of ranks (1-based) that are <= k. Empty input is an InputError.
double hit_rate_at_k(std::span<const std::size_t> ranks, std::size_t k);
double mrr(std::span<const std::size_t> ranks);

/// Multiset unigram-overlap F1. Both empty gives 1, one empty gives 0.
double token_f1(std::span<const std::size_t> predicted, std::span<const std::size_t> truth);
double token_f1(std::span<const std::string> predicted, std::span<const std::string> truth);

/// Sentence BLEU-4: clipped n-gram precisions for n = 1..4, add-one
/// smoothing of zero matches for n >= 2, brevity penalty.
double bleu4(std::span<const std::size_t> predicted, std::span<const std::size_t> truth);
double bleu4(std::span<const std::string> predicted, std::span<const std::string> truth);

struct MetricReport {
  double hr1 = 0.0;
  double hr5 = 0.0;
  double mrr = 0.0;
  double f1 = 0.0;
  double bleu4 = 0.0;
  std::size_t n_examples = 0;

  std::string to_json() const;
  std::string to_table() const;
};

/// Per-example outcome feeding a report.
struct ExampleOutcome {
  std::size_t rank_of_true = 0;  // 1-based
  double f1 = 0.0;
  double bleu4 = 0.0;
};

/// Means in example order.
MetricReport aggregate(std::span<const ExampleOutcome> outcomes);

}  // namespace pcpe
