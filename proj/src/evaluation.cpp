#include "pcpe/evaluation.hpp"

#include "pcpe/parallel.hpp"

namespace pcpe {

ExampleOutcome outcome_of(const Dialogue& d, const ScoreRow& row) {
  ExampleOutcome o;
  o.rank_of_true = row.rank_of(d.true_index);
  const auto& top = d.candidates.at(row.ranking.front());
  const auto& truth = d.candidates.at(d.true_index);
  o.f1 = token_f1(top, truth);
  o.bleu4 = bleu4(top, truth);
  return o;
}

Evaluation evaluate_with(std::span<const Dialogue> dialogues, const RankFn& rank,
                         std::size_t threads) {
  if (dialogues.empty()) throw InputError("evaluate: no dialogues");
  Evaluation ev;
  ev.rows.resize(dialogues.size());
  parallel_for(dialogues.size(), threads, [&](std::size_t i) { ev.rows[i] = rank(dialogues[i]); });

  std::vector<ExampleOutcome> outcomes;
  outcomes.reserve(dialogues.size());
  for (std::size_t i = 0; i < dialogues.size(); ++i) {
    outcomes.push_back(outcome_of(dialogues[i], ev.rows[i]));
  }
  ev.report = aggregate(outcomes);
  return ev;
}

Evaluation evaluate(const Model& model, std::span<const Dialogue> dialogues, std::size_t threads) {
  return evaluate_with(dialogues, [&](const Dialogue& d) { return model.rank(d); }, threads);
}

}  // namespace pcpe
