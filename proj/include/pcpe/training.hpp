#pragma once

// Adam, the in-batch training step and the epoch loop with periodic
// validation.

#include <functional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "pcpe/metrics.hpp"
#include "pcpe/model.hpp"

namespace pcpe {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(const NamedTensors& params, AdamConfig cfg = {});

  /// Applies one update from the accumulated gradients, then clears them.
  void step();
  void zero_grad();
  std::size_t steps() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  AdamConfig cfg_;
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

/// Forward, loss, backward and one optimizer update. Non-finite values abort
/// with a NumericError carrying the step, row and logit range.
double train_step(const Model& model, const Batch& batch, std::span<const Dialogue> dialogues,
                  Adam& opt, const ForwardContext& fctx, std::size_t step);

struct TrainOptions {
  std::size_t batch_size = 32;
  std::size_t epochs = 20;
  /// 0 evaluates once per epoch.
  std::size_t eval_every_steps = 0;
  std::uint64_t seed = 1;
  /// Stop after this many evaluations without a better HR@1; 0 never stops.
  std::size_t patience = 0;
  std::size_t eval_threads = 0;
  AdamConfig adam;
};

struct TrainResult {
  MetricReport best;
  std::size_t best_step = 0;
  std::size_t steps = 0;
  std::size_t evaluations = 0;
  bool stopped_early = false;
  std::vector<double> losses;
};

using LogFn = std::function<void(const nlohmann::ordered_json&)>;
/// Called whenever validation HR@1 improves, with the model at that point.
using BestFn = std::function<void(const Model&)>;

/// Trains in place. The model ends holding its best-validation parameters.
/// With zero epochs the initial model is evaluated once.
TrainResult train_model(Model& model, std::span<const Dialogue> train,
                        std::span<const Dialogue> valid, const TrainOptions& opts,
                        const LogFn& log = {}, const BestFn& on_best = {});

}  // namespace pcpe
