#include "pcpe/training.hpp"

#include <cmath>
#include <limits>
#include <random>

#include "pcpe/evaluation.hpp"

namespace pcpe {

Adam::Adam(const NamedTensors& params, AdamConfig cfg) : cfg_(cfg) {
  for (const auto& [name, t] : params) {
    params_.push_back(t);
    m_.emplace_back(t.size(), 0.0);
    v_.emplace_back(t.size(), 0.0);
  }
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t p = 0; p < params_.size(); ++p) {
    Tensor& t = params_[p];
    if (!t.has_grad()) continue;
    auto g = t.grad();
    auto w = t.mutable_data();
    auto& m = m_[p];
    auto& v = v_[p];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      w[i] -= cfg_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
    }
  }
  zero_grad();
}

void Adam::zero_grad() {
  for (auto& t : params_) t.zero_grad();
}

double train_step(const Model& model, const Batch& batch, std::span<const Dialogue> dialogues,
                  Adam& opt, const ForwardContext& fctx, std::size_t step) {
  Tensor logits;
  try {
    logits = model.batch_logits(batch, dialogues, fctx);
    Tensor loss = model.loss(logits);
    const double value = loss.item();
    backward(loss);
    opt.step();
    return value;
  } catch (const NumericError& e) {
    opt.zero_grad();
    std::string msg = "non-finite value at step " + std::to_string(step);
    if (logits.defined()) {
      double lo = std::numeric_limits<double>::infinity(), hi = -lo;
      std::size_t worst = 0;
      double worst_abs = -1.0;
      const std::size_t cols = logits.cols();
      for (std::size_t i = 0; i < logits.size(); ++i) {
        const double x = logits.at(i);
        lo = std::min(lo, x);
        hi = std::max(hi, x);
        if (std::abs(x) > worst_abs) {
          worst_abs = std::abs(x);
          worst = i / cols;
        }
      }
      msg += ", row " + std::to_string(worst) + " (dialogue " +
             dialogues[batch.rows.at(worst)].id + "), logit range [" + std::to_string(lo) + ", " +
             std::to_string(hi) + "]";
    }
    throw NumericError(msg + ": " + e.what());
  }
}

TrainResult train_model(Model& model, std::span<const Dialogue> train,
                        std::span<const Dialogue> valid, const TrainOptions& opts, const LogFn& log,
                        const BestFn& on_best) {
  if (valid.empty()) throw InputError("train: empty validation set");
  TrainResult result;
  Adam opt(model.parameters(), opts.adam);
  std::mt19937_64 dropout_rng(opts.seed ^ 0x9e3779b97f4a7c15ULL);
  ForwardContext fctx{true, model.config().encoder.dropout_rate, &dropout_rng};

  std::vector<std::vector<double>> best_values;
  bool have_best = false;
  std::size_t since_best = 0;

  auto run_eval = [&](std::size_t epoch) {
    Evaluation ev = evaluate(model, valid, opts.eval_threads);
    ++result.evaluations;
    const bool better = !have_best || ev.report.hr1 > result.best.hr1;
    if (log) {
      nlohmann::ordered_json j;
      j["event"] = "eval";
      j["step"] = result.steps;
      j["epoch"] = epoch;
      j["report"] = nlohmann::ordered_json::parse(ev.report.to_json());
      j["best"] = better;
      log(j);
    }
    if (better) {
      have_best = true;
      since_best = 0;
      result.best = ev.report;
      result.best_step = result.steps;
      best_values.clear();
      for (const auto& [name, t] : model.parameters()) {
        best_values.emplace_back(t.data().begin(), t.data().end());
      }
      if (on_best) on_best(model);
    } else {
      ++since_best;
    }
    return opts.patience > 0 && since_best >= opts.patience;
  };

  if (opts.epochs == 0) {
    run_eval(0);
    return result;
  }

  bool stop = false;
  for (std::size_t epoch = 1; epoch <= opts.epochs && !stop; ++epoch) {
    const auto batches = make_batches(train, opts.batch_size, opts.seed * 1000003ULL + epoch,
                                      BatchMode::Train);
    if (batches.empty()) throw ConfigError("train: fewer dialogues than one batch");
    for (const auto& batch : batches) {
      const double loss = train_step(model, batch, train, opt, fctx, result.steps + 1);
      ++result.steps;
      result.losses.push_back(loss);
      if (log) {
        nlohmann::ordered_json j;
        j["event"] = "step";
        j["step"] = result.steps;
        j["epoch"] = epoch;
        j["loss"] = loss;
        j["lr"] = opts.adam.lr;
        log(j);
      }
      if (opts.eval_every_steps > 0 && result.steps % opts.eval_every_steps == 0) {
        if ((stop = run_eval(epoch))) break;
      }
    }
    if (!stop && opts.eval_every_steps == 0) stop = run_eval(epoch);
  }
  if (opts.eval_every_steps > 0 && !stop &&
      result.steps % opts.eval_every_steps != 0) {
    run_eval(opts.epochs);
  }
  result.stopped_early = stop;

  for (std::size_t p = 0; p < best_values.size(); ++p) {
    Tensor handle = model.parameters()[p].second;
    std::copy(best_values[p].begin(), best_values[p].end(), handle.mutable_data().begin());
  }
  return result;
}

}  // namespace pcpe
