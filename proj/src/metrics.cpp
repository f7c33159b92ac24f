#include "pcpe/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>

#include <nlohmann/json.hpp>

#include "pcpe/errors.hpp"

namespace pcpe {

namespace {

void require_ranks(std::span<const std::size_t> ranks, const char* what) {
  if (ranks.empty()) throw InputError(std::string(what) + ": no examples");
  for (auto r : ranks) {
    if (r == 0) throw InputError(std::string(what) + ": ranks are 1-based");
  }
}

template <typename T>
double f1_impl(std::span<const T> pred, std::span<const T> truth) {
  if (pred.empty() && truth.empty()) return 1.0;
  if (pred.empty() || truth.empty()) return 0.0;
  std::map<T, std::size_t> counts;
  for (const auto& t : truth) ++counts[t];
  std::size_t overlap = 0;
  for (const auto& t : pred) {
    auto it = counts.find(t);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++overlap;
    }
  }
  if (overlap == 0) return 0.0;
  const double p = static_cast<double>(overlap) / static_cast<double>(pred.size());
  const double r = static_cast<double>(overlap) / static_cast<double>(truth.size());
  return 2.0 * p * r / (p + r);
}

template <typename T>
std::map<std::vector<T>, std::size_t> ngrams(std::span<const T> s, std::size_t n) {
  std::map<std::vector<T>, std::size_t> out;
  for (std::size_t i = 0; i + n <= s.size(); ++i) ++out[std::vector<T>(s.begin() + i, s.begin() + i + n)];
  return out;
}

template <typename T>
double bleu_impl(std::span<const T> pred, std::span<const T> truth) {
  if (pred.empty() && truth.empty()) return 1.0;
  if (pred.empty() || truth.empty()) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= 4; ++n) {
    const std::size_t total = pred.size() >= n ? pred.size() - n + 1 : 0;
    if (total == 0) continue;  // p_n = 1
    auto ref = ngrams(truth, n);
    std::size_t matched = 0;
    for (const auto& [g, c] : ngrams(pred, n)) {
      auto it = ref.find(g);
      if (it != ref.end()) matched += std::min(c, it->second);
    }
    double p;
    if (matched > 0) {
      p = static_cast<double>(matched) / static_cast<double>(total);
    } else if (n == 1) {
      return 0.0;
    } else {
      p = 1.0 / static_cast<double>(total + 1);
    }
    log_sum += std::log(p);
  }
  const double c = static_cast<double>(pred.size()), r = static_cast<double>(truth.size());
  const double bp = c >= r ? 1.0 : std::exp(1.0 - r / c);
  return bp * std::exp(log_sum / 4.0);
}

}  // namespace

double hit_rate_at_k(std::span<const std::size_t> ranks, std::size_t k) {
  require_ranks(ranks, "hit_rate_at_k");
  const auto hits = std::count_if(ranks.begin(), ranks.end(), [k](std::size_t r) { return r <= k; });
  return static_cast<double>(hits) / static_cast<double>(ranks.size());
}

double mrr(std::span<const std::size_t> ranks) {
  require_ranks(ranks, "mrr");
  double s = 0.0;
  for (auto r : ranks) s += 1.0 / static_cast<double>(r);
  return s / static_cast<double>(ranks.size());
}

double token_f1(std::span<const std::size_t> p, std::span<const std::size_t> t) { return f1_impl(p, t); }
double token_f1(std::span<const std::string> p, std::span<const std::string> t) { return f1_impl(p, t); }
double bleu4(std::span<const std::size_t> p, std::span<const std::size_t> t) { return bleu_impl(p, t); }
double bleu4(std::span<const std::string> p, std::span<const std::string> t) { return bleu_impl(p, t); }

MetricReport aggregate(std::span<const ExampleOutcome> outcomes) {
  std::vector<std::size_t> ranks;
  ranks.reserve(outcomes.size());
  MetricReport r;
  for (const auto& o : outcomes) {
    ranks.push_back(o.rank_of_true);
    r.f1 += o.f1;
    r.bleu4 += o.bleu4;
  }
  r.hr1 = hit_rate_at_k(ranks, 1);
  r.hr5 = hit_rate_at_k(ranks, 5);
  r.mrr = mrr(ranks);
  r.n_examples = outcomes.size();
  r.f1 /= static_cast<double>(r.n_examples);
  r.bleu4 /= static_cast<double>(r.n_examples);
  return r;
}

std::string MetricReport::to_json() const {
  nlohmann::ordered_json j;
  j["hr1"] = hr1;
  j["hr5"] = hr5;
  j["mrr"] = mrr;
  j["f1"] = f1;
  j["bleu4"] = bleu4;
  j["n_examples"] = n_examples;
  return j.dump();
}

std::string MetricReport::to_table() const {
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "metric      value\n"
                "hr@1     %8.4f\n"
                "hr@5     %8.4f\n"
                "mrr      %8.4f\n"
                "f1       %8.4f\n"
                "bleu-4   %8.4f\n"
                "examples %8zu\n",
                hr1, hr5, mrr, f1, bleu4, n_examples);
  return buf;
}

}  // namespace pcpe
