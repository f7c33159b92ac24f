#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "pcpe/fusion.hpp"

using namespace pcpe;

namespace {

void near(const Tensor& t, std::vector<double> want, double tol) {
  REQUIRE(t.size() == want.size());
  for (std::size_t i = 0; i < want.size(); ++i) CHECK(std::abs(t.at(i) - want[i]) <= tol);
}

std::vector<std::vector<double>> as_rows(const Tensor& t) {
  std::vector<std::vector<double>> out(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) out[r][c] = t.at(r, c);
  return out;
}

}  // namespace

TEST_CASE("fuse_attention examples") {
  Tensor q = Tensor::matrix(1, 3, {0.3, -1.2, 2.0});
  Tensor c = Tensor::matrix(1, 3, {1, 1, 1});
  near(fuse_attention(q, q, FusionKind::SAttn, Tensor::matrix(3, 1, {4, 2, -1}), c), {0.3, -1.2, 2.0},
       1e-15);
  near(fuse_attention(q, q, FusionKind::MAttn, {}, c), {0.3, -1.2, 2.0}, 1e-15);

  Tensor pc = Tensor::matrix(1, 2, {1, 0}), pe = Tensor::matrix(1, 2, {0, 1});
  near(fuse_attention(pc, pe, FusionKind::SAttn, Tensor::zeros({2, 1}), c), {0.5, 0.5}, 1e-15);
  const double w = std::exp(4.0) / (std::exp(4.0) + 1.0);
  near(fuse_attention(pc, pe, FusionKind::MAttn, {}, Tensor::matrix(1, 2, {4, 0})), {w, 1 - w}, 1e-12);
  CHECK(std::abs(w - 0.982) < 1e-3);
  CHECK_THROWS_AS(fuse_attention(pc, pe, FusionKind::ColFuse, {}, c), ConfigError);
}

TEST_CASE("fusion output is convex in its inputs") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor pc = Tensor::normal({3, 5}, 1.0, rng), pe = Tensor::normal({3, 5}, 1.0, rng);
    Tensor wf = Tensor::normal({5, 1}, 1.0, rng), c = Tensor::normal({3, 5}, 1.0, rng);
    for (auto kind : {FusionKind::SAttn, FusionKind::MAttn}) {
      Tensor out = fuse_attention(pc, pe, kind, wf, c);
      for (std::size_t r = 0; r < 3; ++r) {
        for (std::size_t k = 0; k < 5; ++k) {
          const double lo = std::min(pc.at(r, k), pe.at(r, k));
          const double hi = std::max(pc.at(r, k), pe.at(r, k));
          CHECK(out.at(r, k) >= lo - 1e-12);
          CHECK(out.at(r, k) <= hi + 1e-12);
        }
      }
    }
  }
}

TEST_CASE("score_candidate examples") {
  const std::vector<double> a{1, 0}, b{0, 1};
  auto s = score_candidate(a, b);
  CHECK(s.logit == 0.0);
  CHECK(s.score == 0.5);
  auto u = score_candidate(a, a);
  CHECK(u.logit == 1.0);
  CHECK(std::abs(u.score - 0.7310585786300049) < 1e-12);
  const std::vector<double> q{0.4, -2.0, 1.5}, c{1.0, 0.25, -3.0}, neg{-1.0, -0.25, 3.0};
  auto p = score_candidate(q, c), n = score_candidate(q, neg);
  CHECK(n.logit == -p.logit);
  CHECK(std::abs(n.score - (1.0 - p.score)) < 1e-15);
  CHECK_THROWS_AS(score_candidate(q, a), DimensionError);
}

TEST_CASE("colfuse_score examples") {
  CHECK(colfuse_score(Tensor::matrix(1, 2, {2, 3}), {}, Tensor::matrix(1, 2, {-1, 4}), Mask{1}) ==
        10.0);
  Tensor q = Tensor::matrix(2, 2, {1, 0, 0, 1});
  Tensor words = Tensor::matrix(2, 2, {1, 0, 1, 1});
  CHECK(colfuse_score(q, {}, words, Mask{1, 1}) == 2.0);
  CHECK(colfuse_score(rows(q, 0, 1), rows(q, 1, 1), words, Mask{1, 1}) == 2.0);
  Tensor dup = Tensor::matrix(3, 2, {1, 0, 1, 1, 1, 1});
  CHECK(colfuse_score(q, {}, dup, Mask{1, 1, 1}) == 2.0);
  // A masked word never wins even when it would dominate.
  Tensor big = Tensor::matrix(2, 2, {1, 0, 100, 100});
  CHECK(colfuse_score(q, {}, big, Mask{1, 0}) == 1.0);
  CHECK_THROWS_AS(colfuse_score(q, {}, words, Mask{0, 0}), InputError);
  CHECK_THROWS_AS(colfuse_score({}, {}, words, Mask{1, 1}), InputError);
}

TEST_CASE("colfuse_score matches the naive maxsim sum") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<std::size_t> rows_d(1, 6), len_d(1, 8), dim_d(1, 8);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t r = rows_d(rng), l = len_d(rng), d = dim_d(rng);
    const std::size_t j = std::uniform_int_distribution<std::size_t>(0, r)(rng);
    Tensor coded = Tensor::normal({r, d}, 1.0, rng);
    Tensor words = Tensor::normal({l, d}, 1.0, rng);
    Mask mask(l);
    for (auto& b : mask) b = std::bernoulli_distribution(0.7)(rng);
    mask[std::uniform_int_distribution<std::size_t>(0, l - 1)(rng)] = 1;
    Tensor pc = j ? rows(coded, 0, j) : Tensor{};
    Tensor pe = j < r ? rows(coded, j, r - j) : Tensor{};
    const double got = colfuse_score(pc, pe, words, mask);
    const double want = testing::naive_colfuse(as_rows(coded), as_rows(words), mask);
    CHECK(std::abs(got - want) <= 1e-12);
  }
}

TEST_CASE("in-batch loss examples") {
  for (std::size_t b : {2u, 5u, 32u}) {
    CHECK(std::abs(in_batch_loss(Tensor::full({b, b}, 0.7)).item() - std::log(double(b))) < 1e-14);
  }
  Tensor sat = Tensor::full({4, 4}, -20.0);
  for (std::size_t i = 0; i < 4; ++i) sat.mutable_data()[i * 4 + i] = 20.0;
  CHECK(in_batch_loss(sat).item() < 1e-8);
  const double want = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
  CHECK(std::abs(in_batch_loss(Tensor::matrix(2, 2, {1, 0, 0, 1})).item() - want) < 1e-14);
  CHECK(std::abs(want - 0.3133) < 1e-4);
  CHECK_THROWS_AS(in_batch_loss(Tensor::zeros({2, 3})), DimensionError);
}

TEST_CASE("margin loss") {
  CHECK(margin_loss(Tensor::full({3, 3}, 2.0), 1.0).item() == doctest::Approx(1.0));
  CHECK(margin_loss(Tensor::matrix(2, 2, {5, 0, 0, 5}), 1.0).item() == 0.0);
  // Row 0: max(0, 1 - 1 + 2) = 2; row 1: max(0, 1 - 0 + 0) = 1.
  CHECK(margin_loss(Tensor::matrix(2, 2, {1, 2, 0, 0}), 1.0).item() == doctest::Approx(1.5));
  CHECK_THROWS_AS(margin_loss(Tensor::zeros({1, 1}), 1.0), DimensionError);
}

TEST_CASE("loss gradients match finite differences") {
  std::mt19937_64 rng(3);
  Tensor logits = Tensor::normal({4, 4}, 1.0, rng, true);
  auto ce = testing::check_gradients([&] { return in_batch_loss(logits); }, {{"logits", logits}});
  CHECK(ce.max_rel_error < 1e-6);
  auto mg = testing::check_gradients([&] { return margin_loss(logits, 1.0); }, {{"logits", logits}});
  CHECK(mg.max_rel_error < 1e-6);
}

TEST_CASE("score rows rank by logit with ties to the lower index") {
  auto one = make_score_row({0.3}, true);
  CHECK(one.ranking == std::vector<std::size_t>{0});
  auto dup = make_score_row({1.0, 2.0, 1.0, 2.0}, true);
  CHECK(dup.ranking == std::vector<std::size_t>{1, 3, 0, 2});
  CHECK(dup.scores[1] == dup.scores[3]);
  CHECK(dup.rank_of(0) == 3);
  CHECK_THROWS_AS(dup.rank_of(9), InputError);
  auto raw = make_score_row({-4.0, 7.5}, false);
  CHECK(raw.scores == std::vector<double>{-4.0, 7.5});

  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 3.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> logits(9);
    for (auto& l : logits) l = std::round(n(rng));
    auto row = make_score_row(logits, true);
    auto by_score = make_score_row(row.scores, false);
    CHECK(by_score.ranking == row.ranking);
    for (std::size_t i = 0; i < logits.size(); ++i) {
      CHECK(row.rank_of(i) == testing::brute_rank(logits, i));
      CHECK(row.scores[i] > 0.0);
      CHECK(row.scores[i] < 1.0);
    }
  }
}

TEST_CASE("fused_context routes by stream availability") {
  StreamOutput s;
  s.pc_queries = s.pc_context = Tensor::matrix(1, 2, {1, 2});
  CHECK(fused_context(s, FusionKind::SAttn, Ablation::None, {}, {}, {}).at(1) == 2.0);
  CHECK_FALSE(fused_context(s, FusionKind::ColFuse, Ablation::None, {}, {}, {}).defined());
  s.pe_queries = s.pe_context = Tensor::matrix(1, 2, {3, 4});
  near(fused_context(s, FusionKind::SAttn, Ablation::Mean, {}, {}, {}), {2, 3}, 0);
  near(fused_context(s, FusionKind::SAttn, Ablation::Sum, {}, {}, {}), {4, 6}, 0);
  Tensor w_cat = Tensor::matrix(4, 2, {1, 0, 0, 1, 1, 0, 0, 1});
  near(fused_context(s, FusionKind::SAttn, Ablation::Concat, {}, w_cat, {}), {4, 6}, 0);
}
