// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <set>

#include "chimera/selective_distillation.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace chimera;
using testutil::random_tensor;

namespace {

std::vector<std::size_t> sort_oracle(const std::vector<double>& s, std::size_t k) {
  std::vector<std::size_t> idx(s.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return s[a] > s[b]; });
  idx.resize(k);
  return idx;
}

/// Pearson chi-square with df = n-1 for n = 4 bins.
double chi2_pvalue_4(const std::vector<double>& counts, const std::vector<double>& probs) {
  double n = 0, x = 0;
  for (double c : counts) n += c;
  for (std::size_t i = 0; i < counts.size(); ++i) x += (counts[i] - n * probs[i]) * (counts[i] - n * probs[i]) / (n * probs[i]);
  return oracle::chi2_sf_df3(x);
}

}  // namespace

TEST_CASE("similarity scores") {
  CHECK(similarity_scores(Tensor({3, 3, 4}), Tensor::vector({1, 2, 3, 4})) == Tensor({9}));
  const Tensor one = Tensor::full({1, 4}, 1.0);
  CHECK(similarity_scores(one, Tensor::full({4}, 1.0))[0] == doctest::Approx(2.0));
  std::mt19937_64 rng(1);
  const Tensor f = random_tensor({3, 3, 8}, rng), c = random_tensor({8}, rng);
  const Tensor s = similarity_scores(f, c);
  const auto ref = oracle::similarity(f, c);
  REQUIRE(s.numel() == 9);
  for (std::size_t i = 0; i < 9; ++i) CHECK(std::abs(s[i] - ref[i]) <= 1e-6);
  CHECK_THROWS_AS(similarity_scores(f, Tensor({7})), std::invalid_argument);
}

TEST_CASE("gumbel_topk without noise equals the sort oracle") {
  std::mt19937_64 gen(2);
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + gen() % 40;
    std::vector<double> s(n);
    for (double& v : s) v = static_cast<double>(static_cast<int>(gen() % 7)) - 3.0;  // many ties
    const std::size_t k = 1 + gen() % n;
    CHECK(gumbel_topk(s, k, 0.07, rng, false) == sort_oracle(s, k));
  }
}

TEST_CASE("gumbel_topk returns k distinct indices and k = |S| is exhaustive") {
  Rng rng(4);
  std::mt19937_64 gen(5);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + gen() % 30;
    const Tensor s = random_tensor({n}, gen);
    const std::size_t k = 1 + gen() % n;
    const auto idx = gumbel_topk(s.values(), k, 0.07, rng, true);
    CHECK(idx.size() == k);
    CHECK(std::set<std::size_t>(idx.begin(), idx.end()).size() == k);
    for (auto i : idx) CHECK(i < n);
    auto all = gumbel_topk(s.values(), n, 0.07, rng, true);
    std::sort(all.begin(), all.end());
    std::vector<std::size_t> expect(n);
    std::iota(expect.begin(), expect.end(), 0);
    CHECK(all == expect);
  }
  const std::vector<double> s = {1, 2};
  CHECK_THROWS_AS(gumbel_topk(s, 0, 0.07, rng, true), std::invalid_argument);
  CHECK_THROWS_AS(gumbel_topk(s, 3, 0.07, rng, true), std::invalid_argument);
  CHECK_THROWS_AS(gumbel_topk(s, 1, 0.0, rng, true), std::invalid_argument);
}

TEST_CASE("gumbel_topk sampling weights form a distribution") {
  Rng rng(6);
  const std::vector<double> s = {0.1, 0.5, -0.2, 0.3};
  std::vector<double> w;
  const auto idx = gumbel_topk(s, 2, 0.07, rng, true, w);
  REQUIRE(w.size() == 4);
  CHECK(std::accumulate(w.begin(), w.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(w[idx[0]] == *std::max_element(w.begin(), w.end()));
}

TEST_CASE("single draws follow the Gumbel-max law") {
  const std::vector<double> s = {0.2, -0.4, 1.0, 0.0};
  Rng rng(7);
  std::vector<double> counts(4, 0.0);
  for (int i = 0; i < 100000; ++i) counts[gumbel_topk(s, 1, 1.0, rng, true)[0]] += 1;
  const auto p = oracle::softmax(s);
  CHECK(chi2_pvalue_4(counts, p) > 0.01);
}

TEST_CASE("aggregate_global") {
  std::mt19937_64 rng(8);
  const Tensor c = random_tensor({8}, rng);
  SUBCASE("singleton") {
    const Tensor f = random_tensor({1, 8}, rng);
    const auto [w, g] = aggregate_global(f, c);
    CHECK(w[0] == 1.0);
    CHECK(max_abs_diff(g, f.reshaped({8})) <= 1e-15);
  }
  SUBCASE("identical rows") {
    Tensor f({4, 8});
    const Tensor row = random_tensor({8}, rng);
    for (std::size_t r = 0; r < 4; ++r) std::copy(row.storage().begin(), row.storage().end(), f.row(r).begin());
    const auto [w, g] = aggregate_global(f, c);
    for (std::size_t r = 0; r < 4; ++r) CHECK(w[r] == doctest::Approx(0.25));
    CHECK(max_abs_diff(g, row) <= 1e-12);
  }
  SUBCASE("explicit-sum oracle") {
    const Tensor f = random_tensor({5, 8}, rng);
    const auto [w, g] = aggregate_global(f, c);
    const auto wr = oracle::softmax(oracle::similarity(f, c));
    double total = 0;
    for (std::size_t k = 0; k < 5; ++k) {
      CHECK(std::abs(w[k] - wr[k]) <= 1e-6);
      CHECK(w[k] >= 0.0);
      total += w[k];
    }
    CHECK(std::abs(total - 1.0) <= 1e-6);
    for (std::size_t j = 0; j < 8; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < 5; ++k) s += wr[k] * f.at(k, j);
      CHECK(std::abs(g[j] - s) <= 1e-6);
    }
  }
  ag::Tape tape;
  CHECK_THROWS_AS(aggregate_global(tape.constant(Tensor({0, 8})), tape.constant(c)), std::invalid_argument);
}

TEST_CASE("select_and_aggregate is consistent with its parts") {
  std::mt19937_64 gen(9);
  const Tensor f = random_tensor({4, 4, 8}, gen), c = random_tensor({8}, gen);
  Rng r1(10), r2(10);
  Tensor fg;
  const SelectionResult sel = select_and_aggregate(f, c, 5, 0.07, r1, true, &fg);
  const Tensor s = similarity_scores(f, c);
  CHECK(sel.indices == gumbel_topk(s.values(), 5, 0.07, r2, true));
  CHECK(sel.f_k.shape() == Shape{5, 8});
  const auto [w, g] = aggregate_global(sel.f_k, c);
  CHECK(max_abs_diff(w, sel.weights) <= 1e-15);
  CHECK(max_abs_diff(g, fg) <= 1e-15);
}

TEST_CASE("sgd_loss closed forms") {
  CHECK(sgd_loss(Tensor::matrix(1, 3, {1, 2, 3}), Tensor::matrix(1, 3, {0, 1, 0}), 0.07) == 0.0);
  const Tensor e = Tensor::matrix(2, 4, {1, 0, 0, 0, 0, 1, 0, 0});
  const double expect = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
  CHECK(sgd_loss(e, e, 1.0) == doctest::Approx(expect).epsilon(1e-12));
  CHECK(expect == doctest::Approx(0.3133).epsilon(1e-4));
  CHECK_THROWS_AS(sgd_loss(e, e, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(sgd_loss(e, Tensor({3, 4}), 1.0), std::invalid_argument);
}

TEST_CASE("sgd_loss matches the brute-force oracle and finite differences") {
  std::mt19937_64 rng(11);
  Tensor f = random_tensor({4, 8}, rng), c = random_tensor({4, 8}, rng);
  CHECK(std::abs(sgd_loss(f, c, 0.07) - oracle::infonce(f, c, 0.07)) <= 1e-8);
  CHECK(std::abs(sgd_loss(f, c, 1.0) - oracle::infonce(f, c, 1.0)) <= 1e-8);
  ag::Tape tape;
  const ag::Var fv = tape.parameter(f), cv = tape.parameter(c);
  tape.backward(sgd_loss(fv, cv, 0.5));
  const Tensor gf = tape.grad(fv), gc = tape.grad(cv);
  for (std::size_t i = 0; i < f.numel(); ++i) {
    const double fd = testutil::central_difference([&] { return sgd_loss(f, c, 0.5); }, f[i]);
    CHECK(testutil::relative_error(gf[i], fd) <= 1e-4);
    const double fdc = testutil::central_difference([&] { return sgd_loss(f, c, 0.5); }, c[i]);
    CHECK(testutil::relative_error(gc[i], fdc) <= 1e-4);
  }
}

TEST_CASE("sgd_loss properties") {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor f = random_tensor({5, 6}, rng), c = random_tensor({5, 6}, rng);
    const double l = sgd_loss(f, c, 0.07);
    CHECK(l >= 0.0);
    const std::size_t perm[] = {3, 0, 4, 1, 2};
    Tensor fp({5, 6}), cp({5, 6});
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 6; ++j) {
        fp.at(i, j) = f.at(perm[i], j);
        cp.at(i, j) = c.at(perm[i], j);
      }
    CHECK(sgd_loss(fp, cp, 0.07) == doctest::Approx(l).epsilon(1e-12));
  }
  // Logits of magnitude 1e4 stay finite.
  const Tensor big = Tensor::matrix(2, 2, {100, 0, 0, -100});
  const double l = sgd_loss(big, Tensor::matrix(2, 2, {1, 0, 0, 1}), 0.01);
  CHECK(std::isfinite(l));
  CHECK(l >= 0.0);
  const Tensor huge = Tensor::matrix(2, 2, {100, 0, 0, 100});
  CHECK(sgd_loss(huge, Tensor::matrix(2, 2, {1, 0, 0, 1}), 0.01) == 0.0);
}

TEST_CASE("decayed_k schedule") {
  DecaySchedule s;
  CHECK(decayed_k(0, s, 1000000) == 9000);
  CHECK(decayed_k(10, s, 1000000) == 8999);
  CHECK(decayed_k(0, s, 256) == 256);
  CHECK(decayed_k(5, s, 1000000) == 9000);   // 8999.5 rounds to even
  CHECK(decayed_k(15, s, 1000000) == 8998);  // 8998.5 rounds to even
  CHECK(decayed_k(1000000, s, 1000000) == 1);
  std::size_t prev = decayed_k(0, s, 5000);
  for (std::int64_t it = 1; it < 100000; it += 37) {
    const std::size_t k = decayed_k(it, s, 5000);
    CHECK(k <= prev);
    CHECK(k >= s.k_min);
    CHECK(k <= 5000);
    prev = k;
  }
  DecaySchedule none = s;
  none.mode = DecayMode::kNone;
  CHECK(decayed_k(1000, none, 1000000) == 9000);
  DecaySchedule inc = s;
  inc.mode = DecayMode::kIncrease;
  CHECK(decayed_k(10, inc, 1000000) == 9001);
  CHECK(decayed_k(10, inc, 9000) == 9000);
  CHECK(parse_decay_mode("increase") == DecayMode::kIncrease);
  CHECK(to_string(DecayMode::kNone) == "none");
  CHECK_THROWS_AS(parse_decay_mode("linear"), std::invalid_argument);
}
