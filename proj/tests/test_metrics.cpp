#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "temde/metrics.hpp"

using namespace temde;

namespace {

// Brute-force oracle: the best relevant rank under the same comparator
// (descending score, ascending id on ties), computed without sorting.
std::size_t oracle_best_rank(const std::vector<double>& row,
                             const std::vector<std::size_t>& relevant) {
  std::size_t best = row.size() + 1;
  for (std::size_t r : relevant) {
    std::size_t ahead = 0;
    for (std::size_t g = 0; g < row.size(); ++g) {
      if (row[g] > row[r] || (row[g] == row[r] && g < r)) ++ahead;
    }
    best = std::min(best, ahead + 1);
  }
  return best;
}

}  // namespace

TEST_CASE("recall hand cases") {
  // Single query, relevant item lands at rank 3.
  Tensor<double> scores({1, 5}, {0.9, 0.8, 0.7, 0.6, 0.5});
  auto results = rank_all(scores, {{2}});
  CHECK(recall_at_k(results, 5) == 1.0);
  CHECK(recall_at_k(results, 2) == 0.0);

  // Every query's relevant item at rank 1.
  Tensor<double> diag({3, 3}, {9, 0, 0, 0, 9, 0, 0, 0, 9});
  auto all = rank_all(diag, {{0}, {1}, {2}});
  CHECK(recall_at_k(all, 1) == 1.0);
}

TEST_CASE("mrr hand cases") {
  // Ranks 1, 2 and 4.
  Tensor<double> scores({3, 4},
                        {9, 0, 0, 0,   //
                         9, 8, 0, 0,   // relevant second
                         9, 8, 7, 6});  // relevant fourth
  auto results = rank_all(scores, {{0}, {1}, {3}});
  CHECK(mrr(results) == doctest::Approx((1.0 + 0.5 + 0.25) / 3).epsilon(1e-12));
  CHECK(mrr(results) == doctest::Approx(0.58333).epsilon(1e-4));

  auto ones = rank_all(Tensor<double>({2, 2}, {5, 0, 0, 5}), {{0}, {1}});
  CHECK(mrr(ones) == 1.0);
}

TEST_CASE("rank_all basics") {
  SUBCASE("one by one matrix") {
    auto r = rank_all(Tensor<double>({1, 1}, {0.3}), {{0}});
    REQUIRE(r.size() == 1);
    CHECK(r[0].ranked == std::vector<std::size_t>{0});
    CHECK(recall_at_k(r, 1) == 1.0);
  }
  SUBCASE("ties broken by ascending gallery id") {
    auto r = rank_all(Tensor<double>({1, 4}, {0.5, 0.7, 0.7, 0.5}), {{3}});
    CHECK(r[0].ranked == std::vector<std::size_t>{1, 2, 0, 3});
  }
  SUBCASE("contract errors") {
    Tensor<double> s({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK_THROWS_AS(rank_all(s, {{0}}), ContractError);           // missing query
    CHECK_THROWS_AS(rank_all(s, {{0}, {}}), ContractError);       // empty set
    CHECK_THROWS_AS(rank_all(s, {{0}, {7}}), ContractError);      // bad id
    auto ok = rank_all(s, {{0}, {1}});
    CHECK_THROWS_AS(recall_at_k(ok, 0), ContractError);
    CHECK_THROWS_AS(recall_at_k(ok, 4), ContractError);
    CHECK_THROWS_AS(mrr(std::vector<RankingResult>{}), ContractError);
  }
}

TEST_CASE("agreement with the argsort oracle on a large random matrix") {
  std::mt19937_64 rng(42);
  std::size_t q = 50, g = 200;
  auto scores = Tensor<double>::uniform({q, g}, rng, -1, 1);
  std::vector<std::vector<std::size_t>> rel(q);
  std::uniform_int_distribution<std::size_t> pick(0, g - 1);
  for (auto& r : rel) r = {pick(rng)};
  auto results = rank_all(scores, rel);
  for (std::size_t i = 0; i < q; ++i) {
    std::vector<double> row(scores.data().begin() + i * g,
                            scores.data().begin() + (i + 1) * g);
    auto expect = oracle_best_rank(row, rel[i]);
    std::size_t got = 0;
    for (std::size_t j = 0; j < g; ++j) {
      if (results[i].ranked[j] == rel[i][0]) {
        got = j + 1;
        break;
      }
    }
    CHECK(got == expect);
  }
}

TEST_CASE("metrics equal brute-force oracles on random instances") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    std::uniform_int_distribution<std::size_t> qd(1, 8), gd(1, 12);
    std::size_t q = qd(rng), g = gd(rng);
    // Coarse scores so ties actually happen.
    std::uniform_int_distribution<int> sd(0, 4);
    std::vector<double> values(q * g);
    for (auto& v : values) v = sd(rng);
    Tensor<double> scores({q, g}, values);
    std::vector<std::vector<std::size_t>> rel(q);
    std::uniform_int_distribution<std::size_t> pick(0, g - 1);
    std::uniform_int_distribution<std::size_t> count(1, std::min<std::size_t>(3, g));
    for (auto& r : rel) {
      std::size_t n = count(rng);
      for (std::size_t i = 0; i < n; ++i) {
        std::size_t id = pick(rng);
        if (std::find(r.begin(), r.end(), id) == r.end()) r.push_back(id);
      }
      if (r.empty()) r.push_back(pick(rng));
    }
    auto results = rank_all(scores, rel);

    for (std::size_t k = 1; k <= g; ++k) {
      std::size_t hits = 0;
      for (std::size_t i = 0; i < q; ++i) {
        std::vector<double> row(values.begin() + i * g,
                                values.begin() + (i + 1) * g);
        if (oracle_best_rank(row, rel[i]) <= k) ++hits;
      }
      CHECK(recall_at_k(results, k) == double(hits) / double(q));
    }
    double oracle_mrr = 0;
    for (std::size_t i = 0; i < q; ++i) {
      std::vector<double> row(values.begin() + i * g,
                              values.begin() + (i + 1) * g);
      oracle_mrr += 1.0 / double(oracle_best_rank(row, rel[i]));
    }
    CHECK(mrr(results) == doctest::Approx(oracle_mrr / q).epsilon(1e-12));
  }
}

TEST_CASE("metric properties") {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    std::size_t q = 6, g = 15;
    auto scores = Tensor<double>::randn({q, g}, rng, 1.0);
    std::vector<std::vector<std::size_t>> rel(q);
    std::uniform_int_distribution<std::size_t> pick(0, g - 1);
    for (auto& r : rel) r = {pick(rng)};
    auto results = rank_all(scores, rel);

    // Monotone in k.
    double prev = 0;
    for (std::size_t k = 1; k <= g; ++k) {
      double r = recall_at_k(results, k);
      CHECK(r >= prev);
      prev = r;
    }

    // MRR upper bound: rank-1 hits give 1, everything else at most 1/2.
    double r1 = recall_at_k(results, 1);
    CHECK(mrr(results) <= r1 + (1 - r1) / 2 + 1e-12);

    // Invariance under a strictly monotone score transform.
    std::vector<double> warped(scores.data());
    for (auto& v : warped) v = std::exp(0.5 * v) + 2;
    auto warped_results = rank_all(Tensor<double>({q, g}, warped), rel);
    for (std::size_t k = 1; k <= g; ++k)
      CHECK(recall_at_k(results, k) == recall_at_k(warped_results, k));
    CHECK(mrr(results) == doctest::Approx(mrr(warped_results)).epsilon(1e-12));
  }
}
