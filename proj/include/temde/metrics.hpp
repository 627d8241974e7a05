#pragma once

#include <cstddef>
#include <vector>

#include "temde/tensor.hpp"

namespace temde {

// One query's ranked gallery: every gallery id exactly once, best first.
struct RankingResult {
  std::size_t query_id = 0;
  std::vector<std::size_t> ranked;    // gallery ids by descending score
  std::vector<std::size_t> relevant;  // non-empty
};

// Ranks every gallery item for every query. Descending score, ties broken
// by ascending gallery id. relevance[q] lists query q's relevant ids and
// must be non-empty.
template <typename T>
std::vector<RankingResult> rank_all(
    const Tensor<T>& score_matrix,
    const std::vector<std::vector<std::size_t>>& relevance);

// Fraction of queries with at least one relevant item in the top k.
double recall_at_k(const std::vector<RankingResult>& results, std::size_t k);

// Mean reciprocal rank of each query's best-ranked relevant item (1-based).
double mrr(const std::vector<RankingResult>& results);

}  // namespace temde
