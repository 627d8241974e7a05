#include "temde/metrics.hpp"

#include <algorithm>
#include <numeric>

namespace temde {

template <typename T>
std::vector<RankingResult> rank_all(
    const Tensor<T>& score_matrix,
    const std::vector<std::vector<std::size_t>>& relevance) {
  if (score_matrix.rank() != 2) {
    throw DimensionError("rank_all expects [Q x G] scores, got " +
                         shape_str(score_matrix.shape()));
  }
  std::size_t n_queries = score_matrix.dim(0);
  std::size_t n_gallery = score_matrix.dim(1);
  if (relevance.size() != n_queries) {
    throw ContractError("rank_all: relevance list covers " +
                        std::to_string(relevance.size()) + " of " +
                        std::to_string(n_queries) + " queries");
  }
  const auto& scores = score_matrix.data();
  std::vector<RankingResult> results(n_queries);
  for (std::size_t q = 0; q < n_queries; ++q) {
    if (relevance[q].empty()) {
      throw ContractError("rank_all: query " + std::to_string(q) +
                          " has no relevant items");
    }
    for (std::size_t id : relevance[q]) {
      if (id >= n_gallery) {
        throw ContractError("rank_all: relevant id " + std::to_string(id) +
                            " outside gallery of " +
                            std::to_string(n_gallery));
      }
    }
    auto& r = results[q];
    r.query_id = q;
    r.relevant = relevance[q];
    r.ranked.resize(n_gallery);
    std::iota(r.ranked.begin(), r.ranked.end(), std::size_t{0});
    const T* row = scores.data() + q * n_gallery;
    std::sort(r.ranked.begin(), r.ranked.end(),
              [row](std::size_t a, std::size_t b) {
                if (row[a] != row[b]) return row[a] > row[b];
                return a < b;  // deterministic tie rule
              });
  }
  return results;
}

double recall_at_k(const std::vector<RankingResult>& results, std::size_t k) {
  if (results.empty()) throw ContractError("recall_at_k on empty results");
  std::size_t gallery = results.front().ranked.size();
  if (k < 1 || k > gallery) {
    throw ContractError("recall_at_k: k=" + std::to_string(k) +
                        " outside [1, " + std::to_string(gallery) + "]");
  }
  std::size_t hits = 0;
  for (const auto& r : results) {
    for (std::size_t i = 0; i < k; ++i) {
      if (std::find(r.relevant.begin(), r.relevant.end(), r.ranked[i]) !=
          r.relevant.end()) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(results.size());
}

double mrr(const std::vector<RankingResult>& results) {
  if (results.empty()) throw ContractError("mrr on empty results");
  double total = 0;
  for (const auto& r : results) {
    std::size_t rank = 0;
    for (std::size_t i = 0; i < r.ranked.size(); ++i) {
      if (std::find(r.relevant.begin(), r.relevant.end(), r.ranked[i]) !=
          r.relevant.end()) {
        rank = i + 1;
        break;
      }
    }
    if (rank == 0) {
      throw ContractError("mrr: query " + std::to_string(r.query_id) +
                          " has no relevant item in its ranking");
    }
    total += 1.0 / static_cast<double>(rank);
  }
  return total / static_cast<double>(results.size());
}

template std::vector<RankingResult> rank_all<float>(
    const Tensor<float>&, const std::vector<std::vector<std::size_t>>&);
template std::vector<RankingResult> rank_all<double>(
    const Tensor<double>&, const std::vector<std::vector<std::size_t>>&);

}  // namespace temde
