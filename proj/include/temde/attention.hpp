#pragma once

#include <random>
#include <vector>

#include "temde/nn.hpp"
#include "temde/tensor.hpp"

namespace temde {

struct GlobalSimConfig {
  std::size_t input_dim = 64;  // incoming token width E
  std::size_t width = 256;     // d, width of L and G
  std::size_t blocks = 2;      // (linear + batch norm) blocks per stack
  bool tanh_activation = true;  // bound block outputs after the norm
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;

  void validate() const;
};

// Per-modality preprocessing stacks producing the local variant L [T x d]
// (one row per token) and the global variant G [d] (token mean run through
// its own stack).
template <typename T>
struct GlobalSimParams {
  GlobalSimConfig config;
  std::vector<Linear<T>> local_linears;
  std::vector<BatchNorm<T>> local_norms;
  std::vector<Linear<T>> global_linears;
  std::vector<BatchNorm<T>> global_norms;

  GlobalSimParams() = default;
  GlobalSimParams(const GlobalSimConfig& cfg, std::mt19937_64& rng);

  std::vector<Tensor<T>> parameters();
  std::vector<Tensor<T>> buffers();
};

// L stack over tokens [T x E] -> [T x d]; the T tokens are the batch-norm
// population, so train mode needs T >= 2.
template <typename T>
Tensor<T> local_representation(GlobalSimParams<T>& params,
                               const Tensor<T>& tokens, Mode mode);

// G stack over token means, one row per item [B x E] -> [B x d]. The items
// are the population here; a single row in train mode falls back to running
// statistics since one sample has no batch variance.
template <typename T>
Tensor<T> global_representation(GlobalSimParams<T>& params,
                                const Tensor<T>& mean_rows, Mode mode);

// Per-token scores L_t . G, softmax over tokens, weighted sum of L, then
// L2 normalization: the final per-modality global representation.
template <typename T>
Tensor<T> global_similarity_attention(const Tensor<T>& local,
                                      const Tensor<T>& global);

// img_G - txt_G.
template <typename T>
Tensor<T> global_similarity_vector(const Tensor<T>& image_global,
                                   const Tensor<T>& text_global);

// Token-token attention: softmax(X X^T) X. The quadratic benchmark subject.
template <typename T>
Tensor<T> full_self_attention(const Tensor<T>& x);

}  // namespace temde
