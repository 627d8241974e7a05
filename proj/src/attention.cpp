#include "temde/attention.hpp"
#include <cmath>

namespace temde {

void GlobalSimConfig::validate() const {
  if (input_dim < 1 || width < 1 || blocks < 1) {
    throw ContractError("global-similarity config requires E, d, blocks >= 1");
  }
}

template <typename T>
GlobalSimParams<T>::GlobalSimParams(const GlobalSimConfig& cfg,
                                    std::mt19937_64& rng)
    : config(cfg) {
  cfg.validate();
  // The attention score is an unscaled d-dimensional dot product, so unit
  // per-feature variance saturates the token softmax from the start. The
  // final normalization scale starts at d^(-1/4) per side, which puts the
  // logits at O(1); the scale stays trainable.
  T out_scale = std::pow(static_cast<T>(cfg.width), T(-0.25));
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    std::size_t in = b == 0 ? cfg.input_dim : cfg.width;
    local_linears.emplace_back(in, cfg.width, rng);
    local_norms.emplace_back(cfg.width, static_cast<T>(cfg.bn_momentum),
                             static_cast<T>(cfg.bn_eps));
    global_linears.emplace_back(in, cfg.width, rng);
    global_norms.emplace_back(cfg.width, static_cast<T>(cfg.bn_momentum),
                              static_cast<T>(cfg.bn_eps));
    if (b + 1 == cfg.blocks) {
      for (auto& g : local_norms.back().gamma.data()) g = out_scale;
      for (auto& g : global_norms.back().gamma.data()) g = out_scale;
    }
  }
}

template <typename T>
std::vector<Tensor<T>> GlobalSimParams<T>::parameters() {
  std::vector<Tensor<T>> out;
  for (std::size_t b = 0; b < local_linears.size(); ++b) {
    out.push_back(local_linears[b].weight);
    out.push_back(local_linears[b].bias);
    out.push_back(local_norms[b].gamma);
    out.push_back(local_norms[b].beta);
  }
  for (std::size_t b = 0; b < global_linears.size(); ++b) {
    out.push_back(global_linears[b].weight);
    out.push_back(global_linears[b].bias);
    out.push_back(global_norms[b].gamma);
    out.push_back(global_norms[b].beta);
  }
  return out;
}

template <typename T>
std::vector<Tensor<T>> GlobalSimParams<T>::buffers() {
  std::vector<Tensor<T>> out;
  for (auto& bn : local_norms) {
    out.push_back(bn.running_mean);
    out.push_back(bn.running_var);
  }
  for (auto& bn : global_norms) {
    out.push_back(bn.running_mean);
    out.push_back(bn.running_var);
  }
  return out;
}

template <typename T>
Tensor<T> local_representation(GlobalSimParams<T>& params,
                               const Tensor<T>& tokens, Mode mode) {
  if (tokens.rank() != 2 || tokens.dim(1) != params.config.input_dim) {
    throw DimensionError("local_representation expects [T x " +
                         std::to_string(params.config.input_dim) +
                         "], got " + shape_str(tokens.shape()));
  }
  auto h = tokens;
  for (std::size_t b = 0; b < params.local_linears.size(); ++b) {
    h = params.local_linears[b].forward(h);
    h = params.local_norms[b].forward(h, mode == Mode::train);
    if (params.config.tanh_activation) h = tanh_op(h);
  }
  return h;
}

template <typename T>
Tensor<T> global_representation(GlobalSimParams<T>& params,
                                const Tensor<T>& mean_rows, Mode mode) {
  if (mean_rows.rank() != 2 || mean_rows.dim(1) != params.config.input_dim) {
    throw DimensionError("global_representation expects [B x " +
                         std::to_string(params.config.input_dim) +
                         "], got " + shape_str(mean_rows.shape()));
  }
  bool batch_stats = mode == Mode::train && mean_rows.dim(0) >= 2;
  auto h = mean_rows;
  for (std::size_t b = 0; b < params.global_linears.size(); ++b) {
    h = params.global_linears[b].forward(h);
    h = params.global_norms[b].forward(h, batch_stats);
    if (params.config.tanh_activation) h = tanh_op(h);
  }
  return h;
}

template <typename T>
Tensor<T> global_similarity_attention(const Tensor<T>& local,
                                      const Tensor<T>& global) {
  if (local.rank() != 2) {
    throw DimensionError("global_similarity_attention expects L as [T x d]");
  }
  if (global.rank() != 1 || global.dim(0) != local.dim(1)) {
    throw DimensionError("global_similarity_attention width mismatch: " +
                         shape_str(local.shape()) + " vs " +
                         shape_str(global.shape()));
  }
  std::size_t width = local.dim(1);
  auto scores = matmul(local, reshape(global, {width, 1}));  // [T x 1]
  auto weights = softmax(scores, 0);
  auto mixed = sum(mul(local, weights), 0);  // weights broadcast over d
  return l2_normalize(mixed, 0);
}

template <typename T>
Tensor<T> global_similarity_vector(const Tensor<T>& image_global,
                                   const Tensor<T>& text_global) {
  if (image_global.shape() != text_global.shape()) {
    throw DimensionError("global vectors disagree: " +
                         shape_str(image_global.shape()) + " vs " +
                         shape_str(text_global.shape()));
  }
  return sub(image_global, text_global);
}

template <typename T>
Tensor<T> full_self_attention(const Tensor<T>& x) {
  if (x.rank() != 2) {
    throw DimensionError("full_self_attention expects [T x d], got " +
                         shape_str(x.shape()));
  }
  auto scores = matmul(x, transpose(x));  // [T x T]
  auto weights = softmax(scores, 1);
  return matmul(weights, x);
}

#define TEMDE_INSTANTIATE_ATTENTION(T)                                     \
  template struct GlobalSimParams<T>;                                      \
  template Tensor<T> local_representation<T>(GlobalSimParams<T>&,          \
                                             const Tensor<T>&, Mode);      \
  template Tensor<T> global_representation<T>(GlobalSimParams<T>&,         \
                                              const Tensor<T>&, Mode);     \
  template Tensor<T> global_similarity_attention<T>(const Tensor<T>&,      \
                                                    const Tensor<T>&);     \
  template Tensor<T> global_similarity_vector<T>(const Tensor<T>&,         \
                                                 const Tensor<T>&);        \
  template Tensor<T> full_self_attention<T>(const Tensor<T>&);

TEMDE_INSTANTIATE_ATTENTION(float)
TEMDE_INSTANTIATE_ATTENTION(double)

#undef TEMDE_INSTANTIATE_ATTENTION

}  // namespace temde
