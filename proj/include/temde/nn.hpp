#pragma once

#include <random>

#include "temde/tensor.hpp"

namespace temde {

// Statistics mode for forward passes: train uses batch statistics and
// updates running buffers, eval normalizes with the running buffers.
enum class Mode { train, eval };

// Fully-connected layer, weight stored input-major: y = x * W + b.
template <typename T>
struct Linear {
  Tensor<T> weight;  // [in x out]
  Tensor<T> bias;    // [out]
  bool has_bias = true;

  Linear() = default;

  Linear(std::size_t in, std::size_t out, std::mt19937_64& rng,
         bool with_bias = true)
      : has_bias(with_bias) {
    T stddev = T(1) / std::sqrt(static_cast<T>(in));
    weight = Tensor<T>::randn({in, out}, rng, stddev, true);
    bias = Tensor<T>::zeros({out}, with_bias);
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    auto out = matmul(x, weight);
    return has_bias ? add(out, bias) : out;
  }
};

template <typename T>
struct BatchNorm {
  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  BatchNorm() = default;

  explicit BatchNorm(std::size_t features, T momentum_ = T(0.1),
                     T eps_ = T(1e-5))
      : momentum(momentum_), eps(eps_) {
    gamma = Tensor<T>::full({features}, T(1), true);
    beta = Tensor<T>::zeros({features}, true);
    running_mean = Tensor<T>::zeros({features});
    running_var = Tensor<T>::full({features}, T(1));
  }

  Tensor<T> forward(const Tensor<T>& x, bool use_batch_stats) {
    return batch_norm(x, gamma, beta, running_mean, running_var, momentum, eps,
                      use_batch_stats);
  }
};

}  // namespace temde
