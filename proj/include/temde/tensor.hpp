#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "temde/errors.hpp"

namespace temde {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Thread-local switch for tape recording. Ops executed while disabled
// produce plain values with no graph attached.
bool grad_enabled();

struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool is_leaf = true;

  // Reverse edge: reads this node's grad and accumulates into parents.
  std::vector<std::shared_ptr<TensorImpl<T>>> parents;
  std::function<void(TensorImpl<T>&)> backward_fn;
  const char* op = "";

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

// Dense row-major tensor handle with shared storage. Copies are shallow;
// detach() makes an independent value copy.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);
  explicit Tensor(std::shared_ptr<TensorImpl<T>> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);
  static Tensor row(std::vector<T> values, bool requires_grad = false);
  static Tensor randn(Shape shape, std::mt19937_64& rng, T stddev = T(1),
                      bool requires_grad = false);
  static Tensor uniform(Shape shape, std::mt19937_64& rng, T lo, T hi,
                        bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t size() const { return impl_->data.size(); }
  std::size_t dim(std::size_t axis) const;

  std::vector<T>& data() { return impl_->data; }
  const std::vector<T>& data() const { return impl_->data; }
  T item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool value);
  bool is_leaf() const { return impl_->is_leaf; }

  bool has_grad() const { return !impl_->grad.empty(); }
  const std::vector<T>& grad() const;
  void zero_grad();

  // Value copy with no graph attached.
  Tensor detach() const;

  std::shared_ptr<TensorImpl<T>> impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

// Ordered record of the operations reachable from a root, each node after
// all nodes producing its inputs. backward() walks it once in reverse.
template <typename T>
struct Tape {
  std::vector<TensorImpl<T>*> nodes;

  static Tape build(const Tensor<T>& root);
};

// Accumulates gradients of `loss` into every requires_grad ancestor.
// Interior-node grads are reset per call; leaf grads accumulate additively.
template <typename T>
void backward(const Tensor<T>& loss);

// --- operations ---------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> transpose(const Tensor<T>& x);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c);
template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T c);
template <typename T>
Tensor<T> square(const Tensor<T>& x);
template <typename T>
Tensor<T> relu(const Tensor<T>& x);
template <typename T>
Tensor<T> tanh_op(const Tensor<T>& x);

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);
template <typename T>
Tensor<T> sum(const Tensor<T>& x, std::size_t axis);
template <typename T>
Tensor<T> mean(const Tensor<T>& x, std::size_t axis);
template <typename T>
Tensor<T> max(const Tensor<T>& x, std::size_t axis);
template <typename T>
Tensor<T> sum_all(const Tensor<T>& x);
template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& x, std::size_t axis);

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <typename T>
Tensor<T> broadcast_to(const Tensor<T>& x, const Shape& shape);

// Row gather: out[i, :] = x[ids[i], :]. Gradient scatter-adds into x.
template <typename T>
Tensor<T> take_rows(const Tensor<T>& x, const std::vector<std::size_t>& ids);

// Batch normalization over features of x[batch x features]. With
// use_batch_stats the batch statistics normalize (population variance) and
// the running buffers are updated in place with `momentum`; otherwise the
// running buffers normalize. Batch of 1 with batch stats is a degenerate
// batch and raises ContractError.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, Tensor<T>& running_mean,
                     Tensor<T>& running_var, T momentum, T eps,
                     bool use_batch_stats);

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
  return add(a, b);
}
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
  return sub(a, b);
}
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) {
  return mul(a, b);
}

}  // namespace temde
