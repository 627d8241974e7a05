#include "temde/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace temde {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

// --- Tensor handle -------------------------------------------------------

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("tensor data length " + std::to_string(values.size()) +
                         " does not match shape " + shape_str(shape));
  }
  impl_ = std::make_shared<TensorImpl<T>>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
  impl_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor({1}, {value}, requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::row(std::vector<T> values, bool requires_grad) {
  Shape shape{values.size()};
  return Tensor(std::move(shape), std::move(values), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::randn(Shape shape, std::mt19937_64& rng, T stddev,
                           bool requires_grad) {
  std::size_t n = shape_numel(shape);
  std::vector<T> values(n);
  std::normal_distribution<T> dist(T(0), stddev);
  for (auto& v : values) v = dist(rng);
  return Tensor(std::move(shape), std::move(values), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::uniform(Shape shape, std::mt19937_64& rng, T lo, T hi,
                             bool requires_grad) {
  std::size_t n = shape_numel(shape);
  std::vector<T> values(n);
  std::uniform_real_distribution<T> dist(lo, hi);
  for (auto& v : values) v = dist(rng);
  return Tensor(std::move(shape), std::move(values), requires_grad);
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  if (axis >= impl_->shape.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " +
                         shape_str(impl_->shape));
  }
  return impl_->shape[axis];
}

template <typename T>
T Tensor<T>::item() const {
  if (size() != 1) {
    throw ContractError("item() requires a scalar tensor, got " +
                        shape_str(impl_->shape));
  }
  return impl_->data[0];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool value) {
  if (!impl_->is_leaf) {
    throw ContractError("requires_grad can only be toggled on leaf tensors");
  }
  impl_->requires_grad = value;
  return *this;
}

template <typename T>
const std::vector<T>& Tensor<T>::grad() const {
  return impl_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
  impl_->grad.clear();
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  auto impl = std::make_shared<TensorImpl<T>>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  return Tensor(impl);
}

// --- tape & backward -----------------------------------------------------

template <typename T>
Tape<T> Tape<T>::build(const Tensor<T>& root) {
  Tape<T> tape;
  std::unordered_set<TensorImpl<T>*> seen;
  // Iterative post-order DFS: producers land before consumers.
  struct Frame {
    TensorImpl<T>* node;
    std::size_t next_parent;
  };
  std::vector<Frame> stack;
  TensorImpl<T>* start = root.impl().get();
  if (!seen.insert(start).second) return tape;
  stack.push_back({start, 0});
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      TensorImpl<T>* p = f.node->parents[f.next_parent++].get();
      if (seen.insert(p).second) stack.push_back({p, 0});
    } else {
      tape.nodes.push_back(f.node);
      stack.pop_back();
    }
  }
  return tape;
}

template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.size() != 1) {
    throw ContractError("backward requires a scalar loss, got " +
                        shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw ContractError("backward on a tensor with no tracked operations");
  }
  Tape<T> tape = Tape<T>::build(loss);
  // Interior grads are scratch per call; leaf grads accumulate across calls.
  for (TensorImpl<T>* node : tape.nodes) {
    if (!node->is_leaf) node->grad.assign(node->data.size(), T(0));
  }
  TensorImpl<T>* root = loss.impl().get();
  root->ensure_grad();
  root->grad[0] += T(1);
  for (auto it = tape.nodes.rbegin(); it != tape.nodes.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
}

// --- op plumbing ---------------------------------------------------------

namespace {

template <typename T>
Tensor<T> make_node(Shape shape, std::vector<T> data, const char* op,
                    std::vector<std::shared_ptr<TensorImpl<T>>> parents,
                    std::function<void(TensorImpl<T>&)> backward_fn) {
  auto impl = std::make_shared<TensorImpl<T>>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  bool track = false;
  if (g_grad_enabled) {
    for (const auto& p : parents)
      if (p->requires_grad) track = true;
  }
  if (track) {
    impl->requires_grad = true;
    impl->is_leaf = false;
    impl->parents = std::move(parents);
    impl->backward_fn = std::move(backward_fn);
    impl->op = op;
  }
  return Tensor<T>(impl);
}

// Accumulating matmul kernels. c is added to, callers zero it when needed.
template <typename T>
void mm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
           std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      T av = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m x k] += a[m x n] * b[k x n]^T
template <typename T>
void mm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t n,
           std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * n;
    T* crow = c + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T* brow = b + p * n;
      T acc = T(0);
      for (std::size_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
      crow[p] += acc;
    }
  }
}

// c[k x n] += a[m x k]^T * b[m x n]
template <typename T>
void mm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
           std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      T av = arow[p];
      T* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
void require_rank2(const Tensor<T>& x, const char* who) {
  if (x.rank() != 2) {
    throw DimensionError(std::string(who) + " requires a rank-2 tensor, got " +
                         shape_str(x.shape()));
  }
}

// outer * len * inner decomposition of a reduction/normalization axis.
struct AxisSplit {
  std::size_t outer, len, inner;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " +
                         shape_str(shape));
  }
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

// numpy-style broadcast of trailing-aligned shapes; only size-1 dims expand.
Shape broadcast_shapes(const Shape& a, const Shape& b) {
  std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError("cannot broadcast " + shape_str(a) + " with " +
                           shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

template <typename T>
void accum_into(TensorImpl<T>& parent, const std::vector<T>& contribution) {
  parent.ensure_grad();
  for (std::size_t i = 0; i < contribution.size(); ++i)
    parent.grad[i] += contribution[i];
}

}  // namespace

// --- matmul / transpose --------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  std::size_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2) {
    throw DimensionError("matmul inner dimensions disagree: " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::vector<T> out(m * n, T(0));
  mm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  auto pa = a.impl();
  auto pb = b.impl();
  return make_node<T>(
      {m, n}, std::move(out), "matmul", {pa, pb},
      [pa, pb, m, k, n](TensorImpl<T>& node) {
        if (pa->requires_grad) {
          pa->ensure_grad();
          mm_nt(node.grad.data(), pb->data.data(), pa->grad.data(), m, n, k);
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          mm_tn(pa->data.data(), node.grad.data(), pb->grad.data(), m, k, n);
        }
      });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  require_rank2(x, "transpose");
  std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<T> out(m * n);
  const auto& in = x.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = in[i * n + j];
  auto px = x.impl();
  return make_node<T>({n, m}, std::move(out), "transpose", {px},
                      [px, m, n](TensorImpl<T>& node) {
                        if (!px->requires_grad) return;
                        px->ensure_grad();
                        for (std::size_t i = 0; i < m; ++i)
                          for (std::size_t j = 0; j < n; ++j)
                            px->grad[i * n + j] += node.grad[j * m + i];
                      });
}

// --- elementwise ---------------------------------------------------------

namespace {

// Shared implementation for add/sub/mul after both sides are broadcast to a
// common shape.
template <typename T, typename Fwd, typename Bwd>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, const char* op,
                    Fwd fwd, Bwd bwd) {
  Tensor<T> ba = a, bb = b;
  if (a.shape() != b.shape()) {
    Shape target = broadcast_shapes(a.shape(), b.shape());
    ba = broadcast_to(a, target);
    bb = broadcast_to(b, target);
  }
  std::size_t n = ba.size();
  std::vector<T> out(n);
  const auto& da = ba.data();
  const auto& db = bb.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(da[i], db[i]);
  auto pa = ba.impl();
  auto pb = bb.impl();
  return make_node<T>(ba.shape(), std::move(out), op, {pa, pb},
                      [pa, pb, bwd](TensorImpl<T>& node) {
                        bwd(node, *pa, *pb);
                      });
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      a, b, "add", [](T x, T y) { return x + y; },
      [](TensorImpl<T>& node, TensorImpl<T>& pa, TensorImpl<T>& pb) {
        if (pa.requires_grad) accum_into(pa, node.grad);
        if (pb.requires_grad) accum_into(pb, node.grad);
      });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      a, b, "sub", [](T x, T y) { return x - y; },
      [](TensorImpl<T>& node, TensorImpl<T>& pa, TensorImpl<T>& pb) {
        if (pa.requires_grad) accum_into(pa, node.grad);
        if (pb.requires_grad) {
          pb.ensure_grad();
          for (std::size_t i = 0; i < node.grad.size(); ++i)
            pb.grad[i] -= node.grad[i];
        }
      });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      a, b, "mul", [](T x, T y) { return x * y; },
      [](TensorImpl<T>& node, TensorImpl<T>& pa, TensorImpl<T>& pb) {
        if (pa.requires_grad) {
          pa.ensure_grad();
          for (std::size_t i = 0; i < node.grad.size(); ++i)
            pa.grad[i] += node.grad[i] * pb.data[i];
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          for (std::size_t i = 0; i < node.grad.size(); ++i)
            pb.grad[i] += node.grad[i] * pa.data[i];
        }
      });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  std::size_t n = x.size();
  std::vector<T> out(n);
  const auto& in = x.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = in[i] * c;
  auto px = x.impl();
  return make_node<T>(x.shape(), std::move(out), "scale", {px},
                      [px, c](TensorImpl<T>& node) {
                        if (!px->requires_grad) return;
                        px->ensure_grad();
                        for (std::size_t i = 0; i < node.grad.size(); ++i)
                          px->grad[i] += node.grad[i] * c;
                      });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
  std::size_t n = x.size();
  std::vector<T> out(n);
  const auto& in = x.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = in[i] + c;
  auto px = x.impl();
  return make_node<T>(x.shape(), std::move(out), "add_scalar", {px},
                      [px](TensorImpl<T>& node) {
                        if (!px->requires_grad) return;
                        accum_into(*px, node.grad);
                      });
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  std::size_t n = x.size();
  std::vector<T> out(n);
  const auto& in = x.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = in[i] * in[i];
  auto px = x.impl();
  return make_node<T>(x.shape(), std::move(out), "square", {px},
                      [px](TensorImpl<T>& node) {
                        if (!px->requires_grad) return;
                        px->ensure_grad();
                        for (std::size_t i = 0; i < node.grad.size(); ++i)
                          px->grad[i] += node.grad[i] * T(2) * px->data[i];
                      });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::size_t n = x.size();
  std::vector<T> out(n);
  const auto& in = x.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = in[i] > T(0) ? in[i] : T(0);
  auto px = x.impl();
  // Subgradient at 0 is 0.
  return make_node<T>(x.shape(), std::move(out), "relu", {px},
                      [px](TensorImpl<T>& node) {
                        if (!px->requires_grad) return;
                        px->ensure_grad();
                        for (std::size_t i = 0; i < node.grad.size(); ++i)
                          if (px->data[i] > T(0)) px->grad[i] += node.grad[i];
                      });
}

template <typename T>
Tensor<T> tanh_op(const Tensor<T>& x) {
  std::size_t n = x.size();
  std::vector<T> out(n);
  const auto& in = x.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = std::tanh(in[i]);
  auto px = x.impl();
  return make_node<T>(x.shape(), std::move(out), "tanh", {px},
                      [px](TensorImpl<T>& node) {
                        if (!px->requires_grad) return;
                        px->ensure_grad();
                        for (std::size_t i = 0; i < node.grad.size(); ++i)
                          px->grad[i] += node.grad[i] *
                                         (T(1) - node.data[i] * node.data[i]);
                      });
}

// --- axis ops ------------------------------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  AxisSplit s = split_axis(x.shape(), axis);
  std::vector<T> out(x.size());
  const auto& in = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      std::size_t base = o * s.len * s.inner + i;
      T mx = in[base];
      for (std::size_t j = 1; j < s.len; ++j)
        mx = std::max(mx, in[base + j * s.inner]);
      T denom = T(0);
      for (std::size_t j = 0; j < s.len; ++j) {
        T e = std::exp(in[base + j * s.inner] - mx);
        out[base + j * s.inner] = e;
        denom += e;
      }
      for (std::size_t j = 0; j < s.len; ++j) out[base + j * s.inner] /= denom;
    }
  }
  auto px = x.impl();
  auto y = make_node<T>(x.shape(), std::move(out), "softmax", {px},
                        [px, s](TensorImpl<T>& node) {
                          if (!px->requires_grad) return;
                          px->ensure_grad();
                          // dx = y * (dy - sum(dy * y)) per slice
                          for (std::size_t o = 0; o < s.outer; ++o) {
                            for (std::size_t i = 0; i < s.inner; ++i) {
                              std::size_t base = o * s.len * s.inner + i;
                              T dot = T(0);
                              for (std::size_t j = 0; j < s.len; ++j) {
                                std::size_t k = base + j * s.inner;
                                dot += node.grad[k] * node.data[k];
                              }
                              for (std::size_t j = 0; j < s.len; ++j) {
                                std::size_t k = base + j * s.inner;
                                px->grad[k] += node.data[k] * (node.grad[k] - dot);
                              }
                            }
                          }
                        });
  return y;
}

namespace {

Shape drop_axis(const Shape& shape, std::size_t axis) {
  Shape out;
  out.reserve(shape.size() - 1);
  for (std::size_t i = 0; i < shape.size(); ++i)
    if (i != axis) out.push_back(shape[i]);
  if (out.empty()) out.push_back(1);
  return out;
}

}  // namespace

template <typename T>
Tensor<T> sum(const Tensor<T>& x, std::size_t axis) {
  AxisSplit s = split_axis(x.shape(), axis);
  std::vector<T> out(s.outer * s.inner, T(0));
  const auto& in = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t j = 0; j < s.len; ++j)
      for (std::size_t i = 0; i < s.inner; ++i)
        out[o * s.inner + i] += in[(o * s.len + j) * s.inner + i];
  auto px = x.impl();
  return make_node<T>(drop_axis(x.shape(), axis), std::move(out), "sum", {px},
                      [px, s](TensorImpl<T>& node) {
                        if (!px->requires_grad) return;
                        px->ensure_grad();
                        for (std::size_t o = 0; o < s.outer; ++o)
                          for (std::size_t j = 0; j < s.len; ++j)
                            for (std::size_t i = 0; i < s.inner; ++i)
                              px->grad[(o * s.len + j) * s.inner + i] +=
                                  node.grad[o * s.inner + i];
                      });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x, std::size_t axis) {
  AxisSplit s = split_axis(x.shape(), axis);
  T inv = T(1) / T(s.len);
  return scale(sum(x, axis), inv);
}

template <typename T>
Tensor<T> max(const Tensor<T>& x, std::size_t axis) {
  AxisSplit s = split_axis(x.shape(), axis);
  std::vector<T> out(s.outer * s.inner);
  // First-max tie rule; gradient routes to the recorded position only.
  auto arg = std::make_shared<std::vector<std::size_t>>(s.outer * s.inner);
  const auto& in = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      std::size_t best = (o * s.len) * s.inner + i;
      T bv = in[best];
      for (std::size_t j = 1; j < s.len; ++j) {
        std::size_t k = (o * s.len + j) * s.inner + i;
        if (in[k] > bv) {
          bv = in[k];
          best = k;
        }
      }
      out[o * s.inner + i] = bv;
      (*arg)[o * s.inner + i] = best;
    }
  }
  auto px = x.impl();
  return make_node<T>(drop_axis(x.shape(), axis), std::move(out), "max", {px},
                      [px, arg](TensorImpl<T>& node) {
                        if (!px->requires_grad) return;
                        px->ensure_grad();
                        for (std::size_t i = 0; i < node.grad.size(); ++i)
                          px->grad[(*arg)[i]] += node.grad[i];
                      });
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  T total = T(0);
  for (T v : x.data()) total += v;
  auto px = x.impl();
  return make_node<T>({1}, {total}, "sum_all", {px},
                      [px](TensorImpl<T>& node) {
                        if (!px->requires_grad) return;
                        px->ensure_grad();
                        for (auto& g : px->grad) g += node.grad[0];
                      });
}

template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& x, std::size_t axis) {
  constexpr T kEps = T(1e-12);
  AxisSplit s = split_axis(x.shape(), axis);
  std::vector<T> out(x.size());
  auto inv_norm = std::make_shared<std::vector<T>>(s.outer * s.inner);
  const auto& in = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      std::size_t base = o * s.len * s.inner + i;
      T ss = T(0);
      for (std::size_t j = 0; j < s.len; ++j) {
        T v = in[base + j * s.inner];
        ss += v * v;
      }
      T r = T(1) / std::sqrt(ss + kEps);
      (*inv_norm)[o * s.inner + i] = r;
      for (std::size_t j = 0; j < s.len; ++j)
        out[base + j * s.inner] = in[base + j * s.inner] * r;
    }
  }
  auto px = x.impl();
  return make_node<T>(
      x.shape(), std::move(out), "l2_normalize", {px},
      [px, s, inv_norm](TensorImpl<T>& node) {
        if (!px->requires_grad) return;
        px->ensure_grad();
        // dx = (dy - y * (dy . y)) / r per slice
        for (std::size_t o = 0; o < s.outer; ++o) {
          for (std::size_t i = 0; i < s.inner; ++i) {
            std::size_t base = o * s.len * s.inner + i;
            T r = (*inv_norm)[o * s.inner + i];
            T dot = T(0);
            for (std::size_t j = 0; j < s.len; ++j) {
              std::size_t k = base + j * s.inner;
              dot += node.grad[k] * node.data[k];
            }
            for (std::size_t j = 0; j < s.len; ++j) {
              std::size_t k = base + j * s.inner;
              px->grad[k] += (node.grad[k] - node.data[k] * dot) * r;
            }
          }
        }
      });
}

// --- shape ops -----------------------------------------------------------

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) {
    throw DimensionError("concat axis " + std::to_string(axis) +
                         " out of range for " + shape_str(first));
  }
  std::size_t total_axis = 0;
  for (const auto& p : parts) {
    if (p.rank() != first.size()) {
      throw DimensionError("concat rank mismatch: " + shape_str(first) +
                           " vs " + shape_str(p.shape()));
    }
    for (std::size_t i = 0; i < first.size(); ++i) {
      if (i != axis && p.shape()[i] != first[i]) {
        throw DimensionError("concat shapes differ off-axis: " +
                             shape_str(first) + " vs " + shape_str(p.shape()));
      }
    }
    total_axis += p.shape()[axis];
  }
  Shape out_shape = first;
  out_shape[axis] = total_axis;
  AxisSplit s = split_axis(out_shape, axis);
  std::vector<T> out(shape_numel(out_shape));

  std::vector<std::shared_ptr<TensorImpl<T>>> parents;
  auto spans = std::make_shared<std::vector<std::size_t>>();  // axis offsets
  std::size_t offset = 0;
  for (const auto& p : parts) {
    std::size_t len = p.shape()[axis];
    const auto& in = p.data();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t j = 0; j < len; ++j)
        for (std::size_t i = 0; i < s.inner; ++i)
          out[(o * s.len + offset + j) * s.inner + i] =
              in[(o * len + j) * s.inner + i];
    parents.push_back(p.impl());
    spans->push_back(offset);
    offset += len;
  }
  return make_node<T>(
      out_shape, std::move(out), "concat", std::move(parents),
      [s, spans, axis](TensorImpl<T>& node) {
        for (std::size_t pi = 0; pi < node.parents.size(); ++pi) {
          auto& p = *node.parents[pi];
          if (!p.requires_grad) continue;
          p.ensure_grad();
          std::size_t off = (*spans)[pi];
          std::size_t len = p.shape[axis];
          for (std::size_t o = 0; o < s.outer; ++o)
            for (std::size_t j = 0; j < len; ++j)
              for (std::size_t i = 0; i < s.inner; ++i)
                p.grad[(o * len + j) * s.inner + i] +=
                    node.grad[(o * s.len + off + j) * s.inner + i];
        }
      });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.size()) {
    throw DimensionError("cannot reshape " + shape_str(x.shape()) + " to " +
                         shape_str(shape));
  }
  auto px = x.impl();
  return make_node<T>(std::move(shape), x.data(), "reshape", {px},
                      [px](TensorImpl<T>& node) {
                        if (!px->requires_grad) return;
                        accum_into(*px, node.grad);
                      });
}

template <typename T>
Tensor<T> broadcast_to(const Tensor<T>& x, const Shape& target) {
  const Shape& src = x.shape();
  if (src == target) return x;
  if (src.size() > target.size()) {
    throw DimensionError("cannot broadcast " + shape_str(src) + " to " +
                         shape_str(target));
  }
  std::size_t rank = target.size();
  std::size_t lead = rank - src.size();
  // Source strides aligned to the target, 0 where a dim is expanded.
  std::vector<std::size_t> stride(rank, 0);
  std::size_t acc = 1;
  for (std::size_t i = src.size(); i-- > 0;) {
    std::size_t t = target[lead + i];
    if (src[i] != t && src[i] != 1) {
      throw DimensionError("cannot broadcast " + shape_str(src) + " to " +
                           shape_str(target) + ": only size-1 dims expand");
    }
    stride[lead + i] = (src[i] == 1 && t != 1) ? 0 : acc;
    acc *= src[i];
  }
  std::size_t n = shape_numel(target);
  std::vector<T> out(n);
  const auto& in = x.data();
  std::vector<std::size_t> idx(rank, 0);
  std::size_t src_off = 0;
  for (std::size_t pos = 0; pos < n; ++pos) {
    out[pos] = in[src_off];
    for (std::size_t d = rank; d-- > 0;) {
      idx[d]++;
      src_off += stride[d];
      if (idx[d] < target[d]) break;
      src_off -= stride[d] * target[d];
      idx[d] = 0;
    }
  }
  auto px = x.impl();
  auto strides = std::make_shared<std::vector<std::size_t>>(std::move(stride));
  Shape tgt = target;
  return make_node<T>(
      target, std::move(out), "broadcast", {px},
      [px, strides, tgt](TensorImpl<T>& node) {
        if (!px->requires_grad) return;
        px->ensure_grad();
        std::size_t rank = tgt.size();
        std::vector<std::size_t> idx(rank, 0);
        std::size_t src_off = 0;
        std::size_t n = node.grad.size();
        for (std::size_t pos = 0; pos < n; ++pos) {
          px->grad[src_off] += node.grad[pos];
          for (std::size_t d = rank; d-- > 0;) {
            idx[d]++;
            src_off += (*strides)[d];
            if (idx[d] < tgt[d]) break;
            src_off -= (*strides)[d] * tgt[d];
            idx[d] = 0;
          }
        }
      });
}

template <typename T>
Tensor<T> take_rows(const Tensor<T>& x, const std::vector<std::size_t>& ids) {
  require_rank2(x, "take_rows");
  std::size_t rows = x.dim(0), cols = x.dim(1);
  for (std::size_t id : ids) {
    if (id >= rows) {
      throw ContractError("take_rows index " + std::to_string(id) +
                          " out of range for " + shape_str(x.shape()));
    }
  }
  std::vector<T> out(ids.size() * cols);
  const auto& in = x.data();
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(in.begin() + static_cast<std::ptrdiff_t>(ids[i] * cols), cols,
                out.begin() + static_cast<std::ptrdiff_t>(i * cols));
  auto px = x.impl();
  auto idv = std::make_shared<std::vector<std::size_t>>(ids);
  return make_node<T>({ids.size(), cols}, std::move(out), "take_rows", {px},
                      [px, idv, cols](TensorImpl<T>& node) {
                        if (!px->requires_grad) return;
                        px->ensure_grad();
                        for (std::size_t i = 0; i < idv->size(); ++i)
                          for (std::size_t j = 0; j < cols; ++j)
                            px->grad[(*idv)[i] * cols + j] +=
                                node.grad[i * cols + j];
                      });
}

// --- batch norm ----------------------------------------------------------

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, Tensor<T>& running_mean,
                     Tensor<T>& running_var, T momentum, T eps,
                     bool use_batch_stats) {
  require_rank2(x, "batch_norm");
  std::size_t batch = x.dim(0), feat = x.dim(1);
  if (gamma.size() != feat || beta.size() != feat ||
      running_mean.size() != feat || running_var.size() != feat) {
    throw DimensionError("batch_norm parameter width does not match features " +
                         std::to_string(feat));
  }
  if (use_batch_stats && batch < 2) {
    throw ContractError("batch_norm: degenerate batch of " +
                        std::to_string(batch) + " with batch statistics");
  }

  const auto& in = x.data();
  auto mean_v = std::make_shared<std::vector<T>>(feat, T(0));
  auto var_v = std::make_shared<std::vector<T>>(feat, T(0));
  if (use_batch_stats) {
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t f = 0; f < feat; ++f) (*mean_v)[f] += in[b * feat + f];
    for (std::size_t f = 0; f < feat; ++f) (*mean_v)[f] /= T(batch);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t f = 0; f < feat; ++f) {
        T d = in[b * feat + f] - (*mean_v)[f];
        (*var_v)[f] += d * d;
      }
    for (std::size_t f = 0; f < feat; ++f) (*var_v)[f] /= T(batch);
    // Running buffers track the population with the usual unbiased correction.
    T unbias = batch > 1 ? T(batch) / T(batch - 1) : T(1);
    auto& rm = running_mean.data();
    auto& rv = running_var.data();
    for (std::size_t f = 0; f < feat; ++f) {
      rm[f] = (T(1) - momentum) * rm[f] + momentum * (*mean_v)[f];
      rv[f] = (T(1) - momentum) * rv[f] + momentum * (*var_v)[f] * unbias;
    }
  } else {
    *mean_v = running_mean.data();
    *var_v = running_var.data();
  }

  auto inv_std = std::make_shared<std::vector<T>>(feat);
  for (std::size_t f = 0; f < feat; ++f)
    (*inv_std)[f] = T(1) / std::sqrt((*var_v)[f] + eps);

  auto xhat = std::make_shared<std::vector<T>>(batch * feat);
  std::vector<T> out(batch * feat);
  const auto& g = gamma.data();
  const auto& bt = beta.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t f = 0; f < feat; ++f) {
      T h = (in[b * feat + f] - (*mean_v)[f]) * (*inv_std)[f];
      (*xhat)[b * feat + f] = h;
      out[b * feat + f] = g[f] * h + bt[f];
    }
  }

  auto px = x.impl();
  auto pg = gamma.impl();
  auto pb = beta.impl();
  return make_node<T>(
      x.shape(), std::move(out), "batch_norm", {px, pg, pb},
      [px, pg, pb, xhat, inv_std, mean_v, batch, feat,
       use_batch_stats](TensorImpl<T>& node) {
        const auto& dy = node.grad;
        if (pg->requires_grad) {
          pg->ensure_grad();
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t f = 0; f < feat; ++f)
              pg->grad[f] += dy[b * feat + f] * (*xhat)[b * feat + f];
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t f = 0; f < feat; ++f)
              pb->grad[f] += dy[b * feat + f];
        }
        if (!px->requires_grad) return;
        px->ensure_grad();
        const auto& g = pg->data;
        if (!use_batch_stats) {
          // Running statistics are constants, the map is affine per feature.
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t f = 0; f < feat; ++f)
              px->grad[b * feat + f] +=
                  dy[b * feat + f] * g[f] * (*inv_std)[f];
          return;
        }
        // Batch statistics depend on x: propagate through mean and variance.
        std::vector<T> sum_dxhat(feat, T(0)), sum_dxhat_xhat(feat, T(0));
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t f = 0; f < feat; ++f) {
            T dxh = dy[b * feat + f] * g[f];
            sum_dxhat[f] += dxh;
            sum_dxhat_xhat[f] += dxh * (*xhat)[b * feat + f];
          }
        }
        T invB = T(1) / T(batch);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t f = 0; f < feat; ++f) {
            T dxh = dy[b * feat + f] * g[f];
            px->grad[b * feat + f] +=
                (*inv_std)[f] * (dxh - invB * sum_dxhat[f] -
                                 invB * (*xhat)[b * feat + f] *
                                     sum_dxhat_xhat[f]);
          }
        }
      });
}

// --- explicit instantiations ---------------------------------------------

#define TEMDE_INSTANTIATE(T)                                                   \
  template class Tensor<T>;                                                    \
  template struct Tape<T>;                                                     \
  template void backward<T>(const Tensor<T>&);                                 \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);            \
  template Tensor<T> transpose<T>(const Tensor<T>&);                           \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                            \
  template Tensor<T> add_scalar<T>(const Tensor<T>&, T);                       \
  template Tensor<T> square<T>(const Tensor<T>&);                              \
  template Tensor<T> relu<T>(const Tensor<T>&);                                \
  template Tensor<T> tanh_op<T>(const Tensor<T>&);                             \
  template Tensor<T> softmax<T>(const Tensor<T>&, std::size_t);                \
  template Tensor<T> sum<T>(const Tensor<T>&, std::size_t);                    \
  template Tensor<T> mean<T>(const Tensor<T>&, std::size_t);                   \
  template Tensor<T> max<T>(const Tensor<T>&, std::size_t);                    \
  template Tensor<T> sum_all<T>(const Tensor<T>&);                             \
  template Tensor<T> l2_normalize<T>(const Tensor<T>&, std::size_t);           \
  template Tensor<T> concat<T>(const std::vector<Tensor<T>>&, std::size_t);    \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                      \
  template Tensor<T> broadcast_to<T>(const Tensor<T>&, const Shape&);          \
  template Tensor<T> take_rows<T>(const Tensor<T>&,                            \
                                  const std::vector<std::size_t>&);            \
  template Tensor<T> batch_norm<T>(const Tensor<T>&, const Tensor<T>&,         \
                                   const Tensor<T>&, Tensor<T>&, Tensor<T>&,   \
                                   T, T, bool);

TEMDE_INSTANTIATE(float)
TEMDE_INSTANTIATE(double)

#undef TEMDE_INSTANTIATE

}  // namespace temde
