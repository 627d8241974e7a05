#include "temde/coder.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

namespace temde {

std::string distance_sign_name(DistanceSign sign) {
  return sign == DistanceSign::negative ? "negative" : "literal";
}

DistanceSign parse_distance_sign(const std::string& name) {
  if (name == "negative") return DistanceSign::negative;
  if (name == "literal") return DistanceSign::literal;
  throw ContractError("unknown distance sign '" + name + "'");
}

void TemdeConfig::validate() const {
  if (n_divisions < 1 || n_centroids < 1 || inner_dim < 1 || input_dim < 1) {
    throw ContractError("temde config requires N, K, D, E >= 1");
  }
}

template <typename T>
TemdeParams<T>::TemdeParams(const TemdeConfig& cfg, std::mt19937_64& rng)
    : config(cfg) {
  cfg.validate();
  // sigma = 1/sqrt(D) keeps initial squared distances O(1) so the softmax
  // starts unsaturated.
  T sigma = T(1) / std::sqrt(static_cast<T>(cfg.inner_dim));
  centroids = Tensor<T>::randn(
      {cfg.n_divisions, cfg.n_centroids, cfg.inner_dim}, rng, sigma, true);
  projection = Linear<T>(cfg.input_dim, cfg.projected_len(), rng);
  bnorm = BatchNorm<T>(cfg.projected_len(), static_cast<T>(cfg.bn_momentum),
                       static_cast<T>(cfg.bn_eps));
}

template <typename T>
std::vector<Tensor<T>> TemdeParams<T>::parameters() {
  return {centroids, projection.weight, projection.bias, bnorm.gamma,
          bnorm.beta};
}

template <typename T>
std::vector<Tensor<T>> TemdeParams<T>::buffers() {
  return {bnorm.running_mean, bnorm.running_var};
}

template <typename T>
Sketch<T> encode_tokens(TemdeParams<T>& params, const Tensor<T>& tokens,
                        Mode mode) {
  const TemdeConfig& cfg = params.config;
  if (tokens.rank() != 2 || tokens.dim(1) != cfg.input_dim) {
    throw DimensionError("encode_tokens expects [T x " +
                         std::to_string(cfg.input_dim) + "] tokens, got " +
                         shape_str(tokens.shape()));
  }
  std::size_t n_tokens = tokens.dim(0);
  if (n_tokens < 1) throw ContractError("encode_tokens: empty token sequence");

  std::size_t n = cfg.n_divisions, k = cfg.n_centroids, d = cfg.inner_dim;
  auto projected = params.projection.forward(tokens);
  auto normed = params.bnorm.forward(projected, mode == Mode::train);
  Tensor<T> points;  // [T x N x K x D]
  if (cfg.shared_projection) {
    points = broadcast_to(reshape(normed, {n_tokens, n, 1, d}),
                          {n_tokens, n, k, d});
  } else {
    points = reshape(normed, {n_tokens, n, k, d});
  }
  auto diff = sub(points, reshape(params.centroids, {1, n, k, d}));
  auto dist2 = sum(square(diff), 3);  // [T x N x K]
  auto scored = cfg.distance_sign == DistanceSign::negative
                    ? scale(dist2, T(-1))
                    : dist2;
  return Sketch<T>{softmax(scored, 2), SketchKind::per_token};
}

template <typename T>
Sketch<T> aggregate(const Sketch<T>& per_token) {
  if (per_token.kind != SketchKind::per_token) {
    throw ContractError("aggregate expects a per-token sketch");
  }
  if (per_token.values.rank() != 3) {
    throw DimensionError("aggregate expects [T x N x K], got " +
                         shape_str(per_token.values.shape()));
  }
  if (per_token.values.dim(0) < 1) {
    throw ContractError("aggregate: empty token sequence");
  }
  return Sketch<T>{sum(per_token.values, 0), SketchKind::aggregated};
}

template <typename T>
CombineHead<T>::CombineHead(std::size_t sketch_len, std::size_t hidden,
                            std::mt19937_64& rng) {
  if (hidden >= 2 * sketch_len) {
    throw ContractError(
        "combined representation must be smaller than the concatenated "
        "sketches: hidden " +
        std::to_string(hidden) + " vs 2*" + std::to_string(sketch_len));
  }
  if (hidden < 1) throw ContractError("combine head needs hidden >= 1");
  linear = Linear<T>(2 * sketch_len, hidden, rng);
}

template <typename T>
Tensor<T> combine_modalities(const Tensor<T>& text_sketch,
                             const Tensor<T>& image_sketch,
                             const CombineHead<T>& head) {
  if (text_sketch.rank() != image_sketch.rank() ||
      text_sketch.rank() > 2 ||
      text_sketch.shape() != image_sketch.shape()) {
    throw DimensionError("combine_modalities sketch shapes disagree: " +
                         shape_str(text_sketch.shape()) + " vs " +
                         shape_str(image_sketch.shape()));
  }
  bool batched = text_sketch.rank() == 2;
  auto txt = batched ? text_sketch
                     : reshape(text_sketch, {1, text_sketch.size()});
  auto img = batched ? image_sketch
                     : reshape(image_sketch, {1, image_sketch.size()});
  if (2 * txt.dim(1) != head.linear.weight.dim(0)) {
    throw DimensionError("combine_modalities: sketch length " +
                         std::to_string(txt.dim(1)) +
                         " does not match head input " +
                         std::to_string(head.linear.weight.dim(0)));
  }
  auto joined = concat<T>({txt, img}, 1);
  auto out = relu(head.linear.forward(joined));
  return batched ? out : reshape(out, {out.dim(1)});
}

template <typename T>
std::string sketch_dump(TemdeParams<T>& params, const Tensor<T>& tokens) {
  NoGradGuard no_grad;
  auto sketch = encode_tokens(params, tokens, Mode::eval);
  std::size_t n_tokens = sketch.values.dim(0);
  std::size_t n = sketch.values.dim(1), k = sketch.values.dim(2);
  std::ostringstream os;
  os << "# temde-sketch N=" << n << " K=" << k << "\n";
  const auto& v = sketch.values.data();
  char buf[32];
  for (std::size_t t = 0; t < n_tokens; ++t) {
    for (std::size_t div = 0; div < n; ++div) {
      os << t << '\t' << div << '\t';
      for (std::size_t j = 0; j < k; ++j) {
        std::snprintf(buf, sizeof(buf), "%.6f",
                      static_cast<double>(v[(t * n + div) * k + j]));
        if (j) os << ' ';
        os << buf;
      }
      os << '\n';
    }
  }
  return os.str();
}

#define TEMDE_INSTANTIATE_CODER(T)                                          \
  template struct TemdeParams<T>;                                           \
  template struct CombineHead<T>;                                           \
  template Sketch<T> encode_tokens<T>(TemdeParams<T>&, const Tensor<T>&,    \
                                      Mode);                                \
  template Sketch<T> aggregate<T>(const Sketch<T>&);                        \
  template Tensor<T> combine_modalities<T>(const Tensor<T>&,                \
                                           const Tensor<T>&,               \
                                           const CombineHead<T>&);          \
  template std::string sketch_dump<T>(TemdeParams<T>&, const Tensor<T>&);

TEMDE_INSTANTIATE_CODER(float)
TEMDE_INSTANTIATE_CODER(double)

#undef TEMDE_INSTANTIATE_CODER

}  // namespace temde
