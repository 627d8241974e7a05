#pragma once

#include <random>
#include <string>

#include "temde/nn.hpp"
#include "temde/tensor.hpp"

namespace temde {

// Which sign the squared centroid distances carry before the softmax.
// `negative` puts the most mass on the nearest centroid; `literal` applies
// the softmax to the raw squared distances (most mass on the farthest).
enum class DistanceSign { negative, literal };

std::string distance_sign_name(DistanceSign sign);
DistanceSign parse_distance_sign(const std::string& name);

struct TemdeConfig {
  std::size_t n_divisions = 16;  // sketch depth N: independent partitionings
  std::size_t n_centroids = 8;   // sketch width K: regions per partitioning
  std::size_t inner_dim = 8;     // centroid-space dimensionality D
  std::size_t input_dim = 64;    // incoming token embedding size E
  DistanceSign distance_sign = DistanceSign::negative;
  // Project one D-point per division and share it across the K centroids
  // instead of emitting the full N*K*D map.
  bool shared_projection = false;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;

  std::size_t sketch_len() const { return n_divisions * n_centroids; }
  std::size_t projected_len() const {
    return n_divisions * (shared_projection ? 1 : n_centroids) * inner_dim;
  }
  void validate() const;
};

enum class SketchKind { per_token, aggregated };

// N*K soft-assignment histogram. Per-token sketches are [T x N x K] with
// each division row summing to 1; aggregated sketches are [N x K] with rows
// summing to the token count.
template <typename T>
struct Sketch {
  Tensor<T> values;
  SketchKind kind = SketchKind::per_token;
};

template <typename T>
struct TemdeParams {
  TemdeConfig config;
  Tensor<T> centroids;   // [N x K x D], trainable
  Linear<T> projection;  // E -> projected_len()
  BatchNorm<T> bnorm;    // over the projected features, tokens as population

  TemdeParams() = default;
  TemdeParams(const TemdeConfig& cfg, std::mt19937_64& rng);

  std::vector<Tensor<T>> parameters();
  std::vector<Tensor<T>> buffers();
};

// Projects tokens [T x E] into the centroid space and soft-assigns each to
// the K centroids of every division: linear projection, batch norm over the
// T tokens, squared distances to the centroids summed over D, sign applied,
// softmax over K. Output [T x N x K].
template <typename T>
Sketch<T> encode_tokens(TemdeParams<T>& params, const Tensor<T>& tokens,
                        Mode mode);

// Sums per-token assignments over the sequence; output size is N x K no
// matter how long the sequence was.
template <typename T>
Sketch<T> aggregate(const Sketch<T>& per_token);

// Post-concatenation mapping of a (text, image) sketch pair to a smaller
// combined representation.
template <typename T>
struct CombineHead {
  Linear<T> linear;  // [2*sketch_len x hidden], hidden < 2*sketch_len

  CombineHead() = default;
  CombineHead(std::size_t sketch_len, std::size_t hidden,
              std::mt19937_64& rng);
};

// concat -> linear -> ReLU. Accepts single sketches [len] (returns [hidden])
// or batches [B x len] (returns [B x hidden]).
template <typename T>
Tensor<T> combine_modalities(const Tensor<T>& text_sketch,
                             const Tensor<T>& image_sketch,
                             const CombineHead<T>& head);

// Eval-mode per-token sketches as text: one header line, then one
// tab-separated row per (token, division) with K probabilities.
template <typename T>
std::string sketch_dump(TemdeParams<T>& params, const Tensor<T>& tokens);

}  // namespace temde
