#include "temde/model.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <sstream>

#include "temde/io_util.hpp"

namespace temde {

std::string backend_name(Backend b) {
  return b == Backend::temde ? "temde" : "attention";
}

Backend parse_backend(const std::string& name) {
  if (name == "temde") return Backend::temde;
  if (name == "attention") return Backend::attention;
  throw ContractError("unknown backend '" + name + "'");
}

std::size_t ModelConfig::effective_head_dim() const {
  std::size_t pair_len = 2 * temde.sketch_len();
  return head_dim < pair_len ? head_dim : temde.sketch_len();
}

void ModelConfig::validate() const {
  if (vocab_size < 1) throw ContractError("model needs vocab_size >= 1");
  if (embed_dim < 1 || segment_feat_dim < 1 || head_dim < 1) {
    throw ContractError("model widths must be >= 1");
  }
  if (!(margin > 0)) throw ContractError("margin must be positive");
}

template <typename T>
RetrievalModel<T>::RetrievalModel(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  cfg_.temde.input_dim = cfg_.embed_dim;
  cfg_.attention.input_dim = cfg_.embed_dim;
  std::mt19937_64 rng(cfg_.seed);
  T sigma = T(1) / std::sqrt(static_cast<T>(cfg_.embed_dim));
  embedding_ = Tensor<T>::randn({cfg_.vocab_size, cfg_.embed_dim}, rng, sigma,
                                true);
  image_proj_ = Linear<T>(cfg_.segment_feat_dim, cfg_.embed_dim, rng);
  if (cfg_.backend == Backend::temde) {
    text_coder_ = TemdeParams<T>(cfg_.temde, rng);
    image_coder_ = TemdeParams<T>(cfg_.temde, rng);
    combine_ = CombineHead<T>(cfg_.temde.sketch_len(),
                              cfg_.effective_head_dim(), rng);
    // Bias-free head: the ranking hinge is invariant to uniform score
    // shifts, so a bias could never receive gradient.
    score_head_ = Linear<T>(cfg_.effective_head_dim(), 1, rng, false);
  } else {
    text_sim_ = GlobalSimParams<T>(cfg_.attention, rng);
    image_sim_ = GlobalSimParams<T>(cfg_.attention, rng);
    // A purely linear map of (img_G - txt_G) separates into per-modality
    // terms and ranks every query identically; the hidden ReLU couples the
    // two sides, matching the combine head on the sketch path.
    std::size_t hidden = std::min(cfg_.head_dim, cfg_.attention.width);
    sim_hidden_ = Linear<T>(cfg_.attention.width, hidden, rng);
    score_head_ = Linear<T>(hidden, 1, rng, false);
  }
}

template <typename T>
Tensor<T> RetrievalModel<T>::embed_tokens(
    const std::vector<std::size_t>& token_ids) {
  if (token_ids.empty()) throw ContractError("empty caption");
  for (std::size_t id : token_ids) {
    if (id >= cfg_.vocab_size) {
      throw VocabularyError("token id " + std::to_string(id) +
                            " outside vocabulary of " +
                            std::to_string(cfg_.vocab_size));
    }
  }
  return take_rows(embedding_, token_ids);
}

namespace {

// 0/1 selector [B x total] marking which stacked rows belong to each item;
// multiplying by it sums per-item rows exactly. `weight` scales each item's
// block (1 for sums, 1/T_b for means).
template <typename T>
Tensor<T> item_selector(const std::vector<std::size_t>& offsets, bool mean) {
  std::size_t batch = offsets.size() - 1;
  std::size_t total = offsets.back();
  std::vector<T> sel(batch * total, T(0));
  for (std::size_t b = 0; b < batch; ++b) {
    T w = mean ? T(1) / T(offsets[b + 1] - offsets[b]) : T(1);
    for (std::size_t t = offsets[b]; t < offsets[b + 1]; ++t)
      sel[b * total + t] = w;
  }
  return Tensor<T>({batch, total}, std::move(sel));
}

}  // namespace

// The whole batch runs through the coder/stacks as one token population, so
// train-mode batch-norm statistics come from every token in the minibatch.
template <typename T>
Tensor<T> RetrievalModel<T>::global_rows(TemdeParams<T>* coder,
                                         GlobalSimParams<T>* sim,
                                         const std::vector<Tensor<T>>& tokens,
                                         Mode mode) {
  std::vector<std::size_t> offsets{0};
  for (const auto& t : tokens) offsets.push_back(offsets.back() + t.dim(0));
  auto all = tokens.size() == 1 ? tokens[0] : concat(tokens, 0);
  std::size_t batch = tokens.size();

  if (cfg_.backend == Backend::temde) {
    auto sketch = encode_tokens(*coder, all, mode);
    auto flat = reshape(sketch.values, {offsets.back(),
                                        cfg_.temde.sketch_len()});
    // Aggregated sketch rows sum to the token count; normalize so pair
    // scores compare content rather than sequence length.
    return l2_normalize(matmul(item_selector<T>(offsets, false), flat), 1);
  }

  auto locals = local_representation(*sim, all, mode);
  auto means = matmul(item_selector<T>(offsets, true), all);  // [B x E]
  auto globals = global_representation(*sim, means, mode);
  std::vector<Tensor<T>> rows;
  rows.reserve(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    std::vector<std::size_t> span;
    for (std::size_t t = offsets[b]; t < offsets[b + 1]; ++t)
      span.push_back(t);
    auto local = take_rows(locals, span);
    auto g = reshape(take_rows(globals, {b}), {cfg_.attention.width});
    rows.push_back(reshape(global_similarity_attention(local, g),
                           {1, cfg_.attention.width}));
  }
  return rows.size() == 1 ? rows[0] : concat(rows, 0);
}

template <typename T>
Tensor<T> RetrievalModel<T>::text_representations(
    const std::vector<std::vector<std::size_t>>& captions, Mode mode) {
  if (captions.empty()) throw ContractError("no captions to encode");
  std::vector<Tensor<T>> embedded;
  embedded.reserve(captions.size());
  for (const auto& caption : captions)
    embedded.push_back(embed_tokens(caption));
  return global_rows(&text_coder_, &text_sim_, embedded, mode);
}

template <typename T>
Tensor<T> RetrievalModel<T>::image_representations(
    const std::vector<Tensor<T>>& segment_sets, Mode mode) {
  if (segment_sets.empty()) throw ContractError("no segment sets to encode");
  std::vector<Tensor<T>> projected;
  projected.reserve(segment_sets.size());
  for (const auto& segments : segment_sets) {
    if (segments.rank() != 2 || segments.dim(1) != cfg_.segment_feat_dim) {
      throw DimensionError("segments must be [T x " +
                           std::to_string(cfg_.segment_feat_dim) + "], got " +
                           shape_str(segments.shape()));
    }
    if (segments.dim(0) < 1) throw ContractError("empty segment set");
    projected.push_back(image_proj_.forward(segments));
  }
  return global_rows(&image_coder_, &image_sim_, projected, mode);
}

template <typename T>
Tensor<T> RetrievalModel<T>::pair_scores(
    const Tensor<T>& text_reps, const Tensor<T>& image_reps,
    const std::vector<std::pair<std::size_t, std::size_t>>& pairs) {
  if (pairs.empty()) throw ContractError("no pairs to score");
  std::vector<std::size_t> text_idx, image_idx;
  text_idx.reserve(pairs.size());
  image_idx.reserve(pairs.size());
  for (auto [t, i] : pairs) {
    text_idx.push_back(t);
    image_idx.push_back(i);
  }
  auto txt = take_rows(text_reps, text_idx);
  auto img = take_rows(image_reps, image_idx);
  if (cfg_.backend == Backend::temde) {
    return score_head_.forward(combine_modalities(txt, img, combine_));
  }
  auto hidden = relu(sim_hidden_.forward(global_similarity_vector(img, txt)));
  return score_head_.forward(hidden);
}

template <typename T>
Tensor<T> RetrievalModel<T>::score(const std::vector<std::size_t>& caption,
                                   const Tensor<T>& segments, Mode mode) {
  auto txt = text_representations({caption}, mode);
  auto img = image_representations({segments}, mode);
  return reshape(pair_scores(txt, img, {{0, 0}}), {1});
}

namespace {

template <typename T>
void append_coder_state(TemdeParams<T>& coder, bool include_buffers,
                        std::vector<Tensor<T>>& out) {
  out.push_back(coder.centroids);
  out.push_back(coder.projection.weight);
  out.push_back(coder.projection.bias);
  out.push_back(coder.bnorm.gamma);
  out.push_back(coder.bnorm.beta);
  if (include_buffers) {
    out.push_back(coder.bnorm.running_mean);
    out.push_back(coder.bnorm.running_var);
  }
}

template <typename T>
void append_sim_state(GlobalSimParams<T>& sim, bool include_buffers,
                      std::vector<Tensor<T>>& out) {
  auto stack = [&](std::vector<Linear<T>>& linears,
                   std::vector<BatchNorm<T>>& norms) {
    for (std::size_t b = 0; b < linears.size(); ++b) {
      out.push_back(linears[b].weight);
      out.push_back(linears[b].bias);
      out.push_back(norms[b].gamma);
      out.push_back(norms[b].beta);
      if (include_buffers) {
        out.push_back(norms[b].running_mean);
        out.push_back(norms[b].running_var);
      }
    }
  };
  stack(sim.local_linears, sim.local_norms);
  stack(sim.global_linears, sim.global_norms);
}

}  // namespace

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>>
RetrievalModel<T>::named_parameters() {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  out.emplace_back("embedding", embedding_);
  out.emplace_back("image_proj.weight", image_proj_.weight);
  out.emplace_back("image_proj.bias", image_proj_.bias);
  auto coder = [&out](const std::string& prefix, TemdeParams<T>& c) {
    out.emplace_back(prefix + ".centroids", c.centroids);
    out.emplace_back(prefix + ".projection.weight", c.projection.weight);
    out.emplace_back(prefix + ".projection.bias", c.projection.bias);
    out.emplace_back(prefix + ".bnorm.gamma", c.bnorm.gamma);
    out.emplace_back(prefix + ".bnorm.beta", c.bnorm.beta);
  };
  auto sim = [&out](const std::string& prefix, GlobalSimParams<T>& s) {
    auto stack = [&](const std::string& which,
                     std::vector<Linear<T>>& linears,
                     std::vector<BatchNorm<T>>& norms) {
      for (std::size_t b = 0; b < linears.size(); ++b) {
        std::string base = prefix + "." + which + std::to_string(b);
        out.emplace_back(base + ".weight", linears[b].weight);
        out.emplace_back(base + ".bias", linears[b].bias);
        out.emplace_back(base + ".gamma", norms[b].gamma);
        out.emplace_back(base + ".beta", norms[b].beta);
      }
    };
    stack("local", s.local_linears, s.local_norms);
    stack("global", s.global_linears, s.global_norms);
  };
  if (cfg_.backend == Backend::temde) {
    coder("text_coder", text_coder_);
    coder("image_coder", image_coder_);
    out.emplace_back("combine.weight", combine_.linear.weight);
    out.emplace_back("combine.bias", combine_.linear.bias);
  } else {
    sim("text_sim", text_sim_);
    sim("image_sim", image_sim_);
    out.emplace_back("sim_head.weight", sim_hidden_.weight);
    out.emplace_back("sim_head.bias", sim_hidden_.bias);
  }
  out.emplace_back("score_head.weight", score_head_.weight);
  return out;
}

template <typename T>
std::vector<Tensor<T>> RetrievalModel<T>::parameters() {
  std::vector<Tensor<T>> out;
  for (auto& entry : named_parameters()) out.push_back(entry.second);
  return out;
}

template <typename T>
std::vector<Tensor<T>> RetrievalModel<T>::state_tensors() {
  std::vector<Tensor<T>> out{embedding_, image_proj_.weight,
                             image_proj_.bias};
  if (cfg_.backend == Backend::temde) {
    append_coder_state(text_coder_, true, out);
    append_coder_state(image_coder_, true, out);
    out.push_back(combine_.linear.weight);
    out.push_back(combine_.linear.bias);
  } else {
    append_sim_state(text_sim_, true, out);
    append_sim_state(image_sim_, true, out);
    out.push_back(sim_hidden_.weight);
    out.push_back(sim_hidden_.bias);
  }
  out.push_back(score_head_.weight);
  return out;
}

template <typename T>
TemdeParams<T>& RetrievalModel<T>::text_coder() {
  if (cfg_.backend != Backend::temde) {
    throw ContractError("model has no temde coder (attention backend)");
  }
  return text_coder_;
}

template <typename T>
TemdeParams<T>& RetrievalModel<T>::image_coder() {
  if (cfg_.backend != Backend::temde) {
    throw ContractError("model has no temde coder (attention backend)");
  }
  return image_coder_;
}

// --- losses ----------------------------------------------------------------

template <typename T>
Tensor<T> triplet_loss(const Tensor<T>& pos_score,
                       const Tensor<T>& neg_scores_img,
                       const Tensor<T>& neg_scores_txt, T margin) {
  if (!(margin > T(0))) throw ContractError("margin must be positive");
  if (pos_score.size() != 1) {
    throw ContractError("positive score must be a scalar");
  }
  if (neg_scores_img.size() < 1 || neg_scores_txt.size() < 1) {
    throw ContractError("each direction needs at least one negative");
  }
  auto pos = reshape(pos_score, {1});
  auto hinge = [&](const Tensor<T>& negs) {
    auto flat = reshape(negs, {negs.size()});
    return relu(add_scalar(sub(max(flat, 0), pos), margin));
  };
  return add(hinge(neg_scores_img), hinge(neg_scores_txt));
}

template <typename T>
Tensor<T> batch_triplet_loss(const Tensor<T>& score_matrix, T margin) {
  if (!(margin > T(0))) throw ContractError("margin must be positive");
  if (score_matrix.rank() != 2 ||
      score_matrix.dim(0) != score_matrix.dim(1)) {
    throw DimensionError("batch_triplet_loss expects a square matrix, got " +
                         shape_str(score_matrix.shape()));
  }
  std::size_t batch = score_matrix.dim(0);
  if (batch < 2) {
    throw ContractError("in-batch negatives need a batch of at least 2");
  }
  // Push the diagonal far down so the per-row/column max is the hardest
  // negative; extract the positives with an identity mask.
  std::vector<T> mask_v(batch * batch, T(0)), eye_v(batch * batch, T(0));
  for (std::size_t i = 0; i < batch; ++i) {
    mask_v[i * batch + i] = T(-1e9);
    eye_v[i * batch + i] = T(1);
  }
  Tensor<T> mask({batch, batch}, std::move(mask_v));
  Tensor<T> eye({batch, batch}, std::move(eye_v));
  auto pos = sum(mul(score_matrix, eye), 1);       // [B]
  auto masked = add(score_matrix, mask);
  auto hardest_img = max(masked, 1);               // per caption over images
  auto hardest_txt = max(masked, 0);               // per image over captions
  auto t2i = relu(add_scalar(sub(hardest_img, pos), margin));
  auto i2t = relu(add_scalar(sub(hardest_txt, pos), margin));
  return sum_all(add(t2i, i2t));
}

// --- persistence -------------------------------------------------------------

namespace {

constexpr char kModelMagic[4] = {'T', 'E', 'M', 'D'};
constexpr std::uint32_t kModelVersion = 1;

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string config_to_text(const ModelConfig& cfg) {
  std::ostringstream os;
  os << "backend=" << backend_name(cfg.backend) << '\n'
     << "vocab_size=" << cfg.vocab_size << '\n'
     << "embed_dim=" << cfg.embed_dim << '\n'
     << "segment_feat_dim=" << cfg.segment_feat_dim << '\n'
     << "head_dim=" << cfg.head_dim << '\n'
     << "margin=" << fmt_double(cfg.margin) << '\n'
     << "seed=" << cfg.seed << '\n'
     << "temde_n=" << cfg.temde.n_divisions << '\n'
     << "temde_k=" << cfg.temde.n_centroids << '\n'
     << "temde_d=" << cfg.temde.inner_dim << '\n'
     << "temde_sign=" << distance_sign_name(cfg.temde.distance_sign) << '\n'
     << "temde_shared=" << (cfg.temde.shared_projection ? 1 : 0) << '\n'
     << "temde_bn_momentum=" << fmt_double(cfg.temde.bn_momentum) << '\n'
     << "temde_bn_eps=" << fmt_double(cfg.temde.bn_eps) << '\n'
     << "attn_width=" << cfg.attention.width << '\n'
     << "attn_blocks=" << cfg.attention.blocks << '\n'
     << "attn_bn_momentum=" << fmt_double(cfg.attention.bn_momentum) << '\n'
     << "attn_bn_eps=" << fmt_double(cfg.attention.bn_eps) << '\n';
  return os.str();
}

ModelConfig config_from_text(const std::string& text) {
  ModelConfig cfg;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw FormatError("model config line without '=': " + line);
    }
    std::string key = line.substr(0, eq);
    std::string value = line.substr(eq + 1);
    try {
      if (key == "backend") cfg.backend = parse_backend(value);
      else if (key == "vocab_size") cfg.vocab_size = std::stoull(value);
      else if (key == "embed_dim") cfg.embed_dim = std::stoull(value);
      else if (key == "segment_feat_dim")
        cfg.segment_feat_dim = std::stoull(value);
      else if (key == "head_dim") cfg.head_dim = std::stoull(value);
      else if (key == "margin") cfg.margin = std::stod(value);
      else if (key == "seed") cfg.seed = std::stoull(value);
      else if (key == "temde_n") cfg.temde.n_divisions = std::stoull(value);
      else if (key == "temde_k") cfg.temde.n_centroids = std::stoull(value);
      else if (key == "temde_d") cfg.temde.inner_dim = std::stoull(value);
      else if (key == "temde_sign")
        cfg.temde.distance_sign = parse_distance_sign(value);
      else if (key == "temde_shared")
        cfg.temde.shared_projection = value == "1";
      else if (key == "temde_bn_momentum")
        cfg.temde.bn_momentum = std::stod(value);
      else if (key == "temde_bn_eps") cfg.temde.bn_eps = std::stod(value);
      else if (key == "attn_width") cfg.attention.width = std::stoull(value);
      else if (key == "attn_blocks") cfg.attention.blocks = std::stoull(value);
      else if (key == "attn_bn_momentum")
        cfg.attention.bn_momentum = std::stod(value);
      else if (key == "attn_bn_eps") cfg.attention.bn_eps = std::stod(value);
      else throw FormatError("unknown model config key '" + key + "'");
    } catch (const std::invalid_argument&) {
      throw FormatError("bad value for model config key '" + key + "'");
    }
  }
  return cfg;
}

}  // namespace

std::string serialize_model(RetrievalModel<float>& model) {
  std::string out;
  out.append(kModelMagic, 4);
  io::put_u32(out, kModelVersion);
  std::string cfg_text = config_to_text(model.config());
  io::put_u32(out, static_cast<std::uint32_t>(cfg_text.size()));
  out += cfg_text;
  for (auto& t : model.state_tensors())
    for (float v : t.data()) io::put_f32(out, v);
  return out;
}

RetrievalModel<float> deserialize_model(const std::string& buf,
                                        const std::string& context) {
  if (buf.size() < 12) {
    throw FormatError(context + ": truncated header, " +
                      std::to_string(buf.size()) + " bytes at offset 0");
  }
  if (std::memcmp(buf.data(), kModelMagic, 4) != 0) {
    throw FormatError(context + ": bad magic at byte offset 0");
  }
  std::uint32_t version = io::get_u32(buf, 4);
  if (version != kModelVersion) {
    throw FormatError(context + ": unsupported version " +
                      std::to_string(version) + " at byte offset 4");
  }
  std::size_t cfg_len = io::get_u32(buf, 8);
  if (12 + cfg_len > buf.size()) {
    throw FormatError(context + ": config block of " + std::to_string(cfg_len) +
                      " bytes truncated at byte offset 12");
  }
  ModelConfig cfg = config_from_text(buf.substr(12, cfg_len));
  RetrievalModel<float> model(cfg);
  std::size_t offset = 12 + cfg_len;
  for (auto& t : model.state_tensors()) {
    auto& values = t.data();
    if (offset + 4 * values.size() > buf.size()) {
      throw FormatError(context + ": tensor payload truncated at byte offset " +
                        std::to_string(offset));
    }
    for (auto& v : values) {
      v = io::get_f32(buf, offset);
      offset += 4;
    }
  }
  if (offset != buf.size()) {
    throw FormatError(context + ": " + std::to_string(buf.size() - offset) +
                      " trailing bytes at byte offset " +
                      std::to_string(offset));
  }
  return model;
}

void save_model(const std::string& path, RetrievalModel<float>& model) {
  io::write_file(path, serialize_model(model));
}

RetrievalModel<float> load_model(const std::string& path) {
  return deserialize_model(io::read_file(path), path);
}

std::size_t model_file_size(const ModelConfig& cfg) {
  RetrievalModel<float> model(cfg);
  std::size_t bytes = 12 + config_to_text(model.config()).size();
  for (auto& t : model.state_tensors()) bytes += 4 * t.size();
  return bytes;
}

#define TEMDE_INSTANTIATE_MODEL(T)                                         \
  template class RetrievalModel<T>;                                        \
  template Tensor<T> triplet_loss<T>(const Tensor<T>&, const Tensor<T>&,   \
                                     const Tensor<T>&, T);                 \
  template Tensor<T> batch_triplet_loss<T>(const Tensor<T>&, T);

TEMDE_INSTANTIATE_MODEL(float)
TEMDE_INSTANTIATE_MODEL(double)

#undef TEMDE_INSTANTIATE_MODEL

}  // namespace temde
