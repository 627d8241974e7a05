#include "temde/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <random>
#include <sstream>

#include "temde/io_util.hpp"

namespace temde {

namespace fs = std::filesystem;

std::string optimizer_name(OptimizerKind kind) {
  return kind == OptimizerKind::sgd ? "sgd" : "adam";
}

OptimizerKind parse_optimizer(const std::string& name) {
  if (name == "sgd") return OptimizerKind::sgd;
  if (name == "adam") return OptimizerKind::adam;
  throw ContractError("unknown optimizer '" + name + "'");
}

template <typename T>
void sgd_step(std::vector<Tensor<T>>& params, T lr) {
  for (auto& p : params) {
    if (!p.has_grad()) continue;
    auto& values = p.data();
    const auto& grad = p.grad();
    for (std::size_t i = 0; i < values.size(); ++i) values[i] -= lr * grad[i];
  }
}

template <typename T>
void AdamState<T>::init(const std::vector<Tensor<T>>& params) {
  m.clear();
  v.clear();
  for (const auto& p : params) {
    m.emplace_back(p.size(), T(0));
    v.emplace_back(p.size(), T(0));
  }
  t = 0;
}

template <typename T>
void adam_step(std::vector<Tensor<T>>& params, AdamState<T>& state, T lr,
               T beta1, T beta2, T eps) {
  if (state.m.size() != params.size()) {
    throw ContractError("adam state does not match parameter list");
  }
  state.t += 1;
  T bc1 = T(1) - std::pow(beta1, static_cast<T>(state.t));
  T bc2 = T(1) - std::pow(beta2, static_cast<T>(state.t));
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    if (!p.has_grad()) continue;
    auto& values = p.data();
    const auto& grad = p.grad();
    auto& m = state.m[pi];
    auto& v = state.v[pi];
    for (std::size_t i = 0; i < values.size(); ++i) {
      m[i] = beta1 * m[i] + (T(1) - beta1) * grad[i];
      v[i] = beta2 * v[i] + (T(1) - beta2) * grad[i] * grad[i];
      T mhat = m[i] / bc1;
      T vhat = v[i] / bc2;
      values[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

// --- evaluation -------------------------------------------------------------

DirectionMetrics EvalReport::mean() const {
  return {(text_to_image.r1 + image_to_text.r1) / 2,
          (text_to_image.r5 + image_to_text.r5) / 2,
          (text_to_image.r10 + image_to_text.r10) / 2,
          (text_to_image.mrr + image_to_text.mrr) / 2};
}

namespace {

DirectionMetrics metrics_from(const std::vector<RankingResult>& results) {
  std::size_t gallery = results.front().ranked.size();
  DirectionMetrics out;
  out.r1 = recall_at_k(results, 1);
  out.r5 = recall_at_k(results, std::min<std::size_t>(5, gallery));
  out.r10 = recall_at_k(results, std::min<std::size_t>(10, gallery));
  out.mrr = mrr(results);
  return out;
}

}  // namespace

template <typename T>
EvalReport evaluate_retrieval(RetrievalModel<T>& model, const PairedDataset& ds,
                              const std::vector<std::size_t>& item_indices) {
  if (item_indices.empty()) {
    throw ContractError("evaluate_retrieval on an empty split");
  }
  NoGradGuard no_grad;
  std::size_t n = item_indices.size();
  std::vector<std::vector<std::size_t>> captions;
  std::vector<Tensor<T>> segments;
  captions.reserve(n);
  segments.reserve(n);
  for (std::size_t idx : item_indices) {
    captions.push_back(ds.items.at(idx).tokens);
    segments.push_back(ds.template segments_tensor<T>(idx));
  }
  auto text = model.text_representations(captions, Mode::eval);
  auto image = model.image_representations(segments, Mode::eval);

  // Pair scoring in bounded chunks of query rows.
  std::vector<T> scores(n * n);
  std::size_t rows_per_chunk = std::max<std::size_t>(1, 16384 / n);
  for (std::size_t row0 = 0; row0 < n; row0 += rows_per_chunk) {
    std::size_t rows = std::min(rows_per_chunk, n - row0);
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    pairs.reserve(rows * n);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t g = 0; g < n; ++g) pairs.emplace_back(row0 + r, g);
    auto chunk = model.pair_scores(text, image, pairs);
    std::copy(chunk.data().begin(), chunk.data().end(),
              scores.begin() + static_cast<std::ptrdiff_t>(row0 * n));
  }
  Tensor<T> matrix({n, n}, std::move(scores));

  std::vector<std::vector<std::size_t>> self(n);
  for (std::size_t i = 0; i < n; ++i) self[i] = {i};
  EvalReport report;
  report.text_to_image = metrics_from(rank_all(matrix, self));
  report.image_to_text = metrics_from(rank_all(transpose(matrix), self));
  return report;
}

std::string format_history(const std::vector<HistoryEntry>& history) {
  std::ostringstream os;
  char buf[160];
  for (const auto& e : history) {
    auto m = e.eval.mean();
    std::snprintf(buf, sizeof(buf), "%zu\t%.6f\t%.4f\t%.4f\t%.4f\t%.4f",
                  e.step, e.loss, m.r1, m.r5, m.r10, m.mrr);
    os << buf << '\n';
  }
  return os.str();
}

// --- train-state persistence --------------------------------------------------

namespace {

constexpr char kStateMagic[4] = {'T', 'S', 'T', 'A'};
constexpr std::uint32_t kStateVersion = 1;

struct TrainCursor {
  std::size_t next_epoch = 0;
  std::size_t step = 0;
  double best_val_r1 = -1;
  std::size_t best_step = 0;
};

void save_train_state(const std::string& path, RetrievalModel<float>& model,
                      const AdamState<float>& adam, const std::mt19937_64& rng,
                      const TrainCursor& cursor) {
  std::string out;
  out.append(kStateMagic, 4);
  io::put_u32(out, kStateVersion);
  std::string model_bytes = serialize_model(model);
  io::put_u64(out, model_bytes.size());
  out += model_bytes;
  io::put_u64(out, cursor.next_epoch);
  io::put_u64(out, cursor.step);
  io::put_u64(out, std::bit_cast<std::uint64_t>(cursor.best_val_r1));
  io::put_u64(out, cursor.best_step);
  io::put_u64(out, adam.t);
  io::put_u64(out, adam.m.size());
  for (std::size_t pi = 0; pi < adam.m.size(); ++pi) {
    io::put_u64(out, adam.m[pi].size());
    for (float x : adam.m[pi]) io::put_f32(out, x);
    for (float x : adam.v[pi]) io::put_f32(out, x);
  }
  std::ostringstream rng_os;
  rng_os << rng;
  std::string rng_text = rng_os.str();
  io::put_u64(out, rng_text.size());
  out += rng_text;
  io::write_file(path, out);
}

void load_train_state(const std::string& path, RetrievalModel<float>& model,
                      AdamState<float>& adam, std::mt19937_64& rng,
                      TrainCursor& cursor) {
  std::string buf = io::read_file(path);
  if (buf.size() < 8 || std::memcmp(buf.data(), kStateMagic, 4) != 0) {
    throw FormatError(path + ": not a train-state file");
  }
  if (io::get_u32(buf, 4) != kStateVersion) {
    throw FormatError(path + ": unsupported train-state version");
  }
  std::size_t off = 8;
  std::size_t model_len = io::get_u64(buf, off);
  off += 8;
  if (off + model_len > buf.size()) {
    throw FormatError(path + ": model block truncated at byte offset " +
                      std::to_string(off));
  }
  auto restored = deserialize_model(buf.substr(off, model_len), path);
  off += model_len;
  const auto& a = restored.config();
  const auto& b = model.config();
  if (a.backend != b.backend || a.vocab_size != b.vocab_size ||
      a.embed_dim != b.embed_dim ||
      a.segment_feat_dim != b.segment_feat_dim) {
    throw ContractError(path +
                        ": stored model config does not match the model "
                        "being resumed");
  }
  model = std::move(restored);
  cursor.next_epoch = io::get_u64(buf, off);
  cursor.step = io::get_u64(buf, off + 8);
  cursor.best_val_r1 = std::bit_cast<double>(io::get_u64(buf, off + 16));
  cursor.best_step = io::get_u64(buf, off + 24);
  adam.t = io::get_u64(buf, off + 32);
  std::size_t n_params = io::get_u64(buf, off + 40);
  off += 48;
  adam.m.assign(n_params, {});
  adam.v.assign(n_params, {});
  for (std::size_t pi = 0; pi < n_params; ++pi) {
    std::size_t len = io::get_u64(buf, off);
    off += 8;
    if (off + 8 * len > buf.size()) {
      throw FormatError(path + ": optimizer state truncated at byte offset " +
                        std::to_string(off));
    }
    adam.m[pi].resize(len);
    adam.v[pi].resize(len);
    for (auto& x : adam.m[pi]) {
      x = io::get_f32(buf, off);
      off += 4;
    }
    for (auto& x : adam.v[pi]) {
      x = io::get_f32(buf, off);
      off += 4;
    }
  }
  std::size_t rng_len = io::get_u64(buf, off);
  off += 8;
  if (off + rng_len > buf.size()) {
    throw FormatError(path + ": rng state truncated at byte offset " +
                      std::to_string(off));
  }
  std::istringstream rng_is(buf.substr(off, rng_len));
  rng_is >> rng;
  off += rng_len;
  if (off != buf.size()) {
    throw FormatError(path + ": trailing bytes at byte offset " +
                      std::to_string(off));
  }
}

}  // namespace

// --- training loop -------------------------------------------------------------

template <typename T>
TrainResult train(RetrievalModel<T>& model, const PairedDataset& ds,
                  const TrainConfig& cfg, const std::string& resume_state) {
  if (ds.train_idx.empty()) throw ContractError("dataset has no train split");
  if (ds.val_idx.empty()) throw ContractError("dataset has no val split");
  if (cfg.batch_size < 2) {
    throw ContractError("batch_size must be at least 2 for in-batch negatives");
  }
  constexpr bool kIsFloat = std::is_same_v<T, float>;
  if (!kIsFloat && (!resume_state.empty() || !cfg.checkpoint_dir.empty())) {
    throw ContractError("checkpointing is defined for 32-bit models only");
  }

  auto params = model.parameters();
  AdamState<T> adam;
  adam.init(params);
  std::mt19937_64 rng(cfg.seed);
  TrainCursor cursor;

  if constexpr (kIsFloat) {
    if (!resume_state.empty()) {
      load_train_state(resume_state, model, adam, rng, cursor);
      params = model.parameters();
    }
  }

  TrainResult result;
  result.best_val_r1 = cursor.best_val_r1 < 0 ? 0 : cursor.best_val_r1;
  result.best_step = cursor.best_step;
  std::size_t step = cursor.step;
  T margin = static_cast<T>(model.config().margin);
  T lr = static_cast<T>(cfg.learning_rate);

  double loss_accum = 0;
  std::size_t loss_count = 0;
  bool best_updated = cursor.best_val_r1 >= 0 && !resume_state.empty();

  auto run_eval = [&](std::size_t at_step) {
    auto report = evaluate_retrieval(model, ds, ds.val_idx);
    HistoryEntry entry{at_step,
                       loss_count ? loss_accum / double(loss_count) : 0.0,
                       report};
    result.history.push_back(entry);
    loss_accum = 0;
    loss_count = 0;
    double r1 = report.mean().r1;
    if (r1 > result.best_val_r1 || !best_updated) {
      result.best_val_r1 = r1;
      result.best_step = at_step;
      best_updated = true;
      if constexpr (kIsFloat) {
        if (!cfg.checkpoint_dir.empty()) {
          fs::create_directories(cfg.checkpoint_dir);
          save_model((fs::path(cfg.checkpoint_dir) / "best.tmodel").string(),
                     model);
        }
      }
    }
  };

  for (std::size_t epoch = cursor.next_epoch; epoch < cfg.epochs; ++epoch) {
    auto order = ds.train_idx;
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t off = 0; off + 2 <= order.size();
         off += cfg.batch_size) {
      std::size_t bsz = std::min(cfg.batch_size, order.size() - off);
      std::vector<std::vector<std::size_t>> captions;
      std::vector<Tensor<T>> segments;
      captions.reserve(bsz);
      segments.reserve(bsz);
      for (std::size_t i = 0; i < bsz; ++i) {
        std::size_t idx = order[off + i];
        captions.push_back(ds.items[idx].tokens);
        segments.push_back(ds.template segments_tensor<T>(idx));
      }
      auto text = model.text_representations(captions, Mode::train);
      auto image = model.image_representations(segments, Mode::train);
      std::vector<std::pair<std::size_t, std::size_t>> pairs;
      pairs.reserve(bsz * bsz);
      for (std::size_t i = 0; i < bsz; ++i)
        for (std::size_t j = 0; j < bsz; ++j) pairs.emplace_back(i, j);
      auto matrix = reshape(model.pair_scores(text, image, pairs), {bsz, bsz});
      auto loss = batch_triplet_loss(matrix, margin);
      T value = loss.item();
      // The hinge zeroes NaN terms, so a diverged model can still report a
      // finite loss; the raw scores give it away.
      bool scores_finite = true;
      for (T s : matrix.data()) {
        if (!std::isfinite(s)) {
          scores_finite = false;
          break;
        }
      }
      if (!std::isfinite(value) || !scores_finite) {
        throw Error("training diverged: non-finite loss or scores at step " +
                    std::to_string(step + 1));
      }
      for (auto& p : params) p.zero_grad();
      backward(loss);
      if (cfg.optimizer == OptimizerKind::sgd) {
        sgd_step(params, lr);
      } else {
        adam_step(params, adam, lr, static_cast<T>(cfg.adam_beta1),
                  static_cast<T>(cfg.adam_beta2),
                  static_cast<T>(cfg.adam_eps));
      }
      ++step;
      loss_accum += value;
      ++loss_count;
      if (cfg.eval_every > 0 && step % cfg.eval_every == 0) run_eval(step);
    }
    if (cfg.eval_every == 0) run_eval(step);
    if constexpr (kIsFloat) {
      if (!cfg.checkpoint_dir.empty()) {
        cursor.next_epoch = epoch + 1;
        cursor.step = step;
        cursor.best_val_r1 = result.best_val_r1;
        cursor.best_step = result.best_step;
        fs::create_directories(cfg.checkpoint_dir);
        save_train_state(
            (fs::path(cfg.checkpoint_dir) / "last.tstate").string(), model,
            adam, rng, cursor);
      }
    }
  }
  result.steps = step;
  return result;
}

#define TEMDE_INSTANTIATE_TRAINER(T)                                        \
  template void sgd_step<T>(std::vector<Tensor<T>>&, T);                    \
  template struct AdamState<T>;                                             \
  template void adam_step<T>(std::vector<Tensor<T>>&, AdamState<T>&, T, T,  \
                             T, T);                                         \
  template EvalReport evaluate_retrieval<T>(                                \
      RetrievalModel<T>&, const PairedDataset&,                             \
      const std::vector<std::size_t>&);                                     \
  template TrainResult train<T>(RetrievalModel<T>&, const PairedDataset&,   \
                                const TrainConfig&, const std::string&);

TEMDE_INSTANTIATE_TRAINER(float)
TEMDE_INSTANTIATE_TRAINER(double)

#undef TEMDE_INSTANTIATE_TRAINER

}  // namespace temde
