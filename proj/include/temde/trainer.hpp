#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "temde/data.hpp"
#include "temde/metrics.hpp"
#include "temde/model.hpp"

namespace temde {

enum class OptimizerKind { sgd, adam };

std::string optimizer_name(OptimizerKind kind);
OptimizerKind parse_optimizer(const std::string& name);

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 16;
  double learning_rate = 2e-4;
  OptimizerKind optimizer = OptimizerKind::adam;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 7;
  std::string checkpoint_dir;  // empty: no checkpoints written
  std::size_t eval_every = 0;  // steps between evals; 0: once per epoch
};

// Vanilla SGD over the accumulated grads; tensors without grads are skipped.
template <typename T>
void sgd_step(std::vector<Tensor<T>>& params, T lr);

template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m, v;
  std::size_t t = 0;

  void init(const std::vector<Tensor<T>>& params);
};

template <typename T>
void adam_step(std::vector<Tensor<T>>& params, AdamState<T>& state, T lr,
               T beta1, T beta2, T eps);

struct DirectionMetrics {
  double r1 = 0, r5 = 0, r10 = 0, mrr = 0;
};

struct EvalReport {
  DirectionMetrics text_to_image;
  DirectionMetrics image_to_text;
  DirectionMetrics mean() const;
};

// Full cross-modal ranking over one split: captions query the image gallery
// and vice versa; the matched item is the single relevant target. Recall
// cutoffs larger than the gallery are clamped.
template <typename T>
EvalReport evaluate_retrieval(RetrievalModel<T>& model,
                              const PairedDataset& ds,
                              const std::vector<std::size_t>& item_indices);

struct HistoryEntry {
  std::size_t step = 0;
  double loss = 0;  // mean training loss since the previous entry
  EvalReport eval;
};

struct TrainResult {
  std::vector<HistoryEntry> history;
  double best_val_r1 = 0;
  std::size_t best_step = 0;
  std::size_t steps = 0;
};

// step<TAB>loss<TAB>r@1<TAB>r@5<TAB>r@10<TAB>mrr, metrics averaged over the
// two retrieval directions.
std::string format_history(const std::vector<HistoryEntry>& history);

// Runs cfg.epochs epochs of in-batch triplet training with per-epoch seeded
// shuffling. Evaluates on the val split, tracks the best model, and writes
// best.tmodel / last.tstate under checkpoint_dir when set (float models).
// resume_state continues a previous run from its last.tstate.
template <typename T>
TrainResult train(RetrievalModel<T>& model, const PairedDataset& ds,
                  const TrainConfig& cfg, const std::string& resume_state = "");

}  // namespace temde
