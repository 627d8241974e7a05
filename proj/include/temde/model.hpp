#pragma once

#include <string>
#include <utility>
#include <vector>

#include "temde/attention.hpp"
#include "temde/coder.hpp"
#include "temde/nn.hpp"
#include "temde/tensor.hpp"

namespace temde {

enum class Backend { temde, attention };

std::string backend_name(Backend b);
Backend parse_backend(const std::string& name);

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 64;         // E, token embedding width
  std::size_t segment_feat_dim = 64;  // F, raw segment feature width
  Backend backend = Backend::temde;
  TemdeConfig temde;          // input_dim is forced to embed_dim
  GlobalSimConfig attention;  // input_dim is forced to embed_dim
  std::size_t head_dim = 256;  // H for the combined temde representation
  double margin = 0.2;
  std::uint64_t seed = 1;

  // The combined representation must be smaller than the concatenated
  // sketches; when head_dim is not, fall back to one sketch length.
  std::size_t effective_head_dim() const;
  void validate() const;
};

// Two-tower cross-modal scorer: a text embedding table and an image segment
// projection feed a per-modality global-representation backend (a T-EMDE
// coder pair or the self-attention baseline), and a linear head scores each
// (caption, image) pair.
template <typename T>
class RetrievalModel {
 public:
  explicit RetrievalModel(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }

  // [T_c] ids -> [T_c x E]. Unknown ids raise VocabularyError.
  Tensor<T> embed_tokens(const std::vector<std::size_t>& token_ids);

  // One global-representation row per item: [B x N*K] sketches for the
  // temde backend, [B x d] normalized attention globals for the baseline.
  Tensor<T> text_representations(
      const std::vector<std::vector<std::size_t>>& captions, Mode mode);
  Tensor<T> image_representations(const std::vector<Tensor<T>>& segment_sets,
                                  Mode mode);

  // Scores for (text row, image row) index pairs, shape [P x 1].
  Tensor<T> pair_scores(
      const Tensor<T>& text_reps, const Tensor<T>& image_reps,
      const std::vector<std::pair<std::size_t, std::size_t>>& pairs);

  // Single (caption, image) match score as a scalar tensor.
  Tensor<T> score(const std::vector<std::size_t>& caption,
                  const Tensor<T>& segments, Mode mode);

  std::vector<Tensor<T>> parameters();
  std::vector<std::pair<std::string, Tensor<T>>> named_parameters();
  // Parameters plus batch-norm running buffers, in declaration order; this
  // is the persisted state.
  std::vector<Tensor<T>> state_tensors();

  TemdeParams<T>& text_coder();
  TemdeParams<T>& image_coder();

 private:
  ModelConfig cfg_;
  Tensor<T> embedding_;   // [vocab x E]
  Linear<T> image_proj_;  // F -> E
  TemdeParams<T> text_coder_, image_coder_;
  CombineHead<T> combine_;
  GlobalSimParams<T> text_sim_, image_sim_;
  Linear<T> sim_hidden_;  // attention path only
  Linear<T> score_head_;

  Tensor<T> global_rows(TemdeParams<T>* coder, GlobalSimParams<T>* sim,
                        const std::vector<Tensor<T>>& tokens, Mode mode);
};

// Bidirectional hinge on one tuple: the hardest negative of each direction
// against the positive score.
template <typename T>
Tensor<T> triplet_loss(const Tensor<T>& pos_score,
                       const Tensor<T>& neg_scores_img,
                       const Tensor<T>& neg_scores_txt, T margin);

// Same hinge over a full [B x B] in-batch score matrix whose diagonal holds
// the matched pairs; negatives are the other items in the batch.
template <typename T>
Tensor<T> batch_triplet_loss(const Tensor<T>& score_matrix, T margin);

// Model file: 'TEMD' magic, u32 version, length-prefixed UTF-8 key=value
// config block, then raw little-endian f32 state tensors in declaration
// order.
std::string serialize_model(RetrievalModel<float>& model);
RetrievalModel<float> deserialize_model(const std::string& bytes,
                                        const std::string& context);
void save_model(const std::string& path, RetrievalModel<float>& model);
RetrievalModel<float> load_model(const std::string& path);

// Exact byte size a saved model with this config occupies.
std::size_t model_file_size(const ModelConfig& cfg);

}  // namespace temde
