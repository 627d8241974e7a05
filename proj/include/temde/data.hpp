#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "temde/tensor.hpp"

namespace temde {

// Paired caption/image corpus. Captions are token-id sequences, images are
// rows of segment features; matched pairs share the item index.
struct PairedDataset {
  struct Item {
    std::string id;
    std::vector<std::size_t> tokens;  // ids into vocab, 0 = unknown
    std::vector<float> segments;      // row-major [n_segments x feat_dim]
    std::size_t n_segments = 0;
    std::vector<std::size_t> latents;  // generator metadata, not persisted
  };

  std::vector<std::string> vocab;  // index = token id; vocab[0] = unknown
  std::size_t feat_dim = 0;
  std::vector<Item> items;
  std::vector<std::size_t> train_idx, val_idx, test_idx;

  std::size_t vocab_size() const { return vocab.size(); }
  const std::vector<std::size_t>& split(const std::string& name) const;
  void validate() const;

  template <typename T>
  Tensor<T> segments_tensor(std::size_t item_index) const;
};

struct SyntheticSpec {
  std::size_t n_train = 2048;
  std::size_t n_val = 256;
  std::size_t n_test = 256;
  std::size_t n_latents = 16;
  std::size_t vocab_size = 512;
  std::size_t feat_dim = 64;
  std::size_t min_tokens = 4, max_tokens = 12;
  std::size_t min_segments = 4, max_segments = 10;
  std::uint64_t seed = 42;
};

// Items draw 2-5 shared latent factors; captions sample from per-latent
// vocabulary blocks plus noise tokens, segments sample per-latent Gaussian
// prototypes plus noise rows. Latent sets are unique across items so
// retrieval on them is exact.
PairedDataset generate_synthetic(const SyntheticSpec& spec);

// FMAT: 'FMAT' magic, u32 version, u32 rows, u32 cols, then row-major
// little-endian f32.
void save_features(const std::string& path, const Tensor<float>& matrix);
Tensor<float> load_features(const std::string& path);

// Captions: one per line, `item_id<TAB>token token ...`.
struct CaptionFile {
  std::vector<std::string> ids;
  std::vector<std::vector<std::size_t>> token_ids;
  std::vector<std::string> vocab;  // first-occurrence order, [0] = unknown
};
CaptionFile load_captions(const std::string& path);
void save_captions(const std::string& path,
                   const std::vector<std::string>& ids,
                   const std::vector<std::vector<std::size_t>>& token_ids,
                   const std::vector<std::string>& vocab);

// Dataset directory: captions.tsv, segments.fmat, segments.idx.tsv,
// splits.tsv.
void save_dataset(const std::string& dir, const PairedDataset& ds);
PairedDataset load_dataset(const std::string& dir);

}  // namespace temde
