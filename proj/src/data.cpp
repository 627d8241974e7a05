#include "temde/data.hpp"

#include "temde/io_util.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace temde {

namespace fs = std::filesystem;

const std::vector<std::size_t>& PairedDataset::split(
    const std::string& name) const {
  if (name == "train") return train_idx;
  if (name == "val") return val_idx;
  if (name == "test") return test_idx;
  throw ContractError("unknown split '" + name + "'");
}

void PairedDataset::validate() const {
  std::vector<int> seen(items.size(), 0);
  auto mark = [&](const std::vector<std::size_t>& idx) {
    for (std::size_t i : idx) {
      if (i >= items.size()) {
        throw ContractError("split index " + std::to_string(i) +
                            " out of range");
      }
      seen[i]++;
    }
  };
  mark(train_idx);
  mark(val_idx);
  mark(test_idx);
  for (std::size_t i = 0; i < seen.size(); ++i) {
    if (seen[i] != 1) {
      throw ContractError("item " + std::to_string(i) + " appears in " +
                          std::to_string(seen[i]) + " splits");
    }
  }
  for (const auto& item : items) {
    if (item.tokens.empty() || item.n_segments == 0) {
      throw ContractError("item " + item.id + " has an empty modality");
    }
    if (item.segments.size() != item.n_segments * feat_dim) {
      throw ContractError("item " + item.id + " segment buffer size mismatch");
    }
    for (std::size_t t : item.tokens) {
      if (t >= vocab.size()) {
        throw ContractError("item " + item.id + " has out-of-vocab token id " +
                            std::to_string(t));
      }
    }
  }
}

template <typename T>
Tensor<T> PairedDataset::segments_tensor(std::size_t item_index) const {
  const Item& item = items.at(item_index);
  std::vector<T> values(item.segments.begin(), item.segments.end());
  return Tensor<T>({item.n_segments, feat_dim}, std::move(values));
}

template Tensor<float> PairedDataset::segments_tensor<float>(
    std::size_t) const;
template Tensor<double> PairedDataset::segments_tensor<double>(
    std::size_t) const;

// --- synthetic generator --------------------------------------------------

namespace {

// First-occurrence id assignment shared by the generator and the caption
// loader so that a generate -> save -> load round trip reproduces ids.
std::vector<std::vector<std::size_t>> assign_token_ids(
    const std::vector<std::vector<std::string>>& word_lists,
    std::vector<std::string>& vocab) {
  vocab.clear();
  vocab.push_back("<unk>");
  std::unordered_map<std::string, std::size_t> index;
  std::vector<std::vector<std::size_t>> out(word_lists.size());
  for (std::size_t i = 0; i < word_lists.size(); ++i) {
    out[i].reserve(word_lists[i].size());
    for (const auto& w : word_lists[i]) {
      auto it = index.find(w);
      if (it == index.end()) {
        it = index.emplace(w, vocab.size()).first;
        vocab.push_back(w);
      }
      out[i].push_back(it->second);
    }
  }
  return out;
}

std::string word_name(std::size_t global_index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "w%04zu", global_index);
  return buf;
}

}  // namespace

PairedDataset generate_synthetic(const SyntheticSpec& spec) {
  std::size_t n_items = spec.n_train + spec.n_val + spec.n_test;
  if (n_items == 0) throw ContractError("synthetic dataset needs items");
  if (spec.n_latents < 1) {
    throw ContractError("synthetic generator needs at least 1 latent");
  }
  if (spec.n_latents > std::min(spec.vocab_size, spec.feat_dim)) {
    throw ContractError("n_latents exceeds min(vocab_size, feat_dim)");
  }
  if (spec.min_tokens < 1 || spec.min_tokens > spec.max_tokens ||
      spec.min_segments < 1 || spec.min_segments > spec.max_segments) {
    throw ContractError("synthetic length bounds are contradictory");
  }
  std::size_t usable = spec.vocab_size - 1;  // id 0 reserved
  std::size_t block = usable * 3 / 4 / spec.n_latents;
  if (block < 2) {
    throw ContractError("vocab too small for " +
                        std::to_string(spec.n_latents) + " latent blocks");
  }
  std::size_t noise_begin = 1 + spec.n_latents * block;
  if (noise_begin >= spec.vocab_size) {
    throw ContractError("vocab leaves no noise tokens");
  }

  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<float> gauss(0.f, 1.f);

  // Per-latent feature prototypes.
  std::vector<float> prototypes(spec.n_latents * spec.feat_dim);
  for (auto& v : prototypes) v = gauss(rng);

  PairedDataset ds;
  ds.feat_dim = spec.feat_dim;

  std::uniform_int_distribution<std::size_t> lat_count(
      std::min<std::size_t>(2, spec.n_latents),
      std::min<std::size_t>(5, spec.n_latents));
  std::uniform_int_distribution<std::size_t> tok_count(spec.min_tokens,
                                                       spec.max_tokens);
  std::uniform_int_distribution<std::size_t> seg_count(spec.min_segments,
                                                       spec.max_segments);
  std::uniform_int_distribution<std::size_t> noise_word(
      noise_begin, spec.vocab_size - 1);
  std::uniform_real_distribution<double> coin(0.0, 1.0);

  std::vector<std::size_t> all_latents(spec.n_latents);
  for (std::size_t i = 0; i < spec.n_latents; ++i) all_latents[i] = i;

  std::unordered_set<std::string> used_sets;
  std::vector<std::vector<std::string>> word_lists(n_items);

  for (std::size_t item_i = 0; item_i < n_items; ++item_i) {
    PairedDataset::Item item;
    char idbuf[24];
    std::snprintf(idbuf, sizeof(idbuf), "item%05zu", item_i);
    item.id = idbuf;

    // Unique latent set per item so the retrieval targets are separable.
    // A single latent is a degenerate mode with no separability to enforce.
    std::vector<std::size_t> latents;
    for (int attempt = 0;; ++attempt) {
      if (attempt > 100000) {
        throw ContractError(
            "cannot draw enough unique latent sets; raise n_latents");
      }
      std::size_t count = lat_count(rng);
      latents.clear();
      std::sample(all_latents.begin(), all_latents.end(),
                  std::back_inserter(latents), count, rng);
      if (spec.n_latents < 2) break;
      std::string key;
      for (std::size_t l : latents) key += std::to_string(l) + ",";
      if (used_sets.insert(key).second) break;
    }
    item.latents = latents;

    auto block_word = [&](std::size_t latent) {
      std::uniform_int_distribution<std::size_t> pick(1 + latent * block,
                                                      (latent + 1) * block);
      return word_name(pick(rng));
    };
    auto any_latent = [&]() {
      std::uniform_int_distribution<std::size_t> pick(0, latents.size() - 1);
      return latents[pick(rng)];
    };

    std::size_t n_tokens = tok_count(rng);
    std::vector<std::string>& words = word_lists[item_i];
    for (std::size_t t = 0; t < n_tokens; ++t) {
      if (t < latents.size()) {
        words.push_back(block_word(latents[t]));  // cover each latent once
      } else if (coin(rng) < 0.8) {
        words.push_back(block_word(any_latent()));
      } else {
        words.push_back(word_name(noise_word(rng)));
      }
    }
    std::shuffle(words.begin(), words.end(), rng);

    std::size_t n_segments = seg_count(rng);
    item.n_segments = n_segments;
    item.segments.resize(n_segments * spec.feat_dim);
    for (std::size_t s = 0; s < n_segments; ++s) {
      float* row = item.segments.data() + s * spec.feat_dim;
      bool pure_noise = s >= latents.size() && coin(rng) < 0.15;
      if (pure_noise) {
        for (std::size_t f = 0; f < spec.feat_dim; ++f) row[f] = gauss(rng);
      } else {
        std::size_t latent = s < latents.size() ? latents[s] : any_latent();
        const float* proto = prototypes.data() + latent * spec.feat_dim;
        for (std::size_t f = 0; f < spec.feat_dim; ++f)
          row[f] = proto[f] + 0.25f * gauss(rng);
      }
    }

    ds.items.push_back(std::move(item));
  }

  auto token_ids = assign_token_ids(word_lists, ds.vocab);
  for (std::size_t i = 0; i < n_items; ++i)
    ds.items[i].tokens = std::move(token_ids[i]);

  for (std::size_t i = 0; i < spec.n_train; ++i) ds.train_idx.push_back(i);
  for (std::size_t i = 0; i < spec.n_val; ++i)
    ds.val_idx.push_back(spec.n_train + i);
  for (std::size_t i = 0; i < spec.n_test; ++i)
    ds.test_idx.push_back(spec.n_train + spec.n_val + i);

  ds.validate();
  return ds;
}

// --- FMAT binary format ----------------------------------------------------

namespace {

constexpr char kFmatMagic[4] = {'F', 'M', 'A', 'T'};
constexpr std::uint32_t kFmatVersion = 1;

using io::get_u32;
using io::put_u32;
using io::read_file;

}  // namespace

void save_features(const std::string& path, const Tensor<float>& matrix) {
  if (matrix.rank() != 2) {
    throw ContractError("save_features expects a [rows x cols] tensor, got " +
                        shape_str(matrix.shape()));
  }
  std::string out;
  out.append(kFmatMagic, 4);
  put_u32(out, kFmatVersion);
  put_u32(out, static_cast<std::uint32_t>(matrix.dim(0)));
  put_u32(out, static_cast<std::uint32_t>(matrix.dim(1)));
  for (float v : matrix.data()) io::put_f32(out, v);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot write " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

Tensor<float> load_features(const std::string& path) {
  std::string buf = read_file(path);
  if (buf.size() < 16) {
    throw FormatError(path + ": truncated header, " +
                      std::to_string(buf.size()) + " bytes at offset 0");
  }
  if (std::memcmp(buf.data(), kFmatMagic, 4) != 0) {
    throw FormatError(path + ": bad magic at byte offset 0");
  }
  std::uint32_t version = get_u32(buf, 4);
  if (version != kFmatVersion) {
    throw FormatError(path + ": unsupported version " +
                      std::to_string(version) + " at byte offset 4");
  }
  std::size_t rows = get_u32(buf, 8);
  std::size_t cols = get_u32(buf, 12);
  std::size_t expect = 16 + 4 * rows * cols;
  if (buf.size() != expect) {
    throw FormatError(path + ": expected " + std::to_string(expect) +
                      " bytes, got " + std::to_string(buf.size()) +
                      " (payload at byte offset 16)");
  }
  std::vector<float> values(rows * cols);
  for (std::size_t i = 0; i < values.size(); ++i)
    values[i] = io::get_f32(buf, 16 + 4 * i);
  return Tensor<float>({rows, cols}, std::move(values));
}

// --- caption text format ----------------------------------------------------

CaptionFile load_captions(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path);
  CaptionFile out;
  std::vector<std::vector<std::string>> word_lists;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw ParseError(path + ": line " + std::to_string(line_no) +
                       ": missing tab separator");
    }
    std::string id = line.substr(0, tab);
    if (id.empty()) {
      throw ParseError(path + ": line " + std::to_string(line_no) +
                       ": empty item id");
    }
    std::istringstream rest(line.substr(tab + 1));
    std::vector<std::string> words;
    std::string w;
    while (rest >> w) words.push_back(w);
    if (words.empty()) {
      throw ParseError(path + ": line " + std::to_string(line_no) +
                       ": caption has no tokens");
    }
    out.ids.push_back(std::move(id));
    word_lists.push_back(std::move(words));
  }
  out.token_ids = assign_token_ids(word_lists, out.vocab);
  return out;
}

void save_captions(const std::string& path,
                   const std::vector<std::string>& ids,
                   const std::vector<std::vector<std::size_t>>& token_ids,
                   const std::vector<std::string>& vocab) {
  if (ids.size() != token_ids.size()) {
    throw ContractError("save_captions: ids and token lists disagree");
  }
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw FormatError("cannot write " + path);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    f << ids[i] << '\t';
    for (std::size_t t = 0; t < token_ids[i].size(); ++t) {
      if (t) f << ' ';
      f << vocab.at(token_ids[i][t]);
    }
    f << '\n';
  }
}

// --- dataset directory -------------------------------------------------------

void save_dataset(const std::string& dir, const PairedDataset& ds) {
  fs::create_directories(dir);
  std::vector<std::string> ids;
  std::vector<std::vector<std::size_t>> tokens;
  for (const auto& item : ds.items) {
    ids.push_back(item.id);
    tokens.push_back(item.tokens);
  }
  save_captions((fs::path(dir) / "captions.tsv").string(), ids, tokens,
                ds.vocab);

  std::size_t total_rows = 0;
  for (const auto& item : ds.items) total_rows += item.n_segments;
  std::vector<float> all(total_rows * ds.feat_dim);
  std::ofstream idx((fs::path(dir) / "segments.idx.tsv").string(),
                    std::ios::trunc);
  std::size_t row = 0;
  for (const auto& item : ds.items) {
    std::copy(item.segments.begin(), item.segments.end(),
              all.begin() + static_cast<std::ptrdiff_t>(row * ds.feat_dim));
    idx << item.id << '\t' << row << '\t' << item.n_segments << '\n';
    row += item.n_segments;
  }
  save_features((fs::path(dir) / "segments.fmat").string(),
                Tensor<float>({total_rows, ds.feat_dim}, std::move(all)));

  std::ofstream splits((fs::path(dir) / "splits.tsv").string(),
                       std::ios::trunc);
  std::vector<std::string> split_of(ds.items.size());
  for (std::size_t i : ds.train_idx) split_of[i] = "train";
  for (std::size_t i : ds.val_idx) split_of[i] = "val";
  for (std::size_t i : ds.test_idx) split_of[i] = "test";
  for (std::size_t i = 0; i < ds.items.size(); ++i)
    splits << ds.items[i].id << '\t' << split_of[i] << '\n';
}

PairedDataset load_dataset(const std::string& dir) {
  PairedDataset ds;
  auto captions = load_captions((fs::path(dir) / "captions.tsv").string());
  ds.vocab = captions.vocab;
  std::unordered_map<std::string, std::size_t> by_id;
  for (std::size_t i = 0; i < captions.ids.size(); ++i) {
    PairedDataset::Item item;
    item.id = captions.ids[i];
    item.tokens = captions.token_ids[i];
    if (!by_id.emplace(item.id, i).second) {
      throw ParseError(dir + ": duplicate item id " + item.id);
    }
    ds.items.push_back(std::move(item));
  }

  auto features = load_features((fs::path(dir) / "segments.fmat").string());
  ds.feat_dim = features.dim(1);
  std::string idx_path = (fs::path(dir) / "segments.idx.tsv").string();
  std::ifstream idx(idx_path);
  if (!idx) throw ParseError("cannot open " + idx_path);
  std::string id;
  std::size_t start = 0, count = 0, line_no = 0;
  while (idx >> id >> start >> count) {
    ++line_no;
    auto it = by_id.find(id);
    if (it == by_id.end()) {
      throw ParseError(idx_path + ": line " + std::to_string(line_no) +
                       ": unknown item id " + id);
    }
    if (start + count > features.dim(0)) {
      throw ParseError(idx_path + ": line " + std::to_string(line_no) +
                       ": segment range exceeds feature rows");
    }
    auto& item = ds.items[it->second];
    item.n_segments = count;
    item.segments.assign(
        features.data().begin() +
            static_cast<std::ptrdiff_t>(start * ds.feat_dim),
        features.data().begin() +
            static_cast<std::ptrdiff_t>((start + count) * ds.feat_dim));
  }

  std::string splits_path = (fs::path(dir) / "splits.tsv").string();
  std::ifstream splits(splits_path);
  if (!splits) throw ParseError("cannot open " + splits_path);
  std::string split_name;
  line_no = 0;
  while (splits >> id >> split_name) {
    ++line_no;
    auto it = by_id.find(id);
    if (it == by_id.end()) {
      throw ParseError(splits_path + ": line " + std::to_string(line_no) +
                       ": unknown item id " + id);
    }
    if (split_name == "train") {
      ds.train_idx.push_back(it->second);
    } else if (split_name == "val") {
      ds.val_idx.push_back(it->second);
    } else if (split_name == "test") {
      ds.test_idx.push_back(it->second);
    } else {
      throw ParseError(splits_path + ": line " + std::to_string(line_no) +
                       ": unknown split " + split_name);
    }
  }
  ds.validate();
  return ds;
}

}  // namespace temde
