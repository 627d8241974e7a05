#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <unistd.h>

#include "gradcheck.hpp"
#include "temde/model.hpp"
#include "temde/trainer.hpp"

using namespace temde;
namespace fs = std::filesystem;

namespace {

template <typename T>
ModelConfig small_config(Backend backend, std::uint64_t seed = 1) {
  ModelConfig cfg;
  cfg.vocab_size = 30;
  cfg.embed_dim = 8;
  cfg.segment_feat_dim = 6;
  cfg.backend = backend;
  cfg.temde.n_divisions = 2;
  cfg.temde.n_centroids = 3;
  cfg.temde.inner_dim = 2;
  cfg.attention.width = 10;
  cfg.attention.blocks = 2;
  cfg.seed = seed;
  return cfg;
}

template <typename T>
Tensor<T> random_segments(std::size_t rows, std::size_t f, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return Tensor<T>::randn({rows, f}, rng, T(1));
}

}  // namespace

TEST_CASE("score is deterministic in eval mode for both backends") {
  for (auto backend : {Backend::temde, Backend::attention}) {
    RetrievalModel<double> model(small_config<double>(backend));
    std::vector<std::size_t> caption{3, 7, 7, 12};
    auto segments = random_segments<double>(5, 6, 2);
    double a = model.score(caption, segments, Mode::eval).item();
    double b = model.score(caption, segments, Mode::eval).item();
    CHECK(a == b);
    CHECK(std::isfinite(a));
  }
}

TEST_CASE("temde backend score is invariant to segment order") {
  RetrievalModel<double> model(small_config<double>(Backend::temde));
  std::vector<std::size_t> caption{1, 2, 3, 4, 5};
  auto segments = random_segments<double>(6, 6, 3);
  double base = model.score(caption, segments, Mode::eval).item();

  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<std::size_t> perm(6);
    for (std::size_t i = 0; i < 6; ++i) perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<double> shuffled(6 * 6);
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = 0; j < 6; ++j)
        shuffled[i * 6 + j] = segments.data()[perm[i] * 6 + j];
    double permuted =
        model.score(caption, Tensor<double>({6, 6}, shuffled), Mode::eval)
            .item();
    CHECK(permuted == doctest::Approx(base).epsilon(1e-6));
  }
}

TEST_CASE("score gradient matches finite differences") {
  std::vector<std::size_t> caption{3, 7, 12};
  SUBCASE("64-bit, both backends") {
    for (auto backend : {Backend::temde, Backend::attention}) {
      RetrievalModel<double> model(small_config<double>(backend));
      auto segments = random_segments<double>(4, 6, 5);
      auto params = model.parameters();
      auto embedding = params[0];
      auto fn = [&]() { return model.score(caption, segments, Mode::train); };
      auto report = gradcheck::check<double>(fn, {embedding});
      INFO(backend_name(backend) << " rel err " << report.max_rel_err);
      CHECK(report.max_rel_err < 1e-6);
    }
  }
  SUBCASE("32-bit, one embedding row") {
    RetrievalModel<float> model(small_config<float>(Backend::temde));
    auto segments = random_segments<float>(4, 6, 5);
    auto embedding = model.parameters()[0];
    embedding.zero_grad();
    backward(model.score(caption, segments, Mode::train));
    REQUIRE(embedding.has_grad());

    std::size_t cols = embedding.dim(1);
    std::size_t row = caption[0];
    float worst = 0;
    NoGradGuard no_grad;
    for (std::size_t c = 0; c < cols; ++c) {
      std::size_t at = row * cols + c;
      float saved = embedding.data()[at];
      float eps = 5e-3f;
      embedding.data()[at] = saved + eps;
      float hi = model.score(caption, segments, Mode::train).item();
      embedding.data()[at] = saved - eps;
      float lo = model.score(caption, segments, Mode::train).item();
      embedding.data()[at] = saved;
      float numeric = (hi - lo) / (2 * eps);
      worst = std::max(worst,
                       gradcheck::rel_err(embedding.grad()[at], numeric));
    }
    CHECK(worst < 1e-4f);
  }
}

TEST_CASE("triplet loss hand cases and oracle") {
  SUBCASE("satisfied margin gives zero") {
    auto loss = triplet_loss(Tensor<double>::scalar(1.0),
                             Tensor<double>::row({0.0}),
                             Tensor<double>::row({0.0}), 0.2);
    CHECK(loss.item() == 0.0);
  }
  SUBCASE("tight tie pays the margin in both directions") {
    auto loss = triplet_loss(Tensor<double>::scalar(0.0),
                             Tensor<double>::row({0.0}),
                             Tensor<double>::row({0.0}), 0.2);
    CHECK(loss.item() == doctest::Approx(0.4).epsilon(1e-12));
  }
  SUBCASE("random tuple matches the loop oracle") {
    std::mt19937_64 rng(6);
    for (int trial = 0; trial < 20; ++trial) {
      auto pos = Tensor<double>::randn({1}, rng, 1.0);
      auto ni = Tensor<double>::randn({5}, rng, 1.0);
      auto nt = Tensor<double>::randn({4}, rng, 1.0);
      double margin = 0.2;
      auto expect = [&](const std::vector<double>& negs) {
        double mx = *std::max_element(negs.begin(), negs.end());
        return std::max(0.0, margin - pos.item() + mx);
      };
      auto loss = triplet_loss(pos, ni, nt, margin);
      CHECK(loss.item() == doctest::Approx(expect(ni.data()) +
                                           expect(nt.data()))
                               .epsilon(1e-9));
    }
  }
  SUBCASE("contract violations") {
    CHECK_THROWS_AS(triplet_loss(Tensor<double>::scalar(0.0),
                                 Tensor<double>::row({0.0}),
                                 Tensor<double>::row({0.0}), 0.0),
                    ContractError);
    CHECK_THROWS_AS(triplet_loss(Tensor<double>::row({0.0, 1.0}),
                                 Tensor<double>::row({0.0}),
                                 Tensor<double>::row({0.0}), 0.2),
                    ContractError);
  }
}

TEST_CASE("batch loss equals the sum of per-tuple losses") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    std::size_t b = 5;
    auto scores = Tensor<double>::randn({b, b}, rng, 1.0);
    double margin = 0.2;
    auto batch = batch_triplet_loss(scores, margin);

    double expect = 0;
    const auto& s = scores.data();
    for (std::size_t i = 0; i < b; ++i) {
      double hardest_img = -1e300, hardest_txt = -1e300;
      for (std::size_t j = 0; j < b; ++j) {
        if (j == i) continue;
        hardest_img = std::max(hardest_img, s[i * b + j]);
        hardest_txt = std::max(hardest_txt, s[j * b + i]);
      }
      expect += std::max(0.0, margin - s[i * b + i] + hardest_img);
      expect += std::max(0.0, margin - s[i * b + i] + hardest_txt);
    }
    CHECK(batch.item() == doctest::Approx(expect).epsilon(1e-9));
  }
  CHECK_THROWS_AS(
      batch_triplet_loss(Tensor<double>::zeros({1, 1}), 0.2),
      ContractError);
}

TEST_CASE("triplet loss gradient passes finite differences") {
  std::mt19937_64 rng(8);
  auto scores = Tensor<double>::randn({4, 4}, rng, 1.0, true);
  // Keep hinge terms and maxes away from their kinks.
  for (auto& v : scores.data()) v *= 3;
  auto fn = [&]() { return batch_triplet_loss(scores, 0.2); };
  auto report = gradcheck::check<double>(fn, {scores});
  CHECK(report.max_rel_err < 1e-6);
}

TEST_CASE("no dead parameters after one backward") {
  // Documented exception: a bias whose output feeds straight into batch
  // normalization is absorbed by the mean subtraction (the norm's beta takes
  // over its role), so its gradient vanishes up to rounding. That covers the
  // image projection bias, the coder projection biases and the attention
  // stack linear biases.
  auto absorbed = [](const std::string& name) {
    if (name == "image_proj.bias") return true;
    if (name.find("projection.bias") != std::string::npos) return true;
    if (name.find("local") != std::string::npos &&
        name.find(".bias") != std::string::npos)
      return true;
    if (name.find("global") != std::string::npos &&
        name.find(".bias") != std::string::npos)
      return true;
    return false;
  };
  for (auto backend : {Backend::temde, Backend::attention}) {
    RetrievalModel<double> model(small_config<double>(backend));
    std::vector<std::vector<std::size_t>> captions{
        {1, 2, 3, 4}, {5, 6, 7}, {8, 9, 10, 11}, {2, 9, 4}};
    std::vector<Tensor<double>> segments;
    for (std::uint64_t s = 0; s < 4; ++s)
      segments.push_back(random_segments<double>(4 + s, 6, 10 + s));
    auto text = model.text_representations(captions, Mode::train);
    auto image = model.image_representations(segments, Mode::train);
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j) pairs.emplace_back(i, j);
    auto loss = batch_triplet_loss(
        reshape(model.pair_scores(text, image, pairs), {4, 4}), 0.2);
    for (auto& p : model.parameters()) p.zero_grad();
    backward(loss);
    for (auto& [name, p] : model.named_parameters()) {
      double norm = 0;
      if (p.has_grad())
        for (double g : p.grad()) norm += g * g;
      norm = std::sqrt(norm);
      INFO(backend_name(backend) << " " << name << " grad norm " << norm);
      if (absorbed(name)) {
        CHECK(norm < 1e-9);
      } else {
        CHECK(norm > 1e-9);
      }
    }
  }
}

TEST_CASE("one small step on a batch strictly decreases its loss") {
  for (auto backend : {Backend::temde, Backend::attention}) {
    RetrievalModel<double> model(small_config<double>(backend, 3));
    std::vector<std::vector<std::size_t>> captions{{1, 2, 3}, {4, 5, 6, 7}};
    std::vector<Tensor<double>> segments{random_segments<double>(4, 6, 20),
                                         random_segments<double>(5, 6, 21)};
    auto params = model.parameters();
    auto forward = [&]() {
      auto text = model.text_representations(captions, Mode::train);
      auto image = model.image_representations(segments, Mode::train);
      std::vector<std::pair<std::size_t, std::size_t>> pairs{
          {0, 0}, {0, 1}, {1, 0}, {1, 1}};
      return batch_triplet_loss(
          reshape(model.pair_scores(text, image, pairs), {2, 2}), 0.2);
    };
    auto loss = forward();
    double before = loss.item();
    REQUIRE(before > 0);  // random init violates the margin
    for (auto& p : params) p.zero_grad();
    backward(loss);
    sgd_step(params, 1e-4);
    double after = forward().item();
    INFO(backend_name(backend) << " " << before << " -> " << after);
    CHECK(after < before);
  }
}

TEST_CASE("token and shape contract errors") {
  RetrievalModel<double> model(small_config<double>(Backend::temde));
  auto segments = random_segments<double>(4, 6, 30);
  CHECK_THROWS_AS(model.score({29, 30}, segments, Mode::eval),
                  VocabularyError);
  CHECK_THROWS_AS(model.score({}, segments, Mode::eval), ContractError);
  CHECK_THROWS_AS(
      model.score({1, 2}, random_segments<double>(4, 7, 31), Mode::eval),
      DimensionError);
  CHECK_THROWS_AS(
      model.score({1, 2}, Tensor<double>::zeros({0, 6}), Mode::eval),
      ContractError);
}

TEST_CASE("effective head dimension respects the smaller-size rule") {
  ModelConfig cfg = small_config<double>(Backend::temde);
  cfg.temde.n_divisions = 8;
  cfg.temde.n_centroids = 8;  // sketch 64, pair 128
  cfg.head_dim = 256;
  CHECK(cfg.effective_head_dim() == 64);
  cfg.temde.n_divisions = 20;  // sketch 160, pair 320
  CHECK(cfg.effective_head_dim() == 256);
  cfg.head_dim = 100;
  CHECK(cfg.effective_head_dim() == 100);
}

TEST_CASE("model save/load round trip") {
  auto dir = fs::temp_directory_path() /
             ("temde_model_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  auto path = (dir / "m.tmodel").string();

  for (auto backend : {Backend::temde, Backend::attention}) {
    RetrievalModel<float> model(small_config<float>(backend, 17));
    std::vector<std::size_t> caption{2, 4, 8};
    auto segments = random_segments<float>(4, 6, 40);
    float original = model.score(caption, segments, Mode::eval).item();

    save_model(path, model);
    CHECK(fs::file_size(path) == model_file_size(model.config()));

    auto loaded = load_model(path);
    CHECK(loaded.config().backend == backend);
    float restored = loaded.score(caption, segments, Mode::eval).item();
    CHECK(restored == original);

    auto a = model.state_tensors();
    auto b = loaded.state_tensors();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i)
      CHECK(a[i].data() == b[i].data());
  }

  SUBCASE("truncated file raises a format error") {
    RetrievalModel<float> model(small_config<float>(Backend::temde, 18));
    save_model(path, model);
    fs::resize_file(path, fs::file_size(path) - 5);
    CHECK_THROWS_AS(load_model(path), FormatError);
  }
  SUBCASE("bad magic raises a format error") {
    std::ofstream(path, std::ios::binary) << "NOPE nonsense";
    CHECK_THROWS_AS(load_model(path), FormatError);
  }
  fs::remove_all(dir);
}

TEST_CASE("backends expose an identical scoring contract") {
  std::vector<std::size_t> caption{1, 2, 3, 4};
  auto segments = random_segments<double>(5, 6, 50);
  for (auto mode : {Mode::train, Mode::eval}) {
    for (auto backend : {Backend::temde, Backend::attention}) {
      RetrievalModel<double> model(small_config<double>(backend));
      auto s = model.score(caption, segments, mode);
      CHECK(s.size() == 1);
      CHECK(std::isfinite(s.item()));
      if (mode == Mode::train) CHECK(s.requires_grad());
    }
  }
}
