#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "temde/attention.hpp"

using namespace temde;

namespace {

// Loop oracle: scores, softmax and weighted sum computed with plain loops.
std::vector<double> attention_oracle(const std::vector<double>& local,
                                     const std::vector<double>& global,
                                     std::size_t t, std::size_t d) {
  std::vector<double> scores(t);
  for (std::size_t i = 0; i < t; ++i) {
    double acc = 0;
    for (std::size_t j = 0; j < d; ++j) acc += local[i * d + j] * global[j];
    scores[i] = acc;
  }
  double mx = scores[0];
  for (double s : scores) mx = std::max(mx, s);
  double denom = 0;
  std::vector<double> w(t);
  for (std::size_t i = 0; i < t; ++i) {
    w[i] = std::exp(scores[i] - mx);
    denom += w[i];
  }
  for (auto& v : w) v /= denom;
  std::vector<double> mixed(d, 0.0);
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < d; ++j) mixed[j] += w[i] * local[i * d + j];
  double norm = 0;
  for (double v : mixed) norm += v * v;
  norm = std::sqrt(norm + 1e-12);
  for (auto& v : mixed) v /= norm;
  return mixed;
}

}  // namespace

TEST_CASE("singleton sequence ignores the global vector") {
  std::mt19937_64 rng(1);
  auto local = Tensor<double>::randn({1, 6}, rng, 1.0);
  auto g1 = Tensor<double>::randn({6}, rng, 1.0);
  auto g2 = Tensor<double>::randn({6}, rng, 1.0);
  auto a = global_similarity_attention(local, g1);
  auto b = global_similarity_attention(local, g2);
  auto expect = l2_normalize(reshape(local, {6}), 0);
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(a.data()[i] == doctest::Approx(expect.data()[i]).epsilon(1e-9));
    CHECK(b.data()[i] == doctest::Approx(expect.data()[i]).epsilon(1e-9));
  }
}

TEST_CASE("identical rows collapse to the normalized row") {
  std::mt19937_64 rng(2);
  auto row = Tensor<double>::randn({4}, rng, 1.0);
  std::vector<double> stacked;
  for (int i = 0; i < 5; ++i)
    stacked.insert(stacked.end(), row.data().begin(), row.data().end());
  auto local = Tensor<double>({5, 4}, stacked);
  auto g = Tensor<double>::randn({4}, rng, 1.0);
  auto out = global_similarity_attention(local, g);
  auto expect = l2_normalize(row, 0);
  for (std::size_t i = 0; i < 4; ++i)
    CHECK(out.data()[i] == doctest::Approx(expect.data()[i]).epsilon(1e-9));
}

TEST_CASE("matches the loop oracle and stays unit length") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    auto local = Tensor<double>::randn({5, 8}, rng, 1.0);
    auto g = Tensor<double>::randn({8}, rng, 1.0);
    auto out = global_similarity_attention(local, g);
    auto expect = attention_oracle(local.data(), g.data(), 5, 8);
    double norm = 0;
    for (std::size_t i = 0; i < 8; ++i) {
      CHECK(out.data()[i] == doctest::Approx(expect[i]).epsilon(1e-6));
      norm += out.data()[i] * out.data()[i];
    }
    CHECK(std::sqrt(norm) == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("attention weights are a distribution over tokens") {
  std::mt19937_64 rng(4);
  auto local = Tensor<double>::randn({7, 5}, rng, 2.0);
  auto g = Tensor<double>::randn({5}, rng, 2.0);
  auto weights = softmax(matmul(local, reshape(g, {5, 1})), 0);
  double s = 0;
  for (double w : weights.data()) {
    CHECK(w >= 0.0);
    s += w;
  }
  CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("global similarity vector is the subtraction") {
  auto eq = global_similarity_vector(Tensor<double>::row({1, 2}),
                                     Tensor<double>::row({1, 2}));
  CHECK(eq.data() == std::vector<double>{0, 0});

  auto v = global_similarity_vector(Tensor<double>::row({1, 2}),
                                    Tensor<double>::row({0.5, 1}));
  CHECK(v.data() == std::vector<double>{0.5, 1});

  std::mt19937_64 rng(5);
  auto a = Tensor<double>::randn({9}, rng, 1.0);
  auto b = Tensor<double>::randn({9}, rng, 1.0);
  auto d = global_similarity_vector(a, b);
  for (std::size_t i = 0; i < 9; ++i)
    CHECK(d.data()[i] == a.data()[i] - b.data()[i]);

  CHECK_THROWS_AS(global_similarity_vector(Tensor<double>::row({1, 2}),
                                           Tensor<double>::row({1, 2, 3})),
                  DimensionError);
}

TEST_CASE("full self-attention cases") {
  SUBCASE("single token passes through") {
    auto x = Tensor<double>::row({3, -1, 2});
    auto out = full_self_attention(reshape(x, {1, 3}));
    for (std::size_t i = 0; i < 3; ++i)
      CHECK(out.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-12));
  }

  SUBCASE("orthonormal rows mix with weight e/(e+T-1)") {
    const std::size_t t = 4;
    std::vector<double> eye(t * t, 0.0);
    for (std::size_t i = 0; i < t; ++i) eye[i * t + i] = 1.0;
    auto out = full_self_attention(Tensor<double>({t, t}, eye));
    double self_w = std::exp(1.0) / (std::exp(1.0) + double(t) - 1.0);
    double other_w = 1.0 / (std::exp(1.0) + double(t) - 1.0);
    for (std::size_t i = 0; i < t; ++i) {
      for (std::size_t j = 0; j < t; ++j) {
        double expect = i == j ? self_w : other_w;
        CHECK(out.data()[i * t + j] == doctest::Approx(expect).epsilon(1e-9));
      }
    }
  }

  SUBCASE("random input matches a loop oracle") {
    std::mt19937_64 rng(6);
    auto x = Tensor<double>::randn({6, 4}, rng, 1.0);
    auto out = full_self_attention(x);
    const auto& v = x.data();
    for (std::size_t i = 0; i < 6; ++i) {
      std::vector<double> scores(6);
      for (std::size_t j = 0; j < 6; ++j) {
        double acc = 0;
        for (std::size_t c = 0; c < 4; ++c) acc += v[i * 4 + c] * v[j * 4 + c];
        scores[j] = acc;
      }
      double mx = *std::max_element(scores.begin(), scores.end());
      double denom = 0;
      for (auto& s : scores) {
        s = std::exp(s - mx);
        denom += s;
      }
      for (std::size_t c = 0; c < 4; ++c) {
        double expect = 0;
        for (std::size_t j = 0; j < 6; ++j)
          expect += scores[j] / denom * v[j * 4 + c];
        CHECK(out.data()[i * 4 + c] == doctest::Approx(expect).epsilon(1e-6));
      }
    }
  }
}

TEST_CASE("width mismatch raises a dimension error") {
  std::mt19937_64 rng(7);
  auto local = Tensor<double>::randn({3, 4}, rng, 1.0);
  auto g = Tensor<double>::randn({5}, rng, 1.0);
  CHECK_THROWS_AS(global_similarity_attention(local, g), DimensionError);
}

TEST_CASE("preprocessing stacks produce the documented shapes") {
  GlobalSimConfig cfg;
  cfg.input_dim = 6;
  cfg.width = 10;
  cfg.blocks = 2;
  std::mt19937_64 rng(8);
  GlobalSimParams<double> params(cfg, rng);
  auto tokens = Tensor<double>::randn({7, 6}, rng, 1.0);
  auto local = local_representation(params, tokens, Mode::train);
  CHECK(local.shape() == Shape{7, 10});
  auto means = reshape(mean(tokens, 0), {1, 6});
  auto global = global_representation(params, means, Mode::eval);
  CHECK(global.shape() == Shape{1, 10});

  // A lone item in train mode has no batch variance; running stats apply.
  auto lone = global_representation(params, means, Mode::train);
  CHECK(lone.shape() == Shape{1, 10});
}

TEST_CASE("finite differences through both attention paths") {
  for (std::uint64_t seed : {31u, 32u}) {
    std::mt19937_64 rng(seed);
    GlobalSimConfig cfg;
    cfg.input_dim = 4;
    cfg.width = 5;
    cfg.blocks = 2;
    GlobalSimParams<double> params(cfg, rng);
    auto tokens = Tensor<double>::randn({4, 4}, rng, 1.0, true);
    auto coefs = Tensor<double>::uniform({5}, rng, -1, 1);

    std::vector<Tensor<double>> inputs{tokens};
    for (auto& p : params.parameters()) inputs.push_back(p);
    auto fn = [&]() {
      auto local = local_representation(params, tokens, Mode::train);
      auto means = reshape(mean(tokens, 0), {1, 4});
      auto global =
          reshape(global_representation(params, means, Mode::train), {5});
      auto out = global_similarity_attention(local, global);
      return sum_all(mul(out, coefs));
    };
    auto report = gradcheck::check<double>(fn, inputs);
    INFO("global-sim seed " << seed << " rel err " << report.max_rel_err);
    CHECK(report.max_rel_err < 1e-6);

    auto x = Tensor<double>::randn({4, 3}, rng, 1.0, true);
    auto c2 = Tensor<double>::uniform({4, 3}, rng, -1, 1);
    auto fn2 = [&]() { return sum_all(mul(full_self_attention(x), c2)); };
    auto report2 = gradcheck::check<double>(fn2, {x});
    INFO("self-attention seed " << seed << " rel err "
                                << report2.max_rel_err);
    CHECK(report2.max_rel_err < 1e-6);
  }
}
