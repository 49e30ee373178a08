// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "chimera/analysis.hpp"
#include "chimera/config.hpp"
#include "chimera/image_io.hpp"
#include "chimera/trainer.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace chimera;
using testutil::random_tensor;

namespace {

Tensor orthogonal(std::size_t n, std::mt19937_64& rng) {
  // Gram-Schmidt on a Gaussian matrix.
  Tensor q = random_tensor({n, n}, rng);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      double d = 0;
      for (std::size_t k = 0; k < n; ++k) d += q.at(k, i) * q.at(k, j);
      for (std::size_t k = 0; k < n; ++k) q.at(k, i) -= d * q.at(k, j);
    }
    double norm = 0;
    for (std::size_t k = 0; k < n; ++k) norm += q.at(k, i) * q.at(k, i);
    for (std::size_t k = 0; k < n; ++k) q.at(k, i) /= std::sqrt(norm);
  }
  return q;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  Tensor out({a.rows(), b.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t k = 0; k < a.cols(); ++k)
      for (std::size_t j = 0; j < b.cols(); ++j) out.at(i, j) += a.at(i, k) * b.at(k, j);
  return out;
}

struct Setup {
  testutil::TempDir dir{"analysis"};
  DatasetManifest data;
  ClipWeightBundle bundle;
  TrainConfig cfg;
  Setup() {
    ToyDatasetOptions o;
    o.n_images = 3;
    o.image_size = 32;
    data = make_toy_dataset(o, dir / "data");
    bundle = make_mini_clip(0, 16, 8, 8, data.split.names);
    cfg = parse_config("model.backbone_channels = 16\ntrain.batch_size = 3\n");
  }
};

Setup& setup() {
  static Setup s;
  return s;
}

}  // namespace

TEST_CASE("cka invariances") {
  std::mt19937_64 rng(1);
  const Tensor x = random_tensor({20, 5}, rng);
  CHECK(cka(x, x) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(cka(x, matmul(x, orthogonal(5, rng))) == doctest::Approx(1.0).epsilon(1e-10));
  Tensor scaled = x;
  for (double& v : scaled.storage()) v *= -3.5;
  CHECK(cka(x, scaled) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(cka(x, Tensor({20, 3}, 2.0)) == 0.0);
  CHECK_THROWS_AS(cka(x, random_tensor({19, 5}, rng)), std::invalid_argument);
  CHECK_THROWS_AS(cka(Tensor({1, 2}), Tensor({1, 2})), std::invalid_argument);
}

TEST_CASE("cka matches the HSIC formulation") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x = random_tensor({20, 5}, rng), y = random_tensor({20, 7}, rng);
    const double c = cka(x, y);
    CHECK(std::abs(c - oracle::cka_hsic(x, y)) <= 1e-8);
    CHECK(c >= 0.0);
    CHECK(c <= 1.0 + 1e-12);
  }
}

TEST_CASE("analyze_cka matrix properties") {
  auto& s = setup();
  for (std::uint64_t seed : {0u, 1u}) {
    TrainConfig c = s.cfg;
    c.seed = seed;
    const Checkpoint ckpt = initial_checkpoint(c, s.data, s.bundle);
    CKAOptions opts;
    opts.positions_per_image = 16;
    opts.seed = seed;
    const CKAReport r = analyze_cka(ckpt, s.bundle, s.data, opts);
    const std::size_t L = r.layers.size();
    CHECK(L == 13);
    REQUIRE(r.matrix.shape() == Shape{L, L});
    for (std::size_t i = 0; i < L; ++i) {
      CHECK(std::abs(r.matrix.at(i, i) - 1.0) <= 1e-6);
      for (std::size_t j = 0; j < L; ++j) {
        CHECK(std::abs(r.matrix.at(i, j) - r.matrix.at(j, i)) <= 1e-6);
        CHECK(r.matrix.at(i, j) >= 0.0);
        CHECK(r.matrix.at(i, j) <= 1.0 + 1e-6);
      }
    }
    const std::string csv = cka_csv(r);
    std::istringstream in(csv);
    std::string line;
    std::size_t lines = 0;
    std::getline(in, line);
    CHECK(static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) == L);
    while (std::getline(in, line)) {
      ++lines;
      CHECK(static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) == L);
    }
    CHECK(lines == L);
    testutil::TempDir out("ckaimg");
    write_cka_image(r, out / "cka.ppm", 4);
    CHECK(read_ppm(out / "cka.ppm").shape() == Shape{4 * L, 4 * L, 3});
  }
  const Checkpoint ckpt = initial_checkpoint(s.cfg, s.data, s.bundle);
  CKAOptions one;
  one.max_images = 1;
  CHECK_THROWS_AS(analyze_cka(ckpt, s.bundle, s.data, one), std::invalid_argument);
}

TEST_CASE("min-max normalization") {
  CHECK(minmax_normalize(Tensor({2, 2}, 3.0)) == Tensor({2, 2}, 0.5));
  const Tensor n = minmax_normalize(Tensor::vector({1.0, 3.0, 2.0}));
  CHECK(n == Tensor::vector({0.0, 1.0, 0.5}));
}

TEST_CASE("heatmap: constant features render mid-gray") {
  auto& s = setup();
  Checkpoint ckpt = initial_checkpoint(s.cfg, s.data, s.bundle);
  ckpt.model.csh.mlp_w1.fill(0.0);
  ckpt.model.csh.mlp_w2.fill(0.0);
  const Sample sample = load_sample(s.data, 0);
  const Heatmap h = compute_heatmap(ckpt, s.bundle, sample.image, s.data.split.names[0], HeatSource::kCls);
  for (double v : h.normalized.storage()) CHECK(v == 0.5);
}

TEST_CASE("heatmap: CSV reconstructs the raster and argmax agrees with the scores") {
  auto& s = setup();
  const Checkpoint ckpt = initial_checkpoint(s.cfg, s.data, s.bundle);
  const Sample sample = load_sample(s.data, 1);
  for (HeatSource src : {HeatSource::kCls, HeatSource::kText}) {
    const Heatmap h = compute_heatmap(ckpt, s.bundle, sample.image, s.data.split.names[2], src);
    CHECK(h.scores.shape() == Shape{8, 8});
    CHECK(h.stride == 4);

    const Tensor f_c = dense_embeddings(ckpt.model, s.bundle, sample.image);
    const Tensor c = src == HeatSource::kCls ? encode_image(sample.image, s.bundle).cls_token
                                             : embed_class_names({s.data.split.names[2]}, s.bundle).reshaped({8});
    const Tensor scores = similarity_scores(f_c, c);
    const auto smax = std::max_element(scores.storage().begin(), scores.storage().end()) - scores.storage().begin();
    const auto hmax = std::max_element(h.normalized.storage().begin(), h.normalized.storage().end()) - h.normalized.storage().begin();
    CHECK(smax == hmax);
    CHECK(h.normalized[static_cast<std::size_t>(hmax)] == 1.0);

    testutil::TempDir out("heat");
    write_heatmap(h, out / "h.ppm", out / "h.csv");
    const Image img = read_ppm(out / "h.ppm");
    CHECK(img.shape() == Shape{32, 32, 3});
    std::ifstream in(out / "h.csv");
    std::string line;
    std::getline(in, line);
    CHECK(line == "y,x,score,normalized");
    std::size_t rows = 0;
    while (std::getline(in, line)) {
      std::size_t y, x;
      double score, norm;
      REQUIRE(std::sscanf(line.c_str(), "%zu,%zu,%lf,%lf", &y, &x, &score, &norm) == 4);
      CHECK(score == h.scores.at(y, x));
      const auto rgb = viridis(norm);
      for (std::size_t dy = 0; dy < 4; ++dy)
        for (std::size_t dx = 0; dx < 4; ++dx)
          for (std::size_t ch = 0; ch < 3; ++ch)
            CHECK(std::abs(img[((y * 4 + dy) * 32 + x * 4 + dx) * 3 + ch] - rgb[ch] / 255.0) <= 0.5 / 255.0);
      ++rows;
    }
    CHECK(rows == 64);
  }
  CHECK_THROWS_AS(compute_heatmap(ckpt, s.bundle, sample.image, "xyzzy", HeatSource::kText), std::invalid_argument);
  CHECK_THROWS_AS(parse_heat_source("patch"), std::invalid_argument);
}
