// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <map>
#include <random>

#include "chimera/semantic_head.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace chimera;
using oracle::Vec;

namespace {

const std::vector<std::string> kNames = {"sky", "grass", "water", "sand"};

Vec v_of(const Tensor& t) { return oracle::to_vec(t); }

/// Per-row VEncoder oracle: returns (f_v', f_v).
std::pair<Vec, Vec> vencoder_row(const Vec& x, const VEncoderWeights& w) {
  const Vec ln1 = oracle::layer_norm(x, v_of(w.ln1_scale), v_of(w.ln1_bias), kLayerNormEps);
  Vec fvp = oracle::affine(ln1, w.value_weight, w.value_bias);
  for (std::size_t i = 0; i < x.size(); ++i) fvp[i] += x[i];
  const Vec ln2 = oracle::layer_norm(fvp, v_of(w.ln2_scale), v_of(w.ln2_bias), kLayerNormEps);
  Vec hid = oracle::affine(ln2, w.ffn_w1, w.ffn_b1);
  for (double& e : hid) e = oracle::gelu(e);
  Vec fv = oracle::affine(hid, w.ffn_w2, w.ffn_b2);
  for (std::size_t i = 0; i < x.size(); ++i) fv[i] += fvp[i];
  return {fvp, fv};
}

VEncoderWeights random_vencoder(std::size_t d, std::mt19937_64& rng) {
  using testutil::random_tensor;
  VEncoderWeights w;
  w.ln1_scale = random_tensor({d}, rng);
  w.ln1_bias = random_tensor({d}, rng);
  w.value_weight = random_tensor({d, d}, rng, 0.3);
  w.value_bias = random_tensor({d}, rng);
  w.ln2_scale = random_tensor({d}, rng);
  w.ln2_bias = random_tensor({d}, rng);
  w.ffn_w1 = random_tensor({d, 4 * d}, rng, 0.3);
  w.ffn_b1 = random_tensor({4 * d}, rng);
  w.ffn_w2 = random_tensor({4 * d, d}, rng, 0.3);
  w.ffn_b2 = random_tensor({d}, rng);
  return w;
}

DenseFeatureMap random_map(std::size_t h, std::size_t w, std::size_t c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return {testutil::random_tensor({h, w, c}, rng), 4};
}

}  // namespace

TEST_CASE("zeroed branches pass through exactly") {
  std::mt19937_64 rng(1);
  const Tensor x = testutil::random_tensor({4, 8}, rng);
  VEncoderWeights w = random_vencoder(8, rng);
  SUBCASE("ffn") {
    w.ffn_w1.fill(0);
    w.ffn_w2.fill(0);
    w.ffn_b1.fill(0);
    w.ffn_b2.fill(0);
    const auto [fvp, fv] = vencoder_forward(x, w);
    CHECK(fv == fvp);
  }
  SUBCASE("value") {
    w.value_weight.fill(0);
    w.value_bias.fill(0);
    const auto [fvp, fv] = vencoder_forward(x, w);
    CHECK(fvp == x);
  }
}

TEST_CASE("vencoder matches the scalar loop oracle") {
  std::mt19937_64 rng(2);
  const Tensor x = testutil::random_tensor({4, 8}, rng);  // 2x2 map, d_vis 8
  const VEncoderWeights w = random_vencoder(8, rng);
  const auto [fvp, fv] = vencoder_forward(x, w);
  for (std::size_t r = 0; r < 4; ++r) {
    const auto [rp, rv] = vencoder_row(Vec(x.row(r).begin(), x.row(r).end()), w);
    for (std::size_t c = 0; c < 8; ++c) {
      CHECK(std::abs(fvp.at(r, c) - rp[c]) <= 1e-6);
      CHECK(std::abs(fv.at(r, c) - rv[c]) <= 1e-6);
    }
  }
  CHECK_THROWS_AS(vencoder_forward(Tensor({4, 7}), w), std::invalid_argument);
}

TEST_CASE("full chain on a 1x1 map equals the hand-composed oracle") {
  ClipWeightBundle b = make_mini_clip(3, 4, 4, 1, kNames);
  std::mt19937_64 rng(4);
  b.visual_projection_bias = testutil::random_tensor({4}, rng);
  CSHParams p = init_csh(4, 4, {}, 5);
  p.bn_scale = testutil::random_tensor({4}, rng);
  p.bn_shift = testutil::random_tensor({4}, rng);
  p.bn_running_mean = testutil::random_tensor({4}, rng);
  p.bn_running_var = Tensor::vector({0.5, 1.5, 2.0, 0.7});
  p.bn_batches_tracked = 1;
  const DenseFeatureMap f = random_map(1, 1, 4, 6);
  const CSHTrace t = csh_forward(f, p, b, Mode::kEval);

  const Vec x = v_of(f.data);
  Vec hid = oracle::affine(x, p.mlp_w1, p.mlp_b1);
  for (double& e : hid) e = oracle::gelu(e);
  const Vec fp = oracle::affine(hid, p.mlp_w2, p.mlp_b2);
  const auto [fvp, fv] = vencoder_row(fp, b.vencoders[0]);
  Vec fbn(4), fres(4);
  for (std::size_t j = 0; j < 4; ++j) {
    fbn[j] = (fv[j] - p.bn_running_mean[j]) / std::sqrt(p.bn_running_var[j] + 1e-5) * p.bn_scale[j] + p.bn_shift[j];
    fres[j] = fp[j] + fbn[j];
  }
  const Vec fc = oracle::affine(fres, b.visual_projection, b.visual_projection_bias);
  for (std::size_t j = 0; j < 4; ++j) {
    CHECK(std::abs(t.f_p[j] - fp[j]) <= 1e-6);
    CHECK(std::abs(t.f_v_prime[j] - fvp[j]) <= 1e-6);
    CHECK(std::abs(t.f_v[j] - fv[j]) <= 1e-6);
    CHECK(std::abs(t.f_bn[j] - fbn[j]) <= 1e-6);
    CHECK(std::abs(t.f_c[j] - fc[j]) <= 1e-6);
  }
}

TEST_CASE("shapes, residual identity, determinism") {
  const ClipWeightBundle b = make_mini_clip(0, 32, 16, 8, kNames);
  CSHParams p = init_csh(64, 32, {}, 1);
  const DenseFeatureMap f = random_map(16, 16, 64, 2);
  CHECK_THROWS_AS(csh_forward(f, p, b, Mode::kEval), std::logic_error);
  const CSHTrace tr = csh_forward(f, p, b, Mode::kTrain);
  CHECK(p.bn_batches_tracked == 1);
  CHECK(tr.f_c.shape() == Shape{16, 16, 16});
  CHECK(tr.f_p.shape() == Shape{16, 16, 32});
  for (std::size_t i = 0; i < tr.f_res.numel(); ++i) CHECK(tr.f_res[i] == tr.f_p[i] + tr.f_bn[i]);
  for (double v : p.bn_running_var.storage()) CHECK(v >= 0.0);
  const CSHTrace e1 = csh_forward(f, p, b, Mode::kEval);
  const CSHTrace e2 = csh_forward(f, p, b, Mode::kEval);
  CHECK(e1.f_c == e2.f_c);
  CHECK(p.bn_batches_tracked == 1);
  CHECK_THROWS_AS(csh_forward(random_map(2, 2, 63, 1), p, b, Mode::kEval), std::invalid_argument);
}

TEST_CASE("train-mode batch norm standardizes channels") {
  const ClipWeightBundle b = make_mini_clip(0, 32, 16, 8, kNames);
  CSHParams p = init_csh(8, 32, {}, 1);
  const CSHTrace tr = csh_forward(random_map(4, 4, 8, 3), p, b, Mode::kTrain);
  const Tensor fbn = tr.f_bn.reshaped({16, 32});
  for (std::size_t j = 0; j < 32; ++j) {
    double m = 0, s = 0;
    for (std::size_t r = 0; r < 16; ++r) m += fbn.at(r, j);
    m /= 16;
    for (std::size_t r = 0; r < 16; ++r) s += (fbn.at(r, j) - m) * (fbn.at(r, j) - m);
    CHECK(std::abs(m - p.bn_shift[j]) <= 1e-9);
    CHECK(s / 16 == doctest::Approx(p.bn_scale[j] * p.bn_scale[j]).epsilon(1e-3));
  }
}

TEST_CASE("eval-mode batch norm is affine in its input (superposition)") {
  const ClipWeightBundle b = make_mini_clip(0, 32, 16, 8, kNames);
  CSHParams q = init_csh(32, 32, {}, 2);
  std::mt19937_64 rng(8);
  q.bn_batches_tracked = 1;
  q.bn_running_mean = testutil::random_tensor({32}, rng);
  q.bn_running_var = Tensor::full({32}, 2.0);
  q.bn_scale = testutil::random_tensor({32}, rng);
  const CSHTrace tx = csh_forward(random_map(3, 3, 32, 9), q, b, Mode::kEval);
  const CSHTrace ty = csh_forward(random_map(3, 3, 32, 10), q, b, Mode::kEval);
  // Affine per channel: g(u) - g(v) = k (u - v) with one k per channel.
  const Tensor fx = tx.f_v.reshaped({9, 32}), fy = ty.f_v.reshaped({9, 32});
  const Tensor bx = tx.f_bn.reshaped({9, 32}), by = ty.f_bn.reshaped({9, 32});
  for (std::size_t j = 0; j < 32; ++j) {
    const double k0 = (bx.at(0, j) - by.at(0, j)) / (fx.at(0, j) - fy.at(0, j));
    CHECK(k0 == doctest::Approx(q.bn_scale[j] / std::sqrt(2.0 + 1e-5)).epsilon(1e-9));
    for (std::size_t r = 1; r < 9; ++r) {
      const double kr = (bx.at(r, j) - by.at(r, j)) / (fx.at(r, j) - fy.at(r, j));
      CHECK(kr == doctest::Approx(k0).epsilon(1e-9));
    }
  }
}

TEST_CASE("gradients reach only the MLP and normalization affine") {
  const ClipWeightBundle b = make_mini_clip(0, 8, 4, 4, kNames);
  CSHParams p = init_csh(6, 8, {}, 3);
  const DenseFeatureMap f = random_map(3, 3, 6, 4);
  auto loss_of = [&](CSHParams& params, std::map<std::string, Tensor>* grads) {
    ag::Tape tape;
    ParamBinder bind(tape, true);
    const std::size_t rows[] = {9};
    CSHParams copy = params;  // keep running stats untouched across probes
    const CSHVars v = csh_forward(tape.constant(f.data.reshaped({9, 6})), rows, copy, b, Mode::kTrain, bind);
    std::mt19937_64 rng(5);
    const ag::Var l = ag::sum(ag::mul(v.f_c, tape.constant(testutil::random_tensor({9, 4}, rng))));
    if (grads) {
      tape.backward(l);
      for (const auto& [n, var] : bind.bound()) (*grads)[n] = tape.grad(var);
    }
    return l.value()[0];
  };
  std::map<std::string, Tensor> grads;
  loss_of(p, &grads);
  std::vector<std::string> names;
  p.for_each_trainable([&](const std::string& n, Tensor&) { names.push_back(n); });
  CHECK(names.size() == 6);
  CHECK(grads.size() == names.size());  // nothing frozen is bound
  std::mt19937_64 rng(6);
  p.for_each_trainable([&](const std::string& n, Tensor& t) {
    for (int k = 0; k < 3; ++k) {
      const std::size_t i = std::uniform_int_distribution<std::size_t>(0, t.numel() - 1)(rng);
      const double fd = testutil::central_difference([&] { return loss_of(p, nullptr); }, t[i], 1e-6);
      INFO(n << "[" << i << "]");
      if (std::abs(fd) < 1e-8) continue;
      CHECK(testutil::relative_error(grads.at(n)[i], fd) <= 1e-4);
    }
  });
}

TEST_CASE("frozen fingerprint is stable and sensitive") {
  const ClipWeightBundle a = make_mini_clip(0, 32, 16, 8, kNames);
  const std::string fa = frozen_fingerprint(a);
  CHECK(fa == frozen_fingerprint(make_mini_clip(0, 32, 16, 8, kNames)));
  CHECK(fa.size() == 64);
  ClipWeightBundle b = a;
  b.vencoders[0].ffn_w2[7] += 1e-3;
  CHECK(frozen_fingerprint(b) != fa);
  ClipWeightBundle c = a;
  c.visual_projection[0] += 1e-3;
  CHECK(frozen_fingerprint(c) != fa);
}

TEST_CASE("normalization variants and block counts") {
  const ClipWeightBundle b = make_mini_clip(0, 32, 16, 8, kNames);
  const DenseFeatureMap f = random_map(4, 4, 16, 7);
  for (const char* name : {"bn", "gn", "ln-frozen", "ln-learn", "none"}) {
    const NormKind k = parse_norm_kind(name);
    CHECK(to_string(k) == name);
    for (std::size_t blocks : {0, 1, 3}) {
      CSHConfig cfg;
      cfg.norm = k;
      cfg.vencoder_blocks = blocks;
      CSHParams p = init_csh(16, 32, cfg, 1);
      const CSHTrace t = csh_forward(f, p, b, Mode::kTrain);
      CHECK(t.f_c.all_finite());
      if (blocks == 0) CHECK(t.f_v == t.f_p);
      if (k == NormKind::kNone) CHECK(t.f_bn == t.f_v);
    }
  }
  CHECK_THROWS_AS(parse_norm_kind("batch"), std::invalid_argument);
  CSHConfig bad;
  bad.vencoder_blocks = 4;
  CHECK_THROWS_AS(init_csh(16, 32, bad, 1), std::invalid_argument);
}
