// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <fstream>
#include <set>

#include "chimera/config.hpp"
#include "chimera/errors.hpp"
#include "test_util.hpp"

using namespace chimera;

TEST_CASE("defaults") {
  const TrainConfig c = parse_config("");
  CHECK(c.batch_size == 16);
  CHECK(c.lr == 6e-5);
  CHECK(c.weight_decay == 1e-2);
  CHECK(c.warmup_frac == 0.1);
  CHECK(c.sgd_schedule.k0 == 9000);
  CHECK(c.sgd_schedule.rate == 0.1);
  CHECK(c.sgd_tau == 0.07);
  CHECK(c.sam_tau_f == 0.07);
  CHECK(c.sam_tau_c == 0.01);
  CHECK(c.lambda_sam == 0.5);
  CHECK(c.focal.gamma == 2.0);
  CHECK(c.focal.alpha == 0.25);
  CHECK(c.infer_gamma == 0.5);
  CHECK(c.pseudo.k_clusters == 8);
  CHECK(c.pseudo.theta == 0.7);
  CHECK(c.pseudo.min_area == 4);
  CHECK(c.csh.norm == NormKind::kBatch);
  CHECK(c.csh.vencoder_blocks == 1);
  CHECK(c.backbone.stride == 4);
  CHECK(c.backbone.channels == 64);
  CHECK(c.mode == ZSMode::kInductive);
}

TEST_CASE("parsing values, comments and paths") {
  const std::string text = R"(# training
data.root = toy          # relative
clip.bundle = /abs/clip
train.iterations = 25
train.mode = transductive
model.norm = gn
model.vencoder_blocks = 3
sgd.mode = increase
sgd.noise = false
sam.lambda = 0.1
loss.focal_gamma = 1.5
infer.gamma = 0.25
)";
  const TrainConfig c = parse_config(text, "/base");
  CHECK(c.data_root == std::filesystem::path("/base/toy"));
  CHECK(c.clip_bundle == std::filesystem::path("/abs/clip"));
  CHECK(c.iterations == 25);
  CHECK(c.mode == ZSMode::kTransductive);
  CHECK(c.csh.norm == NormKind::kGroup);
  CHECK(c.csh.vencoder_blocks == 3);
  CHECK(c.sgd_schedule.mode == DecayMode::kIncrease);
  CHECK_FALSE(c.sgd_noise);
  CHECK(c.lambda_sam == 0.1);
  CHECK(c.focal.gamma == 1.5);
  CHECK(c.infer_gamma == 0.25);
  CHECK(parse_config("loss.lambda_sam = 0.1").lambda_sam == 0.1);
  CHECK(parse_config("sam.lambda = 0.2\nloss.lambda_sam = 0.2").lambda_sam == 0.2);
}

TEST_CASE("errors") {
  CHECK_THROWS_WITH_AS(parse_config("train.iterations = 5\nbogus.key = 1"), doctest::Contains("line 2"), FormatError);
  CHECK_THROWS_WITH_AS(parse_config("train.lr = 1\ntrain.lr = 2"), doctest::Contains("duplicate"), FormatError);
  CHECK_THROWS_AS(parse_config("train.lr"), FormatError);
  CHECK_THROWS_AS(parse_config("train.lr = fast"), FormatError);
  CHECK_THROWS_AS(parse_config("sgd.noise = maybe"), FormatError);
  CHECK_THROWS_AS(parse_config("model.norm = batch"), FormatError);
  CHECK_THROWS_AS(parse_config("sam.lambda = 0.1\nloss.lambda_sam = 0.5"), FormatError);
  CHECK_THROWS(parse_config("sgd.tau = 0"));
  CHECK_THROWS(parse_config("sam.tau_f = -1"));
  CHECK_THROWS(parse_config("train.batch_size = 0"));
  CHECK_THROWS_AS(load_config("/nonexistent/config.txt"), FormatError);
}

TEST_CASE("config_to_text round-trips") {
  testutil::TempDir dir("config");
  TrainConfig c = parse_config("train.iterations = 7\nmodel.norm = ln-learn\nsgd.k0 = 123.5\ntrain.lr = 0.0003",
                               dir.path());
  const std::string text = config_to_text(c);
  const TrainConfig d = parse_config(text);
  CHECK(config_to_text(d) == text);
  CHECK(d.sgd_schedule.k0 == 123.5);
  CHECK(d.lr == 0.0003);
  // Every key except the alias appears exactly once.
  std::set<std::string> keys;
  for (const auto& k : config_keys()) keys.insert(k);
  CHECK(keys.count("loss.lambda_sam") == 1);
  std::size_t lines = 0;
  for (char ch : text) lines += ch == '\n';
  CHECK(lines == keys.size() - 1);

  std::ofstream(dir / "c.cfg") << "data.root = sub\n";
  CHECK(load_config(dir / "c.cfg").data_root == dir.path() / "sub");
}
