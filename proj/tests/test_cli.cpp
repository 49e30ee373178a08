// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "test_util.hpp"

namespace {

int run(const std::string& args) {
  const std::string cmd = std::string(CHIMERA_BIN) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

struct Workspace {
  testutil::TempDir dir{"cli"};
  std::string root = dir.path().string();

  std::string write_config(const std::string& name, const std::string& extra) const {
    const std::string path = root + "/" + name;
    std::ofstream(path) << "data.root = data\nclip.bundle = clip\nout.dir = run_" << name << "\n"
                        << "train.iterations = 3\ntrain.batch_size = 2\nmodel.backbone_channels = 16\n"
                        << extra;
    return path;
  }
};

}  // namespace

TEST_CASE("usage errors exit with 1") {
  CHECK(run("") == 1);
  CHECK(run("frobnicate") == 1);
  CHECK(run("make-toy-data") == 1);
  CHECK(run("train") == 1);
  CHECK(run("--help") == 0);
}

TEST_CASE("end-to-end commands") {
  Workspace w;
  const std::string& r = w.root;
  REQUIRE(run("make-toy-data --out " + r + "/data --images 3 --size 32 --seed 2") == 0);
  CHECK(std::filesystem::exists(r + "/data/dataset.json"));
  REQUIRE(run("make-mini-clip --out " + r + "/clip --dataset " + r + "/data --d-vis 16 --d-emb 8 --patch-size 8") == 0);
  CHECK(std::filesystem::exists(r + "/clip/manifest.json"));
  std::ofstream(r + "/names.txt") << "sky\ngrass\n";
  CHECK(run("make-mini-clip --out " + r + "/clip2 --classes-file " + r + "/names.txt") == 0);
  CHECK(run("make-mini-clip --out " + r + "/clip3 --d-vis 2 --classes-file " + r + "/names.txt") == 1);

  const std::string cfg = w.write_config("ok.cfg", "");
  REQUIRE(run("train --config " + cfg) == 0);
  const std::string ckpt = r + "/run_ok.cfg/checkpoint";
  CHECK(std::filesystem::exists(ckpt + "/manifest.json"));
  CHECK(std::filesystem::exists(r + "/run_ok.cfg/loss_log.csv"));

  CHECK(run("eval --checkpoint " + ckpt + " --config " + cfg + " --gamma 0.25 --csv " + r + "/m.csv") == 0);
  std::ifstream m(r + "/m.csv");
  std::string header;
  std::getline(m, header);
  CHECK(header == "class,iou,seen");
  CHECK(run("eval --checkpoint " + ckpt + " --data " + r + "/data --bundle " + r + "/clip2") == 1);

  for (const char* norm : {"bn", "gn", "ln-frozen", "ln-learn", "none"})
    CHECK(run(std::string("analyze-cka --norm ") + norm + " --config " + cfg + " --positions 8 --out " + r + "/cka_" + norm) == 0);
  CHECK(std::filesystem::exists(r + "/cka_gn.csv"));
  CHECK(std::filesystem::exists(r + "/cka_gn.ppm"));
  CHECK(run("analyze-cka --norm batch --config " + cfg) == 1);
  CHECK(run("analyze-cka --norm bn --checkpoint " + ckpt + " --config " + cfg + " --positions 8 --out " + r + "/cka_ck") == 0);

  const std::string heat = "heatmap --image " + r + "/data/images/0000.ppm --checkpoint " + ckpt + " --bundle " + r + "/clip";
  CHECK(run(heat + " --class sky --out " + r + "/h") == 0);
  CHECK(std::filesystem::exists(r + "/h.ppm"));
  CHECK(std::filesystem::exists(r + "/h.csv"));
  CHECK(run(heat + " --class sky --source text --out " + r + "/h2") == 0);
  CHECK(run(heat + " --class xyzzy") == 1);
  CHECK(run(heat + " --class sky --source patch") == 1);

  CHECK(run("train --config " + w.write_config("bad.cfg", "bogus.key = 1\n")) == 1);
  CHECK(run("train --config " + r + "/missing.cfg") == 1);
  CHECK(run("train --config " + w.write_config("nan.cfg", "sgd.tau = 1e-320\n")) == 2);
}
