// SPDX-License-Identifier: Apache-2.0
// chimera: dataset generation, training, evaluation and analysis driver.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "chimera/analysis.hpp"
#include "chimera/checkpoint.hpp"
#include "chimera/config.hpp"
#include "chimera/dataset.hpp"
#include "chimera/errors.hpp"
#include "chimera/evaluate.hpp"
#include "chimera/image_io.hpp"
#include "chimera/trainer.hpp"

namespace fs = std::filesystem;
using namespace chimera;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitNumeric = 2;

struct Sources {
  std::string config, data, bundle;

  TrainConfig resolve() const {
    TrainConfig cfg = config.empty() ? TrainConfig{} : load_config(config);
    if (!data.empty()) cfg.data_root = data;
    if (!bundle.empty()) cfg.clip_bundle = bundle;
    if (cfg.data_root.empty()) throw CLI::ValidationError("no dataset: pass --data or a config with data.root");
    if (cfg.clip_bundle.empty()) throw CLI::ValidationError("no bundle: pass --bundle or a config with clip.bundle");
    return cfg;
  }
};

void add_sources(CLI::App* cmd, Sources& s) {
  cmd->add_option("--config", s.config, "Config file supplying data.root and clip.bundle");
  cmd->add_option("--data", s.data, "Dataset directory (overrides data.root)");
  cmd->add_option("--bundle", s.bundle, "Weight bundle directory (overrides clip.bundle)");
}

void write_text(const fs::path& file, const std::string& text) {
  std::ofstream out(file);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + file.string());
}

std::vector<std::string> read_lines(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot open " + file.string());
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Zero-shot semantic segmentation toolkit"};
  app.require_subcommand(1);

  // make-toy-data
  ToyDatasetOptions toy;
  std::string toy_out;
  auto* cmd_toy = app.add_subcommand("make-toy-data", "Generate the synthetic toy dataset");
  cmd_toy->add_option("--out", toy_out, "Output directory")->required();
  cmd_toy->add_option("--seed", toy.seed, "Random seed")->capture_default_str();
  cmd_toy->add_option("--images", toy.n_images, "Number of images")->capture_default_str();
  cmd_toy->add_option("--size", toy.image_size, "Image side length in pixels")->capture_default_str();
  cmd_toy->add_option("--seen", toy.n_seen, "Seen class count")->capture_default_str();
  cmd_toy->add_option("--unseen", toy.n_unseen, "Unseen class count")->capture_default_str();

  // make-mini-clip
  std::string clip_out, classes_file, classes_dataset;
  std::uint64_t clip_seed = 0;
  std::size_t d_vis = 32, d_emb = 16, patch = 8;
  auto* cmd_clip = app.add_subcommand("make-mini-clip", "Generate a deterministic mini vision-language bundle");
  cmd_clip->add_option("--out", clip_out, "Output directory")->required();
  cmd_clip->add_option("--seed", clip_seed, "Random seed")->capture_default_str();
  cmd_clip->add_option("--d-vis", d_vis, "Visual width")->capture_default_str();
  cmd_clip->add_option("--d-emb", d_emb, "Joint embedding width")->capture_default_str();
  cmd_clip->add_option("--patch-size", patch, "Patch size")->capture_default_str();
  auto* opt_cf = cmd_clip->add_option("--classes-file", classes_file, "Class names, one per line");
  auto* opt_cd = cmd_clip->add_option("--dataset", classes_dataset, "Take class names from a dataset manifest");
  opt_cf->excludes(opt_cd);

  // train
  std::string train_config;
  auto* cmd_train = app.add_subcommand("train", "Train from a config file");
  cmd_train->add_option("--config", train_config, "Config file")->required();

  // eval
  Sources eval_src;
  std::string eval_ckpt, eval_csv;
  std::optional<double> eval_gamma;
  auto* cmd_eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  cmd_eval->add_option("--checkpoint", eval_ckpt, "Checkpoint directory")->required();
  cmd_eval->add_option("--gamma", eval_gamma, "Unseen-class logit bias (default infer.gamma)");
  cmd_eval->add_option("--csv", eval_csv, "Write the per-class report here");
  add_sources(cmd_eval, eval_src);

  // analyze-cka
  Sources cka_src;
  std::string cka_norm, cka_ckpt, cka_out = "cka";
  CKAOptions cka_opts;
  auto* cmd_cka = app.add_subcommand("analyze-cka", "Layer-by-layer CKA similarity");
  cmd_cka->add_option("--norm", cka_norm, "Normalization variant")
      ->required()
      ->check(CLI::IsMember({"bn", "gn", "ln-frozen", "ln-learn", "none"}));
  cmd_cka->add_option("--checkpoint", cka_ckpt, "Checkpoint (default: fresh initialization)");
  cmd_cka->add_option("--out", cka_out, "Output prefix for .csv and .ppm")->capture_default_str();
  cmd_cka->add_option("--positions", cka_opts.positions_per_image, "Positions per image")->capture_default_str();
  cmd_cka->add_option("--images", cka_opts.max_images, "Images to sample")->capture_default_str();
  cmd_cka->add_option("--seed", cka_opts.seed, "Sampling seed")->capture_default_str();
  add_sources(cmd_cka, cka_src);

  // heatmap
  std::string heat_image, heat_class, heat_ckpt, heat_bundle, heat_source = "cls", heat_out = "heatmap";
  auto* cmd_heat = app.add_subcommand("heatmap", "Similarity heatmap for one image");
  cmd_heat->add_option("--image", heat_image, "PPM image")->required();
  cmd_heat->add_option("--class", heat_class, "Class name")->required();
  cmd_heat->add_option("--checkpoint", heat_ckpt, "Checkpoint directory")->required();
  cmd_heat->add_option("--bundle", heat_bundle, "Weight bundle directory")->required();
  cmd_heat->add_option("--source", heat_source, "Reference vector: image CLS or class text")
      ->check(CLI::IsMember({"cls", "text"}))
      ->capture_default_str();
  cmd_heat->add_option("--out", heat_out, "Output prefix for .ppm and .csv")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*cmd_toy) {
      const DatasetManifest m = make_toy_dataset(toy, toy_out);
      std::printf("wrote %zu images (%zu seen, %zu unseen classes) to %s\n", m.size(),
                  m.split.num_seen(), m.split.num_unseen(), toy_out.c_str());
    } else if (*cmd_clip) {
      std::vector<std::string> names;
      if (!classes_file.empty()) {
        names = read_lines(classes_file);
      } else if (!classes_dataset.empty()) {
        names = load_manifest(classes_dataset).split.names;
      } else {
        throw CLI::ValidationError("pass --classes-file or --dataset");
      }
      const ClipWeightBundle b = make_mini_clip(clip_seed, d_vis, d_emb, patch, names);
      save_weight_bundle(b, clip_out);
      std::printf("bundle %s\nfingerprint %s\n", clip_out.c_str(), frozen_fingerprint(b).c_str());
    } else if (*cmd_train) {
      const TrainConfig cfg = load_config(train_config);
      const DatasetManifest data = load_manifest(cfg.data_root);
      const ClipWeightBundle bundle = load_weight_bundle(cfg.clip_bundle);
      TrainOptions opts;
      opts.on_iteration = [&](const LossRecord& r) {
        if (r.iteration % 50 == 0 || r.iteration + 1 == cfg.iterations)
          std::printf("iter %6lld  seg %.5f  sgd %.5f  sam %.5f  total %.5f  K %zu\n",
                      static_cast<long long>(r.iteration), r.l_seg, r.l_sgd, r.l_sam, r.total, r.k);
      };
      train(cfg, data, bundle, opts);
      if (!cfg.out_dir.empty()) std::printf("checkpoint %s\n", (cfg.out_dir / "checkpoint").c_str());
    } else if (*cmd_eval) {
      const TrainConfig cfg = eval_src.resolve();
      const DatasetManifest data = load_manifest(cfg.data_root);
      const ClipWeightBundle bundle = load_weight_bundle(cfg.clip_bundle);
      const Checkpoint ckpt = load_checkpoint(eval_ckpt);
      const EvalResult r = evaluate(ckpt, data, bundle, eval_gamma.value_or(cfg.infer_gamma));
      const std::string csv = metrics_csv(r.report, data.split);
      if (!eval_csv.empty()) write_text(eval_csv, csv);
      std::printf("%s", csv.c_str());
    } else if (*cmd_cka) {
      TrainConfig cfg = cka_src.resolve();
      const DatasetManifest data = load_manifest(cfg.data_root);
      const ClipWeightBundle bundle = load_weight_bundle(cfg.clip_bundle);
      Checkpoint ckpt;
      if (!cka_ckpt.empty()) {
        ckpt = load_checkpoint(cka_ckpt);
        if (to_string(ckpt.model.csh.config.norm) != cka_norm)
          throw CLI::ValidationError("checkpoint uses norm " + to_string(ckpt.model.csh.config.norm) +
                                     ", not " + cka_norm);
      } else {
        cfg.csh.norm = parse_norm_kind(cka_norm);
        ckpt = initial_checkpoint(cfg, data, bundle);
      }
      const CKAReport report = analyze_cka(ckpt, bundle, data, cka_opts);
      write_text(cka_out + ".csv", cka_csv(report));
      write_cka_image(report, cka_out + ".ppm");
      std::printf("%zu layers -> %s.csv, %s.ppm\n", report.layers.size(), cka_out.c_str(), cka_out.c_str());
    } else if (*cmd_heat) {
      const ClipWeightBundle bundle = load_weight_bundle(heat_bundle);
      const Checkpoint ckpt = load_checkpoint(heat_ckpt);
      const Heatmap heat = compute_heatmap(ckpt, bundle, read_ppm(heat_image), heat_class,
                                           parse_heat_source(heat_source));
      write_heatmap(heat, heat_out + ".ppm", heat_out + ".csv");
      std::printf("%s.ppm, %s.csv\n", heat_out.c_str(), heat_out.c_str());
    }
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric failure at iteration %ld: %s\n", e.iteration(), e.what());
    return kExitNumeric;
  } catch (const CLI::ValidationError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  }
  return kExitOk;
}
