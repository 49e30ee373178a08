// SPDX-License-Identifier: Apache-2.0
#include "chimera/analysis.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <Eigen/Dense>

#include "chimera/image_io.hpp"
#include "chimera/model.hpp"
#include "chimera/selective_distillation.hpp"

namespace chimera {

namespace {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Mat centred(const Tensor& t) {
  Mat m = Eigen::Map<const Mat>(t.data(), static_cast<Eigen::Index>(t.rows()),
                                static_cast<Eigen::Index>(t.cols()));
  m.rowwise() -= m.colwise().mean();
  return m;
}

/// Row of a [gh*gw, c] grid holding the activation under the centre of
/// final-grid cell (y, x) of an h x w grid.
std::size_t map_position(std::size_t y, std::size_t x, std::size_t h, std::size_t w,
                         std::size_t gh, std::size_t gw) {
  const std::size_t gy = ((2 * y + 1) * gh) / (2 * h);
  const std::size_t gx = ((2 * x + 1) * gw) / (2 * w);
  return gy * gw + gx;
}

}  // namespace

double cka(const Tensor& x, const Tensor& y) {
  if (x.rows() != y.rows())
    throw std::invalid_argument("cka: row counts differ (" + std::to_string(x.rows()) + " vs " +
                                std::to_string(y.rows()) + ")");
  if (x.rows() < 2) throw std::invalid_argument("cka: need at least 2 rows");
  const Mat xc = centred(x), yc = centred(y);
  const double num = (yc.transpose() * xc).squaredNorm();
  const double dx = (xc.transpose() * xc).norm();
  const double dy = (yc.transpose() * yc).norm();
  if (dx == 0.0 || dy == 0.0) return 0.0;
  return num / (dx * dy);
}

CKAReport analyze_cka(const Checkpoint& ckpt, const ClipWeightBundle& bundle,
                      const DatasetManifest& data, const CKAOptions& opts) {
  check_compatible(ckpt, bundle);
  const std::size_t n_images = std::min(opts.max_images, data.size());
  if (n_images < 2) throw std::invalid_argument("analyze-cka needs at least 2 images");
  if (opts.positions_per_image < 1) throw std::invalid_argument("analyze-cka needs at least 1 position per image");
  Rng rng(opts.seed);

  CKAReport report;
  std::vector<std::vector<double>> acts;
  std::vector<std::size_t> widths;
  auto add_rows = [&](std::size_t layer, const Tensor& grid, std::size_t gh, std::size_t gw,
                      std::size_t row_offset, const std::vector<std::pair<std::size_t, std::size_t>>& pos,
                      std::size_t h, std::size_t w) {
    const std::size_t c = grid.cols();
    if (acts.size() <= layer) {
      acts.resize(layer + 1);
      widths.resize(layer + 1);
    }
    widths[layer] = c;
    for (const auto& [y, x] : pos) {
      const auto r = grid.row(row_offset + map_position(y, x, h, w, gh, gw));
      acts[layer].insert(acts[layer].end(), r.begin(), r.end());
    }
  };

  for (std::size_t i = 0; i < n_images; ++i) {
    const Image image = load_sample(data, i).image;
    const ModelOutputs out = model_forward(ckpt.model, bundle, image);
    const ClipEncoderTrace clip = encode_image_trace(image, bundle);
    const std::size_t h = out.csh.f_c.size(0), w = out.csh.f_c.size(1);
    std::vector<std::size_t> cells(h * w);
    std::iota(cells.begin(), cells.end(), 0);
    std::shuffle(cells.begin(), cells.end(), rng);
    cells.resize(std::min(opts.positions_per_image, cells.size()));
    std::vector<std::pair<std::size_t, std::size_t>> pos;
    for (std::size_t c : cells) pos.emplace_back(c / w, c % w);

    std::size_t layer = 0;
    auto probe = [&](const std::string& name, const Tensor& t, std::size_t gh, std::size_t gw,
                     std::size_t offset) {
      if (i == 0) report.layers.push_back(name);
      add_rows(layer++, t, gh, gw, offset, pos, h, w);
    };
    for (std::size_t s = 0; s < out.stages.size(); ++s) {
      const Tensor& d = out.stages[s].data;
      probe("backbone.stage" + std::to_string(s), d.reshaped({d.size(0) * d.size(1), d.size(2)}),
            d.size(0), d.size(1), 0);
    }
    const std::pair<const char*, const Tensor*> csh_layers[] = {
        {"csh.f_p", &out.csh.f_p},   {"csh.f_v_prime", &out.csh.f_v_prime}, {"csh.f_v", &out.csh.f_v},
        {"csh.f_bn", &out.csh.f_bn}, {"csh.f_res", &out.csh.f_res},         {"csh.f_c", &out.csh.f_c}};
    for (const auto& [name, t] : csh_layers) probe(name, t->reshaped({h * w, t->size(2)}), h, w, 0);
    const std::size_t gh = clip.outputs.grid_h, gw = clip.outputs.grid_w;
    for (std::size_t s = 0; s < clip.token_states.size(); ++s)
      probe(s == 0 ? "clip.embed" : "clip.block" + std::to_string(s - 1), clip.token_states[s], gh, gw, 1);
    probe("clip.ln_post", clip.post_ln, gh, gw, 1);
  }

  const std::size_t n_layers = report.layers.size();
  std::vector<Tensor> mats;
  for (std::size_t l = 0; l < n_layers; ++l)
    mats.emplace_back(Shape{acts[l].size() / widths[l], widths[l]}, acts[l]);
  if (mats.front().rows() < 2) throw std::invalid_argument("analyze-cka: insufficient samples");
  report.matrix = Tensor({n_layers, n_layers});
  for (std::size_t a = 0; a < n_layers; ++a) {
    for (std::size_t b = a; b < n_layers; ++b) {
      const double v = cka(mats[a], mats[b]);
      report.matrix.at(a, b) = report.matrix.at(b, a) = v;
    }
  }
  return report;
}

std::string cka_csv(const CKAReport& report) {
  std::string out = "layer";
  for (const auto& n : report.layers) out += "," + n;
  out += "\n";
  char buf[32];
  for (std::size_t a = 0; a < report.layers.size(); ++a) {
    out += report.layers[a];
    for (std::size_t b = 0; b < report.layers.size(); ++b) {
      std::snprintf(buf, sizeof buf, ",%.10f", report.matrix.at(a, b));
      out += buf;
    }
    out += "\n";
  }
  return out;
}

void write_cka_image(const CKAReport& report, const std::filesystem::path& file, std::size_t cell) {
  const std::size_t n = report.layers.size();
  Image img({n * cell, n * cell, 3});
  for (std::size_t y = 0; y < n * cell; ++y)
    for (std::size_t x = 0; x < n * cell; ++x) {
      const auto rgb = viridis(report.matrix.at(y / cell, x / cell));
      for (std::size_t ch = 0; ch < 3; ++ch) img[(y * n * cell + x) * 3 + ch] = rgb[ch] / 255.0;
    }
  write_ppm(file, img);
}

HeatSource parse_heat_source(const std::string& s) {
  if (s == "cls") return HeatSource::kCls;
  if (s == "text") return HeatSource::kText;
  throw std::invalid_argument("unknown heat source '" + s + "' (expected cls or text)");
}

Tensor minmax_normalize(const Tensor& t) {
  Tensor out(t.shape(), 0.5);
  if (t.numel() == 0) return out;
  const auto [lo, hi] = std::minmax_element(t.values().begin(), t.values().end());
  if (!(*hi > *lo)) return out;
  for (std::size_t i = 0; i < t.numel(); ++i) out[i] = (t[i] - *lo) / (*hi - *lo);
  return out;
}

Heatmap compute_heatmap(const Checkpoint& ckpt, const ClipWeightBundle& bundle, const Image& image,
                        const std::string& class_name, HeatSource source) {
  check_compatible(ckpt, bundle);
  const Tensor text = embed_class_names({class_name}, bundle);  // throws for unknown names
  const Tensor f_c = dense_embeddings(ckpt.model, bundle, image);
  const Tensor c = source == HeatSource::kText ? text.reshaped({text.numel()})
                                               : encode_image(image, bundle).cls_token;
  Heatmap heat;
  heat.stride = ckpt.model.backbone.config.stride;
  heat.scores = similarity_scores(f_c, c).reshaped({f_c.size(0), f_c.size(1)});
  heat.normalized = minmax_normalize(heat.scores);
  return heat;
}

void write_heatmap(const Heatmap& heat, const std::filesystem::path& ppm,
                   const std::filesystem::path& csv) {
  const std::size_t h = heat.scores.size(0), w = heat.scores.size(1), s = heat.stride;
  Image img({h * s, w * s, 3});
  for (std::size_t y = 0; y < h * s; ++y)
    for (std::size_t x = 0; x < w * s; ++x) {
      const auto rgb = viridis(heat.normalized.at(y / s, x / s));
      for (std::size_t ch = 0; ch < 3; ++ch) img[(y * w * s + x) * 3 + ch] = rgb[ch] / 255.0;
    }
  write_ppm(ppm, img);
  std::ofstream out(csv);
  if (!out) throw std::runtime_error("cannot write " + csv.string());
  out << "y,x,score,normalized\n";
  char buf[96];
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      std::snprintf(buf, sizeof buf, "%zu,%zu,%.17g,%.17g\n", y, x, heat.scores.at(y, x),
                    heat.normalized.at(y, x));
      out << buf;
    }
}

}  // namespace chimera
