// SPDX-License-Identifier: Apache-2.0
#include "chimera/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "chimera/errors.hpp"
#include "chimera/image_io.hpp"

namespace chimera {

namespace {

constexpr const char* kManifestFormat = "chimera-dataset/1";

struct ToyClass {
  const char* name;
  double r, g, b;
};

constexpr ToyClass kToyClasses[kToyMaxClasses] = {
    {"sky", 0.35, 0.60, 0.95},   {"grass", 0.20, 0.70, 0.25}, {"water", 0.10, 0.30, 0.60},
    {"sand", 0.90, 0.80, 0.50},  {"rock", 0.45, 0.42, 0.40},  {"snow", 0.95, 0.95, 0.97},
    {"brick", 0.70, 0.25, 0.15}, {"wood", 0.55, 0.35, 0.15},  {"leaf", 0.50, 0.85, 0.10},
    {"metal", 0.70, 0.72, 0.78}, {"cloth", 0.75, 0.20, 0.65}, {"stone", 0.25, 0.25, 0.30}};

}  // namespace

std::vector<std::string> toy_class_names(std::size_t n) {
  if (n > kToyMaxClasses)
    throw std::invalid_argument("toy dataset supports at most " + std::to_string(kToyMaxClasses) + " classes");
  std::vector<std::string> names;
  for (std::size_t i = 0; i < n; ++i) names.emplace_back(kToyClasses[i].name);
  return names;
}

DatasetManifest make_toy_dataset(const ToyDatasetOptions& opts, const std::filesystem::path& out_dir) {
  const std::size_t n_classes = opts.n_seen + opts.n_unseen;
  if (opts.n_images == 0) throw std::invalid_argument("toy dataset: n_images must be >= 1");
  if (opts.n_seen == 0) throw std::invalid_argument("toy dataset: n_seen must be >= 1");
  if (opts.image_size == 0 || opts.image_size % kToyBlock != 0)
    throw std::invalid_argument("toy dataset: image_size must be a positive multiple of " +
                                std::to_string(kToyBlock));
  const std::vector<std::string> names = toy_class_names(n_classes);

  std::filesystem::create_directories(out_dir / "images");
  std::filesystem::create_directories(out_dir / "labels");

  Rng rng(opts.seed);
  const std::size_t size = opts.image_size;
  const std::size_t grid = size / kToyBlock;
  std::normal_distribution<double> noise(0.0, 0.02);

  DatasetManifest m;
  m.root = out_dir;
  m.image_size = size;
  std::vector<int> seen, unseen;
  for (std::size_t c = 0; c < n_classes; ++c) (c < opts.n_seen ? seen : unseen).push_back(static_cast<int>(c));
  m.split = make_split(names, seen, unseen);

  for (std::size_t i = 0; i < opts.n_images; ++i) {
    std::uniform_int_distribution<std::size_t> site_count(3, 5);
    std::uniform_int_distribution<std::size_t> cell(0, grid * grid - 1);
    std::uniform_int_distribution<std::size_t> klass(0, n_classes - 1);
    const std::size_t n_sites = std::min(site_count(rng), grid * grid);
    std::vector<std::size_t> site_cells;
    std::vector<int> site_class;
    while (site_cells.size() < n_sites) {
      const std::size_t c = cell(rng);
      if (std::find(site_cells.begin(), site_cells.end(), c) != site_cells.end()) continue;
      site_cells.push_back(c);
      site_class.push_back(static_cast<int>(site_cells.size() == 1 ? i % n_classes : klass(rng)));
    }

    LabelMap labels(size, size);
    Image image({size, size, 3});
    for (std::size_t by = 0; by < grid; ++by) {
      for (std::size_t bx = 0; bx < grid; ++bx) {
        std::size_t best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t s = 0; s < n_sites; ++s) {
          const double dy = static_cast<double>(by) - static_cast<double>(site_cells[s] / grid);
          const double dx = static_cast<double>(bx) - static_cast<double>(site_cells[s] % grid);
          if (dy * dy + dx * dx < best_d) {
            best_d = dy * dy + dx * dx;
            best = s;
          }
        }
        for (std::size_t y = by * kToyBlock; y < (by + 1) * kToyBlock; ++y)
          for (std::size_t x = bx * kToyBlock; x < (bx + 1) * kToyBlock; ++x) labels.at(y, x) = site_class[best];
      }
    }
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        const auto c = static_cast<std::size_t>(labels.at(y, x));
        const double angle = std::numbers::pi * static_cast<double>(c) / static_cast<double>(n_classes);
        const double period = 4.0 + 2.0 * static_cast<double>(c % 3);
        const double phase = (static_cast<double>(x) * std::cos(angle) + static_cast<double>(y) * std::sin(angle)) *
                             2.0 * std::numbers::pi / period;
        const double stripe = 0.08 * std::sin(phase);
        const double rgb[3] = {kToyClasses[c].r, kToyClasses[c].g, kToyClasses[c].b};
        for (std::size_t ch = 0; ch < 3; ++ch) {
          const double v = rgb[ch] + stripe + noise(rng);
          image[(y * size + x) * 3 + ch] = to_byte(v) / 255.0;
        }
      }
    }
    char stem[32];
    std::snprintf(stem, sizeof stem, "%04zu", i);
    DatasetEntry e{std::string("images/") + stem + ".ppm", std::string("labels/") + stem + ".pgm"};
    write_ppm(out_dir / e.image, image);
    write_pgm(out_dir / e.label, labels);
    m.entries.push_back(std::move(e));
  }

  nlohmann::json j;
  j["format"] = kManifestFormat;
  j["image_size"] = size;
  j["seed"] = opts.seed;
  j["seen_ids"] = m.split.seen_ids;
  j["unseen_ids"] = m.split.unseen_ids;
  for (std::size_t c = 0; c < n_classes; ++c)
    j["classes"].push_back({{"id", c}, {"name", m.split.names[c]}, {"prompt", m.split.prompts[c]}});
  for (const auto& e : m.entries) j["images"].push_back({{"image", e.image}, {"label", e.label}});
  std::ofstream out(out_dir / "dataset.json");
  out << j.dump(2) << "\n";
  if (!out) throw std::runtime_error("cannot write " + (out_dir / "dataset.json").string());
  return m;
}

DatasetManifest load_manifest(const std::filesystem::path& root) {
  const auto file = root / "dataset.json";
  std::ifstream in(file);
  if (!in) throw FormatError("cannot open " + file.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(file.string() + ": " + e.what());
  }
  try {
    if (j.at("format").get<std::string>() != kManifestFormat)
      throw FormatError(file.string() + ": unsupported format " + j.at("format").dump());
    DatasetManifest m;
    m.root = root;
    m.image_size = j.at("image_size").get<std::size_t>();
    std::vector<std::string> names;
    std::vector<std::string> prompts;
    const auto& classes = j.at("classes");
    for (std::size_t c = 0; c < classes.size(); ++c) {
      if (classes[c].at("id").get<std::size_t>() != c)
        throw FormatError(file.string() + ": class ids must be 0..N-1 in order");
      names.push_back(classes[c].at("name").get<std::string>());
      prompts.push_back(classes[c].value("prompt", "a photo of a " + names.back() + "."));
    }
    m.split = make_split(names, j.at("seen_ids").get<std::vector<int>>(),
                         j.at("unseen_ids").get<std::vector<int>>());
    m.split.prompts = prompts;
    for (const auto& e : j.at("images"))
      m.entries.push_back({e.at("image").get<std::string>(), e.at("label").get<std::string>()});
    if (m.entries.empty()) throw FormatError(file.string() + ": no images");
    for (const auto& e : m.entries) {
      for (const auto& rel : {e.image, e.label})
        if (!std::filesystem::exists(root / rel)) throw FormatError("dataset file missing: " + (root / rel).string());
      const LabelMap l = read_pgm(root / e.label);
      for (int v : l.labels)
        if (v != kIgnoreLabel && static_cast<std::size_t>(v) >= names.size())
          throw FormatError(e.label + ": label " + std::to_string(v) + " outside [0, " +
                            std::to_string(names.size()) + ")");
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(file.string() + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw FormatError(file.string() + ": " + e.what());
  }
}

Sample load_sample(const DatasetManifest& manifest, std::size_t index) {
  if (index >= manifest.size()) throw std::out_of_range("dataset index " + std::to_string(index));
  Sample s{read_ppm(manifest.root / manifest.entries[index].image),
           read_pgm(manifest.root / manifest.entries[index].label)};
  if (s.image.size(0) != s.gt.height || s.image.size(1) != s.gt.width)
    throw FormatError(manifest.entries[index].image + ": image and label sizes differ");
  return s;
}

LabelMap training_labels(const LabelMap& gt, const ZSSplit& split) {
  LabelMap out(gt.height, gt.width);
  for (std::size_t i = 0; i < gt.labels.size(); ++i) {
    const int idx = gt.labels[i] == kIgnoreLabel ? -1 : split.seen_index(gt.labels[i]);
    out.labels[i] = idx < 0 ? kIgnoreLabel : idx;
  }
  return out;
}

}  // namespace chimera
