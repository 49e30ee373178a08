// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "chimera/clip_adapter.hpp"
#include "chimera/pseudo_supervision.hpp"

namespace chimera {

struct DatasetEntry {
  std::string image;  // relative to the dataset root
  std::string label;
};

/// A flat directory with dataset.json, images/*.ppm and labels/*.pgm.
/// Labels hold global class IDs or kIgnoreLabel.
struct DatasetManifest {
  std::filesystem::path root;
  std::size_t image_size = 0;
  std::vector<DatasetEntry> entries;
  ZSSplit split;

  std::size_t size() const { return entries.size(); }
};

struct ToyDatasetOptions {
  std::uint64_t seed = 0;
  std::size_t n_images = 8;
  std::size_t image_size = 64;
  std::size_t n_seen = 4;
  std::size_t n_unseen = 2;
};

inline constexpr std::size_t kToyBlock = 8;
inline constexpr std::size_t kToyMaxClasses = 12;

/// Names of the first n toy classes.
std::vector<std::string> toy_class_names(std::size_t n);

/// Synthetic scenes: each image is a Voronoi partition of 8x8 pixel blocks,
/// every region drawn with its class colour, a class-specific stripe
/// texture and mild noise. Classes [0, n_seen) are seen.
DatasetManifest make_toy_dataset(const ToyDatasetOptions& opts, const std::filesystem::path& out_dir);

/// Reads dataset.json and checks that every file exists and every label
/// lies in [0, N) or equals kIgnoreLabel.
DatasetManifest load_manifest(const std::filesystem::path& root);

struct Sample {
  Image image;
  LabelMap gt;  // global class IDs
};

Sample load_sample(const DatasetManifest& manifest, std::size_t index);

/// Labels visible during training: seen classes become their index in
/// split.seen_ids, unseen and ignore pixels become kIgnoreLabel.
LabelMap training_labels(const LabelMap& gt, const ZSSplit& split);

}  // namespace chimera
