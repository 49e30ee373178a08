// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "chimera/checkpoint.hpp"
#include "chimera/dataset.hpp"

namespace chimera {

/// Linear CKA between x [n, p] and y [n, q]: columns centred, then
/// |Y^T X|_F^2 / (|X^T X|_F |Y^T Y|_F); 0 when a denominator term is 0.
double cka(const Tensor& x, const Tensor& y);

struct CKAOptions {
  std::size_t positions_per_image = 64;
  std::size_t max_images = 8;
  std::uint64_t seed = 0;
};

struct CKAReport {
  std::vector<std::string> layers;
  Tensor matrix;  // [L, L]
};

/// Activations of the backbone stages, the semantic-head intermediates and
/// the mini-CLIP token states at the same sampled image positions, compared
/// pairwise. Needs at least two images.
CKAReport analyze_cka(const Checkpoint& ckpt, const ClipWeightBundle& bundle,
                      const DatasetManifest& data, const CKAOptions& opts = {});

std::string cka_csv(const CKAReport& report);
/// One `cell` x `cell` square per matrix entry, viridis coloured.
void write_cka_image(const CKAReport& report, const std::filesystem::path& file, std::size_t cell = 16);

enum class HeatSource { kCls, kText };
HeatSource parse_heat_source(const std::string& s);

struct Heatmap {
  Tensor scores;      // [H', W'] similarity scores
  Tensor normalized;  // min-max scaled to [0, 1]; 0.5 everywhere for a constant map
  std::size_t stride = 1;
};

/// Min-max normalization; a constant input maps to 0.5.
Tensor minmax_normalize(const Tensor& t);

/// Scores f_c against the image CLS token or the text embedding of
/// `class_name`. Throws std::invalid_argument for an unknown class.
Heatmap compute_heatmap(const Checkpoint& ckpt, const ClipWeightBundle& bundle, const Image& image,
                        const std::string& class_name, HeatSource source);

/// Raster upsampled by the feature stride, and "y,x,score,normalized" CSV
/// at feature resolution.
void write_heatmap(const Heatmap& heat, const std::filesystem::path& ppm,
                   const std::filesystem::path& csv);

}  // namespace chimera
