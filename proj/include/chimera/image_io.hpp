// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "chimera/clip_adapter.hpp"
#include "chimera/pseudo_supervision.hpp"

namespace chimera {

/// Binary PPM (P6, maxval 255). Images are [H, W, 3] with values in [0, 1];
/// writing clamps and rounds to 8 bits.
void write_ppm(const std::filesystem::path& file, const Image& image);
Image read_ppm(const std::filesystem::path& file);

/// Binary PGM (P5, maxval 255) holding label values 0..255.
void write_pgm(const std::filesystem::path& file, const LabelMap& labels);
LabelMap read_pgm(const std::filesystem::path& file);

std::uint8_t to_byte(double v);

/// Perceptually uniform blue-green-yellow ramp; t is clamped to [0, 1].
std::array<std::uint8_t, 3> viridis(double t);

}  // namespace chimera
