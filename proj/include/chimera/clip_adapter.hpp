// SPDX-License-Identifier: Apache-2.0
#pragma once

// Frozen vision-language weights: a miniature ViT-style visual encoder that
// yields CLS and patch tokens, the value/FFN sub-blocks reused by the
// semantic head, the frozen visual projection and the class text embeddings.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "chimera/autograd.hpp"
#include "chimera/tensor.hpp"
#include "chimera/tensor_archive.hpp"

namespace chimera {

/// Value projection + FFN branches of one transformer block (query/key
/// attention discarded).
struct VEncoderWeights {
  Tensor ln1_scale, ln1_bias;      // [d_vis]
  Tensor value_weight;             // [d_vis, d_vis]
  Tensor value_bias;               // [d_vis]
  Tensor ln2_scale, ln2_bias;      // [d_vis]
  Tensor ffn_w1, ffn_b1;           // [d_vis, 4 d_vis], [4 d_vis]
  Tensor ffn_w2, ffn_b2;           // [4 d_vis, d_vis], [d_vis]
};

struct EncoderBlockWeights {
  Tensor ln1_scale, ln1_bias;
  Tensor q_weight, q_bias, k_weight, k_bias, v_weight, v_bias;
  Tensor out_weight, out_bias;
  Tensor ln2_scale, ln2_bias;
  Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

struct MiniEncoderWeights {
  std::size_t patch_size = 8;
  std::size_t n_heads = 1;
  Tensor patch_weight;     // [patch_size^2 * 3, d_vis], pixel order (py, px, rgb)
  Tensor patch_bias;       // [d_vis]
  Tensor class_embedding;  // [d_vis]
  std::vector<EncoderBlockWeights> blocks;
  Tensor ln_post_scale, ln_post_bias;  // [d_vis]
};

struct ClipWeightBundle {
  std::size_t d_vis = 0;
  std::size_t d_emb = 0;
  /// vencoders[0] comes from the final encoder block, [1] from the one
  /// before it, and so on.
  std::vector<VEncoderWeights> vencoders;
  Tensor visual_projection;       // [d_vis, d_emb]
  Tensor visual_projection_bias;  // [d_emb]
  Tensor text_embeddings;         // [N, d_emb], unit rows
  std::vector<std::string> class_names;
  MiniEncoderWeights mini_encoder;

  std::size_t num_classes() const { return class_names.size(); }
};

struct ClipImageOutputs {
  Tensor cls_token;     // [d_emb]
  Tensor patch_tokens;  // [P, d_emb]
  std::size_t grid_h = 0, grid_w = 0;
};

/// Image as [H, W, 3] with values in [0, 1].
using Image = Tensor;

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr std::size_t kMaxVEncoders = 3;
inline constexpr std::size_t kMiniEncoderBlocks = 2;

TensorArchive to_archive(const ClipWeightBundle& bundle);
ClipWeightBundle from_archive(const TensorArchive& archive);

void save_weight_bundle(const ClipWeightBundle& bundle, const std::filesystem::path& dir);
ClipWeightBundle load_weight_bundle(const std::filesystem::path& dir);

/// Deterministic synthetic bundle. Projections are orthogonal, biases zero,
/// layer-norm scales one; text embeddings are normalized Gaussian rows. All
/// values are rounded to float32 so the bundle survives a save/load exactly.
ClipWeightBundle make_mini_clip(std::uint64_t seed, std::size_t d_vis, std::size_t d_emb,
                                std::size_t patch_size,
                                const std::vector<std::string>& class_names);

/// Intermediate token states of the visual encoder (used by CKA probes).
struct ClipEncoderTrace {
  std::vector<Tensor> token_states;  // [1+P, d_vis] after embedding, after each block
  Tensor post_ln;                    // [1+P, d_vis]
  ClipImageOutputs outputs;
};

ClipEncoderTrace encode_image_trace(const Image& image, const ClipWeightBundle& bundle);
ClipImageOutputs encode_image(const Image& image, const ClipWeightBundle& bundle);

/// Rows of the bundle's text embeddings in the requested order.
Tensor embed_class_names(const std::vector<std::string>& names, const ClipWeightBundle& bundle);

// Shared layer helpers over the tape.
ag::Var layer_norm(const ag::Var& x, const ag::Var& scale, const ag::Var& bias, double eps);
ag::Var feed_forward(const ag::Var& x, const ag::Var& w1, const ag::Var& b1,
                     const ag::Var& w2, const ag::Var& b2);

}  // namespace chimera
