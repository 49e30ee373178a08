// SPDX-License-Identifier: Apache-2.0
#include "chimera/clip_adapter.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <random>
#include <stdexcept>

#include "chimera/errors.hpp"

namespace chimera {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Tensor gaussian(std::mt19937_64& rng, Shape shape, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor t(std::move(shape));
  for (double& v : t.storage()) v = dist(rng);
  return t;
}

/// rows x cols matrix with orthonormal columns (rows >= cols) or rows.
Tensor orthogonal(std::mt19937_64& rng, std::size_t rows, std::size_t cols) {
  const std::size_t big = std::max(rows, cols), small = std::min(rows, cols);
  Tensor g = gaussian(rng, {big, small}, 1.0);
  Eigen::Map<RowMat> a(g.data(), static_cast<Eigen::Index>(big), static_cast<Eigen::Index>(small));
  Eigen::HouseholderQR<RowMat> qr(a);
  RowMat q = qr.householderQ() * RowMat::Identity(static_cast<Eigen::Index>(big),
                                                  static_cast<Eigen::Index>(small));
  const RowMat r = qr.matrixQR().topRows(static_cast<Eigen::Index>(small));
  for (Eigen::Index j = 0; j < q.cols(); ++j) {
    if (r(j, j) < 0) q.col(j) *= -1.0;
  }
  Tensor out({rows, cols});
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j)
      out.at(i, j) = rows >= cols ? q(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))
                                  : q(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i));
  return out;
}

EncoderBlockWeights make_block(std::mt19937_64& rng, std::size_t d) {
  EncoderBlockWeights b;
  b.ln1_scale = Tensor::full({d}, 1.0);
  b.ln1_bias = Tensor::zeros({d});
  b.q_weight = orthogonal(rng, d, d);
  b.k_weight = orthogonal(rng, d, d);
  b.v_weight = orthogonal(rng, d, d);
  b.out_weight = orthogonal(rng, d, d);
  b.q_bias = b.k_bias = b.v_bias = b.out_bias = Tensor::zeros({d});
  b.ln2_scale = Tensor::full({d}, 1.0);
  b.ln2_bias = Tensor::zeros({d});
  b.ffn_w1 = orthogonal(rng, d, 4 * d);
  b.ffn_b1 = Tensor::zeros({4 * d});
  b.ffn_w2 = orthogonal(rng, 4 * d, d);
  b.ffn_b2 = Tensor::zeros({d});
  return b;
}

/// The value path of a block is V followed by the attention output
/// projection; with attention removed both fold into one affine map.
VEncoderWeights vencoder_from_block(const EncoderBlockWeights& b) {
  const std::size_t d = b.v_weight.rows();
  VEncoderWeights v;
  v.ln1_scale = b.ln1_scale;
  v.ln1_bias = b.ln1_bias;
  v.value_weight = Tensor({d, d});
  v.value_bias = Tensor({d});
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) s += b.v_weight.at(i, k) * b.out_weight.at(k, j);
      v.value_weight.at(i, j) = s;
    }
  for (std::size_t j = 0; j < d; ++j) {
    double s = b.out_bias[j];
    for (std::size_t k = 0; k < d; ++k) s += b.v_bias[k] * b.out_weight.at(k, j);
    v.value_bias[j] = s;
  }
  v.ln2_scale = b.ln2_scale;
  v.ln2_bias = b.ln2_bias;
  v.ffn_w1 = b.ffn_w1;
  v.ffn_b1 = b.ffn_b1;
  v.ffn_w2 = b.ffn_w2;
  v.ffn_b2 = b.ffn_b2;
  return v;
}

template <typename F>
void for_each_vencoder_tensor(VEncoderWeights& v, F&& f) {
  f("ln1_scale", v.ln1_scale);
  f("ln1_bias", v.ln1_bias);
  f("value_weight", v.value_weight);
  f("value_bias", v.value_bias);
  f("ln2_scale", v.ln2_scale);
  f("ln2_bias", v.ln2_bias);
  f("ffn_w1", v.ffn_w1);
  f("ffn_b1", v.ffn_b1);
  f("ffn_w2", v.ffn_w2);
  f("ffn_b2", v.ffn_b2);
}

template <typename F>
void for_each_block_tensor(EncoderBlockWeights& b, F&& f) {
  f("ln1_scale", b.ln1_scale);
  f("ln1_bias", b.ln1_bias);
  f("q_weight", b.q_weight);
  f("q_bias", b.q_bias);
  f("k_weight", b.k_weight);
  f("k_bias", b.k_bias);
  f("v_weight", b.v_weight);
  f("v_bias", b.v_bias);
  f("out_weight", b.out_weight);
  f("out_bias", b.out_bias);
  f("ln2_scale", b.ln2_scale);
  f("ln2_bias", b.ln2_bias);
  f("ffn_w1", b.ffn_w1);
  f("ffn_b1", b.ffn_b1);
  f("ffn_w2", b.ffn_w2);
  f("ffn_b2", b.ffn_b2);
}

Shape vencoder_shape(const std::string& field, std::size_t d) {
  if (field == "value_weight") return {d, d};
  if (field == "ffn_w1") return {d, 4 * d};
  if (field == "ffn_b1") return {4 * d};
  if (field == "ffn_w2") return {4 * d, d};
  return {d};
}

Shape block_shape(const std::string& field, std::size_t d) {
  if (field == "q_weight" || field == "k_weight" || field == "v_weight" || field == "out_weight")
    return {d, d};
  if (field == "ffn_w1") return {d, 4 * d};
  if (field == "ffn_b1") return {4 * d};
  if (field == "ffn_w2") return {4 * d, d};
  return {d};
}

// Applies `f(name, tensor&, expected_shape)` to every bundle tensor.
template <typename Bundle, typename F>
void for_each_bundle_tensor(Bundle& b, F&& f) {
  const std::size_t d = b.d_vis;
  for (std::size_t i = 0; i < b.vencoders.size(); ++i) {
    for_each_vencoder_tensor(b.vencoders[i], [&](const char* field, Tensor& t) {
      f("vencoder." + std::to_string(i) + "." + field, t, vencoder_shape(field, d));
    });
  }
  f("visual_projection.weight", b.visual_projection, Shape{d, b.d_emb});
  f("visual_projection.bias", b.visual_projection_bias, Shape{b.d_emb});
  f("text_embeddings", b.text_embeddings, Shape{b.class_names.size(), b.d_emb});
  auto& enc = b.mini_encoder;
  const std::size_t pdim = enc.patch_size * enc.patch_size * 3;
  f("encoder.patch_embed.weight", enc.patch_weight, Shape{pdim, d});
  f("encoder.patch_embed.bias", enc.patch_bias, Shape{d});
  f("encoder.class_embedding", enc.class_embedding, Shape{d});
  for (std::size_t i = 0; i < enc.blocks.size(); ++i) {
    for_each_block_tensor(enc.blocks[i], [&](const char* field, Tensor& t) {
      f("encoder.blocks." + std::to_string(i) + "." + field, t, block_shape(field, d));
    });
  }
  f("encoder.ln_post.scale", enc.ln_post_scale, Shape{d});
  f("encoder.ln_post.bias", enc.ln_post_bias, Shape{d});
}

void check_text_embeddings(const Tensor& a) {
  for (std::size_t r = 0; r < a.rows(); ++r) {
    double n2 = 0.0;
    for (double v : a.row(r)) n2 += v * v;
    if (std::abs(std::sqrt(n2) - 1.0) > 1e-6) {
      throw FormatError("tensor 'text_embeddings': row " + std::to_string(r) +
                        " is not unit-norm (norm " + std::to_string(std::sqrt(n2)) + ")");
    }
  }
}

}  // namespace

TensorArchive to_archive(const ClipWeightBundle& bundle) {
  TensorArchive archive;
  auto& meta = archive.metadata();
  meta["kind"] = "mini-clip";
  meta["d_vis"] = bundle.d_vis;
  meta["d_emb"] = bundle.d_emb;
  meta["patch_size"] = bundle.mini_encoder.patch_size;
  meta["n_heads"] = bundle.mini_encoder.n_heads;
  meta["n_blocks"] = bundle.mini_encoder.blocks.size();
  meta["n_vencoders"] = bundle.vencoders.size();
  meta["class_names"] = bundle.class_names;
  ClipWeightBundle b = bundle;
  for_each_bundle_tensor(b, [&](const std::string& name, Tensor& t, const Shape&) {
    archive.add(name, t, DType::kFloat32);
  });
  return archive;
}

ClipWeightBundle from_archive(const TensorArchive& archive) {
  const auto& meta = archive.metadata();
  ClipWeightBundle b;
  try {
    b.d_vis = meta.at("d_vis").get<std::size_t>();
    b.d_emb = meta.at("d_emb").get<std::size_t>();
    b.class_names = meta.at("class_names").get<std::vector<std::string>>();
    b.mini_encoder.patch_size = meta.at("patch_size").get<std::size_t>();
    b.mini_encoder.n_heads = meta.at("n_heads").get<std::size_t>();
    b.mini_encoder.blocks.resize(meta.at("n_blocks").get<std::size_t>());
    b.vencoders.resize(meta.at("n_vencoders").get<std::size_t>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("weight bundle metadata: ") + e.what());
  }
  if (b.mini_encoder.n_heads == 0 || b.d_vis % b.mini_encoder.n_heads != 0) {
    throw FormatError("weight bundle metadata: n_heads does not divide d_vis");
  }
  for_each_bundle_tensor(b, [&](const std::string& name, Tensor& t, const Shape& shape) {
    t = archive.get(name, shape);
  });
  check_text_embeddings(b.text_embeddings);
  return b;
}

void save_weight_bundle(const ClipWeightBundle& bundle, const std::filesystem::path& dir) {
  to_archive(bundle).save(dir);
}

ClipWeightBundle load_weight_bundle(const std::filesystem::path& dir) {
  return from_archive(TensorArchive::load(dir));
}

ClipWeightBundle make_mini_clip(std::uint64_t seed, std::size_t d_vis, std::size_t d_emb,
                                std::size_t patch_size,
                                const std::vector<std::string>& class_names) {
  if (d_vis < 4) throw std::invalid_argument("make_mini_clip: d_vis must be >= 4");
  if (d_emb < 2) throw std::invalid_argument("make_mini_clip: d_emb must be >= 2");
  if (patch_size < 1) throw std::invalid_argument("make_mini_clip: patch_size must be >= 1");
  if (class_names.empty()) throw std::invalid_argument("make_mini_clip: no class names");

  std::mt19937_64 rng(seed);
  ClipWeightBundle b;
  b.d_vis = d_vis;
  b.d_emb = d_emb;
  b.class_names = class_names;

  auto& enc = b.mini_encoder;
  enc.patch_size = patch_size;
  enc.n_heads = d_vis % 8 == 0 ? d_vis / 8 : 1;
  enc.patch_weight = orthogonal(rng, patch_size * patch_size * 3, d_vis);
  enc.patch_bias = Tensor::zeros({d_vis});
  enc.class_embedding = gaussian(rng, {d_vis}, 1.0 / std::sqrt(static_cast<double>(d_vis)));
  for (std::size_t i = 0; i < kMiniEncoderBlocks; ++i) enc.blocks.push_back(make_block(rng, d_vis));
  enc.ln_post_scale = Tensor::full({d_vis}, 1.0);
  enc.ln_post_bias = Tensor::zeros({d_vis});

  // Deeper VEncoders reuse earlier encoder blocks; beyond the encoder depth
  // an extra block is drawn from the same scheme.
  for (std::size_t i = 0; i < kMaxVEncoders; ++i) {
    if (i < enc.blocks.size()) {
      b.vencoders.push_back(vencoder_from_block(enc.blocks[enc.blocks.size() - 1 - i]));
    } else {
      b.vencoders.push_back(vencoder_from_block(make_block(rng, d_vis)));
    }
  }

  b.visual_projection = orthogonal(rng, d_vis, d_emb);
  b.visual_projection_bias = Tensor::zeros({d_emb});

  b.text_embeddings = gaussian(rng, {class_names.size(), d_emb}, 1.0);
  for (std::size_t r = 0; r < class_names.size(); ++r) {
    double n2 = 0.0;
    for (double v : b.text_embeddings.row(r)) n2 += v * v;
    const double inv = 1.0 / std::sqrt(n2);
    for (double& v : b.text_embeddings.row(r)) v *= inv;
  }

  for_each_bundle_tensor(b, [](const std::string&, Tensor& t, const Shape&) {
    t = round_to_float32(std::move(t));
  });
  return b;
}

ag::Var layer_norm(const ag::Var& x, const ag::Var& scale, const ag::Var& bias, double eps) {
  return ag::add_rowvec(ag::mul_rowvec(ag::normalize_rows(x, eps), scale), bias);
}

ag::Var feed_forward(const ag::Var& x, const ag::Var& w1, const ag::Var& b1, const ag::Var& w2,
                     const ag::Var& b2) {
  return ag::linear(ag::gelu(ag::linear(x, w1, b1)), w2, b2);
}

namespace {

ag::Var attention(ag::Tape& tape, const ag::Var& x, const EncoderBlockWeights& w,
                  std::size_t n_heads) {
  const std::size_t d = x.cols();
  const std::size_t hd = d / n_heads;
  auto c = [&](const Tensor& t) { return tape.constant(t); };
  const ag::Var q = ag::linear(x, c(w.q_weight), c(w.q_bias));
  const ag::Var k = ag::linear(x, c(w.k_weight), c(w.k_bias));
  const ag::Var v = ag::linear(x, c(w.v_weight), c(w.v_bias));
  std::vector<ag::Var> heads;
  for (std::size_t h = 0; h < n_heads; ++h) {
    const ag::Var qh = ag::slice_cols(q, h * hd, (h + 1) * hd);
    const ag::Var kh = ag::slice_cols(k, h * hd, (h + 1) * hd);
    const ag::Var vh = ag::slice_cols(v, h * hd, (h + 1) * hd);
    const ag::Var att =
        ag::softmax_rows(ag::scale(ag::matmul_nt(qh, kh), 1.0 / std::sqrt(static_cast<double>(hd))));
    heads.push_back(ag::matmul(att, vh));
  }
  return ag::linear(ag::concat_cols(heads), c(w.out_weight), c(w.out_bias));
}

}  // namespace

ClipEncoderTrace encode_image_trace(const Image& image, const ClipWeightBundle& bundle) {
  const auto& enc = bundle.mini_encoder;
  if (image.dim() != 3 || image.size(2) != 3) {
    throw std::invalid_argument("encode_image: expected an HxWx3 image, got " +
                                shape_to_string(image.shape()));
  }
  const std::size_t h = image.size(0), w = image.size(1), ps = enc.patch_size;
  if (h % ps != 0 || w % ps != 0) {
    throw std::invalid_argument("encode_image: image " + std::to_string(h) + "x" +
                                std::to_string(w) + " not divisible by patch size " +
                                std::to_string(ps));
  }
  const std::size_t gh = h / ps, gw = w / ps, pdim = ps * ps * 3;
  Tensor patches({gh * gw, pdim});
  for (std::size_t py = 0; py < gh; ++py)
    for (std::size_t px = 0; px < gw; ++px) {
      double* dst = patches.data() + (py * gw + px) * pdim;
      for (std::size_t y = 0; y < ps; ++y)
        for (std::size_t x = 0; x < ps; ++x)
          for (std::size_t ch = 0; ch < 3; ++ch)
            *dst++ = image[((py * ps + y) * w + (px * ps + x)) * 3 + ch];
    }

  ag::Tape tape;
  auto c = [&](const Tensor& t) { return tape.constant(t); };
  const ag::Var embedded = ag::linear(c(patches), c(enc.patch_weight), c(enc.patch_bias));
  const ag::Var cls = c(enc.class_embedding.reshaped({1, bundle.d_vis}));
  const ag::Var parts[] = {cls, embedded};
  ag::Var x = ag::concat_rows(parts);

  ClipEncoderTrace trace;
  trace.token_states.push_back(x.value());
  for (const auto& blk : enc.blocks) {
    x = ag::add(x, attention(tape, layer_norm(x, c(blk.ln1_scale), c(blk.ln1_bias), kLayerNormEps),
                             blk, enc.n_heads));
    x = ag::add(x, feed_forward(layer_norm(x, c(blk.ln2_scale), c(blk.ln2_bias), kLayerNormEps),
                                c(blk.ffn_w1), c(blk.ffn_b1), c(blk.ffn_w2), c(blk.ffn_b2)));
    trace.token_states.push_back(x.value());
  }
  const ag::Var post = layer_norm(x, c(enc.ln_post_scale), c(enc.ln_post_bias), kLayerNormEps);
  trace.post_ln = post.value();
  const ag::Var projected =
      ag::linear(post, c(bundle.visual_projection), c(bundle.visual_projection_bias));

  const Tensor& pv = projected.value();
  const std::size_t de = bundle.d_emb;
  trace.outputs.cls_token = Tensor({de}, std::vector<double>(pv.data(), pv.data() + de));
  trace.outputs.patch_tokens =
      Tensor({gh * gw, de}, std::vector<double>(pv.data() + de, pv.data() + pv.numel()));
  trace.outputs.grid_h = gh;
  trace.outputs.grid_w = gw;
  return trace;
}

ClipImageOutputs encode_image(const Image& image, const ClipWeightBundle& bundle) {
  return encode_image_trace(image, bundle).outputs;
}

Tensor embed_class_names(const std::vector<std::string>& names, const ClipWeightBundle& bundle) {
  Tensor out({names.size(), bundle.d_emb});
  for (std::size_t i = 0; i < names.size(); ++i) {
    std::size_t idx = bundle.class_names.size();
    for (std::size_t j = 0; j < bundle.class_names.size(); ++j)
      if (bundle.class_names[j] == names[i]) idx = j;
    if (idx == bundle.class_names.size()) {
      throw std::invalid_argument("unknown class name '" + names[i] + "'");
    }
    std::copy(bundle.text_embeddings.row(idx).begin(), bundle.text_embeddings.row(idx).end(),
              out.row(i).begin());
  }
  return out;
}

}  // namespace chimera
