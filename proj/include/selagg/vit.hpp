#pragma once

// Inference-only ViT encoder and MAE decoder over DenseTensor.
//
// Weight matrices are stored input-major (in x out) so a layer is x W + b.
// Blocks are pre-norm: x += MSA(LN1(x)); x += MLP(LN2(x)).

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "selagg/parallel.hpp"
#include "selagg/rng.hpp"
#include "selagg/tensor.hpp"

namespace selagg {

struct ViTConfig {
  std::size_t image_h = 224;
  std::size_t image_w = 224;
  std::size_t channels = 3;
  std::size_t patch_size = 16;
  std::size_t embed_dim = 768;
  std::size_t depth = 12;
  std::size_t heads = 12;
  double mlp_ratio = 4.0;
  bool final_norm = true;
  bool has_cls = true;
  float ln_eps = 1e-6f;

  std::size_t grid_rows() const { return image_h / patch_size; }
  std::size_t grid_cols() const { return image_w / patch_size; }
  std::size_t num_patches() const { return grid_rows() * grid_cols(); }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
  std::size_t head_dim() const { return embed_dim / heads; }
  std::size_t mlp_hidden() const { return static_cast<std::size_t>(std::llround(mlp_ratio * embed_dim)); }
  std::size_t num_tokens() const { return num_patches() + (has_cls ? 1 : 0); }

  void validate() const {
    require(patch_size > 0 && image_h % patch_size == 0 && image_w % patch_size == 0, ErrorKind::Domain,
            "image size must be divisible by the patch size");
    require(embed_dim > 0 && heads > 0 && embed_dim % heads == 0, ErrorKind::Domain,
            "embed_dim must be a positive multiple of heads");
    require(channels > 0 && mlp_ratio > 0, ErrorKind::Domain, "channels and mlp_ratio must be positive");
  }

  bool operator==(const ViTConfig&) const = default;
};

/// One pre-norm transformer block. Absent q/k/v biases are stored empty and treated as zero.
struct BlockParams {
  DenseTensor norm1_w, norm1_b;
  DenseTensor q_w, q_b, k_w, k_b, v_w, v_b;
  DenseTensor proj_w, proj_b;
  DenseTensor norm2_w, norm2_b;
  DenseTensor fc1_w, fc1_b, fc2_w, fc2_b;
};

struct ViTParams {
  ViTConfig config;
  DenseTensor patch_w;    // patch_dim x D
  DenseTensor patch_b;    // D
  DenseTensor pos_embed;  // (N+1) x D, cls row first; N x D without cls
  DenseTensor cls_token;  // D, empty without cls
  std::vector<BlockParams> blocks;
  DenseTensor norm_w, norm_b;  // final LayerNorm, used when config.final_norm
};

struct TokenSequence {
  DenseTensor tokens;  // T x D
  bool has_cls = true;
  std::size_t block_index = 0;

  std::size_t size() const { return tokens.rows(); }
  std::size_t dim() const { return tokens.cols(); }
  std::size_t patch_offset() const { return has_cls ? 1 : 0; }
  std::size_t num_patches() const { return size() - patch_offset(); }
};

/// Per-block, per-head attention maps, laid out [L, h, T, T].
struct AttentionTensor {
  DenseTensor maps;
  bool has_cls = true;

  std::size_t blocks() const { return maps.dim(0); }
  std::size_t heads() const { return maps.dim(1); }
  std::size_t tokens() const { return maps.dim(2); }
  std::size_t patch_offset() const { return has_cls ? 1 : 0; }
  std::size_t num_patches() const { return tokens() - patch_offset(); }

  std::span<const float> row(std::size_t block, std::size_t head, std::size_t i) const {
    const std::size_t t = tokens();
    return maps.data().subspan(((block * heads() + head) * t + i) * t, t);
  }

  void validate() const {
    require(maps.rank() == 4 && maps.dim(2) == maps.dim(3), ErrorKind::Shape,
            "attention tensor must be [L,h,T,T], got " + dims_string(maps.dims()));
    require(tokens() > patch_offset(), ErrorKind::Shape, "attention tensor has no patch tokens");
    const std::size_t t = tokens();
    for (std::size_t r = 0; r * t < maps.size(); ++r) {
      double sum = 0.0;
      for (std::size_t j = 0; j < t; ++j) {
        const float v = maps[r * t + j];
        require(v >= 0.0f, ErrorKind::Data, "attention row " + std::to_string(r) + " has a negative entry");
        sum += v;
      }
      require(std::abs(sum - 1.0) <= 1e-3, ErrorKind::Data,
              "attention row " + std::to_string(r) + " sums to " + std::to_string(sum));
    }
  }
};

struct MaskSpec {
  std::vector<std::uint8_t> keep;  // 1 = visible, 0 = dropped
  double ratio = 0.0;

  std::size_t size() const { return keep.size(); }
  std::vector<std::size_t> kept_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < keep.size(); ++i)
      if (keep[i]) out.push_back(i);
    return out;
  }
  std::size_t kept_count() const { return kept_indices().size(); }
  std::size_t dropped_count() const { return keep.size() - kept_count(); }
};

struct MAEDecoderConfig {
  std::size_t embed_dim = 512;
  std::size_t depth = 8;
  std::size_t heads = 16;
  double mlp_ratio = 4.0;
  bool final_norm = true;

  std::size_t mlp_hidden() const { return static_cast<std::size_t>(std::llround(mlp_ratio * embed_dim)); }
  bool operator==(const MAEDecoderConfig&) const = default;
};

struct MAEDecoderParams {
  MAEDecoderConfig config;
  DenseTensor embed_w, embed_b;  // encoder D -> decoder D'
  DenseTensor mask_token;        // D'
  DenseTensor pos_embed;         // (N+1) x D'
  std::vector<BlockParams> blocks;
  DenseTensor norm_w, norm_b;
  DenseTensor pred_w, pred_b;  // D' -> patch_dim
};

// ---------------------------------------------------------------------------
// Patches

/// Splits an H x W x C image into row-major patches, each flattened in
/// (row, col, channel) order.
inline DenseTensor patchify(const DenseTensor& image, std::size_t patch) {
  require(image.rank() == 3, ErrorKind::Shape, "image must be H x W x C, got " + dims_string(image.dims()));
  const std::size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
  require(patch > 0 && h % patch == 0 && w % patch == 0, ErrorKind::Domain,
          "image " + dims_string(image.dims()) + " not divisible by patch size " + std::to_string(patch));
  const std::size_t gr = h / patch, gc = w / patch;
  DenseTensor out({gr * gc, patch * patch * c});
  for (std::size_t pr = 0; pr < gr; ++pr)
    for (std::size_t pc = 0; pc < gc; ++pc) {
      auto dst = out.row(pr * gc + pc);
      std::size_t k = 0;
      for (std::size_t y = 0; y < patch; ++y)
        for (std::size_t x = 0; x < patch; ++x)
          for (std::size_t ch = 0; ch < c; ++ch)
            dst[k++] = image[((pr * patch + y) * w + (pc * patch + x)) * c + ch];
    }
  return out;
}

inline DenseTensor unpatchify(const DenseTensor& patches, std::size_t h, std::size_t w, std::size_t c,
                              std::size_t patch) {
  require(patch > 0 && h % patch == 0 && w % patch == 0, ErrorKind::Domain, "image not divisible by patch");
  const std::size_t gr = h / patch, gc = w / patch;
  require(patches.rank() == 2 && patches.dim(0) == gr * gc && patches.dim(1) == patch * patch * c,
          ErrorKind::Shape, "patch matrix " + dims_string(patches.dims()) + " does not match image");
  DenseTensor image({h, w, c});
  for (std::size_t pr = 0; pr < gr; ++pr)
    for (std::size_t pc = 0; pc < gc; ++pc) {
      auto src = patches.row(pr * gc + pc);
      std::size_t k = 0;
      for (std::size_t y = 0; y < patch; ++y)
        for (std::size_t x = 0; x < patch; ++x)
          for (std::size_t ch = 0; ch < c; ++ch)
            image[((pr * patch + y) * w + (pc * patch + x)) * c + ch] = src[k++];
    }
  return image;
}

// ---------------------------------------------------------------------------
// Encoder

/// z0 = [x_cls + p_cls; e(x_p) + p].
inline TokenSequence embed(const DenseTensor& patches, const ViTParams& params) {
  const auto& cfg = params.config;
  require(patches.rank() == 2 && patches.dim(1) == params.patch_w.dim(0), ErrorKind::Shape,
          "patch dim " + dims_string(patches.dims()) + " does not match patch embedding " +
              dims_string(params.patch_w.dims()));
  const std::size_t n = patches.dim(0);
  const std::size_t off = cfg.has_cls ? 1 : 0;
  require(params.pos_embed.rows() == n + off, ErrorKind::Shape,
          "positional table has " + std::to_string(params.pos_embed.rows()) + " rows for " +
              std::to_string(n + off) + " tokens");
  DenseTensor projected = affine(patches, params.patch_w, params.patch_b);
  const std::size_t d = projected.cols();
  DenseTensor tokens({n + off, d});
  if (cfg.has_cls) {
    require(params.cls_token.size() == d, ErrorKind::Shape, "cls token length mismatch");
    for (std::size_t j = 0; j < d; ++j) tokens.at(0, j) = params.cls_token[j] + params.pos_embed.at(0, j);
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) tokens.at(i + off, j) = projected.at(i, j) + params.pos_embed.at(i + off, j);
  return TokenSequence{std::move(tokens), cfg.has_cls, 0};
}

struct HeadOutput {
  DenseTensor out;   // T x dh
  DenseTensor attn;  // T x T
};

/// a = softmax(q k^T / sqrt(dh)); o = a v.
inline HeadOutput attention_head(const DenseTensor& q, const DenseTensor& k, const DenseTensor& v) {
  require(q.rank() == 2 && q.dims() == k.dims() && q.dims() == v.dims(), ErrorKind::Shape,
          "q, k, v must share a T x dh shape");
  const std::size_t t = q.dim(0), dh = q.dim(1);
  require(t > 0, ErrorKind::Shape, "attention over an empty sequence");
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  DenseTensor attn({t, t});
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t j = 0; j < t; ++j) {
      float dot = 0.0f;
      for (std::size_t c = 0; c < dh; ++c) dot += q.at(i, c) * k.at(j, c);
      attn.at(i, j) = dot * scale;
    }
    softmax_inplace(attn.row(i));
  }
  return HeadOutput{matmul(attn, v), std::move(attn)};
}

namespace detail {

inline DenseTensor columns(const DenseTensor& m, std::size_t begin, std::size_t count) {
  DenseTensor out({m.rows(), count});
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < count; ++c) out.at(r, c) = m.at(r, begin + c);
  return out;
}

/// Multi-head self-attention; writes each head's map into attn_out when given.
inline DenseTensor msa(const DenseTensor& x, const BlockParams& b, std::size_t heads, float* attn_out) {
  const DenseTensor q = affine(x, b.q_w, b.q_b);
  const DenseTensor k = affine(x, b.k_w, b.k_b);
  const DenseTensor v = affine(x, b.v_w, b.v_b);
  const std::size_t t = x.rows(), d = q.cols(), dh = d / heads;
  DenseTensor concat({t, d});
  for (std::size_t h = 0; h < heads; ++h) {
    HeadOutput head = attention_head(columns(q, h * dh, dh), columns(k, h * dh, dh), columns(v, h * dh, dh));
    for (std::size_t r = 0; r < t; ++r)
      for (std::size_t c = 0; c < dh; ++c) concat.at(r, h * dh + c) = head.out.at(r, c);
    if (attn_out) std::copy(head.attn.values().begin(), head.attn.values().end(), attn_out + h * t * t);
  }
  return affine(concat, b.proj_w, b.proj_b);
}

inline void run_block(DenseTensor& x, const BlockParams& b, std::size_t heads, float eps, float* attn_out) {
  add_inplace(x, msa(layer_norm(x, b.norm1_w, b.norm1_b, eps), b, heads, attn_out));
  DenseTensor hidden = gelu(affine(layer_norm(x, b.norm2_w, b.norm2_b, eps), b.fc1_w, b.fc1_b));
  add_inplace(x, affine(hidden, b.fc2_w, b.fc2_b));
}

}  // namespace detail

struct ForwardResult {
  TokenSequence tokens;
  std::optional<AttentionTensor> attention;
};

/// Runs blocks [0, stop_block) (all blocks by default). The final LayerNorm is
/// applied only when the full depth is run, so intermediate-block features are
/// the raw residual stream.
inline ForwardResult vit_forward(const TokenSequence& z0, const ViTParams& params, bool capture_attention,
                                 std::optional<std::size_t> stop_block = std::nullopt) {
  const auto& cfg = params.config;
  const std::size_t depth = params.blocks.size();
  const std::size_t stop = stop_block.value_or(depth);
  require(stop <= depth, ErrorKind::Domain,
          "stop block " + std::to_string(stop) + " exceeds depth " + std::to_string(depth));
  require(z0.dim() == cfg.embed_dim, ErrorKind::Shape, "token dim does not match embed_dim");

  DenseTensor x = z0.tokens;
  const std::size_t t = x.rows();
  std::optional<AttentionTensor> attention;
  if (capture_attention) attention = AttentionTensor{DenseTensor({stop, cfg.heads, t, t}), z0.has_cls};
  for (std::size_t l = 0; l < stop; ++l) {
    float* slot = attention ? attention->maps.data().data() + l * cfg.heads * t * t : nullptr;
    detail::run_block(x, params.blocks[l], cfg.heads, cfg.ln_eps, slot);
  }
  if (cfg.final_norm && stop == depth) x = layer_norm(x, params.norm_w, params.norm_b, cfg.ln_eps);
  return ForwardResult{TokenSequence{std::move(x), z0.has_cls, stop}, std::move(attention)};
}

// ---------------------------------------------------------------------------
// Masking and the MAE decoder

/// Keeps exactly floor(N (1 - rho)) positions, sampled uniformly without replacement.
inline MaskSpec sample_mask(std::size_t n, double rho, RngStream& rng) {
  require(rho >= 0.0 && rho < 1.0, ErrorKind::Domain, "mask ratio must lie in [0, 1)");
  // floor(n (1 - rho)) kept; the epsilon absorbs rounding in 1 - rho (0.9 -> 0.0999...).
  const auto kept = static_cast<std::size_t>(std::floor(static_cast<double>(n) * (1.0 - rho) + 1e-9));
  const std::size_t dropped = n - std::min(kept, n);
  MaskSpec mask{std::vector<std::uint8_t>(n, 1), rho};
  auto order = rng.permutation(n);
  for (std::size_t i = 0; i < dropped; ++i) mask.keep[order[i]] = 0;
  return mask;
}

inline TokenSequence apply_mask(const TokenSequence& z0, const MaskSpec& mask) {
  require(z0.has_cls, ErrorKind::Data, "masking expects a cls token at row 0");
  require(mask.size() == z0.num_patches(), ErrorKind::Shape,
          "mask length " + std::to_string(mask.size()) + " != patch count " + std::to_string(z0.num_patches()));
  const auto kept = mask.kept_indices();
  DenseTensor out({kept.size() + 1, z0.dim()});
  std::copy(z0.tokens.row(0).begin(), z0.tokens.row(0).end(), out.row(0).begin());
  for (std::size_t i = 0; i < kept.size(); ++i) {
    auto src = z0.tokens.row(kept[i] + 1);
    std::copy(src.begin(), src.end(), out.row(i + 1).begin());
  }
  return TokenSequence{std::move(out), true, z0.block_index};
}

/// Projects encoded tokens to the decoder width and re-inserts the shared mask
/// token at every dropped position. Returns (N+1) x D' before positional embedding.
inline DenseTensor decoder_input(const TokenSequence& encoded, const MaskSpec& mask, const MAEDecoderParams& dec) {
  require(encoded.has_cls, ErrorKind::Data, "decoder expects a cls token at row 0");
  const auto kept = mask.kept_indices();
  require(encoded.num_patches() == kept.size(), ErrorKind::Shape,
          "encoded sequence has " + std::to_string(encoded.num_patches()) + " patch tokens but mask keeps " +
              std::to_string(kept.size()));
  const DenseTensor projected = affine(encoded.tokens, dec.embed_w, dec.embed_b);
  const std::size_t dd = projected.cols();
  require(dec.mask_token.size() == dd, ErrorKind::Shape, "mask token width mismatch");
  DenseTensor full({mask.size() + 1, dd});
  std::copy(projected.row(0).begin(), projected.row(0).end(), full.row(0).begin());
  std::size_t next = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    auto dst = full.row(i + 1);
    if (mask.keep[i]) {
      auto src = projected.row(1 + next++);
      std::copy(src.begin(), src.end(), dst.begin());
    } else {
      std::copy(dec.mask_token.values().begin(), dec.mask_token.values().end(), dst.begin());
    }
  }
  return full;
}

/// Predicts all N patches (cls discarded) from the encoder output over visible tokens.
inline DenseTensor mae_decode(const TokenSequence& encoded, const MaskSpec& mask, const MAEDecoderParams& dec,
                              float ln_eps = 1e-6f) {
  DenseTensor x = decoder_input(encoded, mask, dec);
  require(dec.pos_embed.dims() == x.dims(), ErrorKind::Shape, "decoder positional table shape mismatch");
  add_inplace(x, dec.pos_embed);
  for (const auto& block : dec.blocks) detail::run_block(x, block, dec.config.heads, ln_eps, nullptr);
  if (dec.config.final_norm) x = layer_norm(x, dec.norm_w, dec.norm_b, ln_eps);
  DenseTensor patches({mask.size(), x.cols()});
  std::copy(x.values().begin() + static_cast<std::ptrdiff_t>(x.cols()), x.values().end(), patches.values().begin());
  return affine(patches, dec.pred_w, dec.pred_b);
}

/// Mean squared error over the dropped patches only. With normalize_target,
/// each target patch is standardized by its own mean and variance first.
inline double mae_loss(const DenseTensor& pred, const DenseTensor& target, const MaskSpec& mask,
                       bool normalize_target = false) {
  require(pred.dims() == target.dims() && pred.rank() == 2, ErrorKind::Shape, "prediction/target shape mismatch");
  require(mask.size() == pred.rows(), ErrorKind::Shape, "mask length does not match patch count");
  require(mask.dropped_count() > 0, ErrorKind::Domain, "loss undefined without dropped patches");
  const std::size_t width = pred.cols();
  double total = 0.0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask.keep[i]) continue;
    auto p = pred.row(i);
    auto t = target.row(i);
    double mean = 0.0, var = 0.0;
    if (normalize_target) {
      for (float v : t) mean += v;
      mean /= static_cast<double>(width);
      for (float v : t) var += (v - mean) * (v - mean);
      var /= static_cast<double>(width);
    }
    double sq = 0.0;
    for (std::size_t c = 0; c < width; ++c) {
      double target_value = t[c];
      if (normalize_target) target_value = (target_value - mean) / std::sqrt(var + 1e-6);
      const double diff = static_cast<double>(p[c]) - target_value;
      sq += diff * diff;
    }
    total += sq / static_cast<double>(width);
  }
  return total / static_cast<double>(mask.dropped_count());
}

// ---------------------------------------------------------------------------
// Random initialisation (tests, synthetic models)

namespace detail {

inline BlockParams random_block(std::size_t d, std::size_t hidden, RngStream& rng, double stddev) {
  BlockParams b;
  b.norm1_w = DenseTensor({d}, 1.0f);
  b.norm1_b = DenseTensor({d});
  b.q_w = rand_normal({d, d}, rng, stddev);
  b.q_b = rand_normal({d}, rng, stddev);
  b.k_w = rand_normal({d, d}, rng, stddev);
  b.k_b = rand_normal({d}, rng, stddev);
  b.v_w = rand_normal({d, d}, rng, stddev);
  b.v_b = rand_normal({d}, rng, stddev);
  b.proj_w = rand_normal({d, d}, rng, stddev);
  b.proj_b = rand_normal({d}, rng, stddev);
  b.norm2_w = DenseTensor({d}, 1.0f);
  b.norm2_b = DenseTensor({d});
  b.fc1_w = rand_normal({d, hidden}, rng, stddev);
  b.fc1_b = rand_normal({hidden}, rng, stddev);
  b.fc2_w = rand_normal({hidden, d}, rng, stddev);
  b.fc2_b = rand_normal({d}, rng, stddev);
  return b;
}

}  // namespace detail

inline ViTParams random_vit(const ViTConfig& cfg, RngStream& rng, double stddev = 0.2) {
  cfg.validate();
  ViTParams p;
  p.config = cfg;
  const std::size_t d = cfg.embed_dim;
  p.patch_w = rand_normal({cfg.patch_dim(), d}, rng, stddev);
  p.patch_b = rand_normal({d}, rng, stddev);
  p.pos_embed = rand_normal({cfg.num_tokens(), d}, rng, stddev);
  if (cfg.has_cls) p.cls_token = rand_normal({d}, rng, stddev);
  for (std::size_t l = 0; l < cfg.depth; ++l) p.blocks.push_back(detail::random_block(d, cfg.mlp_hidden(), rng, stddev));
  if (cfg.final_norm) {
    p.norm_w = DenseTensor({d}, 1.0f);
    p.norm_b = DenseTensor({d});
  }
  return p;
}

inline MAEDecoderParams random_decoder(const ViTConfig& enc, const MAEDecoderConfig& cfg, RngStream& rng,
                                       double stddev = 0.2) {
  require(cfg.embed_dim > 0 && cfg.heads > 0 && cfg.embed_dim % cfg.heads == 0, ErrorKind::Domain,
          "decoder embed_dim must be a positive multiple of heads");
  MAEDecoderParams p;
  p.config = cfg;
  const std::size_t d = cfg.embed_dim;
  p.embed_w = rand_normal({enc.embed_dim, d}, rng, stddev);
  p.embed_b = rand_normal({d}, rng, stddev);
  p.mask_token = rand_normal({d}, rng, stddev);
  p.pos_embed = rand_normal({enc.num_patches() + 1, d}, rng, stddev);
  for (std::size_t l = 0; l < cfg.depth; ++l) p.blocks.push_back(detail::random_block(d, cfg.mlp_hidden(), rng, stddev));
  if (cfg.final_norm) {
    p.norm_w = DenseTensor({d}, 1.0f);
    p.norm_b = DenseTensor({d});
  }
  p.pred_w = rand_normal({d, enc.patch_dim()}, rng, stddev);
  p.pred_b = rand_normal({enc.patch_dim()}, rng, stddev);
  return p;
}

/// Shape check of every parameter against the config; empty q/k/v biases are allowed.
inline void validate_params(const ViTParams& p) {
  const auto& cfg = p.config;
  cfg.validate();
  const std::size_t d = cfg.embed_dim, hidden = cfg.mlp_hidden();
  auto expect = [](const DenseTensor& t, const Dims& dims, const std::string& name, bool optional = false) {
    if (optional && t.empty()) return;
    require(t.dims() == dims, ErrorKind::Shape,
            name + " has shape " + dims_string(t.dims()) + ", expected " + dims_string(dims));
  };
  expect(p.patch_w, {cfg.patch_dim(), d}, "patch_embed.weight");
  expect(p.patch_b, {d}, "patch_embed.bias", true);
  expect(p.pos_embed, {cfg.num_tokens(), d}, "pos_embed");
  if (cfg.has_cls) expect(p.cls_token, {d}, "cls_token");
  require(p.blocks.size() == cfg.depth, ErrorKind::Shape, "block count does not match depth");
  for (std::size_t l = 0; l < p.blocks.size(); ++l) {
    const auto& b = p.blocks[l];
    const std::string pre = "blocks." + std::to_string(l) + ".";
    expect(b.norm1_w, {d}, pre + "norm1.weight");
    expect(b.norm1_b, {d}, pre + "norm1.bias");
    expect(b.q_w, {d, d}, pre + "attn.q.weight");
    expect(b.k_w, {d, d}, pre + "attn.k.weight");
    expect(b.v_w, {d, d}, pre + "attn.v.weight");
    expect(b.q_b, {d}, pre + "attn.q.bias", true);
    expect(b.k_b, {d}, pre + "attn.k.bias", true);
    expect(b.v_b, {d}, pre + "attn.v.bias", true);
    expect(b.proj_w, {d, d}, pre + "attn.proj.weight");
    expect(b.proj_b, {d}, pre + "attn.proj.bias", true);
    expect(b.norm2_w, {d}, pre + "norm2.weight");
    expect(b.norm2_b, {d}, pre + "norm2.bias");
    expect(b.fc1_w, {d, hidden}, pre + "mlp.fc1.weight");
    expect(b.fc1_b, {hidden}, pre + "mlp.fc1.bias", true);
    expect(b.fc2_w, {hidden, d}, pre + "mlp.fc2.weight");
    expect(b.fc2_b, {d}, pre + "mlp.fc2.bias", true);
  }
  if (cfg.final_norm) {
    expect(p.norm_w, {d}, "norm.weight");
    expect(p.norm_b, {d}, "norm.bias");
  }
}

/// Encodes a batch of images independently; output i depends only on image i.
inline std::vector<ForwardResult> encode_images(const std::vector<DenseTensor>& images, const ViTParams& params,
                                                bool capture_attention, std::optional<std::size_t> stop_block,
                                                int threads) {
  std::vector<ForwardResult> out(images.size());
  parallel_for(images.size(), threads, [&](std::size_t i) {
    out[i] = vit_forward(embed(patchify(images[i], params.config.patch_size), params), params, capture_attention,
                         stop_block);
  });
  return out;
}

}  // namespace selagg
