#pragma once

// Seeded synthetic data: signal-token bags, attention tensors, and
// localization sets with known boxes.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "selagg/bundle.hpp"
#include "selagg/localization.hpp"
#include "selagg/probe.hpp"
#include "selagg/rng.hpp"
#include "selagg/vit.hpp"

namespace selagg::synth {

// ---------------------------------------------------------------------------
// Signal-token bags
//
// Every patch token is N(0, noise^2) noise. One patch per sample, at a
// uniformly random position, also carries marker_scale * m + prototype[label],
// where m is a shared unit "marker" direction and the prototypes are random
// vectors of norm signal_scale. Mean pooling dilutes the prototype N-fold;
// a score model can learn to find the marker.

struct BagsConfig {
  std::size_t n_train = 5000;
  std::size_t n_eval = 1000;
  std::size_t tokens = 32;  // patch tokens N
  std::size_t dim = 64;
  std::size_t classes = 10;
  double signal_scale = 4.0;
  double marker_scale = 4.0;
  double noise = 1.0;
  bool with_cls = true;
  std::uint64_t seed = 0;
};

struct Bags {
  FeatureDataset train, eval;
  std::vector<std::size_t> train_signal, eval_signal;  // patch index of the signal token
};

namespace detail {

inline std::vector<double> random_direction(std::size_t d, RngStream& rng, double norm) {
  std::vector<double> v(d);
  double sq = 0.0;
  for (double& x : v) {
    x = rng.normal();
    sq += x * x;
  }
  const double scale = norm / std::sqrt(sq);
  for (double& x : v) x *= scale;
  return v;
}

}  // namespace detail

inline Bags make_bags(const BagsConfig& cfg) {
  require(cfg.tokens > 0 && cfg.dim > 0 && cfg.classes > 0, ErrorKind::Domain, "bag sizes must be positive");
  RngStream global(cfg.seed, 0);
  const auto marker = detail::random_direction(cfg.dim, global, 1.0);
  std::vector<std::vector<double>> protos;
  for (std::size_t k = 0; k < cfg.classes; ++k) protos.push_back(detail::random_direction(cfg.dim, global, cfg.signal_scale));

  Bags bags;
  bags.train.num_classes = bags.eval.num_classes = cfg.classes;
  const std::size_t off = cfg.with_cls ? 1 : 0;
  for (std::size_t i = 0; i < cfg.n_train + cfg.n_eval; ++i) {
    RngStream rng(cfg.seed, 100 + i);
    FeatureSample s;
    const bool is_train = i < cfg.n_train;
    char id[32];
    std::snprintf(id, sizeof(id), "%s_%06zu", is_train ? "train" : "eval", is_train ? i : i - cfg.n_train);
    s.id = id;
    s.has_cls = cfg.with_cls;
    s.label = rng.uniform_index(cfg.classes);
    const std::size_t pos = rng.uniform_index(cfg.tokens);
    s.tokens = rand_normal<float>({cfg.tokens + off, cfg.dim}, rng, cfg.noise);
    auto row = s.tokens.row(off + pos);
    for (std::size_t j = 0; j < cfg.dim; ++j)
      row[j] += static_cast<float>(cfg.marker_scale * marker[j] + protos[s.label][j]);
    (is_train ? bags.train : bags.eval).samples.push_back(std::move(s));
    (is_train ? bags.train_signal : bags.eval_signal).push_back(pos);
  }
  return bags;
}

/// A features bundle holding both splits; items carry id, split, label and the
/// signal position.
inline TensorBundle bags_to_bundle(const Bags& bags, const BagsConfig& cfg) {
  TensorBundle b;
  b.kind = "features";
  b.config = Json{{"task", "bags"},        {"has_cls", cfg.with_cls}, {"num_classes", cfg.classes},
                  {"tokens", cfg.tokens},  {"dim", cfg.dim},          {"seed", cfg.seed},
                  {"signal_scale", cfg.signal_scale}, {"marker_scale", cfg.marker_scale}, {"noise", cfg.noise}};
  auto add = [&](const FeatureDataset& data, const std::vector<std::size_t>& signal, const char* split) {
    for (std::size_t i = 0; i < data.size(); ++i) {
      const auto& s = data.samples[i];
      const std::string name = "tokens/" + s.id;
      b.tensors[name] = s.tokens;
      b.items.push_back(Json{{"id", s.id}, {"split", split}, {"label", s.label}, {"tokens", name},
                             {"signal_index", signal[i]}});
    }
  };
  add(bags.train, bags.train_signal, "train");
  add(bags.eval, bags.eval_signal, "eval");
  return b;
}

// ---------------------------------------------------------------------------
// Attention tensors

enum class AttentionKind { Uniform, Identity, Random, Peaked };

inline AttentionKind parse_attention_kind(std::string_view s) {
  if (s == "uniform") return AttentionKind::Uniform;
  if (s == "identity") return AttentionKind::Identity;
  if (s == "random") return AttentionKind::Random;
  if (s == "peaked") return AttentionKind::Peaked;
  fail(ErrorKind::Domain, "unknown attention kind '" + std::string(s) + "'");
}

inline std::string_view to_string(AttentionKind k) {
  switch (k) {
    case AttentionKind::Uniform: return "uniform";
    case AttentionKind::Identity: return "identity";
    case AttentionKind::Random: return "random";
    case AttentionKind::Peaked: return "peaked";
  }
  return "?";
}

/// Row-stochastic [L,h,T,T] maps. Random rows are normalized uniforms; peaked
/// rows are a softmax of N(0, temperature^2) logits.
inline AttentionTensor make_attention(AttentionKind kind, std::size_t blocks, std::size_t heads, std::size_t patches,
                                      bool with_cls, RngStream& rng, double temperature = 3.0) {
  require(blocks > 0 && heads > 0 && patches > 0, ErrorKind::Domain, "attention sizes must be positive");
  const std::size_t t = patches + (with_cls ? 1 : 0);
  AttentionTensor a{DenseTensor({blocks, heads, t, t}), with_cls};
  std::vector<double> row(t);
  for (std::size_t r = 0; r < blocks * heads * t; ++r) {
    const std::size_t i = r % t;
    switch (kind) {
      case AttentionKind::Uniform: std::fill(row.begin(), row.end(), 1.0 / static_cast<double>(t)); break;
      case AttentionKind::Identity:
        std::fill(row.begin(), row.end(), 0.0);
        row[i] = 1.0;
        break;
      case AttentionKind::Random: {
        double sum = 0.0;
        for (double& v : row) sum += (v = rng.uniform());
        for (double& v : row) v /= sum;
        break;
      }
      case AttentionKind::Peaked: {
        for (double& v : row) v = temperature * rng.normal();
        softmax_inplace(std::span<double>(row));
        break;
      }
    }
    std::copy(row.begin(), row.end(), a.maps.values().begin() + static_cast<std::ptrdiff_t>(r * t));
  }
  return a;
}

// ---------------------------------------------------------------------------
// Localization sets
//
// Each image is a grid_rows x grid_cols patch grid with one rectangular object
// (in patch units). Its ground-truth box is the object rectangle in pixels.
// Final-block cls attention puts `contrast` times more mass on object patches
// than on background; object patch tokens carry a marker direction.

struct BoxesConfig {
  std::size_t n = 5;
  std::size_t grid_rows = 8;
  std::size_t grid_cols = 8;
  std::size_t patch_size = 4;
  std::size_t blocks = 2;
  std::size_t heads = 2;
  std::size_t dim = 16;
  double contrast = 8.0;
  double jitter = 0.1;
  std::uint64_t seed = 0;

  std::size_t image_h() const { return grid_rows * patch_size; }
  std::size_t image_w() const { return grid_cols * patch_size; }
};

struct BoxSample {
  std::string id;
  AttentionTensor attention;
  DenseTensor tokens;                 // (N+1) x D
  std::vector<BoundingBox> gt;        // pixels
  std::vector<std::uint8_t> object;   // per patch
};

inline std::vector<BoxSample> make_boxes(const BoxesConfig& cfg) {
  require(cfg.n > 0 && cfg.grid_rows > 0 && cfg.grid_cols > 0 && cfg.patch_size > 0, ErrorKind::Domain,
          "box set sizes must be positive");
  const std::size_t n = cfg.grid_rows * cfg.grid_cols, t = n + 1;
  RngStream global(cfg.seed, 0);
  const auto marker = detail::random_direction(cfg.dim, global, 3.0);
  std::vector<BoxSample> out;
  for (std::size_t img = 0; img < cfg.n; ++img) {
    RngStream rng(cfg.seed, 100 + img);
    BoxSample s;
    char id[32];
    std::snprintf(id, sizeof(id), "img_%05zu", img);
    s.id = id;
    const std::size_t h = 1 + rng.uniform_index(std::max<std::size_t>(1, cfg.grid_rows / 2));
    const std::size_t w = 1 + rng.uniform_index(std::max<std::size_t>(1, cfg.grid_cols / 2));
    const std::size_t r0 = rng.uniform_index(cfg.grid_rows - h + 1), c0 = rng.uniform_index(cfg.grid_cols - w + 1);
    s.object.assign(n, 0);
    for (std::size_t r = r0; r < r0 + h; ++r)
      for (std::size_t c = c0; c < c0 + w; ++c) s.object[r * cfg.grid_cols + c] = 1;
    const auto p = static_cast<std::int64_t>(cfg.patch_size);
    s.gt.push_back(BoundingBox{static_cast<std::int64_t>(c0) * p, static_cast<std::int64_t>(r0) * p,
                               static_cast<std::int64_t>(c0 + w) * p, static_cast<std::int64_t>(r0 + h) * p});

    s.attention = make_attention(AttentionKind::Random, cfg.blocks, cfg.heads, n, true, rng);
    const std::size_t last = cfg.blocks - 1;
    for (std::size_t head = 0; head < cfg.heads; ++head) {
      std::vector<double> row(t);
      double sum = 0.0;
      for (std::size_t j = 0; j < t; ++j) {
        const double base = (j > 0 && s.object[j - 1]) ? cfg.contrast : 1.0;
        row[j] = base * (1.0 + cfg.jitter * rng.uniform());
        sum += row[j];
      }
      float* dst = s.attention.maps.values().data() + ((last * cfg.heads + head) * t) * t;
      for (std::size_t j = 0; j < t; ++j) dst[j] = static_cast<float>(row[j] / sum);
    }

    s.tokens = rand_normal<float>({t, cfg.dim}, rng);
    for (std::size_t i = 0; i < n; ++i)
      if (s.object[i]) {
        auto row = s.tokens.row(i + 1);
        for (std::size_t j = 0; j < cfg.dim; ++j) row[j] += static_cast<float>(marker[j]);
      }
    out.push_back(std::move(s));
  }
  return out;
}

/// Features bundle with tokens and attention per item; labels mark whether
/// the object covers the central patch, so a probe can be trained on it.
inline TensorBundle boxes_to_bundle(const std::vector<BoxSample>& samples, const BoxesConfig& cfg) {
  TensorBundle b;
  b.kind = "features";
  b.config = Json{{"task", "boxes"},
                  {"has_cls", true},
                  {"num_classes", 2},
                  {"image_h", cfg.image_h()},
                  {"image_w", cfg.image_w()},
                  {"grid_rows", cfg.grid_rows},
                  {"grid_cols", cfg.grid_cols},
                  {"patch_size", cfg.patch_size},
                  {"seed", cfg.seed}};
  const std::size_t centre = central_patch_index(cfg.grid_rows, cfg.grid_cols);
  for (const auto& s : samples) {
    b.tensors["tokens/" + s.id] = s.tokens;
    b.tensors["attention/" + s.id] = s.attention.maps;
    b.items.push_back(Json{{"id", s.id},
                           {"split", "train"},
                           {"label", static_cast<int>(s.object[centre])},
                           {"tokens", "tokens/" + s.id},
                           {"attention", "attention/" + s.id}});
  }
  return b;
}

inline Json boxes_gt_json(const std::vector<BoxSample>& samples) {
  Json j = Json::object();
  for (const auto& s : samples) j[s.id] = boxes_to_json(s.gt);
  return j;
}

// ---------------------------------------------------------------------------
// Tiny random ViT with random images, for exercising feature extraction

struct ModelConfig {
  ViTConfig vit;
  std::size_t n_images = 4;
  std::size_t classes = 2;
  std::uint64_t seed = 0;

  ModelConfig() {
    vit.image_h = vit.image_w = 16;
    vit.channels = 3;
    vit.patch_size = 4;
    vit.embed_dim = 32;
    vit.depth = 4;
    vit.heads = 4;
    vit.mlp_ratio = 4.0;
  }
};

inline ViTParams make_model(const ModelConfig& cfg) {
  RngStream rng(cfg.seed, 0);
  return random_vit(cfg.vit, rng);
}

inline std::vector<DenseTensor> make_images(const ModelConfig& cfg) {
  std::vector<DenseTensor> out;
  for (std::size_t i = 0; i < cfg.n_images; ++i) {
    RngStream rng(cfg.seed, 100 + i);
    out.push_back(rand_uniform<float>({cfg.vit.image_h, cfg.vit.image_w, cfg.vit.channels}, rng));
  }
  return out;
}

}  // namespace selagg::synth
