#pragma once

// Global-representation constructors over final-block tokens: cls readout,
// patch averaging, AbMILP selective aggregation and the non-trainable
// attention-derived selectors.

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "selagg/metrics.hpp"
#include "selagg/rng.hpp"
#include "selagg/tensor.hpp"
#include "selagg/vit.hpp"

namespace selagg {

enum class Activation { None, Relu, Gelu, Tanh };

inline std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::None: return "none";
    case Activation::Relu: return "relu";
    case Activation::Gelu: return "gelu";
    case Activation::Tanh: return "tanh";
  }
  return "";
}

inline Activation parse_activation(std::string_view s) {
  if (s == "none") return Activation::None;
  if (s == "relu") return Activation::Relu;
  if (s == "gelu") return Activation::Gelu;
  if (s == "tanh") return Activation::Tanh;
  fail(ErrorKind::Domain, "unknown activation '" + std::string(s) + "'");
}

template <typename T>
T activate(Activation a, T x) {
  switch (a) {
    case Activation::None: return x;
    case Activation::Relu: return x > T{0} ? x : T{0};
    case Activation::Gelu: return gelu(x);
    case Activation::Tanh: return std::tanh(x);
  }
  return x;
}

template <typename T>
T activate_grad(Activation a, T x) {
  switch (a) {
    case Activation::None: return T{1};
    case Activation::Relu: return x > T{0} ? T{1} : T{0};
    case Activation::Gelu: return gelu_grad(x);
    case Activation::Tanh: {
      const T th = std::tanh(x);
      return T{1} - th * th;
    }
  }
  return T{1};
}

enum class AggregatorMode {
  Cls,
  AvgPatches,
  AbmilpPatches,
  AbmilpWithCls,
  ExternalMap,
  AttnAvgCls,
  AttnLowestEntropy,
  AttnCentralPatch,
};

inline constexpr AggregatorMode kAllModes[] = {
    AggregatorMode::Cls,           AggregatorMode::AvgPatches, AggregatorMode::AbmilpPatches,
    AggregatorMode::AbmilpWithCls, AggregatorMode::ExternalMap, AggregatorMode::AttnAvgCls,
    AggregatorMode::AttnLowestEntropy, AggregatorMode::AttnCentralPatch};

inline std::string_view to_string(AggregatorMode m) {
  switch (m) {
    case AggregatorMode::Cls: return "cls";
    case AggregatorMode::AvgPatches: return "avg_patches";
    case AggregatorMode::AbmilpPatches: return "abmilp_patches";
    case AggregatorMode::AbmilpWithCls: return "abmilp_with_cls";
    case AggregatorMode::ExternalMap: return "external_map";
    case AggregatorMode::AttnAvgCls: return "attn_avg_cls";
    case AggregatorMode::AttnLowestEntropy: return "attn_lowest_entropy";
    case AggregatorMode::AttnCentralPatch: return "attn_central_patch";
  }
  return "";
}

inline AggregatorMode parse_mode(std::string_view s) {
  for (AggregatorMode m : kAllModes)
    if (to_string(m) == s) return m;
  fail(ErrorKind::Domain, "unknown aggregator mode '" + std::string(s) + "'");
}

inline bool is_abmilp(AggregatorMode m) {
  return m == AggregatorMode::AbmilpPatches || m == AggregatorMode::AbmilpWithCls;
}

/// Modes whose weights come from outside the probe (attention maps or external files).
inline bool uses_fixed_selector(AggregatorMode m) {
  return m == AggregatorMode::ExternalMap || m == AggregatorMode::AttnAvgCls ||
         m == AggregatorMode::AttnLowestEntropy || m == AggregatorMode::AttnCentralPatch;
}

inline bool requires_cls(AggregatorMode m) {
  return m == AggregatorMode::Cls || m == AggregatorMode::AbmilpWithCls || m == AggregatorMode::AttnAvgCls ||
         m == AggregatorMode::AttnLowestEntropy;
}

// ---------------------------------------------------------------------------
// Score model t: R^D -> R

template <typename T>
struct Linear {
  Tensor<T> w;  // in x out
  Tensor<T> b;  // out
};

template <typename T>
struct ScoreModel {
  std::vector<Linear<T>> layers;
  Activation activation = Activation::None;

  std::size_t depth() const { return layers.size(); }
  std::size_t input_dim() const { return layers.empty() ? 0 : layers.front().w.dim(0); }

  void validate() const {
    require(depth() >= 1 && depth() <= 4, ErrorKind::Domain, "score model depth must be 1..4");
    require((depth() == 1) == (activation == Activation::None), ErrorKind::Domain,
            depth() == 1 ? "a depth-1 score model is affine and takes no activation"
                         : "a deeper score model needs an activation");
    for (std::size_t l = 0; l < depth(); ++l) {
      const auto& layer = layers[l];
      require(layer.w.rank() == 2 && layer.b.size() == layer.w.dim(1), ErrorKind::Shape, "score layer shape");
      if (l > 0) require(layer.w.dim(0) == layers[l - 1].w.dim(1), ErrorKind::Shape, "score layers do not chain");
    }
    require(layers.back().w.dim(1) == 1, ErrorKind::Shape, "score model must output a scalar");
  }

  template <typename U>
  ScoreModel<U> cast() const {
    ScoreModel<U> out;
    out.activation = activation;
    for (const auto& l : layers) out.layers.push_back({l.w.template cast<U>(), l.b.template cast<U>()});
    return out;
  }
};

/// Layer widths D -> H -> ... -> H -> 1. Weights ~ N(0, 1/fan_in), biases zero.
template <typename T>
ScoreModel<T> make_score_model(std::size_t input_dim, std::size_t depth, std::size_t hidden, Activation activation,
                               RngStream& rng) {
  require(depth >= 1 && depth <= 4, ErrorKind::Domain, "score model depth must be 1..4");
  require(depth == 1 || hidden > 0, ErrorKind::Domain, "hidden width must be positive");
  ScoreModel<T> m;
  m.activation = activation;
  std::size_t in = input_dim;
  for (std::size_t l = 0; l < depth; ++l) {
    const std::size_t out = l + 1 == depth ? 1 : hidden;
    m.layers.push_back({rand_normal<T>({in, out}, rng, 1.0 / std::sqrt(static_cast<double>(in))), Tensor<T>({out})});
    in = out;
  }
  m.validate();
  return m;
}

/// Per-token scalar scores: affine chain with the activation between layers.
template <typename T>
std::vector<T> score_model_forward(const Tensor<T>& tokens, const ScoreModel<T>& t) {
  t.validate();
  require(tokens.cols() == t.input_dim(), ErrorKind::Shape, "token dim does not match score model input");
  Tensor<T> x = tokens;
  for (std::size_t l = 0; l < t.depth(); ++l) {
    x = affine(x, t.layers[l].w, t.layers[l].b);
    if (l + 1 < t.depth())
      for (T& v : x.values()) v = activate(t.activation, v);
  }
  return x.values();
}

// ---------------------------------------------------------------------------
// Readouts and weighted aggregation

namespace detail {

inline DenseTensor token_rows(const TokenSequence& tokens, std::size_t begin) {
  DenseTensor out({tokens.size() - begin, tokens.dim()});
  std::copy(tokens.tokens.values().begin() + static_cast<std::ptrdiff_t>(begin * tokens.dim()),
            tokens.tokens.values().end(), out.values().begin());
  return out;
}

}  // namespace detail

/// Softmax of t-scores over patches, or over cls + patches with include_cls.
inline SelectionVector abmilp_scores(const TokenSequence& tokens, const ScoreModel<float>& t, bool include_cls) {
  require(!include_cls || tokens.has_cls, ErrorKind::Data, "cls-inclusive aggregation on cls-less tokens");
  const std::size_t begin = include_cls ? 0 : tokens.patch_offset();
  require(tokens.size() > begin, ErrorKind::Shape, "no tokens to aggregate");
  const auto scores = score_model_forward(detail::token_rows(tokens, begin), t);
  std::vector<double> w(scores.begin(), scores.end());
  softmax_inplace(std::span<double>(w));
  return SelectionVector{std::move(w), include_cls ? "abmilp_with_cls" : "abmilp_patches"};
}

/// sum_i s_i z_i. A length-T vector weights every row; a length-N vector
/// weights the patch rows only.
inline DenseTensor aggregate(const TokenSequence& tokens, const SelectionVector& s) {
  std::size_t begin;
  if (s.size() == tokens.size())
    begin = 0;
  else if (s.size() == tokens.num_patches())
    begin = tokens.patch_offset();
  else
    fail(ErrorKind::Shape, "selection length " + std::to_string(s.size()) + " matches neither " +
                               std::to_string(tokens.size()) + " tokens nor " + std::to_string(tokens.num_patches()) +
                               " patches");
  const std::size_t d = tokens.dim();
  std::vector<double> acc(d, 0.0);
  for (std::size_t i = 0; i < s.size(); ++i) {
    auto row = tokens.tokens.row(begin + i);
    for (std::size_t c = 0; c < d; ++c) acc[c] += s.weights[i] * static_cast<double>(row[c]);
  }
  DenseTensor out({d});
  for (std::size_t c = 0; c < d; ++c) out[c] = static_cast<float>(acc[c]);
  return out;
}

inline DenseTensor cls_readout(const TokenSequence& tokens) {
  require(tokens.has_cls, ErrorKind::Data, "cls readout on features without a cls token");
  auto row = tokens.tokens.row(0);
  return DenseTensor({row.size()}, std::vector<float>(row.begin(), row.end()));
}

inline DenseTensor avg_pool(const TokenSequence& tokens) {
  require(tokens.num_patches() >= 1, ErrorKind::Shape, "average pooling over zero patches");
  const std::size_t d = tokens.dim(), n = tokens.num_patches(), off = tokens.patch_offset();
  std::vector<double> acc(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    auto row = tokens.tokens.row(off + i);
    for (std::size_t c = 0; c < d; ++c) acc[c] += static_cast<double>(row[c]);
  }
  DenseTensor out({d});
  for (std::size_t c = 0; c < d; ++c) out[c] = static_cast<float>(acc[c] / static_cast<double>(n));
  return out;
}

inline SelectionVector uniform_selection(std::size_t n, std::string source = "uniform") {
  require(n > 0, ErrorKind::Shape, "uniform selection over zero tokens");
  return SelectionVector{std::vector<double>(n, 1.0 / static_cast<double>(n)), std::move(source)};
}

// ---------------------------------------------------------------------------
// Non-trainable selectors over the final captured block

namespace detail {

inline void require_capture(const AttentionTensor& attn) {
  require(attn.maps.rank() == 4 && attn.blocks() > 0, ErrorKind::Data, "no captured attention");
  attn.validate();
}

/// Head-mean of one final-block row, restricted to patch columns.
inline std::vector<double> head_mean_patch_row(const AttentionTensor& attn, std::size_t row_index) {
  const std::size_t last = attn.blocks() - 1, off = attn.patch_offset(), n = attn.num_patches();
  std::vector<double> out(n, 0.0);
  for (std::size_t h = 0; h < attn.heads(); ++h) {
    auto row = attn.row(last, h, row_index);
    for (std::size_t j = 0; j < n; ++j) out[j] += static_cast<double>(row[off + j]);
  }
  for (double& v : out) v /= static_cast<double>(attn.heads());
  return out;
}

}  // namespace detail

inline SelectionVector selector_avg_cls_attention(const AttentionTensor& attn) {
  detail::require_capture(attn);
  require(attn.has_cls, ErrorKind::Data, "cls attention selector needs a cls token");
  return normalized_selection(detail::head_mean_patch_row(attn, 0), "attn_avg_cls");
}

/// The final-block head whose cls->patch row has the lowest entropy; ties go to the lowest head index.
inline SelectionVector selector_lowest_entropy_head(const AttentionTensor& attn) {
  detail::require_capture(attn);
  require(attn.has_cls, ErrorKind::Data, "cls attention selector needs a cls token");
  const std::size_t last = attn.blocks() - 1;
  std::size_t best = 0;
  double best_h = 0.0;
  for (std::size_t h = 0; h < attn.heads(); ++h) {
    const double e = row_entropy(attn.row(last, h, 0), 1, attn.tokens());
    if (h == 0 || e < best_h) {
      best = h;
      best_h = e;
    }
  }
  auto row = attn.row(last, best, 0);
  std::vector<double> w(row.begin() + 1, row.end());
  return normalized_selection(w, "attn_lowest_entropy");
}

/// Patch index of the grid centre, using the floor convention on even sides.
inline std::size_t central_patch_index(std::size_t rows, std::size_t cols) { return (rows / 2) * cols + cols / 2; }

inline SelectionVector selector_central_patch(const AttentionTensor& attn, std::size_t rows, std::size_t cols) {
  detail::require_capture(attn);
  require(rows * cols == attn.num_patches(), ErrorKind::Shape,
          "grid " + std::to_string(rows) + "x" + std::to_string(cols) + " does not cover " +
              std::to_string(attn.num_patches()) + " patches");
  const std::size_t centre = attn.patch_offset() + central_patch_index(rows, cols);
  return normalized_selection(detail::head_mean_patch_row(attn, centre), "attn_central_patch");
}

/// Renormalizes an externally produced, non-negative per-patch map.
inline SelectionVector selector_external(const DenseTensor& map, std::size_t expected_patches) {
  require(map.size() == expected_patches, ErrorKind::Shape,
          "external map has " + std::to_string(map.size()) + " entries, expected " + std::to_string(expected_patches));
  std::vector<double> values(map.values().begin(), map.values().end());
  for (double v : values) require(v >= 0.0, ErrorKind::Domain, "external map has negative entries");
  return normalized_selection(values, "external");
}

// ---------------------------------------------------------------------------
// Parameter accounting

struct ScoreModelShape {
  std::size_t depth = 1;
  std::size_t hidden = 0;
};

struct AggregatorSpec {
  AggregatorMode mode = AggregatorMode::Cls;
  std::optional<ScoreModelShape> score_model;

  void validate() const {
    require(score_model.has_value() == is_abmilp(mode), ErrorKind::Domain,
            "a score model is required exactly for the abmilp modes");
  }
};

inline std::size_t score_model_parameter_count(std::size_t d, const ScoreModelShape& shape) {
  require(shape.depth >= 1 && shape.depth <= 4, ErrorKind::Domain, "score model depth must be 1..4");
  if (shape.depth == 1) return d + 1;
  const std::size_t h = shape.hidden;
  return (d + 1) * h + (shape.depth - 2) * (h + 1) * h + (h + 1);
}

/// Trainable parameters of aggregator plus a D -> K linear classifier.
inline std::size_t parameter_count(const AggregatorSpec& spec, std::size_t d, std::size_t k) {
  spec.validate();
  require(d > 0 && k > 0, ErrorKind::Domain, "dims must be positive");
  std::size_t total = (d + 1) * k;
  if (spec.score_model) total += score_model_parameter_count(d, *spec.score_model);
  return total;
}

}  // namespace selagg
