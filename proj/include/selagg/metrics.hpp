#pragma once

// Information-flow metrics over captured attention maps, plus KL divergence
// between token selection vectors.
//
// Per image, every metric is evaluated per (block, head). Head values are
// averaged per block, and blocks are averaged over images by a streaming
// accumulator that keeps 64-bit partial sums.

#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "selagg/parallel.hpp"
#include "selagg/tensor.hpp"
#include "selagg/vit.hpp"

namespace selagg {

/// A probability vector over tokens, tagged with the selector that produced it.
struct SelectionVector {
  std::vector<double> weights;
  std::string source;

  std::size_t size() const { return weights.size(); }
};

/// Renormalizes non-negative values to sum to one.
inline SelectionVector normalized_selection(std::span<const double> values, std::string source) {
  double total = 0.0;
  for (double v : values) {
    require(std::isfinite(v) && v >= 0.0, ErrorKind::Domain, "selection values must be finite and non-negative");
    total += v;
  }
  require(total > 0.0, ErrorKind::Numeric, "selection vector has zero mass");
  SelectionVector s{std::vector<double>(values.begin(), values.end()), std::move(source)};
  for (double& v : s.weights) v /= total;
  return s;
}

/// Shannon entropy (natural log) of row[begin, end) after renormalizing that range.
template <typename T>
double row_entropy(std::span<const T> row, std::size_t begin, std::size_t end) {
  require(begin <= end && end <= row.size(), ErrorKind::Shape, "entropy range out of bounds");
  double mass = 0.0;
  for (std::size_t j = begin; j < end; ++j) {
    require(row[j] >= T{0}, ErrorKind::Domain, "attention entries must be non-negative");
    mass += static_cast<double>(row[j]);
  }
  require(mass > 0.0, ErrorKind::Numeric, "zero attention mass on the patch range");
  double h = 0.0;
  for (std::size_t j = begin; j < end; ++j) {
    const double p = static_cast<double>(row[j]) / mass;
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

template <typename T>
double row_entropy(std::span<const T> row) {
  return row_entropy(row, 0, row.size());
}

enum class Metric : std::size_t {
  ClsSelfAttention = 0,
  ClsPatchEntropy = 1,
  PatchSelfAttentionRatio = 2,
  PatchPatchEntropy = 3,
};

inline constexpr std::array<Metric, 4> kAllMetrics = {Metric::ClsSelfAttention, Metric::ClsPatchEntropy,
                                                       Metric::PatchSelfAttentionRatio, Metric::PatchPatchEntropy};

inline constexpr std::string_view metric_name(Metric m) {
  switch (m) {
    case Metric::ClsSelfAttention: return "cls_self_attention";
    case Metric::ClsPatchEntropy: return "cls_patch_entropy";
    case Metric::PatchSelfAttentionRatio: return "patch_self_attention_ratio";
    case Metric::PatchPatchEntropy: return "patch_patch_entropy";
  }
  return "";
}

inline constexpr bool metric_needs_cls(Metric m) {
  return m == Metric::ClsSelfAttention || m == Metric::ClsPatchEntropy;
}

struct BlockMetricSeries {
  std::string metric_name;
  std::vector<double> values;  // per-block mean over heads and images
  Tensor64 per_head;           // L x h
  std::size_t n_images = 0;
};

/// Value of one metric for one (block, head) map.
inline double head_metric(const AttentionTensor& attn, Metric metric, std::size_t block, std::size_t head) {
  const std::size_t t = attn.tokens();
  const std::size_t off = attn.patch_offset();
  switch (metric) {
    case Metric::ClsSelfAttention:
      return static_cast<double>(attn.row(block, head, 0)[0]);
    case Metric::ClsPatchEntropy:
      return row_entropy(attn.row(block, head, 0), 1, t);
    case Metric::PatchSelfAttentionRatio: {
      double acc = 0.0;
      for (std::size_t i = off; i < t; ++i) {
        auto row = attn.row(block, head, i);
        double mass = 0.0;
        for (std::size_t j = off; j < t; ++j) mass += static_cast<double>(row[j]);
        require(mass > 0.0, ErrorKind::Numeric, "zero patch attention mass in row " + std::to_string(i));
        acc += static_cast<double>(row[i]) / mass;
      }
      return acc / static_cast<double>(t - off);
    }
    case Metric::PatchPatchEntropy: {
      double acc = 0.0;
      for (std::size_t i = off; i < t; ++i) acc += row_entropy(attn.row(block, head, i), off, t);
      return acc / static_cast<double>(t - off);
    }
  }
  return 0.0;
}

/// L x h values of one metric for a single image.
inline Tensor64 per_head_metric(const AttentionTensor& attn, Metric metric) {
  attn.validate();
  require(!metric_needs_cls(metric) || attn.has_cls, ErrorKind::Data,
          std::string(metric_name(metric)) + " requires a cls token");
  Tensor64 out({attn.blocks(), attn.heads()});
  for (std::size_t l = 0; l < attn.blocks(); ++l)
    for (std::size_t h = 0; h < attn.heads(); ++h) out.at(l, h) = head_metric(attn, metric, l, h);
  return out;
}

/// Streaming per-metric accumulator. merge() is associative; callers merge in
/// a fixed order to keep results independent of scheduling.
class MetricAccumulator {
 public:
  MetricAccumulator(Metric metric, std::size_t blocks, std::size_t heads)
      : metric_(metric), sums_({blocks, heads}) {}

  void add(const Tensor64& per_head) {
    require(per_head.dims() == sums_.dims(), ErrorKind::Shape, "per-head metric shape mismatch");
    for (std::size_t i = 0; i < sums_.size(); ++i) sums_[i] += per_head[i];
    ++count_;
  }

  void add(const AttentionTensor& attn) { add(per_head_metric(attn, metric_)); }

  void merge(const MetricAccumulator& other) {
    require(other.metric_ == metric_ && other.sums_.dims() == sums_.dims(), ErrorKind::Shape,
            "cannot merge accumulators of different metrics or shapes");
    for (std::size_t i = 0; i < sums_.size(); ++i) sums_[i] += other.sums_[i];
    count_ += other.count_;
  }

  std::size_t count() const { return count_; }

  BlockMetricSeries series() const {
    require(count_ > 0, ErrorKind::Data, "no images accumulated");
    const std::size_t blocks = sums_.dim(0), heads = sums_.dim(1);
    BlockMetricSeries s{std::string(metric_name(metric_)), std::vector<double>(blocks, 0.0), Tensor64({blocks, heads}),
                        count_};
    for (std::size_t l = 0; l < blocks; ++l) {
      double block_sum = 0.0;
      for (std::size_t h = 0; h < heads; ++h) {
        s.per_head.at(l, h) = sums_.at(l, h) / static_cast<double>(count_);
        block_sum += s.per_head.at(l, h);
      }
      s.values[l] = block_sum / static_cast<double>(heads);
    }
    return s;
  }

 private:
  Metric metric_;
  Tensor64 sums_;
  std::size_t count_ = 0;
};

inline BlockMetricSeries metric_series(const AttentionTensor& attn, Metric metric) {
  MetricAccumulator acc(metric, attn.blocks(), attn.heads());
  acc.add(attn);
  return acc.series();
}

inline BlockMetricSeries cls_self_attention(const AttentionTensor& attn) {
  return metric_series(attn, Metric::ClsSelfAttention);
}
inline BlockMetricSeries cls_patch_entropy(const AttentionTensor& attn) {
  return metric_series(attn, Metric::ClsPatchEntropy);
}
inline BlockMetricSeries patch_self_attention_ratio(const AttentionTensor& attn) {
  return metric_series(attn, Metric::PatchSelfAttentionRatio);
}
inline BlockMetricSeries patch_patch_entropy(const AttentionTensor& attn) {
  return metric_series(attn, Metric::PatchPatchEntropy);
}

/// Dataset-level series for each requested metric. Per-image values are
/// computed in parallel and summed in image order.
inline std::vector<BlockMetricSeries> dataset_metrics(std::span<const AttentionTensor> images,
                                                      std::span<const Metric> metrics, int threads = 1) {
  require(!images.empty(), ErrorKind::Data, "empty attention dataset");
  const std::size_t blocks = images[0].blocks(), heads = images[0].heads();
  for (const auto& a : images)
    require(a.blocks() == blocks && a.heads() == heads, ErrorKind::Shape,
            "all attention tensors must share the block/head layout");
  std::vector<std::vector<Tensor64>> per_image(images.size());
  parallel_for(images.size(), threads, [&](std::size_t i) {
    for (Metric m : metrics) per_image[i].push_back(per_head_metric(images[i], m));
  });
  std::vector<BlockMetricSeries> out;
  for (std::size_t k = 0; k < metrics.size(); ++k) {
    MetricAccumulator acc(metrics[k], blocks, heads);
    for (const auto& img : per_image) acc.add(img[k]);
    out.push_back(acc.series());
  }
  return out;
}

/// KL(p || q) in nats. eps is added to q, then both vectors are renormalized.
/// Identical vectors give exactly 0; smoothing is not applied to them.
inline double kld(const SelectionVector& p, const SelectionVector& q, double eps = 1e-8) {
  require(p.size() == q.size(), ErrorKind::Shape,
          "KLD of vectors of length " + std::to_string(p.size()) + " and " + std::to_string(q.size()));
  require(!p.weights.empty(), ErrorKind::Shape, "KLD of empty vectors");
  if (p.weights == q.weights) return 0.0;
  double ps = 0.0, qs = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    ps += p.weights[i];
    qs += q.weights[i] + eps;
  }
  require(ps > 0.0 && qs > 0.0, ErrorKind::Numeric, "KLD of a zero-mass vector");
  double out = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pi = p.weights[i] / ps;
    const double qi = (q.weights[i] + eps) / qs;
    if (pi > 0.0) out += pi * std::log(pi / qi);
  }
  return out < 0.0 ? 0.0 : out;
}

/// Entry (i, j) is the mean over images of KL(s_i || s_j); per_image[n][i] is
/// selector i's vector for image n.
inline Tensor64 selector_kld_matrix(const std::vector<std::vector<SelectionVector>>& per_image, double eps = 1e-8) {
  require(!per_image.empty(), ErrorKind::Data, "empty dataset");
  const std::size_t s = per_image[0].size();
  Tensor64 out({s, s});
  for (const auto& image : per_image) {
    require(image.size() == s, ErrorKind::Shape, "every image needs the same selector set");
    for (std::size_t i = 0; i < s; ++i)
      for (std::size_t j = 0; j < s; ++j) out.at(i, j) += kld(image[i], image[j], eps);
  }
  for (double& v : out.values()) v /= static_cast<double>(per_image.size());
  return out;
}

}  // namespace selagg
