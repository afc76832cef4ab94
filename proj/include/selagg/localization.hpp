#pragma once

// Heatmaps from per-patch weights, box extraction and MaxBoxAccV2.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "selagg/metrics.hpp"
#include "selagg/parallel.hpp"
#include "selagg/tensor.hpp"

namespace selagg {

struct Heatmap {
  DenseTensor values;  // H x W in [0, 1]
  std::size_t grid_rows = 0;
  std::size_t grid_cols = 0;

  std::size_t height() const { return values.dim(0); }
  std::size_t width() const { return values.dim(1); }
};

/// Pixel box, inclusive-exclusive: [x0, x1) x [y0, y1).
struct BoundingBox {
  std::int64_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  std::int64_t area() const { return std::max<std::int64_t>(0, x1 - x0) * std::max<std::int64_t>(0, y1 - y0); }
  bool valid() const { return x0 < x1 && y0 < y1; }
  bool operator==(const BoundingBox&) const = default;
};

/// Min-max normalization to [0, 1]; a constant map becomes all zeros.
inline DenseTensor min_max_normalize(const Tensor64& map) {
  DenseTensor out(map.dims());
  if (map.empty()) return out;
  const auto [lo, hi] = std::minmax_element(map.values().begin(), map.values().end());
  const double range = *hi - *lo;
  if (!(range > 0.0)) return out;
  for (std::size_t i = 0; i < map.size(); ++i) out[i] = static_cast<float>((map[i] - *lo) / range);
  return out;
}

/// Bilinear resize with half-pixel centres (sample points clamped to the grid).
inline Tensor64 bilinear_upsample(const Tensor64& grid, std::size_t out_h, std::size_t out_w) {
  require(grid.rank() == 2 && grid.size() > 0, ErrorKind::Shape, "upsampling needs a non-empty 2-D grid");
  require(out_h > 0 && out_w > 0, ErrorKind::Shape, "upsampling to an empty image");
  const std::size_t rows = grid.dim(0), cols = grid.dim(1);
  auto source = [](std::size_t dst, std::size_t in, std::size_t out) {
    const double s = (static_cast<double>(dst) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
    return std::clamp(s, 0.0, static_cast<double>(in - 1));
  };
  Tensor64 out({out_h, out_w});
  for (std::size_t y = 0; y < out_h; ++y) {
    const double sy = source(y, rows, out_h);
    const auto y0 = static_cast<std::size_t>(std::floor(sy));
    const std::size_t y1 = std::min(y0 + 1, rows - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double sx = source(x, cols, out_w);
      const auto x0 = static_cast<std::size_t>(std::floor(sx));
      const std::size_t x1 = std::min(x0 + 1, cols - 1);
      const double fx = sx - static_cast<double>(x0);
      const double top = grid.at(y0, x0) * (1.0 - fx) + grid.at(y0, x1) * fx;
      const double bottom = grid.at(y1, x0) * (1.0 - fx) + grid.at(y1, x1) * fx;
      out.at(y, x) = top * (1.0 - fy) + bottom * fy;
    }
  }
  return out;
}

inline Heatmap scores_to_heatmap(const SelectionVector& weights, std::size_t rows, std::size_t cols, std::size_t out_h,
                                 std::size_t out_w) {
  require(weights.size() == rows * cols, ErrorKind::Shape,
          "weights of length " + std::to_string(weights.size()) + " do not fill a " + std::to_string(rows) + "x" +
              std::to_string(cols) + " grid");
  Tensor64 grid({rows, cols}, weights.weights);
  return Heatmap{min_max_normalize(bilinear_upsample(grid, out_h, out_w)), rows, cols};
}

/// Binarizes at value >= tau and returns the tight box of the largest
/// 4-connected foreground component (first in raster order on ties).
inline std::optional<BoundingBox> threshold_to_box(const Heatmap& h, double tau) {
  require(tau >= 0.0 && tau <= 1.0, ErrorKind::Domain, "threshold must lie in [0, 1]");
  const std::size_t height = h.height(), width = h.width();
  std::vector<std::int32_t> label(height * width, -1);
  std::vector<std::size_t> stack;
  std::optional<BoundingBox> best;
  std::size_t best_size = 0;
  std::int32_t next_label = 0;
  for (std::size_t start = 0; start < label.size(); ++start) {
    if (label[start] >= 0 || !(static_cast<double>(h.values[start]) >= tau)) continue;
    BoundingBox box{static_cast<std::int64_t>(width), static_cast<std::int64_t>(height), 0, 0};
    std::size_t size = 0;
    label[start] = next_label;
    stack.assign(1, start);
    while (!stack.empty()) {
      const std::size_t idx = stack.back();
      stack.pop_back();
      ++size;
      const auto y = static_cast<std::int64_t>(idx / width), x = static_cast<std::int64_t>(idx % width);
      box.x0 = std::min(box.x0, x);
      box.y0 = std::min(box.y0, y);
      box.x1 = std::max(box.x1, x + 1);
      box.y1 = std::max(box.y1, y + 1);
      const std::int64_t dy[] = {-1, 1, 0, 0}, dx[] = {0, 0, -1, 1};
      for (int k = 0; k < 4; ++k) {
        const std::int64_t ny = y + dy[k], nx = x + dx[k];
        if (ny < 0 || nx < 0 || ny >= static_cast<std::int64_t>(height) || nx >= static_cast<std::int64_t>(width))
          continue;
        const auto n = static_cast<std::size_t>(ny) * width + static_cast<std::size_t>(nx);
        if (label[n] >= 0 || !(static_cast<double>(h.values[n]) >= tau)) continue;
        label[n] = next_label;
        stack.push_back(n);
      }
    }
    ++next_label;
    if (size > best_size) {
      best_size = size;
      best = box;
    }
  }
  return best;
}

inline double iou(const BoundingBox& a, const BoundingBox& b) {
  const BoundingBox inter{std::max(a.x0, b.x0), std::max(a.y0, b.y0), std::min(a.x1, b.x1), std::min(a.y1, b.y1)};
  const std::int64_t i = inter.valid() ? inter.area() : 0;
  const std::int64_t u = a.area() + b.area() - i;
  return u > 0 ? static_cast<double>(i) / static_cast<double>(u) : 0.0;
}

struct MaxBoxAccConfig {
  std::vector<double> thresholds;
  std::vector<double> iou_levels{0.3, 0.5, 0.7};

  /// tau in {0.00, 0.05, ..., 0.95}.
  static std::vector<double> default_thresholds() {
    std::vector<double> t;
    for (int k = 0; k < 20; ++k) t.push_back(static_cast<double>(k) / 20.0);
    return t;
  }

  MaxBoxAccConfig() : thresholds(default_thresholds()) {}
};

struct MaxBoxAccResult {
  std::vector<double> per_level;       // MaxBoxAcc(delta) in percent
  std::vector<double> best_threshold;  // arg-max tau per delta
  Tensor64 box_acc;                    // tau x delta, fractions
  double score = 0.0;                  // mean over deltas, percent
};

/// Best IoU against any ground-truth box for every threshold; 0 where no box is found.
inline std::vector<double> best_iou_per_threshold(const Heatmap& h, const std::vector<BoundingBox>& gt,
                                                  std::span<const double> thresholds) {
  require(!gt.empty(), ErrorKind::Data, "image without ground-truth boxes");
  std::vector<double> out(thresholds.size(), 0.0);
  for (std::size_t t = 0; t < thresholds.size(); ++t) {
    const auto box = threshold_to_box(h, thresholds[t]);
    if (!box) continue;
    for (const auto& g : gt) out[t] = std::max(out[t], iou(*box, g));
  }
  return out;
}

inline MaxBoxAccResult max_box_acc_v2(std::span<const Heatmap> heatmaps, std::span<const std::vector<BoundingBox>> gt,
                                      const MaxBoxAccConfig& cfg = {}, int threads = 1) {
  require(!heatmaps.empty(), ErrorKind::Data, "MaxBoxAccV2 on an empty dataset");
  require(heatmaps.size() == gt.size(), ErrorKind::Shape, "one ground-truth list per heatmap is required");
  require(!cfg.thresholds.empty() && !cfg.iou_levels.empty(), ErrorKind::Domain, "empty threshold or IoU grid");
  std::vector<std::vector<double>> best(heatmaps.size());
  parallel_for(heatmaps.size(), threads,
               [&](std::size_t i) { best[i] = best_iou_per_threshold(heatmaps[i], gt[i], cfg.thresholds); });

  const std::size_t nt = cfg.thresholds.size(), nd = cfg.iou_levels.size();
  MaxBoxAccResult r;
  r.box_acc = Tensor64({nt, nd});
  for (std::size_t t = 0; t < nt; ++t)
    for (std::size_t d = 0; d < nd; ++d) {
      std::size_t hits = 0;
      for (const auto& b : best) hits += b[t] >= cfg.iou_levels[d];
      r.box_acc.at(t, d) = static_cast<double>(hits) / static_cast<double>(heatmaps.size());
    }
  double total = 0.0;
  for (std::size_t d = 0; d < nd; ++d) {
    std::size_t arg = 0;
    for (std::size_t t = 1; t < nt; ++t)
      if (r.box_acc.at(t, d) > r.box_acc.at(arg, d)) arg = t;
    r.per_level.push_back(100.0 * r.box_acc.at(arg, d));
    r.best_threshold.push_back(cfg.thresholds[arg]);
    total += r.per_level.back();
  }
  r.score = total / static_cast<double>(nd);
  return r;
}

}  // namespace selagg
