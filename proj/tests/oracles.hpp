#pragma once

// Independent double-precision reference implementations. These use plain
// nested vectors and loops on purpose and share no code with the library
// beyond the input containers.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <optional>
#include <vector>

#include "selagg/localization.hpp"
#include "selagg/vit.hpp"

namespace oracle {

using Mat = std::vector<std::vector<double>>;

inline Mat to_mat(const selagg::DenseTensor& t) {
  Mat m(t.dim(0), std::vector<double>(t.dim(1)));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) m[i][j] = t.values()[i * t.dim(1) + j];
  return m;
}

inline std::vector<double> to_vec(const selagg::DenseTensor& t) { return {t.values().begin(), t.values().end()}; }

inline Mat matmul(const Mat& a, const Mat& b) {
  Mat c(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b[0].size(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < b.size(); ++k) s += a[i][k] * b[k][j];
      c[i][j] = s;
    }
  return c;
}

inline Mat linear(const Mat& x, const selagg::DenseTensor& w, const selagg::DenseTensor& b) {
  Mat y = matmul(x, to_mat(w));
  if (!b.empty())
    for (auto& row : y)
      for (std::size_t j = 0; j < row.size(); ++j) row[j] += b.values()[j];
  return y;
}

inline std::vector<double> softmax(std::vector<double> v) {
  const double m = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (double& x : v) s += (x = std::exp(x - m));
  for (double& x : v) x /= s;
  return v;
}

inline Mat layer_norm(const Mat& x, const selagg::DenseTensor& g, const selagg::DenseTensor& b, double eps) {
  Mat y = x;
  for (auto& row : y) {
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(row.size());
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(row.size());
    for (std::size_t j = 0; j < row.size(); ++j)
      row[j] = (row[j] - mean) / std::sqrt(var + eps) * g.values()[j] + b.values()[j];
  }
  return y;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

struct Forward {
  Mat tokens;
  std::vector<double> attention;  // [L, h, T, T]
};

/// Reference pre-norm ViT forward from raw image pixels.
inline Forward vit_forward(const selagg::DenseTensor& image, const selagg::ViTParams& p) {
  const auto& c = p.config;
  const std::size_t P = c.patch_size, gr = c.image_h / P, gc = c.image_w / P, d = c.embed_dim;
  Mat patches;
  for (std::size_t r = 0; r < gr; ++r)
    for (std::size_t q = 0; q < gc; ++q) {
      std::vector<double> v;
      for (std::size_t y = 0; y < P; ++y)
        for (std::size_t x = 0; x < P; ++x)
          for (std::size_t ch = 0; ch < c.channels; ++ch)
            v.push_back(image.values()[((r * P + y) * c.image_w + (q * P + x)) * c.channels + ch]);
      patches.push_back(v);
    }
  Mat emb = linear(patches, p.patch_w, p.patch_b);
  Mat x;
  if (c.has_cls) x.push_back(to_vec(p.cls_token));
  for (auto& row : emb) x.push_back(row);
  const Mat pos = to_mat(p.pos_embed);
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = 0; j < d; ++j) x[i][j] += pos[i][j];

  const std::size_t T = x.size(), H = c.heads, dh = d / H;
  Forward out;
  for (const auto& b : p.blocks) {
    Mat h = layer_norm(x, b.norm1_w, b.norm1_b, c.ln_eps);
    Mat q = linear(h, b.q_w, b.q_b), k = linear(h, b.k_w, b.k_b), v = linear(h, b.v_w, b.v_b);
    Mat ctx(T, std::vector<double>(d, 0.0));
    for (std::size_t head = 0; head < H; ++head)
      for (std::size_t i = 0; i < T; ++i) {
        std::vector<double> s(T);
        for (std::size_t j = 0; j < T; ++j) {
          double dot = 0.0;
          for (std::size_t e = 0; e < dh; ++e) dot += q[i][head * dh + e] * k[j][head * dh + e];
          s[j] = dot / std::sqrt(static_cast<double>(dh));
        }
        s = softmax(s);
        for (double a : s) out.attention.push_back(a);
        for (std::size_t j = 0; j < T; ++j)
          for (std::size_t e = 0; e < dh; ++e) ctx[i][head * dh + e] += s[j] * v[j][head * dh + e];
      }
    Mat proj = linear(ctx, b.proj_w, b.proj_b);
    for (std::size_t i = 0; i < T; ++i)
      for (std::size_t j = 0; j < d; ++j) x[i][j] += proj[i][j];
    Mat h2 = layer_norm(x, b.norm2_w, b.norm2_b, c.ln_eps);
    Mat f = linear(h2, b.fc1_w, b.fc1_b);
    for (auto& row : f)
      for (double& val : row) val = gelu(val);
    Mat f2 = linear(f, b.fc2_w, b.fc2_b);
    for (std::size_t i = 0; i < T; ++i)
      for (std::size_t j = 0; j < d; ++j) x[i][j] += f2[i][j];
  }
  if (c.final_norm) x = layer_norm(x, p.norm_w, p.norm_b, c.ln_eps);
  out.tokens = x;
  return out;
}

// ---------------------------------------------------------------------------
// Attention metrics, brute force over [L, h, T, T] with a cls token at 0.

struct Metrics {
  std::vector<double> cls_self, cls_entropy, patch_self_ratio, patch_entropy;  // per block
};

inline double entropy_of(const std::vector<double>& w) {
  double s = 0.0;
  for (double v : w) s += v;
  double h = 0.0;
  for (double v : w)
    if (v > 0.0) h -= (v / s) * std::log(v / s);
  return h;
}

/// Per-image per-block metrics, mean over heads.
inline Metrics image_metrics(const selagg::DenseTensor& maps) {
  const std::size_t L = maps.dim(0), H = maps.dim(1), T = maps.dim(2), N = T - 1;
  auto a = [&](std::size_t l, std::size_t h, std::size_t i, std::size_t j) {
    return static_cast<double>(maps.values()[((l * H + h) * T + i) * T + j]);
  };
  Metrics m;
  for (std::size_t l = 0; l < L; ++l) {
    double cs = 0.0, ce = 0.0, pr = 0.0, pe = 0.0;
    for (std::size_t h = 0; h < H; ++h) {
      cs += a(l, h, 0, 0);
      std::vector<double> row;
      for (std::size_t j = 1; j < T; ++j) row.push_back(a(l, h, 0, j));
      ce += entropy_of(row);
      double ratio = 0.0, ent = 0.0;
      for (std::size_t i = 1; i < T; ++i) {
        double patch_mass = 0.0;
        std::vector<double> r;
        for (std::size_t j = 1; j < T; ++j) {
          patch_mass += a(l, h, i, j);
          r.push_back(a(l, h, i, j));
        }
        ratio += a(l, h, i, i) / patch_mass;
        ent += entropy_of(r);
      }
      pr += ratio / static_cast<double>(N);
      pe += ent / static_cast<double>(N);
    }
    m.cls_self.push_back(cs / static_cast<double>(H));
    m.cls_entropy.push_back(ce / static_cast<double>(H));
    m.patch_self_ratio.push_back(pr / static_cast<double>(H));
    m.patch_entropy.push_back(pe / static_cast<double>(H));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Localization

struct Box {
  long x0, y0, x1, y1;
};

/// Breadth-first labelling; keeps the largest component, earliest seed on ties.
inline std::optional<Box> largest_component_box(const std::vector<std::vector<double>>& map, double tau) {
  const long H = static_cast<long>(map.size()), W = static_cast<long>(map[0].size());
  std::vector<std::vector<int>> seen(H, std::vector<int>(W, 0));
  std::optional<Box> best;
  long best_count = 0;
  for (long y = 0; y < H; ++y)
    for (long x = 0; x < W; ++x) {
      if (seen[y][x] || !(map[y][x] >= tau)) continue;
      std::deque<std::pair<long, long>> q{{y, x}};
      seen[y][x] = 1;
      Box b{x, y, x + 1, y + 1};
      long count = 0;
      while (!q.empty()) {
        auto [cy, cx] = q.front();
        q.pop_front();
        ++count;
        b.x0 = std::min(b.x0, cx);
        b.y0 = std::min(b.y0, cy);
        b.x1 = std::max(b.x1, cx + 1);
        b.y1 = std::max(b.y1, cy + 1);
        const long ny[4] = {cy + 1, cy - 1, cy, cy}, nx[4] = {cx, cx, cx + 1, cx - 1};
        for (int k = 0; k < 4; ++k)
          if (ny[k] >= 0 && ny[k] < H && nx[k] >= 0 && nx[k] < W && !seen[ny[k]][nx[k]] && map[ny[k]][nx[k]] >= tau) {
            seen[ny[k]][nx[k]] = 1;
            q.push_back({ny[k], nx[k]});
          }
      }
      if (count > best_count) {
        best_count = count;
        best = b;
      }
    }
  return best;
}

/// IoU by counting covered pixels on a grid spanning both boxes.
inline double iou_by_counting(const Box& a, const Box& b) {
  const long x0 = std::min(a.x0, b.x0), y0 = std::min(a.y0, b.y0);
  const long x1 = std::max(a.x1, b.x1), y1 = std::max(a.y1, b.y1);
  long inter = 0, uni = 0;
  for (long y = y0; y < y1; ++y)
    for (long x = x0; x < x1; ++x) {
      const bool in_a = x >= a.x0 && x < a.x1 && y >= a.y0 && y < a.y1;
      const bool in_b = x >= b.x0 && x < b.x1 && y >= b.y0 && y < b.y1;
      inter += in_a && in_b;
      uni += in_a || in_b;
    }
  return uni ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

/// Exhaustive (tau, delta) table, then mean over delta of the max over tau, in percent.
inline double max_box_acc(const std::vector<std::vector<std::vector<double>>>& maps,
                          const std::vector<std::vector<Box>>& gts, const std::vector<double>& taus,
                          const std::vector<double>& deltas) {
  double total = 0.0;
  for (double delta : deltas) {
    double best = 0.0;
    for (double tau : taus) {
      long hits = 0;
      for (std::size_t i = 0; i < maps.size(); ++i) {
        const auto box = largest_component_box(maps[i], tau);
        bool hit = false;
        if (box)
          for (const auto& g : gts[i]) hit = hit || iou_by_counting(*box, g) >= delta;
        hits += hit;
      }
      best = std::max(best, static_cast<double>(hits) / static_cast<double>(maps.size()));
    }
    total += 100.0 * best;
  }
  return total / static_cast<double>(deltas.size());
}

}  // namespace oracle
