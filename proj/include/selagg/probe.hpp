#pragma once

// Joint training of an aggregator score model and a linear classifier over
// frozen token features.
//
// Forward pass for one sample with included token rows x_i (standardized):
//   t_i = t(x_i),  s = softmax(t),  z = sum_i s_i x_i,  logits = z W + b.
// Because sum_i s_i = 1, standardizing tokens before aggregation equals
// standardizing the aggregated vector.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "selagg/aggregation.hpp"
#include "selagg/parallel.hpp"
#include "selagg/rng.hpp"
#include "selagg/tensor.hpp"

namespace selagg {

/// One frozen-feature example. fixed_weights holds the per-patch selector for
/// the modes that do not learn their own weights.
struct FeatureSample {
  std::string id;
  DenseTensor tokens;  // T x D
  bool has_cls = true;
  std::size_t label = 0;
  std::vector<double> fixed_weights;
};

struct FeatureDataset {
  std::vector<FeatureSample> samples;
  std::size_t num_classes = 0;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  std::size_t dim() const { return samples.empty() ? 0 : samples.front().tokens.cols(); }
};

template <typename Real>
struct ProbeParams {
  AggregatorMode mode = AggregatorMode::AbmilpPatches;
  ScoreModel<Real> score;  // empty unless is_abmilp(mode)
  Tensor<Real> classifier_w;  // D x K
  Tensor<Real> classifier_b;  // K
  Tensor<Real> feature_mean;  // D, empty when standardization is off
  Tensor<Real> feature_std;   // D

  std::size_t input_dim() const { return classifier_w.dim(0); }
  std::size_t num_classes() const { return classifier_w.dim(1); }
  bool standardized() const { return !feature_mean.empty(); }

  /// Trainable tensors in a fixed order, with stable names.
  std::vector<std::pair<std::string, Tensor<Real>*>> trainable() {
    std::vector<std::pair<std::string, Tensor<Real>*>> out;
    for (std::size_t l = 0; l < score.layers.size(); ++l) {
      out.emplace_back("score.layers." + std::to_string(l) + ".weight", &score.layers[l].w);
      out.emplace_back("score.layers." + std::to_string(l) + ".bias", &score.layers[l].b);
    }
    out.emplace_back("classifier.weight", &classifier_w);
    out.emplace_back("classifier.bias", &classifier_b);
    return out;
  }

  /// Same layout with every trainable tensor zeroed (a gradient buffer).
  ProbeParams zeros_like() const {
    ProbeParams g = *this;
    for (auto& [name, t] : g.trainable()) std::fill(t->values().begin(), t->values().end(), Real{0});
    return g;
  }

  template <typename U>
  ProbeParams<U> cast() const {
    ProbeParams<U> out;
    out.mode = mode;
    out.score = score.template cast<U>();
    out.classifier_w = classifier_w.template cast<U>();
    out.classifier_b = classifier_b.template cast<U>();
    out.feature_mean = feature_mean.template cast<U>();
    out.feature_std = feature_std.template cast<U>();
    return out;
  }
};

/// Per-dimension mean and population std over every token row of the dataset;
/// std is floored at 1e-6.
inline std::pair<DenseTensor, DenseTensor> feature_statistics(const FeatureDataset& data) {
  require(!data.empty(), ErrorKind::Data, "statistics of an empty dataset");
  const std::size_t d = data.dim();
  std::vector<double> sum(d, 0.0), sq(d, 0.0);
  std::size_t rows = 0;
  for (const auto& s : data.samples) {
    require(s.tokens.cols() == d, ErrorKind::Shape, "inconsistent feature width in sample " + s.id);
    for (std::size_t r = 0; r < s.tokens.rows(); ++r) {
      auto row = s.tokens.row(r);
      for (std::size_t c = 0; c < d; ++c) sum[c] += row[c];
    }
    rows += s.tokens.rows();
  }
  require(rows > 0, ErrorKind::Data, "dataset has no token rows");
  DenseTensor mean({d}), stdev({d});
  for (std::size_t c = 0; c < d; ++c) mean[c] = static_cast<float>(sum[c] / static_cast<double>(rows));
  for (const auto& s : data.samples)
    for (std::size_t r = 0; r < s.tokens.rows(); ++r) {
      auto row = s.tokens.row(r);
      for (std::size_t c = 0; c < d; ++c) {
        const double diff = row[c] - static_cast<double>(mean[c]);
        sq[c] += diff * diff;
      }
    }
  for (std::size_t c = 0; c < d; ++c)
    stdev[c] = static_cast<float>(std::max(1e-6, std::sqrt(sq[c] / static_cast<double>(rows))));
  return {mean, stdev};
}

struct ProbeShape {
  AggregatorMode mode = AggregatorMode::AbmilpPatches;
  std::size_t score_depth = 1;
  std::size_t score_hidden = 0;  // 0 means "same as the feature width"
  Activation activation = Activation::None;
};

/// Classifier W ~ N(0, 0.01^2), zero bias; score layers per make_score_model.
template <typename Real>
ProbeParams<Real> init_probe(std::size_t d, std::size_t k, const ProbeShape& shape, RngStream& rng) {
  require(d > 0 && k > 0, ErrorKind::Domain, "probe dims must be positive");
  ProbeParams<Real> p;
  p.mode = shape.mode;
  if (is_abmilp(shape.mode)) {
    RngStream score_rng = rng.substream(1);
    p.score = make_score_model<Real>(d, shape.score_depth, shape.score_hidden ? shape.score_hidden : d,
                                     shape.activation, score_rng);
  } else {
    require(shape.score_depth == 1 && shape.activation == Activation::None, ErrorKind::Domain,
            "score model options only apply to the abmilp modes");
  }
  RngStream cls_rng = rng.substream(2);
  p.classifier_w = rand_normal<Real>({d, k}, cls_rng, 0.01);
  p.classifier_b = Tensor<Real>({k});
  return p;
}

// ---------------------------------------------------------------------------
// Forward / backward

template <typename Real>
struct ProbeCache {
  Tensor<Real> x;                       // included rows, standardized
  std::vector<Tensor<Real>> pre, post;  // score model per-layer pre/post activations
  std::vector<Real> weights;
  std::vector<Real> z;
  std::vector<Real> logits;
};

namespace detail {

template <typename Real>
void check_probe_inputs(const FeatureSample& sample, const ProbeParams<Real>& p) {
  require(sample.tokens.rank() == 2 && sample.tokens.cols() == p.input_dim(), ErrorKind::Shape,
          "feature width does not match the probe");
  require(!requires_cls(p.mode) || sample.has_cls, ErrorKind::Data,
          "mode " + std::string(to_string(p.mode)) + " needs cls features");
  if (is_abmilp(p.mode)) p.score.validate();
}

}  // namespace detail

template <typename Real>
ProbeCache<Real> probe_forward_cached(const FeatureSample& sample, const ProbeParams<Real>& p) {
  detail::check_probe_inputs(sample, p);
  const std::size_t d = p.input_dim(), k = p.num_classes();
  const std::size_t off = sample.has_cls ? 1 : 0;
  std::size_t begin = off, end = sample.tokens.rows();
  if (p.mode == AggregatorMode::Cls) {
    begin = 0;
    end = 1;
  } else if (p.mode == AggregatorMode::AbmilpWithCls) {
    begin = 0;
  }
  require(end > begin, ErrorKind::Shape, "sample " + sample.id + " has no tokens to aggregate");

  ProbeCache<Real> c;
  const std::size_t n = end - begin;
  c.x = Tensor<Real>({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    auto src = sample.tokens.row(begin + i);
    auto dst = c.x.row(i);
    for (std::size_t j = 0; j < d; ++j) {
      Real v = static_cast<Real>(src[j]);
      if (p.standardized()) v = (v - p.feature_mean[j]) / p.feature_std[j];
      dst[j] = v;
    }
  }

  if (is_abmilp(p.mode)) {
    Tensor<Real> h = c.x;
    for (std::size_t l = 0; l < p.score.depth(); ++l) {
      Tensor<Real> pre = affine(h, p.score.layers[l].w, p.score.layers[l].b);
      c.pre.push_back(pre);
      if (l + 1 < p.score.depth())
        for (Real& v : pre.values()) v = activate(p.score.activation, v);
      c.post.push_back(pre);
      h = std::move(pre);
    }
    c.weights = h.values();
    softmax_inplace(std::span<Real>(c.weights));
  } else if (uses_fixed_selector(p.mode)) {
    require(sample.fixed_weights.size() == n, ErrorKind::Data,
            "sample " + sample.id + " lacks a " + std::to_string(n) + "-entry fixed selector");
    c.weights.assign(sample.fixed_weights.begin(), sample.fixed_weights.end());
  } else {
    c.weights.assign(n, Real{1} / static_cast<Real>(n));
  }

  c.z.assign(d, Real{0});
  for (std::size_t i = 0; i < n; ++i) {
    auto row = c.x.row(i);
    for (std::size_t j = 0; j < d; ++j) c.z[j] += c.weights[i] * row[j];
  }
  c.logits.assign(p.classifier_b.values().begin(), p.classifier_b.values().end());
  for (std::size_t j = 0; j < d; ++j) {
    const Real zj = c.z[j];
    const Real* wrow = p.classifier_w.data().data() + j * k;
    for (std::size_t o = 0; o < k; ++o) c.logits[o] += zj * wrow[o];
  }
  for (Real v : c.logits) require(std::isfinite(v), ErrorKind::Numeric, "non-finite logit for sample " + sample.id);
  return c;
}

struct ProbeOutput {
  std::vector<double> logits;
  SelectionVector selection;
};

template <typename Real>
ProbeOutput probe_forward(const FeatureSample& sample, const ProbeParams<Real>& p) {
  auto c = probe_forward_cached(sample, p);
  return ProbeOutput{std::vector<double>(c.logits.begin(), c.logits.end()),
                     SelectionVector{std::vector<double>(c.weights.begin(), c.weights.end()),
                                     std::string(to_string(p.mode))}};
}

/// -ln softmax(logits)[label], via log-sum-exp.
template <typename Real>
Real cross_entropy(std::span<const Real> logits, std::size_t label) {
  require(label < logits.size(), ErrorKind::Domain,
          "label " + std::to_string(label) + " outside [0, " + std::to_string(logits.size()) + ")");
  const Real mx = *std::max_element(logits.begin(), logits.end());
  Real sum = 0;
  for (Real v : logits) sum += std::exp(v - mx);
  return std::log(sum) + mx - logits[label];
}

/// Accumulates d(loss)/d(params) for one sample into grads, scaled by `scale`.
/// Returns the sample's cross-entropy.
template <typename Real>
Real probe_backward_sample(const FeatureSample& sample, const ProbeParams<Real>& p, ProbeParams<Real>& grads,
                           Real scale, std::size_t* predicted = nullptr) {
  const auto c = probe_forward_cached(sample, p);
  const std::size_t d = p.input_dim(), k = p.num_classes(), n = c.x.rows();
  const Real loss = cross_entropy(std::span<const Real>(c.logits), sample.label);
  if (predicted) {
    *predicted = static_cast<std::size_t>(std::max_element(c.logits.begin(), c.logits.end()) - c.logits.begin());
  }

  std::vector<Real> dlogits = c.logits;
  softmax_inplace(std::span<Real>(dlogits));
  dlogits[sample.label] -= Real{1};
  for (Real& v : dlogits) v *= scale;

  for (std::size_t o = 0; o < k; ++o) grads.classifier_b[o] += dlogits[o];
  std::vector<Real> dz(d, Real{0});
  for (std::size_t j = 0; j < d; ++j) {
    Real* grow = grads.classifier_w.data().data() + j * k;
    const Real* wrow = p.classifier_w.data().data() + j * k;
    Real acc = 0;
    for (std::size_t o = 0; o < k; ++o) {
      grow[o] += c.z[j] * dlogits[o];
      acc += wrow[o] * dlogits[o];
    }
    dz[j] = acc;
  }
  if (!is_abmilp(p.mode)) return loss;

  // ds_i = x_i . dz;  dt_j = s_j (ds_j - sum_i s_i ds_i)
  std::vector<Real> ds(n);
  Real mean_ds = 0;
  for (std::size_t i = 0; i < n; ++i) {
    auto row = c.x.row(i);
    Real acc = 0;
    for (std::size_t j = 0; j < d; ++j) acc += row[j] * dz[j];
    ds[i] = acc;
    mean_ds += c.weights[i] * acc;
  }
  Tensor<Real> dpre({n, 1});
  for (std::size_t i = 0; i < n; ++i) dpre[i] = c.weights[i] * (ds[i] - mean_ds);

  for (std::size_t l = p.score.depth(); l-- > 0;) {
    const Tensor<Real>& input = l == 0 ? c.x : c.post[l - 1];
    auto& gl = grads.score.layers[l];
    const auto& wl = p.score.layers[l];
    const std::size_t in = wl.w.dim(0), out = wl.w.dim(1);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t o = 0; o < out; ++o) {
        const Real g = dpre.at(r, o);
        gl.b[o] += g;
        for (std::size_t q = 0; q < in; ++q) gl.w.at(q, o) += input.at(r, q) * g;
      }
    }
    if (l == 0) break;
    Tensor<Real> dprev({n, in});
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t q = 0; q < in; ++q) {
        Real acc = 0;
        for (std::size_t o = 0; o < out; ++o) acc += dpre.at(r, o) * wl.w.at(q, o);
        dprev.at(r, q) = acc * activate_grad(p.score.activation, c.pre[l - 1].at(r, q));
      }
    dpre = std::move(dprev);
  }
  return loss;
}

template <typename Real>
struct BatchGradient {
  Real loss = 0;  // mean cross-entropy
  std::size_t correct = 0;
  ProbeParams<Real> grads;
};

/// Mean cross-entropy and its gradient over the samples at `indices`.
/// Work is split into fixed groups of 16 samples, each reduced serially, and
/// the group results are summed in order, so any thread count gives the same bits.
template <typename Real>
BatchGradient<Real> probe_backward(const std::vector<FeatureSample>& samples, std::span<const std::size_t> indices,
                                   const ProbeParams<Real>& p, int threads = 1) {
  require(!indices.empty(), ErrorKind::Data, "empty batch");
  constexpr std::size_t kGroup = 16;
  const std::size_t groups = (indices.size() + kGroup - 1) / kGroup;
  const Real scale = Real{1} / static_cast<Real>(indices.size());
  std::vector<BatchGradient<Real>> partial(groups);
  parallel_for(groups, threads, [&](std::size_t g) {
    auto& part = partial[g];
    part.grads = p.zeros_like();
    for (std::size_t i = g * kGroup; i < std::min(indices.size(), (g + 1) * kGroup); ++i) {
      const auto& sample = samples[indices[i]];
      std::size_t predicted = 0;
      part.loss += probe_backward_sample(sample, p, part.grads, scale, &predicted) * scale;
      if (predicted == sample.label) ++part.correct;
    }
  });
  BatchGradient<Real> total = std::move(partial[0]);
  for (std::size_t g = 1; g < groups; ++g) {
    total.loss += partial[g].loss;
    total.correct += partial[g].correct;
    auto dst = total.grads.trainable();
    auto src = partial[g].grads.trainable();
    for (std::size_t t = 0; t < dst.size(); ++t) add_inplace(*dst[t].second, *src[t].second);
  }
  require(std::isfinite(total.loss), ErrorKind::Numeric, "non-finite loss");
  return total;
}

template <typename Real>
BatchGradient<Real> probe_backward(const std::vector<FeatureSample>& samples, const ProbeParams<Real>& p,
                                   int threads = 1) {
  std::vector<std::size_t> all(samples.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return probe_backward(samples, std::span<const std::size_t>(all), p, threads);
}

// ---------------------------------------------------------------------------
// Schedules and optimizers

/// Linear warmup from 0 to base_lr, then a half cosine down to 0 at total_steps.
inline double lr_schedule(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, double base_lr) {
  require(warmup_steps <= total_steps, ErrorKind::Domain, "warmup longer than training");
  require(step <= total_steps, ErrorKind::Domain, "step beyond the schedule");
  if (step < warmup_steps) return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  if (total_steps == warmup_steps) return base_lr;
  const double progress =
      static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
  return base_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

/// v <- m v + g + wd w;  w <- w - lr v.
template <typename Real>
void sgd_momentum_step(Tensor<Real>& w, const Tensor<Real>& g, Tensor<Real>& v, double lr, double momentum,
                       double weight_decay) {
  require(w.dims() == g.dims() && w.dims() == v.dims(), ErrorKind::Shape, "optimizer shape mismatch");
  for (std::size_t i = 0; i < w.size(); ++i) {
    v[i] = static_cast<Real>(momentum) * v[i] + g[i] + static_cast<Real>(weight_decay) * w[i];
    w[i] -= static_cast<Real>(lr) * v[i];
  }
}

template <typename Real>
double l2_norm(const Tensor<Real>& t) {
  double acc = 0.0;
  for (Real v : t.values()) acc += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(acc);
}

/// trust * |w| / (|g| + wd |w| + eps) when both norms are positive, else 1.
template <typename Real>
double lars_local_lr(const Tensor<Real>& w, const Tensor<Real>& g, double weight_decay, double trust, double eps) {
  const double wn = l2_norm(w), gn = l2_norm(g);
  if (wn > 0.0 && gn > 0.0) return trust * wn / (gn + weight_decay * wn + eps);
  return 1.0;
}

/// v <- m v + local_lr (g + wd w);  w <- w - lr v.
template <typename Real>
void lars_step(Tensor<Real>& w, const Tensor<Real>& g, Tensor<Real>& v, double lr, double momentum,
               double weight_decay, double trust_coefficient, double eps) {
  require(w.dims() == g.dims() && w.dims() == v.dims(), ErrorKind::Shape, "optimizer shape mismatch");
  const auto local = static_cast<Real>(lars_local_lr(w, g, weight_decay, trust_coefficient, eps));
  for (std::size_t i = 0; i < w.size(); ++i) {
    v[i] = static_cast<Real>(momentum) * v[i] + local * (g[i] + static_cast<Real>(weight_decay) * w[i]);
    w[i] -= static_cast<Real>(lr) * v[i];
  }
}

enum class Optimizer { SgdMomentum, Lars };

inline std::string_view to_string(Optimizer o) { return o == Optimizer::Lars ? "lars" : "sgd_momentum"; }

inline Optimizer parse_optimizer(std::string_view s) {
  if (s == "lars") return Optimizer::Lars;
  if (s == "sgd_momentum" || s == "sgd") return Optimizer::SgdMomentum;
  fail(ErrorKind::Domain, "unknown optimizer '" + std::string(s) + "'");
}

struct TrainConfig {
  Optimizer optimizer = Optimizer::SgdMomentum;
  double base_lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::size_t epochs = 30;
  std::size_t warmup_epochs = 3;
  std::size_t batch_size = 256;
  std::uint64_t seed = 0;
  ProbeShape shape;
  bool standardize = true;
  double trust_coefficient = 0.001;
  double lars_eps = 1e-9;

  void validate() const {
    require(warmup_epochs <= epochs, ErrorKind::Domain, "warmup_epochs exceeds epochs");
    require(batch_size >= 1, ErrorKind::Domain, "batch_size must be at least 1");
    require(base_lr >= 0.0 && momentum >= 0.0 && weight_decay >= 0.0, ErrorKind::Domain,
            "learning rate, momentum and weight decay must be non-negative");
  }

  /// Small-scale defaults that keep runs to seconds.
  static TrainConfig desk() { return TrainConfig{}; }

  /// Large-scale linear-probing protocol: LARS, lr 0.1, momentum 0.9, no weight
  /// decay, 10 warmup epochs of 90, batch 16384.
  static TrainConfig paper() {
    TrainConfig c;
    c.optimizer = Optimizer::Lars;
    c.base_lr = 0.1;
    c.momentum = 0.9;
    c.weight_decay = 0.0;
    c.epochs = 90;
    c.warmup_epochs = 10;
    c.batch_size = 16384;
    return c;
  }
};

struct EpochRecord {
  double lr = 0.0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  std::optional<double> eval_accuracy;
};

using TrainHistory = std::vector<EpochRecord>;

/// Top-1 accuracy; ties in the argmax go to the lowest class index.
template <typename Real>
double evaluate(const FeatureDataset& data, const ProbeParams<Real>& p, int threads = 1) {
  require(!data.empty(), ErrorKind::Data, "evaluation on an empty dataset");
  std::vector<std::uint8_t> hit(data.size(), 0);
  parallel_for(data.size(), threads, [&](std::size_t i) {
    const auto c = probe_forward_cached(data.samples[i], p);
    const auto best = static_cast<std::size_t>(std::max_element(c.logits.begin(), c.logits.end()) - c.logits.begin());
    hit[i] = best == data.samples[i].label;
  });
  return static_cast<double>(std::accumulate(hit.begin(), hit.end(), std::size_t{0})) /
         static_cast<double>(data.size());
}

struct TrainResult {
  ProbeParams<float> params;
  TrainHistory history;
};

/// Trains aggregator + classifier. Samples are put into id order before the
/// seeded per-epoch shuffles, so the result does not depend on input order.
inline TrainResult train_probe(const FeatureDataset& train, const TrainConfig& config,
                               const FeatureDataset* eval = nullptr, int threads = 1) {
  config.validate();
  require(!train.empty(), ErrorKind::Data, "empty training set");
  require(train.num_classes > 0, ErrorKind::Data, "training set declares no classes");
  for (const auto& s : train.samples)
    require(s.label < train.num_classes, ErrorKind::Data, "label out of range in sample " + s.id);

  std::vector<FeatureSample> samples = train.samples;
  std::stable_sort(samples.begin(), samples.end(), [](const auto& a, const auto& b) { return a.id < b.id; });

  RngStream rng(config.seed, 0);
  ProbeParams<float> p = init_probe<float>(train.dim(), train.num_classes, config.shape, rng);
  if (config.standardize) std::tie(p.feature_mean, p.feature_std) = feature_statistics(train);

  std::vector<Tensor<float>> velocity;
  for (auto& [name, t] : p.trainable()) velocity.emplace_back(t->dims());

  const std::size_t steps_per_epoch = (samples.size() + config.batch_size - 1) / config.batch_size;
  const std::size_t total_steps = steps_per_epoch * config.epochs;
  const std::size_t warmup_steps = steps_per_epoch * config.warmup_epochs;

  TrainResult result;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    RngStream shuffle_rng(config.seed, 1000 + epoch);
    const auto order = shuffle_rng.permutation(samples.size());
    EpochRecord rec;
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t b = 0; b < steps_per_epoch; ++b) {
      const std::size_t begin = b * config.batch_size;
      const std::size_t end = std::min(samples.size(), begin + config.batch_size);
      const std::span<const std::size_t> batch(order.data() + begin, end - begin);
      auto bg = probe_backward(samples, batch, p, threads);
      if (!std::isfinite(bg.loss))
        fail(ErrorKind::Numeric, "loss became non-finite at epoch " + std::to_string(epoch) + ", step " +
                                     std::to_string(step));
      loss_sum += static_cast<double>(bg.loss) * static_cast<double>(batch.size());
      correct += bg.correct;

      const double lr = lr_schedule(step, total_steps, warmup_steps, config.base_lr);
      auto params = p.trainable();
      auto grads = bg.grads.trainable();
      for (std::size_t t = 0; t < params.size(); ++t) {
        if (config.optimizer == Optimizer::Lars)
          lars_step(*params[t].second, *grads[t].second, velocity[t], lr, config.momentum, config.weight_decay,
                    config.trust_coefficient, config.lars_eps);
        else
          sgd_momentum_step(*params[t].second, *grads[t].second, velocity[t], lr, config.momentum,
                            config.weight_decay);
      }
      for (auto& [name, t] : params) require_finite(*t, name);
      rec.lr = lr;
      ++step;
    }
    rec.train_loss = loss_sum / static_cast<double>(samples.size());
    rec.train_accuracy = static_cast<double>(correct) / static_cast<double>(samples.size());
    if (eval && !eval->empty()) rec.eval_accuracy = evaluate(*eval, p, threads);
    result.history.push_back(rec);
  }
  result.params = std::move(p);
  return result;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check

struct GradcheckReport {
  double max_rel_error = 0.0;
  std::string worst_tensor;
  std::size_t worst_index = 0;
  std::size_t kink_skipped = 0;  // entries where every step still crossed a relu kink
  bool passed = false;
};

struct GradcheckConfig {
  ProbeShape shape;
  std::size_t dim = 16;
  std::size_t tokens = 8;
  std::size_t classes = 5;
  std::size_t batch = 4;
  std::size_t hidden = 16;
  std::uint64_t seed = 0;
  double step = 1e-4;
  double tolerance = 1e-4;
  bool corrupt = false;  // negative control: perturbs one analytic entry
};

/// Fourth-order central differences in 64-bit against the analytic gradient
/// of the mean batch loss:
///   n = (8 (L(w+h) - L(w-h)) - (L(w+2h) - L(w-2h))) / 12h.
/// Relative error is |a - n| / max(|a|, |n|, 1e-6). With relu score models the
/// step is shrunk (down to 1e-8) until w +- h and w +- 2h share the activation
/// pattern of w, since a difference across a kink measures the kink rather
/// than the gradient.
inline GradcheckReport gradcheck(const GradcheckConfig& cfg) {
  RngStream rng(cfg.seed, 7);
  std::vector<FeatureSample> batch;
  for (std::size_t b = 0; b < cfg.batch; ++b) {
    FeatureSample s;
    s.id = std::to_string(b);
    s.tokens = rand_normal<float>({cfg.tokens + 1, cfg.dim}, rng);
    s.has_cls = true;
    s.label = rng.uniform_index(cfg.classes);
    std::vector<double> w(cfg.tokens);
    for (double& v : w) v = rng.uniform();
    s.fixed_weights = normalized_selection(w, "random").weights;
    batch.push_back(std::move(s));
  }
  ProbeShape shape = cfg.shape;
  shape.score_hidden = cfg.hidden;
  auto p = init_probe<double>(cfg.dim, cfg.classes, shape, rng);
  // Larger classifier weights than the training init so every path carries signal.
  p.classifier_w = rand_normal<double>({cfg.dim, cfg.classes}, rng, 0.5);
  p.classifier_b = rand_normal<double>({cfg.classes}, rng, 0.5);
  for (auto& layer : p.score.layers) layer.b = rand_normal<double>(layer.b.dims(), rng, 0.5);
  p.feature_mean = rand_normal<double>({cfg.dim}, rng, 0.1);
  p.feature_std = rand_uniform<double>({cfg.dim}, rng, 0.5, 1.5);

  auto analytic = probe_backward(batch, p).grads;
  if (cfg.corrupt) analytic.classifier_w[0] += 1e-2;
  auto loss_at = [&](const ProbeParams<double>& q) { return probe_backward(batch, q).loss; };

  const bool kinked = is_abmilp(p.mode) && p.score.activation == Activation::Relu;
  auto pattern = [&](const ProbeParams<double>& q) {
    std::vector<std::uint8_t> out;
    for (const auto& s : batch) {
      const auto c = probe_forward_cached(s, q);
      for (std::size_t l = 0; l + 1 < c.pre.size(); ++l)
        for (double v : c.pre[l].values()) out.push_back(v > 0.0);
    }
    return out;
  };

  GradcheckReport report;
  auto params = p.trainable();
  auto grads = analytic.trainable();
  for (std::size_t t = 0; t < params.size(); ++t) {
    Tensor<double>& w = *params[t].second;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double orig = w[i];
      double h = cfg.step;
      if (kinked) {
        const auto centre = pattern(p);
        bool crossed = true;
        for (; h >= 1e-8; h /= 10.0) {
          bool same = true;
          for (double k : {-2.0, -1.0, 1.0, 2.0}) {
            w[i] = orig + k * h;
            same = same && pattern(p) == centre;
          }
          w[i] = orig;
          if (same) {
            crossed = false;
            break;
          }
        }
        if (crossed) {
          ++report.kink_skipped;
          continue;
        }
      }
      auto at = [&](double k) {
        w[i] = orig + k * h;
        const double v = loss_at(p);
        w[i] = orig;
        return v;
      };
      const double numeric = (8.0 * (at(1.0) - at(-1.0)) - (at(2.0) - at(-2.0))) / (12.0 * h);
      const double a = (*grads[t].second)[i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6});
      if (report.worst_tensor.empty() || rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_tensor = params[t].first;
        report.worst_index = i;
      }
    }
  }
  report.passed = report.max_rel_error < cfg.tolerance;
  return report;
}

struct GradcheckCase {
  ProbeShape shape;
  GradcheckReport report;
};

/// Every aggregator mode; the abmilp modes at depths 1-4, with each
/// activation above depth 1.
inline std::vector<ProbeShape> gradcheck_shapes() {
  std::vector<ProbeShape> out;
  for (AggregatorMode m : kAllModes) {
    if (!is_abmilp(m)) {
      out.push_back(ProbeShape{m, 1, 0, Activation::None});
      continue;
    }
    out.push_back(ProbeShape{m, 1, 0, Activation::None});
    for (std::size_t depth = 2; depth <= 4; ++depth)
      for (Activation a : {Activation::Relu, Activation::Gelu, Activation::Tanh})
        out.push_back(ProbeShape{m, depth, 0, a});
  }
  return out;
}

inline std::vector<GradcheckCase> gradcheck_suite(GradcheckConfig base) {
  std::vector<GradcheckCase> out;
  for (const auto& shape : gradcheck_shapes()) {
    base.shape = shape;
    out.push_back({shape, gradcheck(base)});
  }
  return out;
}

}  // namespace selagg
