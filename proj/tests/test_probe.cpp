#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "selagg/probe.hpp"

using namespace selagg;

namespace {

/// Two classes whose patch tokens are shifted by +-1 along the first axis.
FeatureDataset separable(std::size_t n, std::uint64_t seed, std::string prefix) {
  FeatureDataset data;
  data.num_classes = 2;
  for (std::size_t i = 0; i < n; ++i) {
    RngStream rng(seed, 100 + i);
    FeatureSample s;
    s.id = prefix + std::to_string(1000 + i);
    s.label = rng.uniform_index(2);
    s.tokens = rand_normal<float>({6, 8}, rng, 0.5);
    for (std::size_t r = 1; r < 6; ++r) s.tokens.at(r, 0) += s.label ? 1.f : -1.f;
    data.samples.push_back(std::move(s));
  }
  return data;
}

bool same_params(const ProbeParams<float>& a, const ProbeParams<float>& b) {
  auto x = const_cast<ProbeParams<float>&>(a).trainable();
  auto y = const_cast<ProbeParams<float>&>(b).trainable();
  if (x.size() != y.size()) return false;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (x[i].second->values() != y[i].second->values()) return false;
  return true;
}

}  // namespace

TEST(Probe, CrossEntropyIsStable) {
  const std::vector<double> logits{1000.0, 0.0};
  EXPECT_NEAR(cross_entropy(std::span<const double>(logits), 0), 0.0, 1e-12);
  EXPECT_NEAR(cross_entropy(std::span<const double>(logits), 1), 1000.0, 1e-9);
  const std::vector<double> flat{2.0, 2.0, 2.0};
  EXPECT_NEAR(cross_entropy(std::span<const double>(flat), 1), std::log(3.0), 1e-12);
  EXPECT_THROW(cross_entropy(std::span<const double>(flat), 3), Error);
}

TEST(Probe, ScheduleWarmsUpThenDecays) {
  EXPECT_DOUBLE_EQ(lr_schedule(0, 100, 10, 0.1), 0.0);
  EXPECT_DOUBLE_EQ(lr_schedule(5, 100, 10, 0.1), 0.05);
  EXPECT_DOUBLE_EQ(lr_schedule(10, 100, 10, 0.1), 0.1);
  EXPECT_NEAR(lr_schedule(55, 100, 10, 0.1), 0.05, 1e-12);
  EXPECT_NEAR(lr_schedule(100, 100, 10, 0.1), 0.0, 1e-12);
  double prev = 1.0;
  for (std::size_t s = 10; s <= 100; ++s) {
    const double lr = lr_schedule(s, 100, 10, 0.1);
    EXPECT_LE(lr, prev);
    prev = lr;
  }
  EXPECT_THROW(lr_schedule(0, 5, 6, 0.1), Error);
}

TEST(Probe, SgdMomentumStep) {
  DenseTensor w({2}, std::vector<float>{1, 2}), g({2}, std::vector<float>{0.5, -1}), v({2});
  sgd_momentum_step(w, g, v, 0.1, 0.9, 0.0);
  EXPECT_FLOAT_EQ(w[0], 0.95f);
  EXPECT_FLOAT_EQ(w[1], 2.1f);
  sgd_momentum_step(w, g, v, 0.1, 0.9, 0.0);
  EXPECT_FLOAT_EQ(v[0], 0.95f);
  EXPECT_FLOAT_EQ(w[0], 0.855f);
}

TEST(Probe, LarsScalesByTrustRatio) {
  DenseTensor w({2}, std::vector<float>{3, 4}), g({2}, std::vector<float>{0, 2}), v({2});
  EXPECT_NEAR(lars_local_lr(w, g, 0.0, 0.001, 0.0), 0.001 * 5.0 / 2.0, 1e-12);
  lars_step(w, g, v, 1.0, 0.9, 0.0, 0.001, 0.0);
  EXPECT_NEAR(w[1], 4.0 - 0.0025 * 2.0, 1e-6);
  DenseTensor zero({2});
  EXPECT_EQ(lars_local_lr(zero, g, 0.0, 0.001, 1e-9), 1.0);
}

TEST(Probe, InitRejectsScoreOptionsOutsideAbmilp) {
  RngStream rng(1, 0);
  EXPECT_THROW(init_probe<float>(4, 2, ProbeShape{AggregatorMode::Cls, 2, 4, Activation::Relu}, rng), Error);
  const auto p = init_probe<float>(4, 3, ProbeShape{AggregatorMode::AbmilpPatches, 2, 0, Activation::Gelu}, rng);
  EXPECT_EQ(p.score.layers[0].w.dims(), (Dims{4, 4}));
  EXPECT_EQ(p.classifier_w.dims(), (Dims{4, 3}));
}

TEST(Probe, PaperPresetValues) {
  const auto c = TrainConfig::paper();
  EXPECT_EQ(c.optimizer, Optimizer::Lars);
  EXPECT_DOUBLE_EQ(c.base_lr, 0.1);
  EXPECT_DOUBLE_EQ(c.momentum, 0.9);
  EXPECT_DOUBLE_EQ(c.weight_decay, 0.0);
  EXPECT_EQ(c.epochs, 90u);
  EXPECT_EQ(c.warmup_epochs, 10u);
  EXPECT_EQ(c.batch_size, 16384u);
}

TEST(Gradcheck, EveryShapePasses) {
  GradcheckConfig base;
  base.seed = 3;
  for (const auto& c : gradcheck_suite(base)) {
    EXPECT_TRUE(c.report.passed) << to_string(c.shape.mode) << " depth " << c.shape.score_depth << " "
                                 << to_string(c.shape.activation) << " err " << c.report.max_rel_error << " at "
                                 << c.report.worst_tensor;
    EXPECT_LT(c.report.max_rel_error, 1e-4);
  }
}

TEST(Gradcheck, CorruptedGradientIsCaught) {
  GradcheckConfig cfg;
  cfg.shape = ProbeShape{AggregatorMode::AbmilpPatches, 2, 0, Activation::Tanh};
  cfg.corrupt = true;
  const auto r = gradcheck(cfg);
  EXPECT_FALSE(r.passed);
  EXPECT_GT(r.max_rel_error, 1e-2);
}

TEST(Probe, BatchGradientIsThreadCountInvariant) {
  const auto data = separable(70, 4, "s");
  RngStream rng(5, 0);
  const auto p = init_probe<float>(8, 2, ProbeShape{AggregatorMode::AbmilpPatches, 3, 5, Activation::Relu}, rng);
  const auto a = probe_backward(data.samples, p, 1);
  const auto b = probe_backward(data.samples, p, 4);
  EXPECT_EQ(a.loss, b.loss);
  EXPECT_TRUE(same_params(a.grads, b.grads));
}

TEST(Probe, SeparableDataIsLearned) {
  const auto train = separable(200, 6, "t");
  const auto eval = separable(100, 7, "e");
  for (AggregatorMode m : {AggregatorMode::AvgPatches, AggregatorMode::AbmilpPatches}) {
    auto cfg = TrainConfig::desk();
    cfg.batch_size = 32;
    cfg.shape.mode = m;
    const auto r = train_probe(train, cfg, &eval);
    ASSERT_EQ(r.history.size(), 30u);
    EXPECT_GE(*r.history.back().eval_accuracy, 0.99) << to_string(m);
    EXPECT_LT(r.history.back().train_loss, r.history.front().train_loss);
  }
}

TEST(Probe, TrainingIsDeterministicAcrossThreadsAndInputOrder) {
  auto train = separable(90, 8, "d");
  auto cfg = TrainConfig::desk();
  cfg.epochs = 4;
  cfg.warmup_epochs = 1;
  cfg.batch_size = 20;
  cfg.shape = ProbeShape{AggregatorMode::AbmilpWithCls, 2, 4, Activation::Gelu};
  const auto a = train_probe(train, cfg, nullptr, 1);
  const auto b = train_probe(train, cfg, nullptr, 4);
  std::reverse(train.samples.begin(), train.samples.end());
  const auto c = train_probe(train, cfg, nullptr, 3);
  EXPECT_TRUE(same_params(a.params, b.params));
  EXPECT_TRUE(same_params(a.params, c.params));
  EXPECT_EQ(a.history.back().train_loss, c.history.back().train_loss);
  cfg.seed = 1;
  EXPECT_FALSE(same_params(a.params, train_probe(train, cfg).params));
}

TEST(Probe, LabelOutOfRangeIsDataError) {
  auto train = separable(10, 9, "x");
  train.samples[3].label = 5;
  try {
    train_probe(train, TrainConfig::desk());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Data);
  }
}

TEST(Probe, ExplodingLearningRateIsNumericError) {
  auto train = separable(40, 10, "y");
  for (auto& s : train.samples)
    for (float& v : s.tokens.values()) v *= 1e18f;
  auto cfg = TrainConfig::desk();
  cfg.base_lr = 1e30;
  cfg.standardize = false;
  cfg.warmup_epochs = 0;
  cfg.shape.mode = AggregatorMode::AvgPatches;
  try {
    train_probe(train, cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Numeric);
  }
}
