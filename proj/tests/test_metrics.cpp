#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "selagg/metrics.hpp"
#include "selagg/synth.hpp"

using namespace selagg;

namespace {

AttentionTensor uniform_attention(std::size_t blocks, std::size_t heads, std::size_t patches) {
  const std::size_t t = patches + 1;
  return AttentionTensor{DenseTensor({blocks, heads, t, t}, 1.0f / static_cast<float>(t)), true};
}

}  // namespace

TEST(Metrics, UniformAttentionHasMaximalEntropy) {
  const auto a = uniform_attention(2, 3, 196);
  const auto ce = cls_patch_entropy(a);
  const auto pe = patch_patch_entropy(a);
  for (std::size_t l = 0; l < 2; ++l) {
    EXPECT_NEAR(ce.values[l], std::log(196.0), 1e-6);
    EXPECT_NEAR(pe.values[l], std::log(196.0), 1e-6);
  }
  EXPECT_NEAR(cls_self_attention(a).values[0], 1.0 / 197.0, 1e-7);
  EXPECT_NEAR(patch_self_attention_ratio(a).values[1], 1.0 / 196.0, 1e-7);
}

TEST(Metrics, IdentityAttentionIsFullySelfFocused) {
  RngStream rng(1, 0);
  const auto a = synth::make_attention(synth::AttentionKind::Identity, 2, 2, 9, true, rng);
  EXPECT_NEAR(cls_self_attention(a).values[0], 1.0, 1e-6);
  EXPECT_NEAR(patch_self_attention_ratio(a).values[0], 1.0, 1e-6);
  EXPECT_NEAR(patch_patch_entropy(a).values[1], 0.0, 1e-6);
}

TEST(Metrics, RandomTensorsMatchOracle) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    RngStream rng(seed, 0);
    const auto a = synth::make_attention(synth::AttentionKind::Random, 4, 4, 16, true, rng);
    const auto ref = oracle::image_metrics(a.maps);
    const auto cs = cls_self_attention(a), ce = cls_patch_entropy(a);
    const auto pr = patch_self_attention_ratio(a), pe = patch_patch_entropy(a);
    for (std::size_t l = 0; l < 4; ++l) {
      EXPECT_NEAR(cs.values[l], ref.cls_self[l], 1e-9);
      EXPECT_NEAR(ce.values[l], ref.cls_entropy[l], 1e-9);
      EXPECT_NEAR(pr.values[l], ref.patch_self_ratio[l], 1e-9);
      EXPECT_NEAR(pe.values[l], ref.patch_entropy[l], 1e-9);
    }
  }
}

TEST(Metrics, DatasetMeanIsMeanOfImageMeans) {
  std::vector<AttentionTensor> images;
  for (std::uint64_t i = 0; i < 7; ++i) {
    RngStream rng(i, 3);
    images.push_back(synth::make_attention(synth::AttentionKind::Random, 3, 2, 9, true, rng));
  }
  const auto series = dataset_metrics(images, kAllMetrics, 1);
  ASSERT_EQ(series.size(), 4u);
  EXPECT_EQ(series[0].metric_name, "cls_self_attention");
  EXPECT_EQ(series[1].n_images, 7u);
  for (std::size_t l = 0; l < 3; ++l) {
    double expect = 0.0;
    for (const auto& a : images) expect += oracle::image_metrics(a.maps).patch_entropy[l];
    EXPECT_NEAR(series[3].values[l], expect / 7.0, 1e-9);
  }
}

TEST(Metrics, DatasetMetricsAreThreadCountInvariant) {
  std::vector<AttentionTensor> images;
  for (std::uint64_t i = 0; i < 13; ++i) {
    RngStream rng(i, 4);
    images.push_back(synth::make_attention(synth::AttentionKind::Peaked, 2, 3, 16, true, rng));
  }
  const auto a = dataset_metrics(images, kAllMetrics, 1);
  const auto b = dataset_metrics(images, kAllMetrics, 4);
  for (std::size_t k = 0; k < a.size(); ++k) {
    EXPECT_EQ(a[k].values, b[k].values);
    EXPECT_EQ(a[k].per_head.values(), b[k].per_head.values());
  }
}

TEST(Metrics, ClsMetricsNeedAClsToken) {
  RngStream rng(2, 0);
  const auto a = synth::make_attention(synth::AttentionKind::Random, 1, 1, 4, false, rng);
  try {
    cls_self_attention(a);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Data);
  }
  EXPECT_NO_THROW(patch_patch_entropy(a));
}

TEST(Metrics, MalformedRowsAreRejected) {
  AttentionTensor a{DenseTensor({1, 1, 3, 3}, 0.5f), true};
  EXPECT_THROW(patch_patch_entropy(a), Error);
}

TEST(Metrics, AccumulatorMergeEqualsSequentialAdd) {
  MetricAccumulator all(Metric::PatchPatchEntropy, 2, 2), left(Metric::PatchPatchEntropy, 2, 2),
      right(Metric::PatchPatchEntropy, 2, 2);
  for (std::uint64_t i = 0; i < 6; ++i) {
    RngStream rng(i, 5);
    const auto a = synth::make_attention(synth::AttentionKind::Random, 2, 2, 4, true, rng);
    all.add(a);
    (i < 3 ? left : right).add(a);
  }
  left.merge(right);
  EXPECT_EQ(left.count(), 6u);
  for (std::size_t l = 0; l < 2; ++l) EXPECT_NEAR(left.series().values[l], all.series().values[l], 1e-12);
}

// ---------------------------------------------------------------------------
// KL divergence

TEST(Kld, IdenticalVectorsGiveZero) {
  SelectionVector p{{0.2, 0.3, 0.5}, "a"};
  EXPECT_EQ(kld(p, p), 0.0);
  SelectionVector hot{{1.0, 0.0, 0.0}, "b"};
  EXPECT_EQ(kld(hot, hot), 0.0);
}

TEST(Kld, MatchesClosedForm) {
  SelectionVector p{{0.5, 0.5}, "p"}, q{{0.25, 0.75}, "q"};
  const double expect = 0.5 * std::log(0.5 / 0.25) + 0.5 * std::log(0.5 / 0.75);
  EXPECT_NEAR(kld(p, q), expect, 1e-7);
  EXPECT_GT(kld(q, p), 0.0);
}

TEST(Kld, ZeroInQIsSmoothed) {
  SelectionVector p{{0.5, 0.5}, "p"}, q{{1.0, 0.0}, "q"};
  const double v = kld(p, q);
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_GT(v, 5.0);
}

TEST(Kld, LengthMismatchIsShapeError) {
  try {
    kld(SelectionVector{{1.0}, "a"}, SelectionVector{{0.5, 0.5}, "b"});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Shape);
  }
}

TEST(Kld, MatrixHasZeroDiagonalAndAveragesImages) {
  std::vector<std::vector<SelectionVector>> per_image{
      {{{0.5, 0.5}, "u"}, {{0.25, 0.75}, "v"}},
      {{{0.5, 0.5}, "u"}, {{0.75, 0.25}, "v"}},
  };
  const auto m = selector_kld_matrix(per_image);
  EXPECT_EQ(m.at(0, 0), 0.0);
  EXPECT_EQ(m.at(1, 1), 0.0);
  // Both images contribute the same divergence by symmetry of the swap.
  EXPECT_NEAR(m.at(0, 1), kld(per_image[0][0], per_image[0][1]), 1e-12);
}
