#include "fctn/pseudolabel.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace fctn;
using fctn::test::random_tensor;

namespace {

// Two-class logits whose softmax puts probability p on `label`.
void set_pixel(TensorD& z, Index px, int label, double p) {
  z[px * 2 + label] = std::log(p / (1.0 - p));
  z[px * 2 + (1 - label)] = 0.0;
}

ArchSpec arch() {
  ArchSpec a;
  a.input_channels = 3;
  a.num_classes = 4;
  a.base_layers = {{4, 3, 1}};
  a.branch_layers = {{4, 3, 1}, {4, 1, 1}};
  return a;
}

std::vector<TensorF> images(int n, std::uint64_t seed) {
  std::vector<TensorF> out;
  for (int i = 0; i < n; ++i) out.push_back(random_tensor({6, 7, 3}, seed + i, 0.0, 1.0).cast<float>());
  return out;
}

}  // namespace

TEST(PseudoLabelRule, HigherOfTwoConfidencesDecides) {
  TensorD z1({1, 1, 2}), z2({1, 1, 2});
  set_pixel(z1, 0, 1, 0.96);
  set_pixel(z2, 0, 1, 0.90);
  EXPECT_EQ(pseudo_label_rule(z1, z2, 0.95)(0, 0), 1);
  EXPECT_EQ(pseudo_label_rule(z2, z1, 0.95)(0, 0), 1);
}

TEST(PseudoLabelRule, DisagreementIsIgnored) {
  TensorD z1({1, 1, 2}), z2({1, 1, 2});
  set_pixel(z1, 0, 0, 0.99);
  set_pixel(z2, 0, 1, 0.99);
  EXPECT_EQ(pseudo_label_rule(z1, z2, 0.95)(0, 0), kIgnoreId);
}

TEST(PseudoLabelRule, ThresholdIsInclusive) {
  Prediction p{Mask::Constant(1, 1, 2), Eigen::ArrayXXd::Constant(1, 1, 0.95)};
  EXPECT_EQ(combine_labelers(p, p, 0.95)(0, 0), 2);
}

TEST(PseudoLabelRule, MatchesBruteForceOnScriptedLogits) {
  for (std::uint64_t seed = 1; seed <= 25; ++seed) {
    const TensorD z1 = random_tensor({4, 4, 3}, seed, -4.0, 4.0), z2 = random_tensor({4, 4, 3}, seed + 100, -4.0, 4.0);
    const double thr = 0.3 + 0.03 * double(seed);
    const Mask got = pseudo_label_rule(z1, z2, thr);
    for (Index px = 0; px < 16; ++px) {
      // Brute force: explicit softmax, explicit argmax, explicit rule.
      auto eval = [&](const TensorD& z, int& arg, double& conf) {
        double m = -INFINITY, s = 0.0;
        for (int c = 0; c < 3; ++c) m = std::max(m, z[px * 3 + c]);
        for (int c = 0; c < 3; ++c) s += std::exp(z[px * 3 + c] - m);
        arg = 0;
        for (int c = 1; c < 3; ++c)
          if (z[px * 3 + c] > z[px * 3 + arg]) arg = c;
        conf = std::exp(z[px * 3 + arg] - m) / s;
      };
      int a1, a2;
      double c1, c2;
      eval(z1, a1, c1);
      eval(z2, a2, c2);
      const std::uint8_t expect = (a1 == a2 && std::max(c1, c2) >= thr) ? std::uint8_t(a1) : kIgnoreId;
      EXPECT_EQ(got.data()[px], expect) << "seed " << seed << " pixel " << px;
    }
  }
}

TEST(PseudoLabelRule, ShapeMismatchThrows) {
  EXPECT_THROW(pseudo_label_rule(TensorD::zeros({2, 2, 3}), TensorD::zeros({2, 3, 3}), 0.5), ShapeError);
}

TEST(LabelDataset, UnreachableThresholdLabelsNothing) {
  const FctnModel<float> m(arch(), 3);
  const auto imgs = images(4, 1);
  const PseudoLabelSet set = label_dataset(m, std::span<const TensorF>(imgs), PseudoLabelConfig{1.0});
  ASSERT_EQ(set.samples.size(), 4u);
  for (const auto& s : set.samples) EXPECT_EQ(s.coverage, 0.0);
  EXPECT_EQ(set.summary.labeled_pixels, 0);
}

TEST(LabelDataset, ZeroThresholdWithEqualLabelersLabelsEverything) {
  FctnModel<float> m(arch(), 3);
  for (auto& [name, p] : m.params())
    if (name.rfind("branch2.", 0) == 0) p.value = m.params().value("branch1." + name.substr(8));
  const auto imgs = images(3, 7);
  const PseudoLabelSet set = label_dataset(m, std::span<const TensorF>(imgs), PseudoLabelConfig{0.0});
  for (const auto& s : set.samples) EXPECT_EQ(s.coverage, 1.0);
  EXPECT_EQ(set.summary.mean_coverage, 1.0);
}

TEST(LabelDataset, SummaryPartitionsLabeledPixels) {
  const FctnModel<float> m(arch(), 5);
  const auto imgs = images(5, 3);
  const PseudoLabelSet set = label_dataset(m, std::span<const TensorF>(imgs), PseudoLabelConfig{0.3});
  std::int64_t total = 0;
  for (auto c : set.summary.class_counts) total += c;
  EXPECT_EQ(total, set.summary.labeled_pixels);
  EXPECT_EQ(set.summary.total_pixels, 5 * 6 * 7);
}

TEST(LabelDataset, ThreadsDoNotChangeResultOrOrder) {
  const FctnModel<float> m(arch(), 5);
  const auto imgs = images(9, 3);
  const PseudoLabelSet a = label_dataset(m, std::span<const TensorF>(imgs), PseudoLabelConfig{0.3}, 1);
  const PseudoLabelSet b = label_dataset(m, std::span<const TensorF>(imgs), PseudoLabelConfig{0.3}, 4);
  for (std::size_t i = 0; i < imgs.size(); ++i) {
    EXPECT_TRUE((a.samples[i].mask == b.samples[i].mask).all());
    EXPECT_EQ(a.samples[i].image, imgs[i]);
  }
}

TEST(LabelDataset, EmptyTargetSetThrows) {
  const FctnModel<float> m(arch(), 5);
  EXPECT_THROW(label_dataset(m, std::span<const TensorF>{}, PseudoLabelConfig{}), Error);
}

TEST(LabelImage, TargetBranchIsNotConsulted) {
  FctnModel<float> m(arch(), 5);
  const TensorF img = images(1, 2).front();
  const Mask before = label_image(m, img, PseudoLabelConfig{0.3}).mask;
  for (auto& [name, p] : m.params())
    if (name.rfind("branch_t.", 0) == 0) p.value.data().setRandom();
  EXPECT_TRUE((label_image(m, img, PseudoLabelConfig{0.3}).mask == before).all());
}
