#include "fctn/grad_check.hpp"
#include "fctn/losses.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

using namespace fctn;
using fctn::test::random_mask;
using fctn::test::random_tensor;
using fctn::test::weight_oracle;

namespace {

Mask rows(Index h, Index w, std::initializer_list<std::pair<std::uint8_t, Index>> runs) {
  Mask m(h, w);
  Index i = 0;
  for (auto [label, n] : runs)
    for (Index k = 0; k < n; ++k) m.data()[i++] = label;
  EXPECT_EQ(i, h * w);
  return m;
}

ArchSpec toy_arch(int classes) {
  ArchSpec a;
  a.input_channels = 1;
  a.num_classes = classes;
  a.base_layers = {{2, 1, 1}};
  a.branch_layers = {{classes, 1, 1}};
  return a;
}

}  // namespace

TEST(ClassWeights, UniformHalves) {
  std::vector<Mask> masks = {rows(2, 4, {{0, 4}, {1, 4}}), rows(2, 4, {{1, 4}, {0, 4}})};
  const ClassWeights w = class_weights(masks, 2);
  EXPECT_DOUBLE_EQ(w.alpha[0], 1.0);
  EXPECT_DOUBLE_EQ(w.alpha[1], 1.0);
}

TEST(ClassWeights, MedianFrequencyExample) {
  // Every image is 60% class 0, 30% class 1, 10% class 2.
  std::vector<Mask> masks(3, rows(1, 10, {{0, 6}, {1, 3}, {2, 1}}));
  const ClassWeights w = class_weights(masks, 3);
  EXPECT_NEAR(w.median_freq, 0.3, 1e-15);
  EXPECT_NEAR(w.alpha[0], 0.5, 1e-12);
  EXPECT_NEAR(w.alpha[1], 1.0, 1e-12);
  EXPECT_NEAR(w.alpha[2], 3.0, 1e-12);
}

TEST(ClassWeights, DenominatorOnlyCountsImagesContainingTheClass) {
  // Class 2 only in image A (4 of A's 8 pixels): freq = 0.5, not 4/16.
  const Mask a = rows(2, 4, {{0, 2}, {2, 4}, {1, 2}});
  const Mask b = rows(2, 4, {{0, 4}, {1, 4}});
  const ClassWeights w = class_weights(std::vector<Mask>{a, b}, 3);
  EXPECT_NEAR(w.freq[2], 0.5, 1e-15);
  EXPECT_NEAR(w.freq[0], 6.0 / 16.0, 1e-15);
  const auto oracle = weight_oracle({a, b}, 3);
  for (int c = 0; c < 3; ++c) EXPECT_NEAR(w.alpha[c], oracle[c], 1e-12);
}

TEST(ClassWeights, MatchesOracleOnRandomMasks) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    std::mt19937_64 rng(seed);
    std::vector<Mask> masks;
    const int classes = 2 + int(seed % 7);
    for (int i = 0; i < 5; ++i) {
      // Restrict each image to a random subset of classes so presence varies.
      Mask m = random_mask(6, 7, classes, 0.1, rng());
      const int cap = 1 + int(rng() % classes);
      for (Index k = 0; k < m.size(); ++k)
        if (m.data()[k] != kIgnoreId && m.data()[k] >= cap) m.data()[k] = std::uint8_t(m.data()[k] % cap);
      masks.push_back(m);
    }
    const ClassWeights w = class_weights(masks, classes);
    const auto oracle = weight_oracle(masks, classes);
    for (int c = 0; c < classes; ++c) EXPECT_NEAR(w.alpha[c], oracle[c], 1e-12) << "seed " << seed << " class " << c;
  }
}

TEST(ClassWeights, EvenCountMedianAveragesMiddlePair) {
  std::vector<Mask> masks(1, rows(1, 10, {{0, 4}, {1, 3}, {2, 2}, {3, 1}}));
  const ClassWeights w = class_weights(masks, 4);
  EXPECT_NEAR(w.median_freq, 0.25, 1e-15);
}

TEST(ClassWeights, AbsentClassesGetUnitWeight) {
  std::vector<Mask> masks(1, rows(1, 4, {{0, 3}, {1, 1}}));
  const ClassWeights w = class_weights(masks, 4);
  EXPECT_EQ(w.alpha[2], 1.0);
  EXPECT_EQ(w.alpha[3], 1.0);
  EXPECT_EQ(w.absent, (std::vector<int>{2, 3}));
}

TEST(ClassWeights, EmptyInputThrows) {
  EXPECT_THROW(class_weights(std::vector<Mask>{}, 3), Error);
  EXPECT_THROW(class_weights(std::vector<Mask>{Mask::Constant(2, 2, kIgnoreId)}, 3), Error);
}

TEST(WeightConstraint, SelfSimilarityAndAntipodes) {
  FctnModel<double> m(tiny_arch(3), 2);
  for (auto& [name, p] : m.params())
    if (name.rfind("branch2.", 0) == 0) p.value = m.params().value("branch1." + name.substr(8));
  EXPECT_EQ(weight_constraint(m), 1.0);
  for (auto& [name, p] : m.params())
    if (name.rfind("branch2.", 0) == 0) p.value.data() = -m.params().value("branch1." + name.substr(8)).data();
  EXPECT_EQ(weight_constraint(m), -1.0);
}

TEST(WeightConstraint, HandPlantedOrthogonal) {
  FctnModel<double> m(tiny_arch(3), 2);
  for (auto& [name, p] : m.params())
    if (name.rfind("branch", 0) == 0 && name.find("kernel") != std::string::npos) p.value.data().setZero();
  m.params().at("branch1.conv0.kernel").value[0] = 1.0;
  m.params().at("branch2.conv0.kernel").value[1] = 1.0;
  EXPECT_EQ(weight_constraint(m), 0.0);
}

TEST(WeightConstraint, IgnoresBiasesAndScale) {
  FctnModel<double> m(tiny_arch(3), 5);
  const double before = weight_constraint(m);
  EXPECT_GE(before, -1.0);
  EXPECT_LE(before, 1.0);
  m.params().at("branch1.conv1.bias").value.data().setConstant(3.0);
  m.params().at("branch2.conv0.kernel").value.data() *= 1.0;
  EXPECT_EQ(weight_constraint(m), before);
  for (auto& [name, p] : m.params())
    if (name.rfind("branch2.", 0) == 0) p.value.data() *= 7.5;
  EXPECT_NEAR(weight_constraint(m), before, 1e-14);
}

TEST(WeightConstraint, ZeroNormThrows) {
  FctnModel<double> m(tiny_arch(3), 2);
  for (auto& [name, p] : m.params())
    if (name.rfind("branch1.", 0) == 0) p.value.data().setZero();
  EXPECT_THROW(weight_constraint(m), DomainError);
}

TEST(CrossEntropy, ConfidentLogitsNearZero) {
  Graph<double> g;
  Mask m(1, 2);
  m << 0, 2;
  const TensorD z({1, 2, 3}, {30, 0, 0, 0, 0, 30});
  EXPECT_LT(ce_loss(g.constant(z), m).value.value().item(), 1e-5);
}

TEST(CrossEntropy, UniformLogitsGiveLogC) {
  Graph<double> g;
  const Mask m = random_mask(3, 4, 6, 0.0, 1);
  const auto l = ce_loss(g.constant(TensorD::constant({3, 4, 6}, 0.3)), m);
  EXPECT_NEAR(l.value.value().item(), std::log(6.0), 1e-9);
  EXPECT_FALSE(l.all_ignored);
}

TEST(CrossEntropy, HandEvaluatedWeightedPixel) {
  Graph<double> g;
  Mask m(1, 1);
  m << 1;
  ClassWeights w;
  w.alpha = {1.0, 3.0};
  const auto l = ce_loss(g.constant(TensorD({1, 1, 2}, {0.0, std::log(3.0)})), m, &w);
  EXPECT_NEAR(l.value.value().item(), -3.0 * std::log(0.75), 1e-14);
}

TEST(CrossEntropy, AllIgnoredIsFlaggedZero) {
  Graph<double> g;
  auto z = g.leaf(random_tensor({2, 2, 3}, 1));
  const auto l = ce_loss(z, Mask::Constant(2, 2, kIgnoreId));
  EXPECT_TRUE(l.all_ignored);
  EXPECT_EQ(l.value.value().item(), 0.0);
}

TEST(CrossEntropy, LabelOutOfRangeThrows) {
  Graph<double> g;
  Mask m(1, 1);
  m << 3;
  EXPECT_THROW(ce_loss(g.constant(TensorD::zeros({1, 1, 3})), m), DomainError);
}

TEST(CrossEntropy, DecreasesWithTrueClassProbability) {
  Mask m(1, 1);
  m << 0;
  double prev = INFINITY;
  for (double z0 = -3.0; z0 <= 3.0; z0 += 0.5) {
    Graph<double> g;
    const double v = ce_loss(g.constant(TensorD({1, 1, 3}, {z0, 0.2, -0.4})), m).value.value().item();
    EXPECT_GE(v, 0.0);
    EXPECT_LT(v, prev);
    prev = v;
  }
}

TEST(TotalLoss, NoTargetIsWeightPlusSource) {
  const FctnModel<double> m(tiny_arch(3), 4);
  const std::vector<LabeledImage<double>> src = {{random_tensor({5, 6, 3}, 1, 0, 1), random_mask(5, 6, 3, 0.1, 2)},
                                                 {random_tensor({5, 6, 3}, 3, 0, 1), random_mask(5, 6, 3, 0.0, 4)}};
  Graph<double> g;
  Binding<double> p(g, m);
  const auto b = total_loss<double>(p, src, std::nullopt, nullptr, 7.0, 100.0);
  EXPECT_FALSE(b.target_term.has_value());
  EXPECT_DOUBLE_EQ(b.total.value().item(), 7.0 * b.weight_term.value().item() + b.source_term.value().item());
}

TEST(TotalLoss, BetaZeroMatchesSourceObjective) {
  const FctnModel<double> m(tiny_arch(3), 4);
  const std::vector<LabeledImage<double>> src = {{random_tensor({5, 6, 3}, 1, 0, 1), random_mask(5, 6, 3, 0.1, 2)}};
  const std::vector<LabeledImage<double>> tgt = {{random_tensor({5, 6, 3}, 5, 0, 1), random_mask(5, 6, 3, 0.5, 6)}};
  const ClassWeights w = class_weights(std::vector<Mask>{src[0].mask}, 3);
  Graph<double> g;
  Binding<double> p(g, m);
  const double with_target =
      total_loss<double>(p, src, std::span<const LabeledImage<double>>(tgt), &w, 5.0, 0.0).total.value().item();
  const double without = total_loss<double>(p, src, std::nullopt, nullptr, 5.0, 0.0).total.value().item();
  EXPECT_NEAR(with_target, without, 1e-9);
}

TEST(TotalLoss, TargetWithoutWeightsThrows) {
  const FctnModel<double> m(tiny_arch(3), 4);
  const std::vector<LabeledImage<double>> src = {{random_tensor({4, 4, 3}, 1, 0, 1), random_mask(4, 4, 3, 0.0, 2)}};
  Graph<double> g;
  Binding<double> p(g, m);
  EXPECT_THROW(total_loss<double>(p, src, std::span<const LabeledImage<double>>(src), nullptr, 1.0, 1.0), Error);
}

TEST(TotalLoss, SourceTermAveragesLabelerBranches) {
  // Scripted toy: zero kernels, so each branch's logits equal its bias. The
  // biases are chosen so F1's CE is 0.2 and F2's is 0.4 on all-zero labels.
  FctnModel<double> m(toy_arch(2), 1);
  for (auto& [_, p] : m.params()) p.value.data().setZero();
  auto set_ce = [&](const char* ns, double ce) {
    const double p0 = std::exp(-ce);
    m.params().at(std::string(ns) + ".conv0.bias").value = TensorD({2}, {std::log(p0 / (1.0 - p0)), 0.0});
  };
  set_ce("branch1", 0.2);
  set_ce("branch2", 0.4);
  m.params().at("branch1.conv0.kernel").value[0] = 1e-3;  // non-zero norm for the weight term
  m.params().at("branch2.conv0.kernel").value[0] = 1e-3;
  const std::vector<LabeledImage<double>> src = {{random_tensor({3, 3, 1}, 1), Mask::Zero(3, 3)}};
  Graph<double> g;
  Binding<double> p(g, m);
  const auto b = total_loss<double>(p, src, std::nullopt, nullptr, 1.0, 1.0);
  EXPECT_NEAR(b.source_term.value().item(), 0.3, 1e-12);
}

TEST(TotalLoss, TargetBranchUntouchedWithoutTargetBatch) {
  const FctnModel<double> m(tiny_arch(3), 4);
  const std::vector<LabeledImage<double>> src = {{random_tensor({5, 6, 3}, 1, 0, 1), random_mask(5, 6, 3, 0.1, 2)}};
  Graph<double> g;
  Binding<double> p(g, m);
  g.backward(total_loss<double>(p, src, std::nullopt, nullptr, 3.0, 1.0).total);
  ParamStore<double> grads = m.params().cast<double>();
  p.accumulate_into(grads);
  for (const auto& [name, q] : grads)
    if (name.rfind("branch_t.", 0) == 0) {
      EXPECT_TRUE(!q.grad || q.grad->data().isZero(0.0)) << name;
    }
}

TEST(TotalLoss, IgnoredPixelsAreTransparent) {
  const FctnModel<double> m(tiny_arch(3), 4);
  const TensorD img = random_tensor({5, 6, 3}, 1, 0, 1);
  const Mask full = random_mask(5, 6, 3, 0.0, 2);
  Mask partial = full;
  partial(1, 1) = partial(3, 4) = kIgnoreId;
  Graph<double> g;
  Binding<double> p(g, m, false);
  Var<double> logits = forward_branch(p, Branch::F1, forward_base(p, g.constant(img)));
  // Recompute the partial loss by hand from the full per-pixel losses.
  const TensorD probs = softmax_channel(logits.value());
  double sum = 0.0;
  int n = 0;
  for (Index y = 0; y < 5; ++y)
    for (Index x = 0; x < 6; ++x)
      if (partial(y, x) != kIgnoreId) {
        sum -= std::log(probs[(y * 6 + x) * 3 + partial(y, x)]);
        ++n;
      }
  EXPECT_NEAR(ce_loss(logits, partial).value.value().item(), sum / n, 1e-12);
}

TEST(Losses, GradientChecksOnTinyModel) {
  const FctnModel<double> m(tiny_arch(3), 7);
  const std::vector<LabeledImage<double>> src = {{random_tensor({4, 5, 3}, 1, 0, 1), random_mask(4, 5, 3, 0.1, 2)}};
  const std::vector<LabeledImage<double>> tgt = {{random_tensor({4, 5, 3}, 3, 0, 1), random_mask(4, 5, 3, 0.4, 4)}};
  const ClassWeights w = class_weights(std::vector<Mask>{src[0].mask}, 3);
  EXPECT_TRUE(grad_check_model(m, [](Binding<double>& p) { return weight_constraint(p); }).passed());
  const auto r = grad_check_model(m, [&](Binding<double>& p) {
    return total_loss<double>(p, src, std::span<const LabeledImage<double>>(tgt), &w, 2.0, 3.0).total;
  });
  EXPECT_TRUE(r.passed()) << r.max_error();
}
