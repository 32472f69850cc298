#include "fctn/grad_check.hpp"
#include "fctn/losses.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace fctn;
using fctn::test::random_tensor;

namespace {

ArchSpec small_arch() {
  ArchSpec a;
  a.input_channels = 3;
  a.num_classes = 4;
  a.base_layers = {{5, 3, 1}, {6, 3, 2}};
  a.branch_layers = {{4, 3, 2}, {4, 1, 1}};
  return a;
}

Tensor<double> logits_of(const FctnModel<double>& m, Branch b, const TensorD& image) {
  const std::array<Branch, 1> one = {b};
  return infer_logits(m, image, std::span<const Branch>(one)).front();
}

}  // namespace

TEST(CoordMaps, RowValuesUseZeroBasedIndex) {
  const TensorD c = coord_maps<double>(3, 4);
  for (Index x = 0; x < 4; ++x) EXPECT_EQ(c[(1 * 4 + x) * 2], double(x) / 4.0);
  for (Index y = 0; y < 3; ++y) EXPECT_EQ(c[(y * 4 + 2) * 2 + 1], double(y) / 3.0);
}

TEST(CoordMaps, SinglePixelIsZero) {
  EXPECT_EQ(coord_maps<double>(1, 1), TensorD::zeros({1, 1, 2}));
  EXPECT_EQ(coord_maps<float>(5, 7), coord_maps<float>(5, 7));
  EXPECT_THROW(coord_maps<float>(0, 3), ShapeError);
}

TEST(Arch, DeskDefault) {
  const ArchSpec a = ArchSpec::desk_default(8);
  a.validate();
  ASSERT_EQ(a.base_layers.size(), 4u);
  EXPECT_EQ(a.base_layers[1].out_channels, 32);
  EXPECT_EQ(a.base_layers[3].dilation, 2);
  ASSERT_EQ(a.branch_layers.size(), 3u);
  EXPECT_EQ(a.branch_layers[0].dilation, 4);
  EXPECT_EQ(a.branch_layers[1].kernel_size, 1);
  EXPECT_EQ(a.branch_layers.back().out_channels, 8);
  EXPECT_EQ(a.branch_input_depth(), 66);
}

TEST(Arch, ValidationRejectsInconsistentSpecs) {
  ArchSpec a = small_arch();
  a.branch_layers.back().out_channels = 3;
  EXPECT_THROW(a.validate(), Error);
  a = small_arch();
  a.base_layers[0].kernel_size = 2;
  EXPECT_THROW(a.validate(), Error);
  a = small_arch();
  a.branch_layers.clear();
  EXPECT_THROW(a.validate(), Error);
}

TEST(Model, BranchesShareShapesAndNamespaces) {
  const FctnModel<float> m(small_arch(), 3);
  for (const auto& [name, p] : m.params()) {
    if (name.rfind("branch1.", 0) != 0) continue;
    const std::string suffix = name.substr(8);
    EXPECT_EQ(m.params().value("branch2." + suffix).shape(), p.value.shape());
    EXPECT_EQ(m.params().value("branch_t." + suffix).shape(), p.value.shape());
  }
  EXPECT_TRUE(m.params().contains("base.conv1.kernel"));
  EXPECT_EQ(m.params().value("branch_t.conv0.kernel").shape(), (Shape{3, 3, 8, 4}));
  EXPECT_EQ(m.params().size(), 4u + 3u * 4u);
}

TEST(Model, SeedDeterminesParameters) {
  EXPECT_TRUE(FctnModel<float>(small_arch(), 5).params() == FctnModel<float>(small_arch(), 5).params());
  EXPECT_FALSE(FctnModel<float>(small_arch(), 5).params() == FctnModel<float>(small_arch(), 6).params());
}

TEST(Model, AdoptingWrongShapesNamesTheParameter) {
  const FctnModel<float> m(small_arch(), 1);
  ArchSpec other = small_arch();
  other.branch_layers[0].out_channels = 7;
  try {
    FctnModel<float> bad(other, m.params());
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("branch1.conv0"), std::string::npos) << e.what();
  }
}

TEST(ForwardBase, DepthAndCoordinateChannels) {
  const FctnModel<double> m(small_arch(), 2);
  const TensorD img = random_tensor({6, 5, 3}, 1, 0.0, 1.0);
  Graph<double> g;
  Binding<double> p(g, m, false);
  const TensorD f = forward_base(p, g.constant(img)).value();
  ASSERT_EQ(f.shape(), (Shape{6, 5, 8}));
  const TensorD c = coord_maps<double>(6, 5);
  for (Index px = 0; px < 30; ++px) {
    EXPECT_EQ(f[px * 8 + 6], c[px * 2]);
    EXPECT_EQ(f[px * 8 + 7], c[px * 2 + 1]);
  }
}

TEST(ForwardBase, ZeroImageZeroWeights) {
  FctnModel<double> m(small_arch(), 2);
  for (auto& [_, p] : m.params()) p.value.data().setZero();
  Graph<double> g;
  Binding<double> p(g, m, false);
  const TensorD f = forward_base(p, g.constant(TensorD::zeros({4, 4, 3}))).value();
  for (Index px = 0; px < 16; ++px)
    for (Index c = 0; c < 6; ++c) EXPECT_EQ(f[px * 8 + c], 0.0);
}

TEST(ForwardBase, ChannelMismatchThrows) {
  const FctnModel<double> m(small_arch(), 2);
  Graph<double> g;
  Binding<double> p(g, m, false);
  EXPECT_THROW(forward_base(p, g.constant(TensorD::zeros({4, 4, 2}))), ShapeError);
  EXPECT_THROW(forward_branch(p, Branch::F1, g.constant(TensorD::zeros({4, 4, 5}))), ShapeError);
}

TEST(ForwardBranch, ShapeAndEqualizedWeights) {
  FctnModel<double> m(small_arch(), 4);
  const TensorD img = random_tensor({5, 7, 3}, 3, 0.0, 1.0);
  EXPECT_EQ(logits_of(m, Branch::Ft, img).shape(), (Shape{5, 7, 4}));
  for (auto& [name, p] : m.params())
    if (name.rfind("branch2.", 0) == 0) p.value = m.params().value("branch1." + name.substr(8));
  EXPECT_EQ(logits_of(m, Branch::F1, img), logits_of(m, Branch::F2, img));
}

TEST(ForwardBranch, PerturbingTargetBranchLeavesLabelersAlone) {
  FctnModel<double> m(small_arch(), 4);
  const TensorD img = random_tensor({5, 7, 3}, 3, 0.0, 1.0);
  const TensorD l1 = logits_of(m, Branch::F1, img), l2 = logits_of(m, Branch::F2, img),
                lt = logits_of(m, Branch::Ft, img);
  for (auto& [name, p] : m.params())
    if (name.rfind("branch_t.", 0) == 0) p.value.data().array() += 0.5;
  EXPECT_EQ(logits_of(m, Branch::F1, img), l1);
  EXPECT_EQ(logits_of(m, Branch::F2, img), l2);
  EXPECT_FALSE(logits_of(m, Branch::Ft, img) == lt);
}

TEST(Branch, NamesRoundTrip) {
  for (Branch b : kAllBranches) EXPECT_EQ(parse_branch(branch_namespace(b)), b);
  EXPECT_EQ(parse_branch("Ft"), Branch::Ft);
  EXPECT_THROW(parse_branch("F3"), Error);
}

TEST(Decode, ArgmaxMatchesScanOracle) {
  const TensorD z = random_tensor({4, 6, 5}, 8, -3.0, 3.0);
  const Prediction p = decode_logits(z);
  const TensorD probs = softmax_channel(z);
  for (Index y = 0; y < 4; ++y)
    for (Index x = 0; x < 6; ++x) {
      const Index base = (y * 6 + x) * 5;
      Index best = 0;
      for (Index c = 0; c < 5; ++c)
        if (z[base + c] > z[base + best]) best = c;
      EXPECT_EQ(p.labels(y, x), best);
      EXPECT_DOUBLE_EQ(p.confidence(y, x), probs[base + best]);
      EXPECT_GT(p.confidence(y, x), 0.0);
      EXPECT_LE(p.confidence(y, x), 1.0);
    }
}

TEST(Decode, UniformLogitsPickClassZero) {
  const Prediction p = decode_logits(TensorD::constant({2, 3, 4}, 1.5));
  EXPECT_TRUE((p.labels == 0).all());
  EXPECT_TRUE(((p.confidence - 0.25).abs() < 1e-15).all());
}

TEST(Decode, TiesGoToSmallerId) {
  const Prediction p = decode_logits(TensorD({1, 1, 4}, {0.0, 2.0, 2.0, 1.0}));
  EXPECT_EQ(p.labels(0, 0), 1);
}

TEST(Model, IsolationOfTargetBranchGradients) {
  const FctnModel<double> m(small_arch(), 9);
  const TensorD img = random_tensor({5, 6, 3}, 2, 0.0, 1.0);
  const Mask labels = test::random_mask(5, 6, 4, 0.1, 3);
  Graph<double> g;
  Binding<double> p(g, m);
  Var<double> f = forward_base(p, g.constant(img));
  auto loss = branch_nll_term<double>(p, f, std::span<const Branch>(kLabelingBranches), labels, {}, 1.0);
  Var<double> lt = forward_branch(p, Branch::Ft, f);  // bound, but not part of the loss
  (void)lt;
  g.backward(*loss);
  ParamStore<double> grads = m.params().cast<double>();
  p.accumulate_into(grads);
  for (const auto& [name, q] : grads) {
    ASSERT_TRUE(q.grad.has_value()) << name;
    const double norm = q.grad->data().cwiseAbs().maxCoeff();
    if (name.rfind("branch_t.", 0) == 0) {
      EXPECT_EQ(norm, 0.0) << name;
    } else if (name.find("kernel") != std::string::npos) {
      EXPECT_GT(norm, 0.0) << name;
    }
  }
}

TEST(Model, TinyEndToEndGradientCheck) {
  const FctnModel<double> m(tiny_arch(3), 12);
  const TensorD img = random_tensor({8, 8, 3}, 4, 0.0, 1.0);
  const Mask labels = test::random_mask(8, 8, 3, 0.2, 5);
  const auto r = grad_check_model(m, [&](Binding<double>& p) {
    Var<double> f = forward_base(p, p.graph().constant(img));
    Var<double> acc = ce_loss(forward_branch(p, Branch::F1, f), labels).value;
    acc = add(acc, ce_loss(forward_branch(p, Branch::F2, f), labels).value);
    return add(acc, ce_loss(forward_branch(p, Branch::Ft, f), labels).value);
  });
  EXPECT_TRUE(r.passed()) << r.max_error();
}
