#pragma once

#include "fctn/nn.hpp"

#include <array>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace fctn {

/// The three heads on top of the shared base: two labelers and the
/// target-specific branch.
enum class Branch { F1, F2, Ft };

inline constexpr std::array<Branch, 3> kAllBranches = {Branch::F1, Branch::F2, Branch::Ft};

/// Parameter namespace of a branch ("branch1", "branch2", "branch_t").
std::string_view branch_namespace(Branch b);
Branch parse_branch(std::string_view name);

/// Network geometry shared by all three branches.
struct ArchSpec {
  int input_channels = 3;
  int num_classes = 8;
  std::vector<ConvSpec> base_layers;
  std::vector<ConvSpec> branch_layers;

  /// Laptop-sized reference: a 4-layer dilated base and 3-layer heads.
  static ArchSpec desk_default(int num_classes = 8);

  /// Depth D of the base output, before the two coordinate maps are appended.
  int base_depth() const;
  int branch_input_depth() const { return base_depth() + 2; }

  /// Throws Error on an inconsistent spec (empty stacks, even kernels, last
  /// branch layer not emitting num_classes channels, ...).
  void validate() const;

  friend bool operator==(const ArchSpec&, const ArchSpec&) = default;
};

std::string param_name(std::string_view ns, std::size_t layer, std::string_view what);

/// Parameter names and shapes the spec implies, in sorted order.
std::map<std::string, Shape> expected_param_shapes(const ArchSpec& spec);

/// Tri-branch segmentation network: base F, labelers F1/F2, target head Ft.
template <typename Scalar>
class FctnModel {
 public:
  FctnModel(ArchSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
    spec_.validate();
    std::mt19937_64 seeds(seed);
    init_stack("base", spec_.input_channels, spec_.base_layers, seeds);
    for (Branch b : kAllBranches)
      init_stack(std::string(branch_namespace(b)), spec_.branch_input_depth(), spec_.branch_layers, seeds);
  }

  /// Adopts existing parameters; throws ShapeError naming the first
  /// parameter that is missing or has the wrong shape.
  FctnModel(ArchSpec spec, ParamStore<Scalar> params) : spec_(std::move(spec)), params_(std::move(params)) {
    spec_.validate();
    const auto expected = expected_param_shapes(spec_);
    for (const auto& [name, shape] : expected) {
      if (!params_.contains(name)) throw ShapeError("parameter " + name + " missing");
      if (params_.value(name).shape() != shape)
        throw ShapeError("parameter " + name + " has shape " + shape_str(params_.value(name).shape()) +
                         ", architecture expects " + shape_str(shape));
    }
    if (params_.size() != expected.size()) {
      for (const auto& [name, _] : params_)
        if (!expected.count(name)) throw ShapeError("parameter " + name + " not part of the architecture");
    }
  }

  const ArchSpec& spec() const { return spec_; }
  ParamStore<Scalar>& params() { return params_; }
  const ParamStore<Scalar>& params() const { return params_; }

  template <typename Other>
  FctnModel<Other> cast() const {
    return FctnModel<Other>(spec_, params_.template cast<Other>());
  }

 private:
  void init_stack(const std::string& ns, Index in_channels, const std::vector<ConvSpec>& layers,
                  std::mt19937_64& seeds) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      ConvLayer<Scalar> layer = init_conv<Scalar>(in_channels, layers[i], seeds());
      params_.add(param_name(ns, i, "kernel"), std::move(layer.kernel));
      params_.add(param_name(ns, i, "bias"), std::move(layer.bias));
      in_channels = layers[i].out_channels;
    }
  }

  ArchSpec spec_;
  ParamStore<Scalar> params_;
};

/// Lazily exposes model parameters as leaves of one graph. Parameters that
/// a forward pass never touches never become leaves, so they receive no
/// gradient from that graph.
template <typename Scalar>
class Binding {
 public:
  Binding(Graph<Scalar>& graph, const FctnModel<Scalar>& model, bool trainable = true)
      : graph_(graph), model_(model), trainable_(trainable) {}

  Graph<Scalar>& graph() const { return graph_; }
  const FctnModel<Scalar>& model() const { return model_; }

  Var<Scalar> operator()(const std::string& name) {
    auto it = leaves_.find(name);
    if (it != leaves_.end()) return it->second;
    Var<Scalar> v = graph_.leaf(model_.params().value(name), trainable_);
    leaves_.emplace(name, v);
    return v;
  }

  const std::map<std::string, Var<Scalar>>& leaves() const { return leaves_; }

  /// Adds `weight` times the gradient of every bound leaf into `store`.
  /// Leaves that backward did not reach contribute zeros.
  void accumulate_into(ParamStore<Scalar>& store, Scalar weight = Scalar(1)) const {
    for (const auto& [name, v] : leaves_) {
      auto g = v.grad();
      if (!g) g = Tensor<Scalar>::zeros(v.shape());
      if (weight != Scalar(1)) g->data() *= weight;
      store.accumulate_grad(name, *g);
    }
  }

 private:
  Graph<Scalar>& graph_;
  const FctnModel<Scalar>& model_;
  bool trainable_;
  std::map<std::string, Var<Scalar>> leaves_;
};

/// Normalized pixel coordinates, H x W x 2: channel 0 holds x/W and
/// channel 1 holds y/H for zero-based pixel indices.
template <typename Scalar>
Tensor<Scalar> coord_maps(Index height, Index width) {
  if (height < 1 || width < 1) throw ShapeError("coord_maps: empty extent");
  Tensor<Scalar> out({height, width, 2});
  for (Index y = 0; y < height; ++y)
    for (Index x = 0; x < width; ++x) {
      out[(y * width + x) * 2] = Scalar(x) / Scalar(width);
      out[(y * width + x) * 2 + 1] = Scalar(y) / Scalar(height);
    }
  return out;
}

template <typename Scalar>
Var<Scalar> conv_stack(Binding<Scalar>& params, std::string_view ns, const std::vector<ConvSpec>& layers,
                       Var<Scalar> x, bool relu_last) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    x = conv2d(x, params(param_name(ns, i, "kernel")), params(param_name(ns, i, "bias")), layers[i].dilation);
    if (relu_last || i + 1 < layers.size()) x = relu(x);
  }
  return x;
}

/// Shared base F: conv + relu stack, then the coordinate maps appended
/// along depth. Output is H x W x (D + 2).
template <typename Scalar>
Var<Scalar> forward_base(Binding<Scalar>& params, const Var<Scalar>& image) {
  const ArchSpec& spec = params.model().spec();
  const Shape& s = image.shape();
  if (s.size() != 3 || s[2] != spec.input_channels)
    throw ShapeError("forward_base: image " + shape_str(s) + " does not have " +
                     std::to_string(spec.input_channels) + " channels");
  Var<Scalar> features = conv_stack(params, "base", spec.base_layers, image, true);
  return concat_channels(features, params.graph().constant(coord_maps<Scalar>(s[0], s[1])));
}

/// One head: conv stack with relu between layers and raw logits at the end.
template <typename Scalar>
Var<Scalar> forward_branch(Binding<Scalar>& params, Branch which, const Var<Scalar>& features) {
  const ArchSpec& spec = params.model().spec();
  if (features.value().rank() != 3 || features.shape()[2] != spec.branch_input_depth())
    throw ShapeError("forward_branch: features " + shape_str(features.shape()) + " do not have depth " +
                     std::to_string(spec.branch_input_depth()));
  return conv_stack(params, branch_namespace(which), spec.branch_layers, features, false);
}

/// Per-pixel argmax and its softmax probability.
struct Prediction {
  Mask labels;
  Eigen::ArrayXXd confidence;  ///< row-major semantics: (y, x)
};

/// Argmax over channels of H x W x C logits; ties go to the smaller class id.
template <typename Scalar>
Prediction decode_logits(const Tensor<Scalar>& logits) {
  const Index h = logits.dim(0), w = logits.dim(1), c = logits.dim(2);
  const Tensor<Scalar> probs = softmax_channel(logits);
  Prediction out{Mask(h, w), Eigen::ArrayXXd(h, w)};
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      const Index base = (y * w + x) * c;
      Index best = 0;
      for (Index k = 1; k < c; ++k)
        if (logits[base + k] > logits[base + best]) best = k;
      out.labels(y, x) = std::uint8_t(best);
      out.confidence(y, x) = double(probs[base + best]);
    }
  return out;
}

/// Logits of the requested branches for one image, sharing one base pass.
template <typename Scalar>
std::vector<Tensor<Scalar>> infer_logits(const FctnModel<Scalar>& model, const Tensor<Scalar>& image,
                                         std::span<const Branch> which) {
  Graph<Scalar> g;
  Binding<Scalar> params(g, model, false);
  Var<Scalar> features = forward_base(params, g.constant(image));
  std::vector<Tensor<Scalar>> out;
  for (Branch b : which) out.push_back(forward_branch(params, b, features).value());
  return out;
}

template <typename Scalar>
Prediction predict(const FctnModel<Scalar>& model, Branch which, const Tensor<Scalar>& image) {
  const std::array<Branch, 1> one = {which};
  return decode_logits(infer_logits(model, image, one).front());
}

}  // namespace fctn
