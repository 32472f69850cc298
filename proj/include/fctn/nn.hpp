#pragma once

#include "fctn/autodiff.hpp"

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace fctn {

/// Geometry of one stride-1, "same"-padded convolution.
struct ConvSpec {
  int out_channels = 0;
  int kernel_size = 3;
  int dilation = 1;

  friend bool operator==(const ConvSpec&, const ConvSpec&) = default;
};

namespace detail {

template <typename Scalar>
using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Unfolds an H x W x C map into (H*W) x (kh*kw*C) patches, column order (ky, kx, c).
template <typename Scalar>
RowMat<Scalar> im2col(const Scalar* in, Index h, Index w, Index c, Index kh, Index kw, Index dilation) {
  RowMat<Scalar> col(h * w, kh * kw * c);
  const Index oy = kh / 2, ox = kw / 2;
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      Scalar* row = col.data() + (y * w + x) * col.cols();
      for (Index ky = 0; ky < kh; ++ky) {
        const Index iy = y + (ky - oy) * dilation;
        for (Index kx = 0; kx < kw; ++kx) {
          const Index ix = x + (kx - ox) * dilation;
          Scalar* dst = row + (ky * kw + kx) * c;
          if (iy < 0 || iy >= h || ix < 0 || ix >= w) {
            std::fill(dst, dst + c, Scalar(0));
          } else {
            const Scalar* src = in + (iy * w + ix) * c;
            std::copy(src, src + c, dst);
          }
        }
      }
    }
  }
  return col;
}

// Adjoint of im2col: scatter-adds patch gradients back onto the image.
template <typename Scalar>
void col2im_add(const RowMat<Scalar>& col, Scalar* out, Index h, Index w, Index c, Index kh, Index kw,
                Index dilation) {
  const Index oy = kh / 2, ox = kw / 2;
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      const Scalar* row = col.data() + (y * w + x) * col.cols();
      for (Index ky = 0; ky < kh; ++ky) {
        const Index iy = y + (ky - oy) * dilation;
        if (iy < 0 || iy >= h) continue;
        for (Index kx = 0; kx < kw; ++kx) {
          const Index ix = x + (kx - ox) * dilation;
          if (ix < 0 || ix >= w) continue;
          const Scalar* src = row + (ky * kw + kx) * c;
          Scalar* dst = out + (iy * w + ix) * c;
          for (Index i = 0; i < c; ++i) dst[i] += src[i];
        }
      }
    }
  }
}

}  // namespace detail

/// Dilated 2-D convolution with zero "same" padding and stride 1.
///
/// input: H x W x Cin, kernel: kh x kw x Cin x Cout, bias: Cout. The output
/// keeps the spatial size. Implemented as an im2col patch matrix times the
/// kernel viewed as a (kh*kw*Cin) x Cout matrix.
template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& input, const Var<Scalar>& kernel, const Var<Scalar>& bias, int dilation) {
  using RowMat = detail::RowMat<Scalar>;
  using Vector = typename Tensor<Scalar>::Vector;
  detail::check_same_graph(input, kernel);
  detail::check_same_graph(input, bias);
  const Shape& is = input.shape();
  const Shape& ks = kernel.shape();
  if (dilation < 1) throw ShapeError("conv2d: dilation must be positive, got " + std::to_string(dilation));
  if (is.size() != 3 || ks.size() != 4) throw ShapeError("conv2d: expected H x W x C input and 4-d kernel");
  if (ks[0] % 2 == 0 || ks[1] % 2 == 0) throw ShapeError("conv2d: kernel extent must be odd, got " + shape_str(ks));
  if (ks[2] != is[2])
    throw ShapeError("conv2d: input has " + std::to_string(is[2]) + " channels, kernel expects " +
                     std::to_string(ks[2]));
  if (bias.size() != ks[3]) throw ShapeError("conv2d: bias length != output channels");

  const Index h = is[0], w = is[1], cin = is[2], kh = ks[0], kw = ks[1], cout = ks[3];
  const Index taps = kh * kw * cin;
  const bool pointwise = kh == 1 && kw == 1;

  RowMat col;
  if (!pointwise) col = detail::im2col(input.value().data().data(), h, w, cin, kh, kw, Index(dilation));
  Eigen::Map<const RowMat> patches(pointwise ? input.value().data().data() : col.data(), h * w, taps);
  Eigen::Map<const RowMat> k(kernel.value().data().data(), taps, cout);

  Tensor<Scalar> out({h, w, cout});
  Eigen::Map<RowMat> o(out.data().data(), h * w, cout);
  o.noalias() = patches * k;
  o.rowwise() += bias.value().data().transpose();

  // Patches are only needed again for the kernel gradient.
  if (!kernel.requires_grad()) col.resize(0, 0);

  return input.graph().record(
      std::move(out), {input, kernel, bias},
      [=, col = std::move(col)](Graph<Scalar>& gr, const Vector& go) {
        Eigen::Map<const RowMat> g(go.data(), h * w, cout);
        Eigen::Map<const RowMat> k(kernel.value().data().data(), taps, cout);
        if (kernel.requires_grad()) {
          Eigen::Map<const RowMat> patches(pointwise ? input.value().data().data() : col.data(), h * w, taps);
          RowMat gk = patches.transpose() * g;
          gr.accumulate(kernel, Eigen::Map<const Vector>(gk.data(), gk.size()));
        }
        if (bias.requires_grad()) gr.accumulate(bias, g.colwise().sum().transpose());
        if (input.requires_grad()) {
          RowMat gcol = g * k.transpose();
          if (pointwise) {
            gr.accumulate(input, Eigen::Map<const Vector>(gcol.data(), gcol.size()));
          } else {
            Vector gin = Vector::Zero(h * w * cin);
            detail::col2im_add(gcol, gin.data(), h, w, cin, kh, kw, Index(dilation));
            gr.accumulate(input, gin);
          }
        }
      });
}

/// Convolution parameters: kernel kh x kw x Cin x Cout, bias Cout.
template <typename Scalar>
struct ConvLayer {
  Tensor<Scalar> kernel;
  Tensor<Scalar> bias;
  int dilation = 1;
};

/// Graph-free convolution of a single feature map.
template <typename Scalar>
Tensor<Scalar> conv2d_dilated(const Tensor<Scalar>& input, const ConvLayer<Scalar>& layer) {
  Graph<Scalar> g;
  auto out = conv2d(g.constant(input), g.constant(layer.kernel), g.constant(layer.bias), layer.dilation);
  return out.value();
}

// ---------------------------------------------------------------------------
// Parameters

template <typename Scalar>
struct Parameter {
  Tensor<Scalar> value;
  std::optional<Tensor<Scalar>> grad;
};

/// Named parameters, iterated in sorted-name order.
template <typename Scalar>
class ParamStore {
 public:
  using Map = std::map<std::string, Parameter<Scalar>>;

  void add(const std::string& name, Tensor<Scalar> value) {
    if (!params_.emplace(name, Parameter<Scalar>{std::move(value), std::nullopt}).second)
      throw Error("duplicate parameter name: " + name);
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  Parameter<Scalar>& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw Error("unknown parameter: " + name);
    return it->second;
  }
  const Parameter<Scalar>& at(const std::string& name) const { return const_cast<ParamStore*>(this)->at(name); }

  const Tensor<Scalar>& value(const std::string& name) const { return at(name).value; }

  std::size_t size() const { return params_.size(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [name, _] : params_) out.push_back(name);
    return out;
  }

  /// Adds `g` into the stored gradient of `name`, creating it if absent.
  void accumulate_grad(const std::string& name, const Tensor<Scalar>& g) {
    auto& p = at(name);
    if (g.shape() != p.value.shape()) throw ShapeError("gradient shape mismatch for " + name);
    if (p.grad)
      p.grad->data() += g.data();
    else
      p.grad = g;
  }

  void clear_grads() {
    for (auto& [_, p] : params_) p.grad.reset();
  }

  Index num_values() const {
    Index n = 0;
    for (const auto& [_, p] : params_) n += p.value.size();
    return n;
  }

  template <typename Other>
  ParamStore<Other> cast() const {
    ParamStore<Other> out;
    for (const auto& [name, p] : params_) out.add(name, p.value.template cast<Other>());
    return out;
  }

  friend bool operator==(const ParamStore& a, const ParamStore& b) {
    if (a.params_.size() != b.params_.size()) return false;
    for (auto ia = a.params_.begin(), ib = b.params_.begin(); ia != a.params_.end(); ++ia, ++ib)
      if (ia->first != ib->first || !(ia->second.value == ib->second.value)) return false;
    return true;
  }

 private:
  Map params_;
};

/// He-scaled normal initialization: N(0, 2 / fan_in), deterministic per seed.
template <typename Scalar>
Tensor<Scalar> he_normal(Shape shape, Index fan_in, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / double(fan_in)));
  Tensor<Scalar> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = Scalar(dist(rng));
  return t;
}

/// Fresh convolution parameters: He-normal kernel, zero bias.
template <typename Scalar>
ConvLayer<Scalar> init_conv(Index in_channels, const ConvSpec& spec, std::uint64_t seed) {
  const Index k = spec.kernel_size;
  return {he_normal<Scalar>({k, k, in_channels, spec.out_channels}, k * k * in_channels, seed),
          Tensor<Scalar>::zeros({spec.out_channels}), spec.dilation};
}

struct SgdOptimizer {
  double learning_rate;

  explicit SgdOptimizer(double lr) : learning_rate(lr) {
    if (!(lr > 0.0)) throw Error("learning rate must be positive");
  }
};

/// Plain SGD: p <- p - lr * grad(p) for every parameter, then clears the gradients.
template <typename Scalar>
void sgd_step(ParamStore<Scalar>& store, const SgdOptimizer& opt) {
  for (const auto& [name, p] : store)
    if (!p.grad) throw Error("sgd_step: parameter " + name + " has no gradient");
  const Scalar lr = Scalar(opt.learning_rate);
  for (auto& [_, p] : store) p.value.data() -= lr * p.grad->data();
  store.clear_grads();
}

}  // namespace fctn
