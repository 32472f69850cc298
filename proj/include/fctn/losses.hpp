#pragma once

#include "fctn/model.hpp"

#include <optional>
#include <span>
#include <vector>

namespace fctn {

/// Median-frequency class balancing weights, computed from source masks.
///
/// freq[c] is the number of class-c pixels divided by the number of
/// labeled pixels in the images where c occurs. alpha[c] = median_freq /
/// freq[c]; classes that never occur get alpha 1 and are listed in `absent`.
struct ClassWeights {
  std::vector<double> alpha;
  std::vector<double> freq;
  double median_freq = 0.0;
  std::vector<int> absent;

  template <typename Scalar>
  std::vector<Scalar> alpha_as() const {
    return std::vector<Scalar>(alpha.begin(), alpha.end());
  }
};

/// Throws Error when `labels` is empty or holds no labeled pixel.
ClassWeights class_weights(std::span<const Mask> labels, int num_classes);

/// An image with its (possibly partial) label mask.
template <typename Scalar>
struct LabeledImage {
  Tensor<Scalar> image;  ///< H x W x Cin in [0, 1]
  Mask mask;             ///< H x W class ids, kIgnoreId where unlabeled
};

/// Cosine similarity between the flattened, concatenated conv kernels of F1
/// and F2 (biases excluded). Throws DomainError if either vector is zero.
template <typename Scalar>
Var<Scalar> weight_constraint(Binding<Scalar>& params) {
  const std::size_t layers = params.model().spec().branch_layers.size();
  auto flat = [&](Branch b) {
    std::vector<Var<Scalar>> kernels;
    for (std::size_t i = 0; i < layers; ++i) kernels.push_back(params(param_name(branch_namespace(b), i, "kernel")));
    return flatten_concat<Scalar>(kernels);
  };
  Var<Scalar> w1 = flat(Branch::F1), w2 = flat(Branch::F2);
  Var<Scalar> n1 = dot(w1, w1), n2 = dot(w2, w2);
  if (n1.value().item() == Scalar(0) || n2.value().item() == Scalar(0))
    throw DomainError("weight_constraint: labeling branch has all-zero kernels");
  return dot(w1, w2) / sqrt(n1 * n2);
}

template <typename Scalar>
Scalar weight_constraint(const FctnModel<Scalar>& model) {
  Graph<Scalar> g;
  Binding<Scalar> params(g, model, false);
  return weight_constraint(params).value().item();
}

template <typename Scalar>
struct CeLoss {
  Var<Scalar> value;
  bool all_ignored = false;  ///< every pixel carried kIgnoreId; value is an exact zero
};

/// Mean over labeled pixels of -alpha[y] * log softmax(logits)[y]; alpha is 1
/// when `weights` is null.
template <typename Scalar>
CeLoss<Scalar> ce_loss(const Var<Scalar>& logits, const Mask& labels, const ClassWeights* weights = nullptr) {
  const std::vector<Scalar> alpha = weights ? weights->alpha_as<Scalar>() : std::vector<Scalar>{};
  NllSum<Scalar> nll = softmax_nll_sum<Scalar>(logits, labels, alpha);
  if (nll.labeled == 0) return {scale(nll.sum, Scalar(0)), true};
  return {scale(nll.sum, Scalar(1) / Scalar(nll.labeled)), false};
}

template <typename Scalar>
Index count_labeled(std::span<const LabeledImage<Scalar>> batch) {
  Index n = 0;
  for (const auto& s : batch) n += (s.mask != kIgnoreId).count();
  return n;
}

/// Sum over `branches` of one image's summed cross-entropy, each scaled by
/// `coefficient`. This is the per-sample building block of every batch loss;
/// the trainer evaluates it on independent graphs and adds the gradients.
template <typename Scalar>
std::optional<Var<Scalar>> branch_nll_term(Binding<Scalar>& params, const Var<Scalar>& features,
                                           std::span<const Branch> branches, const Mask& mask,
                                           std::span<const Scalar> alpha, Scalar coefficient) {
  std::optional<Var<Scalar>> acc;
  for (Branch b : branches) {
    Var<Scalar> logits = forward_branch(params, b, features);
    Var<Scalar> term = scale(softmax_nll_sum<Scalar>(logits, mask, alpha).sum, coefficient);
    acc = acc ? add(*acc, term) : term;
  }
  return acc;
}

/// Batch cross-entropy averaged over branches: (1/|branches|) * sum_b
/// [sum_i nll_b(i) / labeled pixels in the batch]. Zero (flagged) when the
/// whole batch is unlabeled.
template <typename Scalar>
CeLoss<Scalar> batch_branch_ce(Binding<Scalar>& params, std::span<const LabeledImage<Scalar>> batch,
                               std::span<const Branch> branches, const ClassWeights* weights) {
  Graph<Scalar>& g = params.graph();
  const Index labeled = count_labeled(batch);
  if (labeled == 0 || branches.empty()) return {g.constant(Scalar(0)), true};
  const std::vector<Scalar> alpha = weights ? weights->alpha_as<Scalar>() : std::vector<Scalar>{};
  const Scalar coef = Scalar(1) / (Scalar(labeled) * Scalar(branches.size()));
  std::optional<Var<Scalar>> acc;
  for (const auto& s : batch) {
    Var<Scalar> features = forward_base(params, g.constant(s.image));
    auto term = branch_nll_term(params, features, branches, s.mask, std::span<const Scalar>(alpha), coef);
    acc = acc ? add(*acc, *term) : *term;
  }
  return {*acc, false};
}

inline constexpr std::array<Branch, 2> kLabelingBranches = {Branch::F1, Branch::F2};

template <typename Scalar>
struct LossBundle {
  Var<Scalar> weight_term;                 ///< L_w
  Var<Scalar> source_term;                 ///< L_S
  std::optional<Var<Scalar>> target_term;  ///< L_Tl, absent without a target batch
  Var<Scalar> total;
};

/// Full objective on one graph.
///
/// Without a target batch: total = alpha * L_w + L_S, where L_S is the
/// unweighted CE averaged over F1 and F2 on the source batch. With one:
/// total additionally includes beta * L_Tl, the class-weighted CE averaged
/// over F1, F2 and Ft on the pseudo-labeled target batch.
template <typename Scalar>
LossBundle<Scalar> total_loss(Binding<Scalar>& params, std::span<const LabeledImage<Scalar>> source,
                              std::optional<std::span<const LabeledImage<Scalar>>> target,
                              const ClassWeights* weights, double alpha, double beta) {
  if (target && !weights) throw Error("total_loss: target batch requires class weights");
  LossBundle<Scalar> out;
  out.weight_term = weight_constraint(params);
  out.source_term = batch_branch_ce(params, source, std::span<const Branch>(kLabelingBranches), nullptr).value;
  out.total = add(scale(out.weight_term, Scalar(alpha)), out.source_term);
  if (target) {
    out.target_term = batch_branch_ce(params, *target, std::span<const Branch>(kAllBranches), weights).value;
    out.total = add(out.total, scale(*out.target_term, Scalar(beta)));
  }
  return out;
}

}  // namespace fctn
