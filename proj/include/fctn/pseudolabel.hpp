#pragma once

#include "fctn/model.hpp"

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <span>
#include <thread>
#include <vector>

namespace fctn {

inline constexpr std::array<Branch, 2> kLabelers = {Branch::F1, Branch::F2};

struct PseudoLabelConfig {
  double confidence_threshold = 0.95;
};

struct PseudoLabeledSample {
  TensorF image;
  Mask mask;              ///< kIgnoreId where the labelers did not qualify
  double coverage = 0.0;  ///< labeled pixels / (H * W)
};

struct PseudoLabelSummary {
  std::vector<std::int64_t> class_counts;
  std::int64_t labeled_pixels = 0;
  std::int64_t total_pixels = 0;
  double mean_coverage = 0.0;
};

struct PseudoLabelSet {
  std::vector<PseudoLabeledSample> samples;
  PseudoLabelSummary summary;
};

/// A pixel takes label l iff F1 and F2 both predict l and the larger of
/// their two confidences reaches the threshold (inclusive).
inline Mask combine_labelers(const Prediction& p1, const Prediction& p2, double threshold) {
  Mask out = Mask::Constant(p1.labels.rows(), p1.labels.cols(), kIgnoreId);
  for (Index y = 0; y < out.rows(); ++y)
    for (Index x = 0; x < out.cols(); ++x)
      if (p1.labels(y, x) == p2.labels(y, x) && std::max(p1.confidence(y, x), p2.confidence(y, x)) >= threshold)
        out(y, x) = p1.labels(y, x);
  return out;
}

template <typename Scalar>
Mask pseudo_label_rule(const Tensor<Scalar>& logits1, const Tensor<Scalar>& logits2, double threshold) {
  if (logits1.shape() != logits2.shape()) throw ShapeError("pseudo_label_rule: branch logits differ in shape");
  return combine_labelers(decode_logits(logits1), decode_logits(logits2), threshold);
}

inline double mask_coverage(const Mask& m) {
  return m.size() ? double((m != kIgnoreId).count()) / double(m.size()) : 0.0;
}

/// Pseudo-labels one target image from the agreement of F1 and F2. Ft is
/// never consulted.
template <typename Scalar>
PseudoLabeledSample label_image(const FctnModel<Scalar>& model, const Tensor<Scalar>& image,
                                const PseudoLabelConfig& cfg) {
  auto logits = infer_logits(model, image, std::span<const Branch>(kLabelers));
  PseudoLabeledSample s;
  s.image = image.template cast<float>();
  s.mask = pseudo_label_rule(logits[0], logits[1], cfg.confidence_threshold);
  s.coverage = mask_coverage(s.mask);
  return s;
}

inline PseudoLabelSummary summarize(std::span<const PseudoLabeledSample> samples, int num_classes) {
  PseudoLabelSummary sum;
  sum.class_counts.assign(std::size_t(num_classes), 0);
  for (const auto& s : samples) {
    for (Index i = 0; i < s.mask.size(); ++i) {
      const auto y = s.mask.data()[i];
      if (y == kIgnoreId) continue;
      ++sum.class_counts.at(y);
      ++sum.labeled_pixels;
    }
    sum.total_pixels += s.mask.size();
    sum.mean_coverage += s.coverage;
  }
  if (!samples.empty()) sum.mean_coverage /= double(samples.size());
  return sum;
}

/// Labels every image of T; all images are kept, in input order, even at
/// zero coverage. Work fans out over `threads` workers against the
/// read-only model.
template <typename Scalar>
PseudoLabelSet label_dataset(const FctnModel<Scalar>& model, std::span<const Tensor<Scalar>> images,
                             const PseudoLabelConfig& cfg, int threads = 1) {
  if (images.empty()) throw Error("label_dataset: empty target set");
  PseudoLabelSet out;
  out.samples.resize(images.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < images.size();) out.samples[i] = label_image(model, images[i], cfg);
  };
  const int n = std::clamp(threads, 1, int(images.size()));
  if (n == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (int t = 0; t < n; ++t) pool.emplace_back(work);
  }
  out.summary = summarize(out.samples, model.spec().num_classes);
  return out;
}

}  // namespace fctn
