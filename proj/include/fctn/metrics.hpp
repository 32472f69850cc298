#pragma once

#include "fctn/tensor.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace fctn {

/// Pixel counts, rows = ground truth, columns = prediction. Ground-truth
/// pixels holding kIgnoreId are skipped.
class ConfusionMatrix {
 public:
  using Counts = Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic>;

  explicit ConfusionMatrix(int num_classes);

  void accumulate(const Mask& prediction, const Mask& ground_truth);
  ConfusionMatrix& operator+=(const ConfusionMatrix& other);

  int num_classes() const { return int(counts_.rows()); }
  const Counts& counts() const { return counts_; }
  std::int64_t total() const { return counts_.sum(); }

  friend bool operator==(const ConfusionMatrix& a, const ConfusionMatrix& b) { return a.counts_ == b.counts_; }

 private:
  Counts counts_;
};

/// Per-class IoU = TP / (TP + FP + FN). Classes with a zero denominator are
/// undefined and left out of the mean.
struct IouReport {
  std::vector<std::optional<double>> iou;
  std::optional<double> miou;
};

IouReport iou_report(const ConfusionMatrix& cm);

/// One row per class plus the mean, values in percent.
std::string format_iou_table(const IouReport& report, std::span<const std::string> class_names);

/// Machine-readable form: one "name value" line per metric, e.g.
/// "round1.iou.road 0.734" and "round1.mIoU 0.52"; undefined values print "nan".
std::string format_metric_lines(const IouReport& report, std::span<const std::string> class_names,
                                std::string_view prefix);

std::vector<std::string> default_class_names(int num_classes);

}  // namespace fctn
