#include "fctn/metrics.hpp"

#include "fctn/dataset.hpp"

#include <iomanip>
#include <sstream>

namespace fctn {

ConfusionMatrix::ConfusionMatrix(int num_classes) {
  if (num_classes < 1) throw Error("confusion matrix needs at least one class");
  counts_ = Counts::Zero(num_classes, num_classes);
}

void ConfusionMatrix::accumulate(const Mask& prediction, const Mask& ground_truth) {
  if (prediction.rows() != ground_truth.rows() || prediction.cols() != ground_truth.cols())
    throw ShapeError("confusion matrix: prediction and ground truth differ in size");
  const int c = num_classes();
  for (Index i = 0; i < ground_truth.size(); ++i) {
    const int g = ground_truth.data()[i];
    if (g == kIgnoreId) continue;
    const int p = prediction.data()[i];
    if (g >= c) throw DomainError("confusion matrix: ground-truth id " + std::to_string(g) + " out of range");
    if (p >= c) throw DomainError("confusion matrix: predicted id " + std::to_string(p) + " out of range");
    ++counts_(g, p);
  }
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  if (other.num_classes() != num_classes()) throw ShapeError("confusion matrices differ in class count");
  counts_ += other.counts_;
  return *this;
}

IouReport iou_report(const ConfusionMatrix& cm) {
  const auto& m = cm.counts();
  IouReport r;
  double sum = 0.0;
  int defined = 0;
  for (int c = 0; c < cm.num_classes(); ++c) {
    const std::int64_t tp = m(c, c);
    const std::int64_t denom = m.row(c).sum() + m.col(c).sum() - tp;
    if (denom == 0) {
      r.iou.push_back(std::nullopt);
      continue;
    }
    const double v = double(tp) / double(denom);
    r.iou.push_back(v);
    sum += v;
    ++defined;
  }
  if (defined) r.miou = sum / defined;
  return r;
}

std::vector<std::string> default_class_names(int num_classes) {
  std::vector<std::string> out;
  for (int c = 0; c < num_classes; ++c)
    out.push_back(num_classes == int(kSceneClassNames.size()) ? kSceneClassNames[std::size_t(c)]
                                                              : "class" + std::to_string(c));
  return out;
}

namespace {
std::string name_of(std::span<const std::string> names, std::size_t c) {
  return c < names.size() ? names[c] : "class" + std::to_string(c);
}
}  // namespace

std::string format_iou_table(const IouReport& report, std::span<const std::string> class_names) {
  std::ostringstream os;
  os << std::left << std::setw(14) << "class" << std::right << std::setw(8) << "IoU %" << '\n';
  os << std::string(22, '-') << '\n';
  os << std::fixed << std::setprecision(1);
  for (std::size_t c = 0; c < report.iou.size(); ++c) {
    os << std::left << std::setw(14) << name_of(class_names, c) << std::right << std::setw(8);
    if (report.iou[c])
      os << *report.iou[c] * 100.0;
    else
      os << "n/a";
    os << '\n';
  }
  os << std::string(22, '-') << '\n';
  os << std::left << std::setw(14) << "mIoU" << std::right << std::setw(8);
  if (report.miou)
    os << *report.miou * 100.0;
  else
    os << "n/a";
  os << '\n';
  return os.str();
}

std::string format_metric_lines(const IouReport& report, std::span<const std::string> class_names,
                                std::string_view prefix) {
  std::ostringstream os;
  os << std::setprecision(17);
  const std::string p = prefix.empty() ? "" : std::string(prefix) + ".";
  for (std::size_t c = 0; c < report.iou.size(); ++c) {
    os << p << "iou." << name_of(class_names, c) << ' ';
    if (report.iou[c])
      os << *report.iou[c];
    else
      os << "nan";
    os << '\n';
  }
  os << p << "mIoU ";
  if (report.miou)
    os << *report.miou;
  else
    os << "nan";
  os << '\n';
  return os.str();
}

}  // namespace fctn
