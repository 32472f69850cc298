#include "fctn/losses.hpp"

#include <algorithm>

namespace fctn {

ClassWeights class_weights(std::span<const Mask> labels, int num_classes) {
  if (labels.empty()) throw Error("class_weights: empty label set");
  if (num_classes < 1) throw Error("class_weights: num_classes must be positive");
  const auto C = std::size_t(num_classes);
  std::vector<double> class_pixels(C, 0.0), present_pixels(C, 0.0);
  std::vector<Index> counts(C);
  for (const Mask& m : labels) {
    std::fill(counts.begin(), counts.end(), 0);
    Index labeled = 0;
    for (Index i = 0; i < m.size(); ++i) {
      const std::uint8_t y = m.data()[i];
      if (y == kIgnoreId) continue;
      if (y >= C) throw DomainError("class_weights: label id " + std::to_string(y) + " out of range");
      ++counts[y];
      ++labeled;
    }
    for (std::size_t c = 0; c < C; ++c) {
      if (counts[c] == 0) continue;
      class_pixels[c] += double(counts[c]);
      present_pixels[c] += double(labeled);
    }
  }

  ClassWeights w;
  w.freq.assign(C, 0.0);
  std::vector<double> present;
  for (std::size_t c = 0; c < C; ++c) {
    if (present_pixels[c] > 0) {
      w.freq[c] = class_pixels[c] / present_pixels[c];
      present.push_back(w.freq[c]);
    } else {
      w.absent.push_back(int(c));
    }
  }
  if (present.empty()) throw Error("class_weights: no labeled pixels");
  std::sort(present.begin(), present.end());
  const std::size_t n = present.size();
  w.median_freq = n % 2 ? present[n / 2] : 0.5 * (present[n / 2 - 1] + present[n / 2]);

  w.alpha.assign(C, 1.0);
  for (std::size_t c = 0; c < C; ++c)
    if (w.freq[c] > 0) w.alpha[c] = w.median_freq / w.freq[c];
  return w;
}

}  // namespace fctn
