// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "robustseg/errors.hpp"
#include "robustseg/subsets.hpp"
#include "robustseg/tensor.hpp"

namespace robustseg {

// Rows: ground truth, columns: prediction.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t num_classes = 0)
      : classes_(num_classes), counts_(num_classes * num_classes, 0) {}

  std::size_t num_classes() const { return classes_; }
  std::uint64_t ignored() const { return ignored_; }
  std::uint64_t at(std::size_t gt, std::size_t pred) const { return counts_[gt * classes_ + pred]; }

  std::uint64_t counted() const {
    std::uint64_t s = 0;
    for (auto v : counts_) s += v;
    return s;
  }

  void add(const LabelGrid& prediction, const LabelGrid& labels) {
    if (prediction.height != labels.height || prediction.width != labels.width) {
      throw ContractError("confusion: prediction " + std::to_string(prediction.height) + "x" +
                          std::to_string(prediction.width) + " vs labels " +
                          std::to_string(labels.height) + "x" + std::to_string(labels.width));
    }
    for (std::size_t i = 0; i < labels.data.size(); ++i) {
      const std::uint8_t g = labels.data[i];
      if (g == kIgnoreLabel) {
        ++ignored_;
        continue;
      }
      const std::uint8_t p = prediction.data[i];
      if (g >= classes_ || p >= classes_) {
        throw ContractError("confusion: label " + std::to_string(g) + " / prediction " +
                            std::to_string(p) + " outside [0, " + std::to_string(classes_) + ")");
      }
      ++counts_[g * classes_ + p];
    }
  }

  void merge(const ConfusionMatrix& other) {
    require(other.classes_ == classes_, "confusion: class count mismatch in merge");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
    ignored_ += other.ignored_;
  }

 private:
  std::size_t classes_;
  std::vector<std::uint64_t> counts_;
  std::uint64_t ignored_ = 0;
};

struct MiouResult {
  double miou = 0.0;             // percent
  std::vector<double> iou;       // per class in [0, 1], NaN when skipped
  std::size_t counted_classes = 0;
};

// Classes absent from both prediction and ground truth are skipped.
inline MiouResult miou(const ConfusionMatrix& cm) {
  const std::size_t C = cm.num_classes();
  MiouResult r;
  r.iou.assign(C, std::numeric_limits<double>::quiet_NaN());
  double sum = 0.0;
  for (std::size_t c = 0; c < C; ++c) {
    std::uint64_t tp = cm.at(c, c), fp = 0, fn = 0;
    for (std::size_t k = 0; k < C; ++k) {
      if (k == c) continue;
      fp += cm.at(k, c);
      fn += cm.at(c, k);
    }
    const std::uint64_t denom = tp + fp + fn;
    if (denom == 0) continue;
    r.iou[c] = static_cast<double>(tp) / static_cast<double>(denom);
    sum += r.iou[c];
    ++r.counted_classes;
  }
  if (r.counted_classes == 0) throw MetricError("miou: no countable class (undefined)");
  r.miou = 100.0 * sum / static_cast<double>(r.counted_classes);
  return r;
}

inline MiouResult miou(const std::vector<LabelGrid>& predictions, const std::vector<LabelGrid>& labels,
                       std::size_t num_classes) {
  require(predictions.size() == labels.size(), "miou: prediction/label count mismatch");
  ConfusionMatrix cm(num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) cm.add(predictions[i], labels[i]);
  return miou(cm);
}

// p^k (1 - p)^(n - k) for a subset with k of n modalities missing.
inline double subset_probability(std::size_t k, std::size_t n, double p) {
  if (k >= n) {
    throw DomainError("subset_probability: k = " + std::to_string(k) + " with n = " +
                      std::to_string(n) + " (full-missing subset is excluded)");
  }
  if (!(p >= 0.0 && p <= 1.0)) throw DomainError("subset_probability: p outside [0, 1]");
  return std::pow(p, static_cast<double>(k)) * std::pow(1.0 - p, static_cast<double>(n - k));
}

// Per-subset mIoUs indexed like enumerate_subsets(M).
inline double average_over_subsets(const std::vector<double>& per_subset) {
  require(!per_subset.empty(), "average_over_subsets: empty input");
  double s = 0.0;
  for (double v : per_subset) s += v;
  return s / static_cast<double>(per_subset.size());
}

// sum over subsets of P_p(missing count) * mIoU(subset). With `renormalize`
// the weights are divided by their sum 1 - p^M.
inline double expected_over_subsets(const std::vector<double>& per_subset, std::size_t M, double p,
                                    bool renormalize = false) {
  const auto subsets = enumerate_subsets(M);
  require(per_subset.size() == subsets.size(), "expected_over_subsets: wrong subset count");
  double s = 0.0;
  for (std::size_t i = 0; i < subsets.size(); ++i) {
    const std::size_t k = M - popcount(subsets[i]);
    s += subset_probability(k, M, p) * per_subset[i];
  }
  if (renormalize) {
    const double z = 1.0 - std::pow(p, static_cast<double>(M));
    if (!(z > 0.0)) throw DomainError("expected_over_subsets: cannot renormalize at p = 1");
    s /= z;
  }
  return s;
}

}  // namespace robustseg
