#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace fbf {

/// Dataset-wide confusion matrix; rows are ground truth, columns prediction.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes);

  /// Adds one prediction/label pair. Throws DataError on out-of-range values
  /// or size mismatch.
  void add(std::span<const std::int32_t> pred, std::span<const std::int32_t> gt);
  /// Accumulates another matrix of the same class count.
  void merge(const ConfusionMatrix& other);

  int num_classes() const { return classes_; }
  std::int64_t count(int gt, int pred) const { return counts_[gt * classes_ + pred]; }
  std::int64_t total() const;
  /// Ground-truth pixels of class c.
  std::int64_t support(int c) const;

  /// TP / (TP + FP + FN); NaN when the class never occurs in gt or prediction.
  double iou(int c) const;
  std::vector<double> ious() const;
  /// Mean IoU over the classes present in the ground truth. NaN on an empty matrix.
  double miou() const;

  bool operator==(const ConfusionMatrix& other) const = default;

 private:
  int classes_;
  std::vector<std::int64_t> counts_;
};

}  // namespace fbf
