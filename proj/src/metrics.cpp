#include "fbformer/metrics.hpp"

#include <limits>
#include <string>

#include "fbformer/tensor.hpp"

namespace fbf {

ConfusionMatrix::ConfusionMatrix(int num_classes) : classes_(num_classes) {
  if (num_classes < 1) throw ConfigError("confusion matrix needs at least one class");
  counts_.assign(static_cast<std::size_t>(num_classes) * num_classes, 0);
}

void ConfusionMatrix::add(std::span<const std::int32_t> pred, std::span<const std::int32_t> gt) {
  if (pred.size() != gt.size()) {
    throw DataError("confusion matrix: prediction has " + std::to_string(pred.size()) +
                    " pixels, ground truth " + std::to_string(gt.size()));
  }
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] < 0 || gt[i] >= classes_ || pred[i] < 0 || pred[i] >= classes_) {
      throw DataError("confusion matrix: label out of range at pixel " + std::to_string(i) +
                      " (gt " + std::to_string(gt[i]) + ", pred " + std::to_string(pred[i]) + ")");
    }
    ++counts_[gt[i] * classes_ + pred[i]];
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.classes_ != classes_) throw UsageError("merging confusion matrices of different sizes");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

std::int64_t ConfusionMatrix::total() const {
  std::int64_t t = 0;
  for (auto v : counts_) t += v;
  return t;
}

std::int64_t ConfusionMatrix::support(int c) const {
  std::int64_t s = 0;
  for (int p = 0; p < classes_; ++p) s += count(c, p);
  return s;
}

double ConfusionMatrix::iou(int c) const {
  const std::int64_t tp = count(c, c);
  std::int64_t fp = 0, fn = 0;
  for (int o = 0; o < classes_; ++o) {
    if (o == c) continue;
    fp += count(o, c);
    fn += count(c, o);
  }
  const std::int64_t denom = tp + fp + fn;
  if (denom == 0) return std::numeric_limits<double>::quiet_NaN();
  return static_cast<double>(tp) / static_cast<double>(denom);
}

std::vector<double> ConfusionMatrix::ious() const {
  std::vector<double> out(classes_);
  for (int c = 0; c < classes_; ++c) out[c] = iou(c);
  return out;
}

double ConfusionMatrix::miou() const {
  double sum = 0.0;
  int n = 0;
  for (int c = 0; c < classes_; ++c) {
    if (support(c) == 0) continue;
    sum += iou(c);
    ++n;
  }
  return n == 0 ? std::numeric_limits<double>::quiet_NaN() : sum / n;
}

}  // namespace fbf
