#pragma once

// Segmentation evaluation: confusion matrix, overall accuracy, mean class
// accuracy, per-class IoU and mIoU.

#include <cstdint>
#include <vector>

#include "baaf/common.hpp"

namespace baaf {

/// Q x Q counts; rows are ground truth, columns are predictions.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes)
      : q_(num_classes), counts_(static_cast<std::size_t>(num_classes) * static_cast<std::size_t>(num_classes), 0) {
    if (num_classes < 1) throw ValueError("confusion matrix: need at least one class");
  }

  int num_classes() const { return q_; }
  std::int64_t at(int truth, int pred) const { return counts_[index(truth, pred)]; }
  std::int64_t total() const {
    std::int64_t t = 0;
    for (std::int64_t c : counts_) t += c;
    return t;
  }

  void add(std::int32_t truth, std::int32_t pred) {
    if (truth < 0 || truth >= q_ || pred < 0 || pred >= q_)
      throw ValueError("confusion matrix: class id out of range");
    ++counts_[index(truth, pred)];
  }

  void accumulate(const std::vector<std::int32_t>& labels, const std::vector<std::int32_t>& predictions) {
    if (labels.size() != predictions.size()) throw ShapeError("confusion matrix: length mismatch");
    for (std::size_t i = 0; i < labels.size(); ++i) add(labels[i], predictions[i]);
  }

  /// Accumulation order never affects scores, so parallel shards merge.
  void merge(const ConfusionMatrix& other) {
    if (other.q_ != q_) throw ShapeError("confusion matrix: class count mismatch");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  }

 private:
  std::size_t index(int truth, int pred) const {
    return static_cast<std::size_t>(truth) * static_cast<std::size_t>(q_) + static_cast<std::size_t>(pred);
  }

  int q_;
  std::vector<std::int64_t> counts_;
};

struct Scores {
  double oa = 0.0;
  double macc = 0.0;
  double miou = 0.0;
  std::vector<double> iou;  // per class; -1 marks a class absent from both
                            // truth and prediction (excluded from miou)
};

/// OA = trace/total; class accuracy = diag/row-sum; IoU = TP/(TP+FP+FN).
/// Classes absent from both truth and prediction are excluded from mAcc
/// and mIoU.
inline Scores scores(const ConfusionMatrix& cm) {
  const int q = cm.num_classes();
  const std::int64_t total = cm.total();
  if (total == 0) throw ValueError("scores: empty confusion matrix");

  Scores s;
  s.iou.assign(static_cast<std::size_t>(q), -1.0);
  std::int64_t trace = 0;
  double acc_sum = 0.0;
  int acc_classes = 0;
  double iou_sum = 0.0;
  int iou_classes = 0;
  for (int c = 0; c < q; ++c) {
    std::int64_t tp = cm.at(c, c);
    std::int64_t row = 0, col = 0;
    for (int j = 0; j < q; ++j) {
      row += cm.at(c, j);
      col += cm.at(j, c);
    }
    trace += tp;
    if (row > 0) {
      acc_sum += static_cast<double>(tp) / static_cast<double>(row);
      ++acc_classes;
    }
    const std::int64_t denom = row + col - tp;  // TP + FP + FN
    if (denom > 0) {
      s.iou[static_cast<std::size_t>(c)] = static_cast<double>(tp) / static_cast<double>(denom);
      iou_sum += s.iou[static_cast<std::size_t>(c)];
      ++iou_classes;
    }
  }
  if (acc_classes == 0 || iou_classes == 0) throw ValueError("scores: no evaluated classes");
  s.oa = static_cast<double>(trace) / static_cast<double>(total);
  s.macc = acc_sum / static_cast<double>(acc_classes);
  s.miou = iou_sum / static_cast<double>(iou_classes);
  return s;
}

}  // namespace baaf
