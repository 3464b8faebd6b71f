#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "apf/autodiff.hpp"
#include "apf/detection.hpp"
#include "apf/model.hpp"

namespace apf {

/// Ground-truth instances of one video, boundaries normalized to [0, 1].
struct GroundTruth {
  std::vector<Segment> segments;

  /// Throws ValidationError unless 0 <= start < end <= 1 and labels are in range.
  void validate(std::size_t num_classes) const;
};

double tiou_1d(const Segment& a, const Segment& b);
/// tIoU minus squared center distance over squared enclosing length.
double diou_1d(const Segment& a, const Segment& b);

/// Sigmoid focal loss summed over classes. target < 0 means background.
double focal_loss(std::span<const double> logits, int target, double gamma = 2.0, double alpha = 0.25);

struct CostWeights {
  double cls = 1.0;
  double l1 = 1.0;
  double iou = 1.0;

  bool operator==(const CostWeights&) const = default;
};

/// Matching cost [N_q x N_gt].
std::vector<std::vector<double>> cost_matrix(const std::vector<Prediction>& preds, const GroundTruth& gts,
                                             const CostWeights& weights = {});

struct MatchResult {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (prediction, ground truth), ordered by ground truth
  std::vector<std::size_t> unmatched;                       // predictions assigned to background

  /// Target class per prediction, -1 for background.
  std::vector<int> targets(std::size_t num_predictions, const GroundTruth& gts) const;
};

/// Minimum-cost assignment of every ground truth (column) to a distinct
/// prediction (row). Requires rows >= columns.
MatchResult hungarian_match(const std::vector<std::vector<double>>& cost);
/// Sum of the matched entries in ground-truth order.
double assignment_cost(const std::vector<std::vector<double>>& cost, const MatchResult& match);

// Differentiable loss pieces.

/// Per-row focal loss of logits[N x K]; targets[i] < 0 is background.
Var focal_loss(Var logits, std::span<const int> targets, double gamma = 2.0, double alpha = 0.25);
/// Per-row 1 - DIoU between predicted bounds [M x 2] and fixed targets [M x 2].
Var diou_loss(Var bounds, const Tensor& targets);
/// Per-row |ds| + |de|.
Var l1_boundary_loss(Var bounds, const Tensor& targets);

struct LossConfig {
  double lambda = 1.0;
  double gamma = 2.0;
  double alpha = 0.25;
  CostWeights cost;
};

struct LossTerms {
  Var total;
  double cls = 0.0;  // focal loss averaged over queries
  double reg = 0.0;  // sum of (1 - DIoU) over positives / N_pos
  double l1 = 0.0;   // sum of L1 over positives / N_pos
  std::size_t positives = 0;
};

/// cls + lambda * (reg + l1); the regression part is zero when nothing matched.
LossTerms total_loss(const HeadOutputs& out, const GroundTruth& gts, const MatchResult& match, const LossConfig& cfg);

/// Assigns targets with the current predictions and returns the loss.
LossTerms match_and_loss(const HeadOutputs& out, const GroundTruth& gts, const LossConfig& cfg);

}  // namespace apf
