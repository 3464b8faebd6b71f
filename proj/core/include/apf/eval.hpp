#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "apf/detection.hpp"

namespace apf {

/// One detection after ranking, with its match outcome.
struct RankedDetection {
  double score = 0.0;
  bool true_positive = false;
};

/// Ranks detections (score desc, then earlier start, then lower index) and
/// marks each TP when its best-tIoU unmatched ground truth reaches `threshold`;
/// that ground truth is then consumed.
std::vector<RankedDetection> greedy_match_detections(const std::vector<Segment>& detections,
                                                     const std::vector<Segment>& ground_truth, double threshold);

/// All-point interpolated AP over ranked detections. Empty when the class has
/// neither ground truth nor detections.
std::optional<double> average_precision(const std::vector<RankedDetection>& ranked, std::size_t num_gt);

struct EvalReport {
  std::vector<double> thresholds;
  std::vector<double> map;                        // per threshold
  std::map<int, std::vector<double>> class_ap;    // class -> AP per threshold
  double average_map = 0.0;
};

using GroundTruthIndex = std::map<std::string, std::vector<Segment>>;

/// Per-class AP pooled over videos at every threshold. mAP averages over classes
/// that have ground truth. Throws ContractError if there is no ground truth.
EvalReport map_suite(const std::vector<DetectionSet>& detections, const GroundTruthIndex& ground_truth,
                     const std::vector<double>& thresholds);

/// "a:step:b" or a comma list, e.g. "0.3:0.1:0.7".
std::vector<double> parse_thresholds(const std::string& text);
std::vector<double> thumos_thresholds();

/// Classic greedy per-class suppression at the given tIoU.
std::vector<Segment> nms(std::vector<Segment> detections, double tiou_threshold);

/// {"results": {"<video>": [{"segment": [s, e], "label": k, "score": p}, ...]}}
void write_detections(const std::filesystem::path& path, const std::vector<DetectionSet>& sets);
std::vector<DetectionSet> read_detections(const std::filesystem::path& path);

}  // namespace apf
