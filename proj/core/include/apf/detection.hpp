#pragma once

#include <string>
#include <vector>

namespace apf {

/// One action instance. Times are either normalized to [0, 1] or in seconds,
/// depending on the container that holds it.
struct Segment {
  double start = 0.0;
  double end = 0.0;
  int label = 0;
  double score = 1.0;

  double length() const { return end - start; }
  double center() const { return 0.5 * (start + end); }
  bool operator==(const Segment&) const = default;
};

/// Scored predictions for one video, times in seconds.
struct DetectionSet {
  std::string video_id;
  std::vector<Segment> detections;
};

}  // namespace apf
