#include "apf/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "apf/errors.hpp"
#include "apf/matching.hpp"

namespace apf {

namespace {

struct Candidate {
  const std::string* video;
  std::size_t index;
  const Segment* seg;
};

bool ranks_before(const Candidate& a, const Candidate& b) {
  if (a.seg->score != b.seg->score) return a.seg->score > b.seg->score;
  if (a.seg->start != b.seg->start) return a.seg->start < b.seg->start;
  if (*a.video != *b.video) return *a.video < *b.video;
  return a.index < b.index;
}

// Best-tIoU unconsumed ground truth; ties resolved to the lower index.
std::optional<std::size_t> best_unmatched(const Segment& det, const std::vector<const Segment*>& gts,
                                          const std::vector<char>& used, double& best_iou) {
  std::optional<std::size_t> best;
  best_iou = -1.0;
  for (std::size_t g = 0; g < gts.size(); ++g) {
    if (used[g]) continue;
    const double iou = tiou_1d(det, *gts[g]);
    if (iou > best_iou) {
      best_iou = iou;
      best = g;
    }
  }
  return best;
}

}  // namespace

std::vector<RankedDetection> greedy_match_detections(const std::vector<Segment>& detections,
                                                     const std::vector<Segment>& ground_truth, double threshold) {
  static const std::string kVideo;
  std::vector<Candidate> order;
  for (std::size_t i = 0; i < detections.size(); ++i) order.push_back({&kVideo, i, &detections[i]});
  std::sort(order.begin(), order.end(), ranks_before);
  std::vector<const Segment*> gts;
  for (const Segment& g : ground_truth) gts.push_back(&g);
  std::vector<char> used(gts.size(), 0);
  std::vector<RankedDetection> ranked;
  for (const Candidate& c : order) {
    double iou = 0.0;
    const auto g = best_unmatched(*c.seg, gts, used, iou);
    const bool tp = g.has_value() && iou >= threshold;
    if (tp) used[*g] = 1;
    ranked.push_back({c.seg->score, tp});
  }
  return ranked;
}

std::optional<double> average_precision(const std::vector<RankedDetection>& ranked, std::size_t num_gt) {
  if (num_gt == 0) {
    if (ranked.empty()) return std::nullopt;
    return 0.0;
  }
  // Extended precision, divided by num_gt once, so small fixtures round to the
  // nearest double of the exact rational.
  const std::size_t n = ranked.size();
  std::vector<long double> precision(n);
  std::size_t tp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (ranked[i].true_positive) ++tp;
    precision[i] = static_cast<long double>(tp) / static_cast<long double>(i + 1);
  }
  // Precision envelope: max precision at any rank with recall >= this one.
  for (std::size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  // Each TP raises recall by 1/num_gt.
  long double sum = 0.0L;
  for (std::size_t i = 0; i < n; ++i) {
    if (ranked[i].true_positive) sum += precision[i];
  }
  return static_cast<double>(sum / static_cast<long double>(num_gt));
}

EvalReport map_suite(const std::vector<DetectionSet>& detections, const GroundTruthIndex& ground_truth,
                     const std::vector<double>& thresholds) {
  if (thresholds.empty()) throw ContractError("map_suite: no thresholds");
  for (double t : thresholds) {
    if (!(t > 0.0 && t <= 1.0)) throw ContractError("map_suite: threshold " + std::to_string(t) + " outside (0, 1]");
  }
  std::map<int, std::size_t> gt_count;
  for (const auto& [video, segs] : ground_truth)
    for (const Segment& s : segs) ++gt_count[s.label];
  if (gt_count.empty()) throw ContractError("map_suite: no ground truth to evaluate against");

  std::map<int, std::vector<Candidate>> by_class;
  for (const DetectionSet& set : detections)
    for (std::size_t i = 0; i < set.detections.size(); ++i)
      by_class[set.detections[i].label].push_back({&set.video_id, i, &set.detections[i]});
  for (auto& [label, cands] : by_class) std::sort(cands.begin(), cands.end(), ranks_before);

  std::vector<int> classes;
  for (const auto& [label, n] : gt_count) classes.push_back(label);
  for (const auto& [label, cands] : by_class)
    if (!gt_count.contains(label)) classes.push_back(label);
  std::sort(classes.begin(), classes.end());

  EvalReport report;
  report.thresholds = thresholds;
  report.map.assign(thresholds.size(), 0.0);
  for (int label : classes) {
    // Ground truth of this class, per video.
    std::map<std::string, std::vector<const Segment*>> gts;
    for (const auto& [video, segs] : ground_truth)
      for (const Segment& s : segs)
        if (s.label == label) gts[video].push_back(&s);
    const auto& cands = by_class[label];
    const std::size_t num_gt = gt_count.contains(label) ? gt_count.at(label) : 0;
    std::vector<double> aps;
    for (double threshold : thresholds) {
      std::map<std::string, std::vector<char>> used;
      for (const auto& [video, list] : gts) used[video].assign(list.size(), 0);
      std::vector<RankedDetection> ranked;
      ranked.reserve(cands.size());
      for (const Candidate& c : cands) {
        bool tp = false;
        auto it = gts.find(*c.video);
        if (it != gts.end()) {
          double iou = 0.0;
          auto& flags = used[*c.video];
          const auto g = best_unmatched(*c.seg, it->second, flags, iou);
          if (g.has_value() && iou >= threshold) {
            flags[*g] = 1;
            tp = true;
          }
        }
        ranked.push_back({c.seg->score, tp});
      }
      aps.push_back(average_precision(ranked, num_gt).value_or(0.0));
    }
    report.class_ap[label] = aps;
  }
  const double num_classes = static_cast<double>(gt_count.size());
  for (std::size_t t = 0; t < thresholds.size(); ++t) {
    double acc = 0.0;
    for (const auto& [label, n] : gt_count) acc += report.class_ap[label][t];
    report.map[t] = acc / num_classes;
  }
  report.average_map = std::accumulate(report.map.begin(), report.map.end(), 0.0) /
                       static_cast<double>(report.map.size());
  return report;
}

std::vector<double> parse_thresholds(const std::string& text) {
  auto to_double = [&](const std::string& s) {
    try {
      std::size_t used = 0;
      const double v = std::stod(s, &used);
      if (used != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw ConfigError("bad threshold spec '" + text + "'");
    }
  };
  std::vector<double> out;
  if (text.find(':') != std::string::npos) {
    std::vector<std::string> parts;
    std::stringstream ss(text);
    for (std::string part; std::getline(ss, part, ':');) parts.push_back(part);
    if (parts.size() != 3) throw ConfigError("threshold range must be start:step:stop, got '" + text + "'");
    const double start = to_double(parts[0]), step = to_double(parts[1]), stop = to_double(parts[2]);
    if (!(step > 0.0) || stop < start) throw ConfigError("bad threshold range '" + text + "'");
    const auto count = static_cast<std::size_t>(std::floor((stop - start) / step + 1e-9)) + 1;
    for (std::size_t i = 0; i < count; ++i) out.push_back(std::round((start + static_cast<double>(i) * step) * 1e12) / 1e12);
  } else {
    std::stringstream ss(text);
    for (std::string part; std::getline(ss, part, ',');) out.push_back(to_double(part));
  }
  if (out.empty()) throw ConfigError("empty threshold spec");
  for (double t : out)
    if (!(t > 0.0 && t <= 1.0)) throw ConfigError("threshold " + std::to_string(t) + " outside (0, 1]");
  return out;
}

std::vector<double> thumos_thresholds() { return parse_thresholds("0.3:0.1:0.7"); }

std::vector<Segment> nms(std::vector<Segment> detections, double tiou_threshold) {
  std::stable_sort(detections.begin(), detections.end(),
                   [](const Segment& a, const Segment& b) { return a.score > b.score; });
  std::vector<Segment> kept;
  for (const Segment& d : detections) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Segment& k) {
      return k.label == d.label && tiou_1d(k, d) > tiou_threshold;
    });
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

void write_detections(const std::filesystem::path& path, const std::vector<DetectionSet>& sets) {
  nlohmann::json results = nlohmann::json::object();
  for (const DetectionSet& set : sets) {
    nlohmann::json list = nlohmann::json::array();
    for (const Segment& s : set.detections)
      list.push_back({{"segment", {s.start, s.end}}, {"label", s.label}, {"score", s.score}});
    results[set.video_id] = std::move(list);
  }
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << nlohmann::json{{"results", results}}.dump(2) << '\n';
}

std::vector<DetectionSet> read_detections(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": invalid JSON: " + e.what());
  }
  if (!doc.contains("results") || !doc["results"].is_object()) {
    throw ValidationError(path.string() + ": missing object field 'results'");
  }
  std::vector<DetectionSet> sets;
  for (const auto& [video, list] : doc["results"].items()) {
    DetectionSet set{video, {}};
    std::size_t i = 0;
    for (const auto& item : list) {
      const std::string where = path.string() + ": results." + video + "[" + std::to_string(i++) + "]";
      try {
        const auto seg = item.at("segment");
        if (!seg.is_array() || seg.size() != 2) throw ValidationError(where + ".segment must be [start, end]");
        set.detections.push_back(
            Segment{seg[0].get<double>(), seg[1].get<double>(), item.at("label").get<int>(), item.at("score").get<double>()});
      } catch (const nlohmann::json::exception& e) {
        throw ValidationError(where + ": " + e.what());
      }
    }
    sets.push_back(std::move(set));
  }
  return sets;
}

}  // namespace apf
