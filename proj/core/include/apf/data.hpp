#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "apf/detection.hpp"
#include "apf/matching.hpp"
#include "apf/tensor.hpp"

namespace apf {

/// Per-video features, stored channel-major [C x T].
struct FeatureSequence {
  std::string video_id;
  Tensor features;
  double duration = 0.0;  // seconds

  std::size_t channels() const { return features.dim(0); }
  std::size_t length() const { return features.dim(1); }
};

/// "APFF", u32 LE header length, JSON header {video_id, C, T, duration},
/// then C*T little-endian float64 in time-major order.
void write_features(const std::filesystem::path& path, const FeatureSequence& seq);
FeatureSequence read_features(const std::filesystem::path& path);

struct VideoAnnotation {
  double duration = 0.0;
  std::vector<Segment> segments;  // seconds
};

struct AnnotationSet {
  std::map<std::string, VideoAnnotation> videos;

  /// Throws ValidationError naming the video and annotation index.
  void validate(std::optional<std::size_t> num_classes = std::nullopt) const;
  /// Boundaries of one video normalized by its duration.
  GroundTruth normalized(const std::string& video_id) const;
  bool operator==(const AnnotationSet&) const = default;
};

bool operator==(const VideoAnnotation& a, const VideoAnnotation& b);

void write_annotations(const std::filesystem::path& path, const AnnotationSet& set);
AnnotationSet read_annotations(const std::filesystem::path& path,
                               std::optional<std::size_t> num_classes = std::nullopt);

struct SynthSpec {
  std::size_t num_videos = 62;
  std::size_t min_length = 96;
  std::size_t max_length = 160;
  std::size_t num_classes = 5;
  std::size_t min_segments = 1;
  std::size_t max_segments = 4;
  std::size_t min_segment_length = 8;
  std::size_t max_segment_length = 32;
  std::size_t feature_dim = 16;
  double noise_std = 0.25;
  double fps = 4.0;  // time steps per second
  std::uint64_t seed = 7;

  void validate() const;
  bool operator==(const SynthSpec&) const = default;
};

struct Dataset {
  std::vector<FeatureSequence> videos;
  AnnotationSet annotations;

  std::size_t size() const { return videos.size(); }
  GroundTruth ground_truth(std::size_t index) const { return annotations.normalized(videos.at(index).video_id); }
  /// Ground truth in seconds keyed by video id, for the evaluator.
  std::map<std::string, std::vector<Segment>> ground_truth_index() const;
  Dataset subset(const std::vector<std::size_t>& indices) const;
};

/// Unit-norm orthogonal class signature (the c-th standard basis vector).
std::vector<double> class_signature(std::size_t cls, std::size_t feature_dim);

Dataset synth_generate(const SynthSpec& spec);

struct DatasetSplit {
  Dataset train;
  Dataset validation;
};

/// Seeded partition holding out floor(fraction * N) videos.
DatasetSplit split_dataset(const Dataset& data, double validation_fraction, std::uint64_t seed);

/// <dir>/annotations.json and <dir>/features/<video_id>.apff
void save_dataset(const std::filesystem::path& dir, const Dataset& data);
Dataset load_dataset(const std::filesystem::path& dir, std::optional<std::size_t> num_classes = std::nullopt);

/// Groups whole sequences; each epoch is an independent seeded permutation.
class Batcher {
 public:
  Batcher(std::size_t dataset_size, std::size_t batch_size, std::uint64_t seed, bool shuffle = true);

  std::vector<std::vector<std::size_t>> epoch(std::size_t index) const;
  std::size_t batches_per_epoch() const;

 private:
  std::size_t size_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  bool shuffle_;
};

}  // namespace apf
