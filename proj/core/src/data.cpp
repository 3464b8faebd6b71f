#include "apf/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include <nlohmann/json.hpp>

#include "apf/errors.hpp"
#include "binary_io.hpp"

namespace apf {

namespace {

constexpr char kFeatureMagic[4] = {'A', 'P', 'F', 'F'};

// Portable Fisher-Yates; std::shuffle's draw sequence is library-specific.
void seeded_permutation(std::vector<std::size_t>& items, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (std::size_t i = items.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(items[i - 1], items[j]);
  }
}

std::size_t uniform_index(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng() % (hi - lo + 1));
}

std::string video_name(std::size_t index) {
  std::string digits = std::to_string(index);
  return "video_" + std::string(digits.size() < 4 ? 4 - digits.size() : 0, '0') + digits;
}

}  // namespace

void write_features(const std::filesystem::path& path, const FeatureSequence& seq) {
  if (seq.features.rank() != 2) throw DimensionError("features must be [C x T]");
  const std::size_t c = seq.channels(), t = seq.length();
  const nlohmann::json header = {{"video_id", seq.video_id}, {"C", c}, {"T", t}, {"duration", seq.duration}};
  const std::string text = header.dump();
  std::vector<double> time_major(c * t);
  for (std::size_t ti = 0; ti < t; ++ti)
    for (std::size_t ci = 0; ci < c; ++ci) time_major[ti * c + ci] = seq.features.at(ci, ti);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ParseError(ParseError::Kind::kIo, "cannot write " + path.string());
  out.write(kFeatureMagic, 4);
  detail::write_u32_le(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  detail::write_f64_le(out, time_major);
  if (!out) throw ParseError(ParseError::Kind::kIo, "write failed for " + path.string());
}

FeatureSequence read_features(const std::filesystem::path& path) {
  const auto bytes = detail::read_file_bytes(path.string());
  detail::ByteReader reader(bytes, path.string());
  if (std::memcmp(reader.take(4, "magic"), kFeatureMagic, 4) != 0) {
    throw ParseError(ParseError::Kind::kBadMagic, path.string() + ": bad magic, expected APFF");
  }
  const std::uint32_t len = detail::decode_u32_le(reader.take(4, "header length"));
  const auto* text = reinterpret_cast<const char*>(reader.take(len, "header"));
  FeatureSequence seq;
  std::size_t c = 0, t = 0;
  try {
    const auto header = nlohmann::json::parse(text, text + len);
    seq.video_id = header.at("video_id").get<std::string>();
    c = header.at("C").get<std::size_t>();
    t = header.at("T").get<std::size_t>();
    seq.duration = header.at("duration").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(ParseError::Kind::kBadHeader, path.string() + ": bad header: " + e.what());
  }
  if (c == 0 || t == 0) throw ParseError(ParseError::Kind::kBadHeader, path.string() + ": C and T must be positive");
  const std::size_t expected = c * t * 8;
  const std::size_t found = reader.remaining();
  // Whole float64 values that disagree with C*T mean the header and payload
  // describe different tensors; a partial value or empty payload is a cut file.
  if (found < expected && (found == 0 || found % 8 != 0)) {
    throw ParseError(ParseError::Kind::kTruncated, path.string() + ": truncated payload: expected " +
                                                       std::to_string(expected) + " bytes, found " + std::to_string(found));
  }
  if (found != expected) {
    throw ParseError(ParseError::Kind::kSizeMismatch, path.string() + ": size mismatch: header C*T=" +
                                                          std::to_string(c * t) + " but payload holds " +
                                                          std::to_string(found / 8) + " values");
  }
  const unsigned char* p = reader.take(expected, "payload");
  Tensor features({c, t}, 0.0);
  for (std::size_t ti = 0; ti < t; ++ti)
    for (std::size_t ci = 0; ci < c; ++ci) features.at(ci, ti) = detail::decode_f64_le(p + 8 * (ti * c + ci));
  seq.features = std::move(features);
  return seq;
}

bool operator==(const VideoAnnotation& a, const VideoAnnotation& b) {
  return a.duration == b.duration && a.segments == b.segments;
}

void AnnotationSet::validate(std::optional<std::size_t> num_classes) const {
  for (const auto& [id, video] : videos) {
    const std::string where = "videos." + id;
    if (!(video.duration > 0.0) || !std::isfinite(video.duration)) {
      throw ValidationError(where + ".duration must be positive, got " + std::to_string(video.duration));
    }
    for (std::size_t i = 0; i < video.segments.size(); ++i) {
      const Segment& s = video.segments[i];
      const std::string at = where + ".annotations[" + std::to_string(i) + "]";
      if (!(s.start >= 0.0 && s.start < s.end && s.end <= video.duration)) {
        throw ValidationError(at + ".segment [" + std::to_string(s.start) + ", " + std::to_string(s.end) +
                              "] violates 0 <= start < end <= duration");
      }
      if (s.label < 0 || (num_classes && static_cast<std::size_t>(s.label) >= *num_classes)) {
        throw ValidationError(at + ".label " + std::to_string(s.label) + " out of range");
      }
    }
  }
}

GroundTruth AnnotationSet::normalized(const std::string& video_id) const {
  auto it = videos.find(video_id);
  if (it == videos.end()) throw ValidationError("no annotations for video " + video_id);
  GroundTruth gt;
  for (const Segment& s : it->second.segments)
    gt.segments.push_back({s.start / it->second.duration, s.end / it->second.duration, s.label, 1.0});
  return gt;
}

void write_annotations(const std::filesystem::path& path, const AnnotationSet& set) {
  nlohmann::json videos = nlohmann::json::object();
  for (const auto& [id, video] : set.videos) {
    nlohmann::json list = nlohmann::json::array();
    for (const Segment& s : video.segments) list.push_back({{"segment", {s.start, s.end}}, {"label", s.label}});
    videos[id] = {{"duration", video.duration}, {"annotations", std::move(list)}};
  }
  std::ofstream out(path);
  if (!out) throw ParseError(ParseError::Kind::kIo, "cannot write " + path.string());
  out << nlohmann::json{{"version", 1}, {"videos", std::move(videos)}}.dump(2) << '\n';
}

AnnotationSet read_annotations(const std::filesystem::path& path, std::optional<std::size_t> num_classes) {
  std::ifstream in(path);
  if (!in) throw ParseError(ParseError::Kind::kIo, "cannot open " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": invalid JSON: " + e.what());
  }
  const std::string file = path.string() + ": ";
  if (!doc.is_object() || !doc.contains("version") || doc["version"] != 1) {
    throw ValidationError(file + "version must be 1");
  }
  if (!doc.contains("videos") || !doc["videos"].is_object()) throw ValidationError(file + "missing object 'videos'");
  AnnotationSet set;
  for (const auto& [id, entry] : doc["videos"].items()) {
    const std::string where = file + "videos." + id;
    VideoAnnotation video;
    try {
      video.duration = entry.at("duration").get<double>();
      const auto& list = entry.at("annotations");
      if (!list.is_array()) throw ValidationError(where + ".annotations must be an array");
      for (std::size_t i = 0; i < list.size(); ++i) {
        const auto& seg = list[i].at("segment");
        if (!seg.is_array() || seg.size() != 2) {
          throw ValidationError(where + ".annotations[" + std::to_string(i) + "].segment must be [start, end]");
        }
        video.segments.push_back({seg[0].get<double>(), seg[1].get<double>(), list[i].at("label").get<int>(), 1.0});
      }
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(where + ": " + e.what());
    }
    set.videos.emplace(id, std::move(video));
  }
  try {
    set.validate(num_classes);
  } catch (const ValidationError& e) {
    throw ValidationError(file + e.what());
  }
  return set;
}

void SynthSpec::validate() const {
  if (num_videos == 0) throw ConfigError("synth: num_videos must be >= 1");
  if (num_classes == 0) throw ConfigError("synth: num_classes must be >= 1");
  if (feature_dim < num_classes) {
    throw ConfigError("synth: feature_dim " + std::to_string(feature_dim) + " < num_classes " +
                      std::to_string(num_classes) + ", orthogonal signatures do not exist");
  }
  if (min_length == 0 || min_length > max_length) throw ConfigError("synth: need 1 <= min_length <= max_length");
  if (min_segments > max_segments) throw ConfigError("synth: min_segments > max_segments");
  if (min_segment_length < 4) throw ConfigError("synth: min_segment_length must be >= 4");
  if (min_segment_length > max_segment_length) throw ConfigError("synth: min_segment_length > max_segment_length");
  if (!(noise_std >= 0.0) || !std::isfinite(noise_std)) throw ConfigError("synth: noise_std must be >= 0");
  if (!(fps > 0.0)) throw ConfigError("synth: fps must be positive");
  // Worst case: the shortest video must fit the most segments at minimum length with unit gaps.
  if (max_segments > 0 && max_segments * min_segment_length + (max_segments - 1) > min_length) {
    throw ConfigError("synth: infeasible packing, " + std::to_string(max_segments) + " segments of length >= " +
                      std::to_string(min_segment_length) + " do not fit in T=" + std::to_string(min_length));
  }
}

std::map<std::string, std::vector<Segment>> Dataset::ground_truth_index() const {
  std::map<std::string, std::vector<Segment>> index;
  for (const FeatureSequence& v : videos) index[v.video_id] = annotations.videos.at(v.video_id).segments;
  return index;
}

Dataset Dataset::subset(const std::vector<std::size_t>& indices) const {
  Dataset out;
  for (std::size_t i : indices) {
    const FeatureSequence& v = videos.at(i);
    out.videos.push_back(v);
    out.annotations.videos[v.video_id] = annotations.videos.at(v.video_id);
  }
  return out;
}

std::vector<double> class_signature(std::size_t cls, std::size_t feature_dim) {
  if (cls >= feature_dim) throw ConfigError("class_signature: class index exceeds feature_dim");
  std::vector<double> sig(feature_dim, 0.0);
  sig[cls] = 1.0;
  return sig;
}

Dataset synth_generate(const SynthSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  Dataset data;
  for (std::size_t v = 0; v < spec.num_videos; ++v) {
    const std::size_t t_len = uniform_index(rng, spec.min_length, spec.max_length);
    const std::size_t n = uniform_index(rng, spec.min_segments, spec.max_segments);
    // Lengths drawn one at a time under the remaining budget, then the free
    // steps are split into n+1 gaps with every interior gap at least 1.
    std::vector<std::size_t> lengths;
    std::size_t used = n > 0 ? n - 1 : 0;
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t reserve = (n - k - 1) * spec.min_segment_length;
      const std::size_t cap = std::min(spec.max_segment_length, t_len - used - reserve);
      const std::size_t len = uniform_index(rng, spec.min_segment_length, cap);
      lengths.push_back(len);
      used += len;
    }
    const std::size_t free_steps = t_len - used;
    std::vector<std::size_t> cuts(n);
    for (auto& c : cuts) c = uniform_index(rng, 0, free_steps);
    std::sort(cuts.begin(), cuts.end());

    FeatureSequence seq;
    seq.video_id = video_name(v);
    seq.duration = static_cast<double>(t_len) / spec.fps;
    seq.features = Tensor({spec.feature_dim, t_len}, 0.0);
    if (spec.noise_std > 0.0) {
      for (std::size_t ti = 0; ti < t_len; ++ti)
        for (std::size_t ci = 0; ci < spec.feature_dim; ++ci) seq.features.at(ci, ti) = spec.noise_std * noise(rng);
    }
    VideoAnnotation ann;
    ann.duration = seq.duration;
    std::size_t cursor = 0;
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t gap = (k == 0 ? cuts[0] : cuts[k] - cuts[k - 1]) + (k == 0 ? 0 : 1);
      const std::size_t start = cursor + gap;
      const std::size_t end = start + lengths[k];
      const int label = static_cast<int>(uniform_index(rng, 0, spec.num_classes - 1));
      for (std::size_t ti = start; ti < end; ++ti) seq.features.at(static_cast<std::size_t>(label), ti) += 1.0;
      ann.segments.push_back({static_cast<double>(start) / spec.fps, static_cast<double>(end) / spec.fps, label, 1.0});
      cursor = end;
    }
    data.annotations.videos[seq.video_id] = std::move(ann);
    data.videos.push_back(std::move(seq));
  }
  return data;
}

DatasetSplit split_dataset(const Dataset& data, double validation_fraction, std::uint64_t seed) {
  if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
    throw ConfigError("validation fraction must be in [0, 1)");
  }
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  seeded_permutation(order, seed);
  const auto held = static_cast<std::size_t>(std::floor(validation_fraction * static_cast<double>(data.size())));
  std::vector<std::size_t> val(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(held));
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(held), order.end());
  std::sort(val.begin(), val.end());
  std::sort(train.begin(), train.end());
  return {data.subset(train), data.subset(val)};
}

void save_dataset(const std::filesystem::path& dir, const Dataset& data) {
  std::filesystem::create_directories(dir / "features");
  for (const FeatureSequence& v : data.videos) write_features(dir / "features" / (v.video_id + ".apff"), v);
  write_annotations(dir / "annotations.json", data.annotations);
}

Dataset load_dataset(const std::filesystem::path& dir, std::optional<std::size_t> num_classes) {
  if (!std::filesystem::is_directory(dir)) throw ValidationError("dataset directory " + dir.string() + " not found");
  Dataset data;
  data.annotations = read_annotations(dir / "annotations.json", num_classes);
  for (const auto& [id, video] : data.annotations.videos) {
    FeatureSequence seq = read_features(dir / "features" / (id + ".apff"));
    if (seq.video_id != id) throw ValidationError("feature file for " + id + " carries video_id " + seq.video_id);
    data.videos.push_back(std::move(seq));
  }
  return data;
}

Batcher::Batcher(std::size_t dataset_size, std::size_t batch_size, std::uint64_t seed, bool shuffle)
    : size_(dataset_size), batch_size_(batch_size), seed_(seed), shuffle_(shuffle) {
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
}

std::size_t Batcher::batches_per_epoch() const { return (size_ + batch_size_ - 1) / batch_size_; }

std::vector<std::vector<std::size_t>> Batcher::epoch(std::size_t index) const {
  std::vector<std::size_t> order(size_);
  std::iota(order.begin(), order.end(), 0);
  if (shuffle_) seeded_permutation(order, seed_ ^ (0x9E3779B97F4A7C15ull * (index + 1)));
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < size_; i += batch_size_) {
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(size_, i + batch_size_)));
  }
  return batches;
}

}  // namespace apf
