#include "apf/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <memory>
#include <random>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/ostream_sink.h>
#include <spdlog/spdlog.h>

#include "apf/checkpoint.hpp"
#include "apf/errors.hpp"
#include "apf/eval.hpp"
#include "apf/gradcheck_suites.hpp"
#include "apf/trainer.hpp"

namespace apf {

void to_json(nlohmann::json& j, const SynthSpec& s) {
  j = {{"num_videos", s.num_videos},
       {"min_length", s.min_length},
       {"max_length", s.max_length},
       {"num_classes", s.num_classes},
       {"min_segments", s.min_segments},
       {"max_segments", s.max_segments},
       {"min_segment_length", s.min_segment_length},
       {"max_segment_length", s.max_segment_length},
       {"feature_dim", s.feature_dim},
       {"noise_std", s.noise_std},
       {"fps", s.fps},
       {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, SynthSpec& s) {
  s.num_videos = j.value("num_videos", s.num_videos);
  s.min_length = j.value("min_length", s.min_length);
  s.max_length = j.value("max_length", s.max_length);
  s.num_classes = j.value("num_classes", s.num_classes);
  s.min_segments = j.value("min_segments", s.min_segments);
  s.max_segments = j.value("max_segments", s.max_segments);
  s.min_segment_length = j.value("min_segment_length", s.min_segment_length);
  s.max_segment_length = j.value("max_segment_length", s.max_segment_length);
  s.feature_dim = j.value("feature_dim", s.feature_dim);
  s.noise_std = j.value("noise_std", s.noise_std);
  s.fps = j.value("fps", s.fps);
  s.seed = j.value("seed", s.seed);
}

}  // namespace apf

namespace apf::cli {

const char* version() { return APF_VERSION; }

namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

struct Context {
  std::ostream& out;
  std::shared_ptr<spdlog::logger> log;
  std::size_t jobs = 1;
};

/// Flag values applied on top of defaults and the config file.
class Overrides {
 public:
  template <class T>
  CLI::Option* add(CLI::App* app, const std::string& flag, const std::string& pointer, const std::string& help) {
    auto value = std::make_shared<T>();
    CLI::Option* opt = app->add_option(flag, *value, help);
    apply_.push_back([opt, value, pointer](json& j) {
      if (opt->count() > 0) j[json::json_pointer(pointer)] = *value;
    });
    return opt;
  }
  CLI::Option* add_flag(CLI::App* app, const std::string& flag, const std::string& pointer, const std::string& help) {
    auto value = std::make_shared<bool>(false);
    CLI::Option* opt = app->add_flag(flag, *value, help);
    apply_.push_back([opt, value, pointer](json& j) {
      if (opt->count() > 0) j[json::json_pointer(pointer)] = *value;
    });
    return opt;
  }
  /// One flag writing several config fields.
  template <class T>
  void add_multi(CLI::App* app, const std::string& flag, std::vector<std::string> pointers, const std::string& help) {
    auto value = std::make_shared<T>();
    CLI::Option* opt = app->add_option(flag, *value, help);
    apply_.push_back([opt, value, pointers](json& j) {
      if (opt->count() == 0) return;
      for (const auto& p : pointers) j[json::json_pointer(p)] = *value;
    });
  }
  void apply(json& j) const {
    for (const auto& f : apply_) f(j);
  }

 private:
  std::vector<std::function<void(json&)>> apply_;
};

void deep_merge(json& base, const json& patch) {
  if (!base.is_object() || !patch.is_object()) {
    base = patch;
    return;
  }
  for (const auto& [key, value] : patch.items()) {
    if (base.contains(key) && base[key].is_object() && value.is_object()) {
      deep_merge(base[key], value);
    } else {
      base[key] = value;
    }
  }
}

/// A config file is either a bare config object or a run manifest.
json load_config_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": invalid JSON: " + e.what());
  }
  if (!j.is_object()) throw ConfigError(path.string() + ": config must be a JSON object");
  if (j.contains("manifest_version") && j.contains("config")) return j["config"];
  return j;
}

template <class T>
T field(const json& j, const std::string& key) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("config field '" + key + "': " + e.what());
  }
}

template <class T>
T section(const json& j, const std::string& key) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("config section '" + key + "': " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

/// Resolved configuration plus artifact paths, written next to the outputs.
void write_manifest(const fs::path& path, const std::string& command, const json& config, const json& artifacts) {
  write_json(path, {{"manifest_version", 1},
                    {"tool", "apf"},
                    {"version", version()},
                    {"command", command},
                    {"config", config},
                    {"artifacts", artifacts}});
}

std::string fixed(double v, int digits) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

// ---------------------------------------------------------------------------
// synth

json synth_defaults() { return {{"out", "data"}, {"synth", SynthSpec{}}}; }

int cmd_synth(Context& ctx, const json& cfg) {
  const auto spec = section<SynthSpec>(cfg, "synth");
  spec.validate();
  const fs::path out = field<std::string>(cfg, "out");
  ctx.log->info("generating {} videos into {}", spec.num_videos, out.string());
  const Dataset data = synth_generate(spec);
  save_dataset(out, data);
  write_manifest(out / "manifest.json", "synth", cfg,
                 {{"annotations", (out / "annotations.json").string()}, {"features", (out / "features").string()}});
  std::size_t segments = 0;
  for (const auto& [id, video] : data.annotations.videos) segments += video.segments.size();
  ctx.out << "videos " << data.size() << ", segments " << segments << ", classes " << spec.num_classes << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// train

json train_defaults() {
  ModelConfig model;
  json m = model;
  m["input_dim"] = nullptr;  // taken from the dataset
  return {{"data", "data"}, {"out", "run"}, {"val_fraction", 0.2}, {"thresholds", "0.3:0.1:0.7"},
          {"model", m},     {"train", TrainConfig{}}};
}

Dataset load_existing_dataset(const fs::path& dir, std::optional<std::size_t> num_classes) {
  if (!fs::is_directory(dir)) throw ValidationError("dataset directory " + dir.string() + " does not exist");
  Dataset data = load_dataset(dir, num_classes);
  if (data.size() == 0) throw ValidationError("dataset " + dir.string() + " is empty");
  return data;
}

int cmd_train(Context& ctx, json cfg) {
  json& clip = cfg["train"]["grad_clip"];
  if (clip.is_number() && clip.get<double>() <= 0.0) clip = nullptr;  // 0 disables clipping
  auto tc = section<TrainConfig>(cfg, "train");
  tc.validate();
  const fs::path data_dir = field<std::string>(cfg, "data");
  const fs::path out = field<std::string>(cfg, "out");
  const auto thresholds = parse_thresholds(field<std::string>(cfg, "thresholds"));

  json& model_json = cfg["model"];
  const auto num_classes = ModelConfig{}.num_classes;
  const Dataset data = load_existing_dataset(data_dir, model_json.value("num_classes", num_classes));
  const std::size_t channels = data.videos.front().channels();
  if (model_json["input_dim"].is_null()) model_json["input_dim"] = channels;
  const auto mc = section<ModelConfig>(cfg, "model");
  mc.validate();
  if (mc.input_dim != channels) {
    throw ConfigError("model.input_dim " + std::to_string(mc.input_dim) + " but dataset has " +
                      std::to_string(channels) + " channels");
  }

  const DatasetSplit split = split_dataset(data, field<double>(cfg, "val_fraction"), tc.seed);
  ctx.log->info("train {} videos, validation {} videos", split.train.size(), split.validation.size());

  fs::create_directories(out);
  TrainOptions opts;
  opts.thresholds = thresholds;
  opts.log_path = out / "log.ndjson";
  opts.checkpoint_path = out / "best.apf";
  opts.on_epoch = [&](const EpochRecord& r) {
    ctx.log->info("epoch {} loss {:.4f} (cls {:.4f} reg {:.4f} l1 {:.4f}) val mAP {:.4f}", r.epoch, r.loss,
                  r.loss_cls, r.loss_reg, r.loss_l1, r.val_map.value_or(0.0));
  };
  write_manifest(out / "manifest.json", "train", cfg,
                 {{"log", opts.log_path->string()},
                  {"best_checkpoint", opts.checkpoint_path->string()},
                  {"final_checkpoint", (out / "final.apf").string()}});

  Model model(mc, tc.seed);
  const TrainResult result = train_loop(model, split.train, split.validation, tc, opts);
  save_checkpoint(out / "final.apf", model, {{"epoch", tc.epochs}, {"train", tc}});

  const EpochRecord& first = result.history.front();
  const EpochRecord& last = result.history.back();
  ctx.out << "epochs " << tc.epochs << ", loss " << fixed(first.loss, 4) << " -> " << fixed(last.loss, 4);
  if (result.best_val_map) {
    ctx.out << ", best val mAP " << fixed(*result.best_val_map, 4) << " at epoch " << result.best_epoch;
  }
  ctx.out << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// eval

json eval_defaults() {
  return {{"checkpoint", "run/best.apf"}, {"data", "data"},        {"out", "eval"},    {"thresholds", "0.3:0.1:0.7"},
          {"subset", "all"},              {"val_fraction", 0.2}, {"split_seed", 0},   {"nms", nullptr}};
}

std::vector<DetectionSet> predict_all(Model& model, const Dataset& data, std::size_t jobs) {
  std::vector<DetectionSet> sets(data.size());
  auto work = [&](std::size_t first, std::size_t stride) {
    for (std::size_t i = first; i < data.size(); i += stride) {
      const FeatureSequence& v = data.videos[i];
      sets[i] = to_detections(model.predict(v.features), v.video_id, v.duration);
    }
  };
  jobs = std::clamp<std::size_t>(jobs, 1, std::max<std::size_t>(data.size(), 1));
  if (jobs == 1) {
    work(0, 1);
    return sets;
  }
  std::vector<std::thread> threads;
  for (std::size_t t = 0; t < jobs; ++t) threads.emplace_back(work, t, jobs);
  for (auto& t : threads) t.join();
  return sets;
}

int cmd_eval(Context& ctx, const json& cfg) {
  const fs::path ckpt_path = field<std::string>(cfg, "checkpoint");
  const fs::path out = field<std::string>(cfg, "out");
  const auto thresholds = parse_thresholds(field<std::string>(cfg, "thresholds"));
  const auto subset = field<std::string>(cfg, "subset");
  if (subset != "all" && subset != "train" && subset != "validation") {
    throw ConfigError("subset must be all|train|validation, got '" + subset + "'");
  }

  Checkpoint ckpt = load_checkpoint(ckpt_path);
  if (cfg.contains("model") && !cfg["model"].is_null()) {
    const json actual = ckpt.config;
    json expected = actual;
    deep_merge(expected, cfg["model"]);
    const std::string diverged = first_divergent_field(expected, actual);
    if (!diverged.empty()) {
      std::string pointer = "/" + diverged;
      std::replace(pointer.begin(), pointer.end(), '.', '/');
      const json::json_pointer at(pointer);
      throw ConfigError("config does not match checkpoint " + ckpt_path.string() + " at field model." + diverged +
                        ": config " + (expected.contains(at) ? expected[at].dump() : "absent") + ", checkpoint " +
                        (actual.contains(at) ? actual[at].dump() : "absent"));
    }
  }
  Model model(ckpt.config, std::move(ckpt.params));

  Dataset data = load_existing_dataset(field<std::string>(cfg, "data"), model.config().num_classes);
  if (subset != "all") {
    DatasetSplit split = split_dataset(data, field<double>(cfg, "val_fraction"), field<std::uint64_t>(cfg, "split_seed"));
    data = subset == "train" ? std::move(split.train) : std::move(split.validation);
  }
  ctx.log->info("evaluating {} videos with {} job(s)", data.size(), ctx.jobs);

  std::vector<DetectionSet> dets = predict_all(model, data, ctx.jobs);
  if (!cfg["nms"].is_null()) {
    const auto tiou = field<double>(cfg, "nms");
    for (DetectionSet& set : dets) set.detections = nms(std::move(set.detections), tiou);
  }
  const EvalReport report = map_suite(dets, data.ground_truth_index(), thresholds);

  fs::create_directories(out);
  write_detections(out / "detections.json", dets);
  json per_class = json::object();
  for (const auto& [cls, aps] : report.class_ap) per_class[std::to_string(cls)] = aps;
  write_json(out / "report.json", {{"thresholds", report.thresholds},
                                   {"map", report.map},
                                   {"class_ap", per_class},
                                   {"average_map", report.average_map}});
  write_manifest(out / "manifest.json", "eval", cfg,
                 {{"detections", (out / "detections.json").string()}, {"report", (out / "report.json").string()}});

  ctx.out << std::left << std::setw(8) << "tIoU";
  for (double t : report.thresholds) ctx.out << std::right << std::setw(8) << fixed(t, 2);
  ctx.out << std::right << std::setw(8) << "Avg" << '\n';
  ctx.out << std::left << std::setw(8) << "mAP";
  for (double m : report.map) ctx.out << std::right << std::setw(8) << fixed(100.0 * m, 2);
  ctx.out << std::right << std::setw(8) << fixed(100.0 * report.average_map, 2) << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// gradcheck

json gradcheck_defaults() {
  const GradSuiteOptions o;
  return {{"suite", "all"},
          {"seed", o.seed},
          {"seq_len", o.seq_len},
          {"model_dim", o.model_dim},
          {"heads", o.heads},
          {"queries", o.queries},
          {"encoder_layers", o.encoder_layers},
          {"decoder_layers", o.decoder_layers},
          {"tolerance", o.tolerance},
          {"step", o.step},
          {"inject_fault", ""},
          {"out", ""}};
}

/// Clears an injected gradient fault on scope exit.
struct FaultGuard {
  explicit FaultGuard(std::string op) { set_gradient_fault(std::move(op)); }
  ~FaultGuard() { set_gradient_fault(""); }
  FaultGuard(const FaultGuard&) = delete;
  FaultGuard& operator=(const FaultGuard&) = delete;
};

int cmd_gradcheck(Context& ctx, const json& cfg) {
  GradSuiteOptions o;
  o.seed = field<std::uint64_t>(cfg, "seed");
  o.seq_len = field<std::size_t>(cfg, "seq_len");
  o.model_dim = field<std::size_t>(cfg, "model_dim");
  o.heads = field<std::size_t>(cfg, "heads");
  o.queries = field<std::size_t>(cfg, "queries");
  o.encoder_layers = field<std::size_t>(cfg, "encoder_layers");
  o.decoder_layers = field<std::size_t>(cfg, "decoder_layers");
  o.tolerance = field<double>(cfg, "tolerance");
  o.step = field<double>(cfg, "step");
  const auto suite = field<std::string>(cfg, "suite");
  std::vector<std::string> suites = gradcheck_suite_names();
  if (suite != "all") {
    if (std::find(suites.begin(), suites.end(), suite) == suites.end()) {
      throw ConfigError("unknown suite '" + suite + "' (expected all|tensor-core|taa|model|matching)");
    }
    suites = {suite};
  }
  const FaultGuard guard(field<std::string>(cfg, "inject_fault"));
  if (!gradient_fault().empty()) ctx.log->warn("gradient of '{}' is sign-flipped", gradient_fault());

  bool all_passed = true;
  json report = json::object();
  std::vector<std::pair<std::string, double>> worst;
  for (const std::string& s : suites) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::vector<GradCheckResult> results = run_gradcheck_suite(s, o);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    double max_err = 0.0;
    json ops = json::array();
    for (const GradCheckResult& r : results) {
      ctx.out << std::left << std::setw(48) << r.name << std::right << std::setw(12) << std::scientific
              << std::setprecision(2) << r.max_rel_error << std::defaultfloat << "  " << (r.passed ? "PASS" : "FAIL")
              << '\n';
      max_err = std::max(max_err, r.max_rel_error);
      all_passed = all_passed && r.passed;
      ops.push_back({{"name", r.name}, {"max_rel_error", r.max_rel_error}, {"passed", r.passed}});
    }
    ctx.log->debug("suite {} took {:.2f}s", s, seconds);
    worst.emplace_back(s, max_err);
    report[s] = {{"worst", max_err}, {"ops", ops}};
  }
  for (const auto& [s, err] : worst) {
    std::ostringstream e;
    e << std::scientific << std::setprecision(2) << err;
    ctx.out << "suite " << std::left << std::setw(12) << s << " worst " << e.str() << '\n';
  }
  ctx.out << (all_passed ? "gradcheck PASS" : "gradcheck FAIL") << " (tolerance " << o.tolerance << ")\n";

  const std::string out = field<std::string>(cfg, "out");
  if (!out.empty()) {
    const fs::path path = out;
    write_json(path, report);
    write_manifest(fs::path(path).replace_extension(".manifest.json"), "gradcheck", cfg, {{"report", out}});
  }
  return all_passed ? kOk : kCheckFailed;
}

// ---------------------------------------------------------------------------
// bench

json bench_defaults() {
  return {{"lengths", {128, 256, 512}}, {"window", 5}, {"heads", 4}, {"head_dim", 16},
          {"runs", 10},                 {"seed", 0},   {"out", "bench.csv"}};
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

template <class F>
double median_ms(std::size_t runs, F&& f) {
  std::vector<double> ms;
  for (std::size_t r = 0; r < runs; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    f();
    ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  return median(std::move(ms));
}

int cmd_bench(Context& ctx, const json& cfg) {
  const auto lengths = field<std::vector<std::size_t>>(cfg, "lengths");
  const auto window = field<std::size_t>(cfg, "window");
  const auto heads = field<std::size_t>(cfg, "heads");
  const auto head_dim = field<std::size_t>(cfg, "head_dim");
  const auto runs = field<std::size_t>(cfg, "runs");
  if (lengths.empty()) throw ConfigError("bench: lengths must be nonempty");
  if (window == 0 || window % 2 == 0) throw ConfigError("bench: window must be odd");
  if (heads == 0 || head_dim == 0) throw ConfigError("bench: heads and head_dim must be >= 1");
  if (runs < 10) throw ConfigError("bench: runs must be >= 10");
  std::mt19937_64 rng(field<std::uint64_t>(cfg, "seed"));
  std::normal_distribution<double> normal;

  std::ostringstream csv;
  csv << "T,window,heads,dense_dots_per_head,windowed_dots_per_head,interior_dots_per_head,count_ratio,dense_ms,"
         "windowed_ms\n";
  ctx.out << std::right << std::setw(6) << "T" << std::setw(14) << "dense/head" << std::setw(14) << "window/head"
          << std::setw(14) << "T*3w" << std::setw(12) << "dense ms" << std::setw(12) << "window ms" << '\n';
  for (std::size_t T : lengths) {
    if (T == 0) throw ConfigError("bench: lengths must be >= 1");
    auto random = [&] {
      Tensor t({heads, T, head_dim});
      for (double& v : t.data()) v = normal(rng);
      return t;
    };
    const Tensor q = random(), k = random(), v = random();
    const double scale = std::sqrt(static_cast<double>(T));
    AttentionStats stats;
    {
      Graph g;
      gpa_attention(g.constant(q), g.constant(k), g.constant(v), window, scale, true, &stats);
    }
    const double windowed_ms = median_ms(runs, [&] {
      Graph g;
      gpa_attention(g.constant(q), g.constant(k), g.constant(v), window, scale, true);
    });
    const double dense_ms = median_ms(runs, [&] {
      Graph g;
      dense_attention(g.constant(q), g.constant(k), g.constant(v), scale);
    });
    const std::size_t dense = T * T;
    const std::size_t windowed = stats.dot_products / heads;
    const std::size_t interior = T * 3 * window;
    csv << T << ',' << window << ',' << heads << ',' << dense << ',' << windowed << ',' << interior << ','
        << static_cast<double>(dense) / static_cast<double>(interior) << ',' << dense_ms << ',' << windowed_ms << '\n';
    ctx.out << std::setw(6) << T << std::setw(14) << dense << std::setw(14) << windowed << std::setw(14) << interior
            << std::setw(12) << fixed(dense_ms, 3) << std::setw(12) << fixed(windowed_ms, 3) << '\n';
  }
  const fs::path out = field<std::string>(cfg, "out");
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  std::ofstream(out) << csv.str();
  write_manifest(fs::path(out).replace_extension(".manifest.json"), "bench", cfg, {{"csv", out.string()}});
  return kOk;
}

std::shared_ptr<spdlog::logger> make_logger(std::ostream& err) {
  auto sink = std::make_shared<spdlog::sinks::ostream_sink_mt>(err);
  auto log = std::make_shared<spdlog::logger>("apf", sink);
  log->set_pattern("[%l] %v");
  log->set_level(spdlog::level::info);
  if (const char* env = std::getenv("APF_LOG")) {
    const std::string level = env;
    if (level == "error") {
      log->set_level(spdlog::level::err);
    } else if (level == "debug") {
      log->set_level(spdlog::level::debug);
    } else if (level != "info") {
      log->warn("APF_LOG='{}' not one of error|info|debug; using info", level);
    }
  }
  return log;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Windowed temporal attention detector: data synthesis, training, evaluation and checks", "apf"};
  app.set_version_flag("--version", version());
  app.require_subcommand(1);

  std::uint64_t seed = 0;
  std::string config_path;
  std::size_t jobs = 1;
  CLI::Option* seed_opt = app.add_option("--seed", seed, "Seed for generation, initialization and splits");
  app.add_option("--config", config_path, "JSON config or run manifest; flags override it");
  app.add_option("--jobs", jobs, "Worker threads for evaluation")->check(CLI::PositiveNumber);

  struct Command {
    CLI::App* app;
    json (*defaults)();
    std::vector<std::string> seed_fields;
    Overrides flags;
  };
  std::vector<Command> commands;
  commands.reserve(5);

  {
    Command& c = commands.emplace_back(Command{app.add_subcommand("synth", "Generate a synthetic dataset"),
                                               synth_defaults, {"/synth/seed"}, {}});
    c.flags.add<std::string>(c.app, "--out", "/out", "Output directory");
    c.flags.add<std::size_t>(c.app, "--videos", "/synth/num_videos", "Number of videos");
    c.flags.add<std::size_t>(c.app, "--classes", "/synth/num_classes", "Number of action classes");
    c.flags.add<std::size_t>(c.app, "--min-length", "/synth/min_length", "Shortest video in time steps");
    c.flags.add<std::size_t>(c.app, "--max-length", "/synth/max_length", "Longest video in time steps");
    c.flags.add<std::size_t>(c.app, "--min-segments", "/synth/min_segments", "Fewest instances per video");
    c.flags.add<std::size_t>(c.app, "--max-segments", "/synth/max_segments", "Most instances per video");
    c.flags.add<std::size_t>(c.app, "--min-segment-length", "/synth/min_segment_length", "Shortest instance");
    c.flags.add<std::size_t>(c.app, "--max-segment-length", "/synth/max_segment_length", "Longest instance");
    c.flags.add<std::size_t>(c.app, "--feature-dim", "/synth/feature_dim", "Feature channels");
    c.flags.add<double>(c.app, "--noise", "/synth/noise_std", "Background noise standard deviation");
    c.flags.add<double>(c.app, "--fps", "/synth/fps", "Time steps per second");
  }
  {
    Command& c = commands.emplace_back(
        Command{app.add_subcommand("train", "Train a model"), train_defaults, {"/train/seed"}, {}});
    c.flags.add<std::string>(c.app, "--data", "/data", "Dataset directory");
    c.flags.add<std::string>(c.app, "--out", "/out", "Run directory");
    c.flags.add<double>(c.app, "--val-fraction", "/val_fraction", "Held-out fraction");
    c.flags.add<std::string>(c.app, "--thresholds", "/thresholds", "Validation tIoU thresholds");
    c.flags.add<std::size_t>(c.app, "--epochs", "/train/epochs", "Training epochs");
    c.flags.add<std::size_t>(c.app, "--warmup", "/train/warmup_epochs", "Linear warmup epochs");
    c.flags.add<double>(c.app, "--lr", "/train/lr", "Peak learning rate");
    c.flags.add<double>(c.app, "--wd", "/train/weight_decay", "Decoupled weight decay");
    c.flags.add<double>(c.app, "--lambda", "/train/lambda", "Regression loss weight");
    c.flags.add<std::size_t>(c.app, "--batch-size", "/train/batch_size", "Videos per optimizer step");
    c.flags.add<double>(c.app, "--grad-clip", "/train/grad_clip", "Max gradient norm");
    c.flags.add<double>(c.app, "--cost-cls", "/train/match_cost/cls", "Matching cost weight on class probability");
    c.flags.add<double>(c.app, "--cost-l1", "/train/match_cost/l1", "Matching cost weight on boundary L1");
    c.flags.add<double>(c.app, "--cost-iou", "/train/match_cost/iou", "Matching cost weight on 1 - DIoU");
    c.flags.add_multi<std::size_t>(c.app, "--window", {"/model/taa/window", "/model/taa_dec/window"},
                                   "Attention window size");
    c.flags.add<std::size_t>(c.app, "--shift-enc", "/model/taa/shift_size", "Encoder shift size");
    c.flags.add<std::size_t>(c.app, "--shift-dec", "/model/taa_dec/shift_size", "Decoder shift size");
    c.flags.add_multi<std::string>(c.app, "--shift-mode", {"/model/taa/shift_mode", "/model/taa_dec/shift_mode"},
                                   "Shift mode for both stacks (gs|bs)");
    c.flags.add_multi<std::string>(c.app, "--fusion", {"/model/taa/fusion_mode", "/model/taa_dec/fusion_mode"},
                                   "Branch fusion (fixed|alpha-right|alpha-left|alpha-complement|two-alphas)");
    c.flags.add_multi<std::string>(c.app, "--score-scale", {"/model/taa/score_scale", "/model/taa_dec/score_scale"},
                                   "Attention score scale (sqrt-t|sqrt-dh)");
    c.flags.add_multi<std::size_t>(c.app, "--model-dim", {"/model/taa/model_dim", "/model/taa_dec/model_dim"},
                                   "Model width");
    c.flags.add_multi<std::size_t>(c.app, "--heads", {"/model/taa/heads", "/model/taa_dec/heads"}, "Attention heads");
    c.flags.add<std::size_t>(c.app, "--queries", "/model/queries", "Proposal queries");
    c.flags.add<std::size_t>(c.app, "--classes", "/model/num_classes", "Action classes");
    c.flags.add<std::size_t>(c.app, "--encoder-layers", "/model/encoder_layers", "Encoder depth");
    c.flags.add<std::size_t>(c.app, "--decoder-layers", "/model/decoder_layers", "Decoder depth");
    c.flags.add_flag(c.app, "--learned-positions", "/model/learned_positions", "Learned positional table");
  }
  {
    Command& c = commands.emplace_back(Command{app.add_subcommand("eval", "Evaluate a checkpoint"), eval_defaults,
                                               {"/split_seed"}, {}});
    c.flags.add<std::string>(c.app, "--checkpoint", "/checkpoint", "Checkpoint file");
    c.flags.add<std::string>(c.app, "--data", "/data", "Dataset directory");
    c.flags.add<std::string>(c.app, "--out", "/out", "Output directory");
    c.flags.add<std::string>(c.app, "--thresholds", "/thresholds", "tIoU thresholds, a:step:b or a comma list");
    c.flags.add<std::string>(c.app, "--subset", "/subset", "all|train|validation");
    c.flags.add<double>(c.app, "--val-fraction", "/val_fraction", "Held-out fraction used to rebuild the split");
    c.flags.add<double>(c.app, "--nms", "/nms", "Optional greedy NMS at this tIoU (diagnostic)");
  }
  {
    Command& c = commands.emplace_back(Command{
        app.add_subcommand("gradcheck", "Finite-difference gradient suites"), gradcheck_defaults, {"/seed"}, {}});
    c.flags.add<std::string>(c.app, "--suite", "/suite", "all|tensor-core|taa|model|matching");
    c.flags.add<std::size_t>(c.app, "--seq-len", "/seq_len", "Sequence length");
    c.flags.add<std::size_t>(c.app, "--model-dim", "/model_dim", "Model width");
    c.flags.add<std::size_t>(c.app, "--heads", "/heads", "Attention heads");
    c.flags.add<std::size_t>(c.app, "--queries", "/queries", "Proposal queries");
    c.flags.add<double>(c.app, "--tolerance", "/tolerance", "Max relative error");
    c.flags.add<std::string>(c.app, "--inject-fault", "/inject_fault", "Sign-flip the gradient of this op");
    c.flags.add<std::string>(c.app, "--out", "/out", "Optional JSON report path");
  }
  {
    Command& c = commands.emplace_back(
        Command{app.add_subcommand("bench", "Dense vs windowed attention cost"), bench_defaults, {"/seed"}, {}});
    c.flags.add<std::vector<std::size_t>>(c.app, "--lengths", "/lengths", "Sequence lengths")->delimiter(',');
    c.flags.add<std::size_t>(c.app, "--window", "/window", "Window size");
    c.flags.add<std::size_t>(c.app, "--heads", "/heads", "Attention heads");
    c.flags.add<std::size_t>(c.app, "--head-dim", "/head_dim", "Per-head width");
    c.flags.add<std::size_t>(c.app, "--runs", "/runs", "Timed repetitions (>= 10)");
    c.flags.add<std::string>(c.app, "--out", "/out", "CSV output path");
  }
  for (Command& c : commands) c.app->fallthrough();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  Context ctx{out, make_logger(err), jobs};
  try {
    for (Command& c : commands) {
      if (!c.app->parsed()) continue;
      json cfg = c.defaults();
      if (!config_path.empty()) deep_merge(cfg, load_config_file(config_path));
      c.flags.apply(cfg);
      if (seed_opt->count() > 0)
        for (const auto& p : c.seed_fields) cfg[json::json_pointer(p)] = seed;
      const std::string name = c.app->get_name();
      ctx.log->debug("resolved config: {}", cfg.dump());
      if (name == "synth") return cmd_synth(ctx, cfg);
      if (name == "train") return cmd_train(ctx, cfg);
      if (name == "eval") return cmd_eval(ctx, cfg);
      if (name == "gradcheck") return cmd_gradcheck(ctx, cfg);
      if (name == "bench") return cmd_bench(ctx, cfg);
    }
  } catch (const NumericError& e) {
    ctx.log->error("{}", e.what());
    return kNumeric;
  } catch (const Error& e) {
    ctx.log->error("{}", e.what());
    return kUsage;
  } catch (const nlohmann::json::exception& e) {
    ctx.log->error("config: {}", e.what());
    return kUsage;
  } catch (const std::filesystem::filesystem_error& e) {
    ctx.log->error("{}", e.what());
    return kUsage;
  }
  return kUsage;
}

}  // namespace apf::cli
