#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "apf/autodiff.hpp"
#include "apf/data.hpp"
#include "apf/eval.hpp"
#include "apf/matching.hpp"
#include "apf/model.hpp"

namespace apf {

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t warmup_epochs = 5;
  double base_lr = 1e-4;
  double weight_decay = 1e-4;
  std::size_t batch_size = 8;
  double lambda = 1.0;
  std::optional<double> grad_clip = 1.0;
  CostWeights match_cost;  // matching only; the loss weights are 1 and lambda
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

void to_json(nlohmann::json& j, const TrainConfig& cfg);
void from_json(const nlohmann::json& j, TrainConfig& cfg);

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First and second moments per parameter, in ParameterSet order.
struct AdamWState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t step = 0;

  explicit AdamWState(const ParameterSet& params);
};

/// param -= lr*wd*param, then the bias-corrected Adam update from param.grad.
void adamw_step(ParameterSet& params, AdamWState& state, double lr, double weight_decay,
                const AdamWOptions& opt = {});

/// Linear ramp to base_lr over the warmup steps, then half-cosine to zero.
double lr_schedule(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, double base_lr);

/// Rescales all gradients so their joint L2 norm is at most max_norm. Returns the pre-clip norm.
double clip_grad_norm(ParameterSet& params, double max_norm);

struct EpochRecord {
  std::size_t epoch = 0;
  std::size_t step = 0;  // optimizer steps taken so far
  double lr = 0.0;       // lr of the epoch's last step
  double loss = 0.0;
  double loss_cls = 0.0;
  double loss_reg = 0.0;
  double loss_l1 = 0.0;
  std::optional<double> val_map;
};

nlohmann::json to_json(const EpochRecord& record);

struct TrainOptions {
  std::vector<double> thresholds = thumos_thresholds();
  std::optional<std::filesystem::path> log_path;         // NDJSON, one record per epoch
  std::optional<std::filesystem::path> checkpoint_path;  // best by validation mAP
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  std::optional<double> best_val_map;
  std::size_t best_epoch = 0;
};

/// Mean per-video loss terms of a dataset without updating parameters.
EpochRecord evaluate_loss(Model& model, const Dataset& data, const LossConfig& loss);

/// Runs the model over every video and scores the detections.
EvalReport evaluate_model(Model& model, const Dataset& data, const std::vector<double>& thresholds);

/// Trains in place. Throws NumericError naming the term when the loss or a gradient is non-finite.
TrainResult train_loop(Model& model, const Dataset& train, const Dataset& validation, const TrainConfig& cfg,
                       const TrainOptions& options = {});

}  // namespace apf
