#include "apf/trainer.hpp"

#include <cmath>
#include <fstream>
#include <numbers>

#include <nlohmann/json.hpp>

#include "apf/checkpoint.hpp"
#include "apf/errors.hpp"

namespace apf {

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("epochs must be >= 1");
  if (warmup_epochs >= epochs) throw ConfigError("warmup_epochs must be < epochs");
  if (!(base_lr >= 0.0) || !std::isfinite(base_lr)) throw ConfigError("lr must be a finite value >= 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
  if (grad_clip && !(*grad_clip > 0.0)) throw ConfigError("grad_clip must be positive");
  for (double w : {match_cost.cls, match_cost.l1, match_cost.iou}) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("match_cost weights must be finite and >= 0");
  }
}

void to_json(nlohmann::json& j, const TrainConfig& cfg) {
  j = {{"epochs", cfg.epochs},
       {"warmup_epochs", cfg.warmup_epochs},
       {"lr", cfg.base_lr},
       {"weight_decay", cfg.weight_decay},
       {"batch_size", cfg.batch_size},
       {"lambda", cfg.lambda},
       {"grad_clip", cfg.grad_clip ? nlohmann::json(*cfg.grad_clip) : nlohmann::json(nullptr)},
       {"match_cost", {{"cls", cfg.match_cost.cls}, {"l1", cfg.match_cost.l1}, {"iou", cfg.match_cost.iou}}},
       {"seed", cfg.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& cfg) {
  cfg.epochs = j.value("epochs", cfg.epochs);
  cfg.warmup_epochs = j.value("warmup_epochs", cfg.warmup_epochs);
  cfg.base_lr = j.value("lr", cfg.base_lr);
  cfg.weight_decay = j.value("weight_decay", cfg.weight_decay);
  cfg.batch_size = j.value("batch_size", cfg.batch_size);
  cfg.lambda = j.value("lambda", cfg.lambda);
  if (j.contains("grad_clip")) {
    cfg.grad_clip = j["grad_clip"].is_null() ? std::nullopt : std::optional<double>(j["grad_clip"].get<double>());
  }
  if (j.contains("match_cost")) {
    const nlohmann::json& c = j["match_cost"];
    cfg.match_cost.cls = c.value("cls", cfg.match_cost.cls);
    cfg.match_cost.l1 = c.value("l1", cfg.match_cost.l1);
    cfg.match_cost.iou = c.value("iou", cfg.match_cost.iou);
  }
  cfg.seed = j.value("seed", cfg.seed);
}

AdamWState::AdamWState(const ParameterSet& params) {
  for (const Parameter& p : params) {
    m.emplace_back(p.value.shape(), 0.0);
    v.emplace_back(p.value.shape(), 0.0);
  }
}

void adamw_step(ParameterSet& params, AdamWState& state, double lr, double weight_decay, const AdamWOptions& opt) {
  if (state.m.size() != params.size()) throw ContractError("adamw_step: optimizer state does not match parameters");
  if (!(opt.beta1 > 0.0 && opt.beta1 < 1.0 && opt.beta2 > 0.0 && opt.beta2 < 1.0)) {
    throw ConfigError("adamw_step: betas must lie in (0, 1)");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(opt.beta1, t);
  const double c2 = 1.0 - std::pow(opt.beta2, t);
  std::size_t k = 0;
  for (Parameter& p : params) {
    auto value = p.value.data();
    auto grad = p.grad.data();
    auto m = state.m[k].data();
    auto v = state.v[k].data();
    ++k;
    for (std::size_t i = 0; i < value.size(); ++i) {
      value[i] -= lr * weight_decay * value[i];
      m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * grad[i];
      v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * grad[i] * grad[i];
      value[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + opt.eps);
    }
  }
}

double lr_schedule(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, double base_lr) {
  if (step >= total_steps) throw ContractError("lr_schedule: step out of range");
  if (step < warmup_steps) return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  const std::size_t decay_steps = total_steps - warmup_steps;
  const double progress =
      decay_steps > 1 ? static_cast<double>(step - warmup_steps) / static_cast<double>(decay_steps - 1) : 0.0;
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

double clip_grad_norm(ParameterSet& params, double max_norm) {
  const double norm = params.grad_norm();
  if (norm > max_norm) {
    const double factor = max_norm / norm;
    for (Parameter& p : params)
      for (double& g : p.grad.data()) g *= factor;
  }
  return norm;
}

nlohmann::json to_json(const EpochRecord& r) {
  return {{"epoch", r.epoch},      {"step", r.step},         {"lr", r.lr},
          {"loss", r.loss},        {"loss_cls", r.loss_cls}, {"loss_reg", r.loss_reg},
          {"loss_l1", r.loss_l1},  {"val_map", r.val_map ? nlohmann::json(*r.val_map) : nlohmann::json(nullptr)}};
}

namespace {

void check_finite(const LossTerms& terms, const std::string& video) {
  const std::pair<const char*, double> parts[] = {
      {"loss_cls", terms.cls}, {"loss_reg", terms.reg}, {"loss_l1", terms.l1}, {"loss", terms.total.value().item()}};
  for (const auto& [name, value] : parts) {
    if (!std::isfinite(value)) throw NumericError("non-finite " + std::string(name) + " on " + video);
  }
}

/// Head outputs feed both matching and the loss terms; a non-finite one would
/// poison the assignment, so it is reported before matching.
void check_finite(const HeadOutputs& out, const std::string& video) {
  if (!out.logits.value().all_finite()) throw NumericError("non-finite loss_cls inputs (class logits) on " + video);
  if (!out.boundaries.value().all_finite()) {
    throw NumericError("non-finite loss_reg/loss_l1 inputs (boundaries) on " + video);
  }
}

void check_finite_grads(const ParameterSet& params) {
  for (const Parameter& p : params) {
    if (!p.grad.all_finite()) throw NumericError("non-finite gradient in parameter " + p.name);
  }
}

LossConfig loss_config(const TrainConfig& cfg) {
  LossConfig loss;
  loss.lambda = cfg.lambda;
  loss.cost = cfg.match_cost;
  return loss;
}

}  // namespace

EpochRecord evaluate_loss(Model& model, const Dataset& data, const LossConfig& loss) {
  EpochRecord r;
  for (std::size_t i = 0; i < data.size(); ++i) {
    Graph g;
    const HeadOutputs out = model.forward(g, data.videos[i].features);
    const LossTerms terms = match_and_loss(out, data.ground_truth(i), loss);
    r.loss += terms.total.value().item();
    r.loss_cls += terms.cls;
    r.loss_reg += terms.reg;
    r.loss_l1 += terms.l1;
  }
  const double n = static_cast<double>(std::max<std::size_t>(data.size(), 1));
  r.loss /= n;
  r.loss_cls /= n;
  r.loss_reg /= n;
  r.loss_l1 /= n;
  return r;
}

EvalReport evaluate_model(Model& model, const Dataset& data, const std::vector<double>& thresholds) {
  std::vector<DetectionSet> detections;
  for (const FeatureSequence& v : data.videos)
    detections.push_back(to_detections(model.predict(v.features), v.video_id, v.duration));
  return map_suite(detections, data.ground_truth_index(), thresholds);
}

TrainResult train_loop(Model& model, const Dataset& train, const Dataset& validation, const TrainConfig& cfg,
                       const TrainOptions& options) {
  cfg.validate();
  if (train.size() == 0) throw ContractError("train_loop: empty training set");
  const LossConfig loss = loss_config(cfg);
  const Batcher batcher(train.size(), cfg.batch_size, cfg.seed);
  const std::size_t steps_per_epoch = batcher.batches_per_epoch();
  const std::size_t total_steps = steps_per_epoch * cfg.epochs;
  const std::size_t warmup_steps = steps_per_epoch * cfg.warmup_epochs;

  std::optional<std::ofstream> log;
  if (options.log_path) {
    log.emplace(*options.log_path, std::ios::trunc);
    if (!*log) throw ValidationError("cannot write training log " + options.log_path->string());
  }

  AdamWState state(model.params());
  TrainResult result;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochRecord record;
    record.epoch = epoch + 1;
    for (const auto& batch : batcher.epoch(epoch)) {
      model.params().zero_grad();
      const double inv_batch = 1.0 / static_cast<double>(batch.size());
      for (std::size_t index : batch) {
        Graph g;
        const HeadOutputs out = model.forward(g, train.videos[index].features);
        check_finite(out, train.videos[index].video_id);
        const LossTerms terms = match_and_loss(out, train.ground_truth(index), loss);
        check_finite(terms, train.videos[index].video_id);
        g.backward(scale(terms.total, inv_batch));
        record.loss += terms.total.value().item();
        record.loss_cls += terms.cls;
        record.loss_reg += terms.reg;
        record.loss_l1 += terms.l1;
      }
      check_finite_grads(model.params());
      if (cfg.grad_clip) clip_grad_norm(model.params(), *cfg.grad_clip);
      record.lr = lr_schedule(step, total_steps, warmup_steps, cfg.base_lr);
      adamw_step(model.params(), state, record.lr, cfg.weight_decay);
      ++step;
    }
    const double n = static_cast<double>(train.size());
    record.loss /= n;
    record.loss_cls /= n;
    record.loss_reg /= n;
    record.loss_l1 /= n;
    record.step = step;
    if (validation.size() > 0) record.val_map = evaluate_model(model, validation, options.thresholds).average_map;

    // Without a validation set the last epoch is kept.
    const bool improved = record.val_map ? (!result.best_val_map || *record.val_map > *result.best_val_map)
                                         : epoch + 1 == cfg.epochs;
    if (improved) {
      result.best_val_map = record.val_map;
      result.best_epoch = record.epoch;
      if (options.checkpoint_path) {
        nlohmann::json meta = {{"epoch", record.epoch}, {"train", cfg}};
        meta["val_map"] = record.val_map ? nlohmann::json(*record.val_map) : nlohmann::json(nullptr);
        save_checkpoint(*options.checkpoint_path, model, meta);
      }
    }
    if (log) *log << to_json(record).dump() << '\n' << std::flush;
    if (options.on_epoch) options.on_epoch(record);
    result.history.push_back(record);
  }
  return result;
}

}  // namespace apf
