#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "apf/autodiff.hpp"
#include "apf/detection.hpp"
#include "apf/taa.hpp"

namespace apf {

/// Network hyperparameters. model_dim and heads live in the TAA configs and
/// must agree between encoder and decoder.
struct ModelConfig {
  std::size_t input_dim = 16;
  std::size_t encoder_layers = 2;
  std::size_t decoder_layers = 2;
  std::size_t queries = 10;
  std::size_t num_classes = 5;
  std::size_t mlp_ratio = 4;
  Activation activation = Activation::kGelu;
  bool learned_positions = false;
  std::size_t max_positions = 1024;  // rows of the learned table
  TAAConfig taa{64, 4, 5, 9, ShiftMode::kBidirectional, FusionMode::kAlphaComplement, ScoreScale::kSqrtT, true};
  TAAConfig taa_dec{64, 4, 5, 7, ShiftMode::kGeneral, FusionMode::kAlphaComplement, ScoreScale::kSqrtT, true};

  std::size_t model_dim() const { return taa.model_dim; }
  std::size_t heads() const { return taa.heads; }
  /// Sets model_dim/heads on both TAA configs.
  void set_width(std::size_t model_dim, std::size_t heads);
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const TAAConfig& cfg);
void from_json(const nlohmann::json& j, TAAConfig& cfg);
void to_json(nlohmann::json& j, const ModelConfig& cfg);
void from_json(const nlohmann::json& j, ModelConfig& cfg);

/// One decoded proposal; boundaries normalized to the video duration.
struct Prediction {
  double t_start = 0.0;
  double t_end = 0.0;
  std::vector<double> class_logits;

  /// Highest per-class sigmoid probability and its class.
  double score() const;
  int label() const;
};

/// Fixed sinusoidal table [T x C_D]: even columns sine, odd columns cosine.
Tensor positional_embedding(std::size_t length, std::size_t model_dim);

/// Kernel-3 same-padded convolution over time: x[T x in] -> [T x out].
Var conv1d_k3(Var x, Var w_prev, Var w_center, Var w_next, Var bias);

/// (center, width) in (0,1) -> clamped (t_start, t_end), row-wise.
Var center_width_to_bounds(Var center_width);

struct HeadOutputs {
  Var logits;      // [N_q x num_classes]
  Var boundaries;  // [N_q x 2], (t_start, t_end)
};

class Model {
 public:
  /// Fresh parameters drawn from `seed`.
  Model(ModelConfig cfg, std::uint64_t seed);
  /// Wraps existing parameters; throws ContractError when names or shapes disagree with cfg.
  Model(ModelConfig cfg, ParameterSet params);

  const ModelConfig& config() const { return cfg_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

  /// S_v[C x T] -> projected [T x C_D].
  Var input_projection(Graph& g, const Tensor& features);
  /// Positional table [len x C_D], fixed sinusoid or learned rows.
  Var positions(Graph& g, std::size_t len);
  /// Adds the positional table to projected features.
  Var add_positions(Graph& g, Var projected);
  Var encoder_layer(Graph& g, std::size_t layer, Var x, AttentionStats* stats = nullptr);
  Var encode(Graph& g, Var x, AttentionStats* stats = nullptr);
  /// `memory_positions` [T x C_D] is added to the memory before the key projection.
  Var decoder_layer(Graph& g, std::size_t layer, Var queries, Var memory, Var memory_positions);
  /// Learned query table [N_q x C_D].
  Var query_embeddings(Graph& g);
  Var decode(Graph& g, Var memory);
  HeadOutputs prediction_heads(Graph& g, Var decoded);
  /// Full pipeline from features [C x T].
  HeadOutputs forward(Graph& g, const Tensor& features, AttentionStats* stats = nullptr);

  /// Inference: N_q decoded predictions.
  std::vector<Prediction> predict(const Tensor& features);

 private:
  void init_params(std::mt19937_64& rng);
  Var mlp(Graph& g, const std::string& prefix, Var x);

  ModelConfig cfg_;
  ParameterSet params_;
};

std::vector<Prediction> decode_predictions(const Tensor& logits, const Tensor& boundaries);

/// Predictions scaled to seconds. No suppression is applied.
DetectionSet to_detections(const std::vector<Prediction>& preds, const std::string& video_id, double duration);

}  // namespace apf
