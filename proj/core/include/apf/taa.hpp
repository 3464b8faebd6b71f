#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "apf/autodiff.hpp"

namespace apf {

enum class ShiftMode { kGeneral, kBidirectional };
enum class FusionMode { kFixed11, kAlphaRight, kAlphaLeft, kAlphaComplement, kTwoAlphas };
enum class ScoreScale { kSqrtT, kSqrtDh };

std::string to_string(ShiftMode mode);
std::string to_string(FusionMode mode);
std::string to_string(ScoreScale scale);
ShiftMode parse_shift_mode(std::string_view text);
FusionMode parse_fusion_mode(std::string_view text);
ScoreScale parse_score_scale(std::string_view text);

/// Hyperparameters of one temporal-aware attention block.
struct TAAConfig {
  std::size_t model_dim = 64;
  std::size_t heads = 4;
  std::size_t window = 5;      // w, odd
  std::size_t shift_size = 9;  // s, odd
  ShiftMode shift_mode = ShiftMode::kBidirectional;
  FusionMode fusion_mode = FusionMode::kAlphaComplement;
  ScoreScale score_scale = ScoreScale::kSqrtT;
  /// Diagnostic: false forces every window weight to 1.
  bool cosine_weights = true;

  std::size_t head_dim() const { return model_dim / heads; }
  /// Throws ConfigError on a violated invariant.
  void validate() const;
  bool operator==(const TAAConfig&) const = default;
};

/// Offset applied to slice `index` (channel for the temporal shift, time step
/// for the channel shift). BS: (index mod s) - (s-1)/2, GS: index mod s.
int shift_offset(std::size_t index, std::size_t shift_size, ShiftMode mode);

struct QKV {
  Var q, k, v;  // each [H x T x D_h]
};

/// Three 1x1 projections of x[T x C_D], reshaped into heads.
QKV project_qkv(Var x, Var wq, Var bq, Var wk, Var bk, Var wv, Var bv, std::size_t heads);

/// Windowed scores for every query: slot j of query i looks at key position
/// i - (3w-1)/2 + j, i.e. three adjacent size-w windows centered at i-w, i, i+w.
struct WindowScores {
  Tensor scores;                    // [H x T x 3w], delta * (q_i . k_p); 0 where masked
  std::vector<std::uint8_t> keep;   // same layout, 1 = valid slot
  Tensor delta;                     // [H x T x 3] per-window weights (0 for masked windows)
  std::size_t dot_products = 0;     // query-key products evaluated, all heads
};

WindowScores gpa_scores(const Tensor& q, const Tensor& k, std::size_t window, bool cosine_weights = true);

/// Counters filled by gpa_attention.
struct AttentionStats {
  std::size_t dot_products = 0;  // summed over heads
};

/// Differentiable windowed attention: softmax(scores / scale) over valid slots,
/// applied to V. q,k,v are [H x T x D_h]; returns [H x T x D_h].
Var gpa_attention(Var q, Var k, Var v, std::size_t window, double scale, bool cosine_weights,
                  AttentionStats* stats = nullptr);

double score_scale_value(ScoreScale scale, std::size_t seq_len, std::size_t head_dim);

/// Global perception attention branch output, merged back to [T x C_D].
Var gpa_forward(const QKV& qkv, const TAAConfig& cfg, AttentionStats* stats = nullptr);

/// Dense multi-head attention over [H x N x D] queries and [H x M x D] keys/values.
Var dense_attention(Var q, Var k, Var v, double scale);

/// out[h][t + o(d)][d] = in[h][t][d] with zero fill; `direction` = -1 applies -o(d).
Tensor temporal_shift(const Tensor& v, std::size_t shift_size, ShiftMode mode, int direction = 1);
/// out[h][t][d + o(t)] = in[h][t][d] with zero fill; `direction` = -1 applies -o(t).
Tensor channel_shift(const Tensor& v, std::size_t shift_size, ShiftMode mode, int direction = 1);
Var temporal_shift(Var v, std::size_t shift_size, ShiftMode mode);
Var channel_shift(Var v, std::size_t shift_size, ShiftMode mode);

/// Local convolutional shift: V + temporal_shift(V) + channel_shift(V), still [H x T x D_h].
Var lcs_heads(Var v, std::size_t shift_size, ShiftMode mode);
/// lcs_heads merged back to [T x C_D].
Var lcs_forward(Var v, const TAAConfig& cfg);

/// Combines the two branch outputs per the fusion mode. alpha2 is only read
/// for kTwoAlphas; alpha is ignored for kFixed11.
Var fuse_branches(Var attn, Var conv, FusionMode mode, Var alpha, Var alpha2);

/// Parameters owned by one TAA block, registered under `prefix`.
void init_taa_params(ParameterSet& params, const std::string& prefix, const TAAConfig& cfg, std::mt19937_64& rng);
/// Full block: projections, both branches, fusion and output projection.
Var taa_forward(Graph& g, ParameterSet& params, const std::string& prefix, Var x, const TAAConfig& cfg,
                AttentionStats* stats = nullptr);

/// Parameter-count helpers shared with the model.
Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng);
Var bind_param(Graph& g, ParameterSet& params, std::string_view name);

}  // namespace apf
