#include "apf/taa.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "apf/errors.hpp"

namespace apf {

std::string to_string(ShiftMode mode) { return mode == ShiftMode::kGeneral ? "gs" : "bs"; }

std::string to_string(FusionMode mode) {
  switch (mode) {
    case FusionMode::kFixed11: return "fixed";
    case FusionMode::kAlphaRight: return "alpha-right";
    case FusionMode::kAlphaLeft: return "alpha-left";
    case FusionMode::kAlphaComplement: return "alpha-complement";
    case FusionMode::kTwoAlphas: return "two-alphas";
  }
  return "alpha-complement";
}

std::string to_string(ScoreScale scale) { return scale == ScoreScale::kSqrtT ? "sqrt-t" : "sqrt-dh"; }

ShiftMode parse_shift_mode(std::string_view text) {
  if (text == "gs" || text == "general") return ShiftMode::kGeneral;
  if (text == "bs" || text == "bidirectional") return ShiftMode::kBidirectional;
  throw ConfigError("unknown shift mode '" + std::string(text) + "' (expected gs|bs)");
}

FusionMode parse_fusion_mode(std::string_view text) {
  if (text == "fixed") return FusionMode::kFixed11;
  if (text == "alpha-right") return FusionMode::kAlphaRight;
  if (text == "alpha-left") return FusionMode::kAlphaLeft;
  if (text == "alpha-complement") return FusionMode::kAlphaComplement;
  if (text == "two-alphas") return FusionMode::kTwoAlphas;
  throw ConfigError("unknown fusion mode '" + std::string(text) +
                    "' (expected fixed|alpha-right|alpha-left|alpha-complement|two-alphas)");
}

ScoreScale parse_score_scale(std::string_view text) {
  if (text == "sqrt-t") return ScoreScale::kSqrtT;
  if (text == "sqrt-dh") return ScoreScale::kSqrtDh;
  throw ConfigError("unknown score scale '" + std::string(text) + "' (expected sqrt-t|sqrt-dh)");
}

void TAAConfig::validate() const {
  if (model_dim == 0 || heads == 0) throw ConfigError("model_dim and heads must be positive");
  if (model_dim % heads != 0) {
    throw ConfigError("model_dim " + std::to_string(model_dim) + " is not divisible by heads " +
                      std::to_string(heads));
  }
  if (window == 0 || window % 2 == 0) throw ConfigError("window must be odd and positive, got " + std::to_string(window));
  if (shift_size == 0 || shift_size % 2 == 0) {
    throw ConfigError("shift size must be odd and positive, got " + std::to_string(shift_size));
  }
}

int shift_offset(std::size_t index, std::size_t shift_size, ShiftMode mode) {
  const int cyc = static_cast<int>(index % shift_size);
  return mode == ShiftMode::kBidirectional ? cyc - static_cast<int>(shift_size - 1) / 2 : cyc;
}

Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor w({fan_in, fan_out});
  for (double& v : w.data()) v = dist(rng);
  return w;
}

Var bind_param(Graph& g, ParameterSet& params, std::string_view name) { return g.param(params.get(name)); }

QKV project_qkv(Var x, Var wq, Var bq, Var wk, Var bk, Var wv, Var bv, std::size_t heads) {
  return QKV{split_heads(linear(x, wq, bq), heads), split_heads(linear(x, wk, bk), heads),
             split_heads(linear(x, wv, bv), heads)};
}

// ---------------------------------------------------------------------------
// Global perception attention

namespace {

constexpr double kTinyNorm = 1e-12;

struct WindowState {
  std::size_t heads = 0, len = 0, dim = 0, window = 0;
  std::vector<double> norms;        // [H x T]
  std::vector<double> dots;         // [H x T x 3w], raw q.k
  std::vector<double> delta;        // [H x T x 3]
  std::vector<std::uint8_t> keep;   // [H x T x 3w]
  std::size_t dot_products = 0;

  std::size_t slots() const { return 3 * window; }
};

WindowState compute_windows(const Tensor& q, const Tensor& k, std::size_t window, bool cosine_weights) {
  if (q.rank() != 3 || k.shape() != q.shape()) {
    throw DimensionError("windowed attention expects matching [H x T x D] q/k, got " + shape_string(q.shape()) +
                         " and " + shape_string(k.shape()));
  }
  if (window == 0 || window % 2 == 0) throw ConfigError("window must be odd and positive");
  WindowState st;
  st.heads = q.dim(0);
  st.len = q.dim(1);
  st.dim = q.dim(2);
  st.window = window;
  const std::size_t H = st.heads, T = st.len, D = st.dim, S = st.slots();
  st.norms.assign(H * T, 0.0);
  st.dots.assign(H * T * S, 0.0);
  st.delta.assign(H * T * 3, 0.0);
  st.keep.assign(H * T * S, 0);
  const double* qd = q.data().data();
  const double* kd = k.data().data();
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t t = 0; t < T; ++t) {
      const double* row = qd + (h * T + t) * D;
      double acc = 0.0;
      for (std::size_t d = 0; d < D; ++d) acc += row[d] * row[d];
      st.norms[h * T + t] = std::sqrt(acc);
    }
  const long span_half = static_cast<long>(S - 1) / 2;
  const long w = static_cast<long>(window);
  const long len = static_cast<long>(T);
  for (std::size_t h = 0; h < H; ++h) {
    for (std::size_t i = 0; i < T; ++i) {
      const double* qi = qd + (h * T + i) * D;
      const double ni = st.norms[h * T + i];
      for (long a = 0; a < 3; ++a) {
        const long anchor = static_cast<long>(i) + (a - 1) * w;
        if (anchor < 0 || anchor >= len) continue;
        double delta = 1.0;
        if (ni < kTinyNorm) {
          delta = 0.0;
        } else if (cosine_weights && a != 1) {
          const double* qn = qd + (h * T + static_cast<std::size_t>(anchor)) * D;
          const double nn = st.norms[h * T + static_cast<std::size_t>(anchor)];
          if (nn < kTinyNorm) {
            delta = 0.0;
          } else {
            double dot = 0.0;
            for (std::size_t d = 0; d < D; ++d) dot += qi[d] * qn[d];
            delta = dot / (ni * nn);
          }
        }
        if (!cosine_weights) delta = 1.0;
        st.delta[(h * T + i) * 3 + static_cast<std::size_t>(a)] = delta;
        for (long r = 0; r < w; ++r) {
          const std::size_t slot = static_cast<std::size_t>(a * w + r);
          const long p = static_cast<long>(i) - span_half + static_cast<long>(slot);
          if (p < 0 || p >= len) continue;
          const double* kp = kd + (h * T + static_cast<std::size_t>(p)) * D;
          double dot = 0.0;
          for (std::size_t d = 0; d < D; ++d) dot += qi[d] * kp[d];
          st.dots[(h * T + i) * S + slot] = dot;
          st.keep[(h * T + i) * S + slot] = 1;
          ++st.dot_products;
        }
      }
    }
  }
  return st;
}

}  // namespace

WindowScores gpa_scores(const Tensor& q, const Tensor& k, std::size_t window, bool cosine_weights) {
  WindowState st = compute_windows(q, k, window, cosine_weights);
  const std::size_t S = st.slots();
  WindowScores out{Tensor({st.heads, st.len, S}), st.keep, Tensor({st.heads, st.len, 3}), st.dot_products};
  for (std::size_t row = 0; row < st.heads * st.len; ++row) {
    for (std::size_t a = 0; a < 3; ++a) out.delta[row * 3 + a] = st.delta[row * 3 + a];
    for (std::size_t s = 0; s < S; ++s) {
      const std::size_t idx = row * S + s;
      if (st.keep[idx]) out.scores[idx] = st.delta[row * 3 + s / st.window] * st.dots[idx];
    }
  }
  return out;
}

double score_scale_value(ScoreScale scale, std::size_t seq_len, std::size_t head_dim) {
  return std::sqrt(static_cast<double>(scale == ScoreScale::kSqrtT ? seq_len : head_dim));
}

Var gpa_attention(Var q, Var k, Var v, std::size_t window, double scale, bool cosine_weights, AttentionStats* stats) {
  const Tensor& qv = q.value();
  const Tensor& vv = v.value();
  if (vv.shape() != qv.shape()) {
    throw DimensionError("windowed attention: v " + shape_string(vv.shape()) + " vs q " + shape_string(qv.shape()));
  }
  if (qv.dim(1) < 1) throw ContractError("windowed attention on an empty sequence");
  auto st = std::make_shared<WindowState>(compute_windows(qv, k.value(), window, cosine_weights));
  if (stats != nullptr) stats->dot_products += st->dot_products;
  const std::size_t H = st->heads, T = st->len, D = st->dim, S = st->slots();
  const long span_half = static_cast<long>(S - 1) / 2;

  // probs holds the softmax weights per slot; reused by backward.
  auto probs = std::make_shared<std::vector<double>>(H * T * S, 0.0);
  Tensor out({H, T, D});
  for (std::size_t h = 0; h < H; ++h) {
    for (std::size_t i = 0; i < T; ++i) {
      const std::size_t row = h * T + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t s = 0; s < S; ++s) {
        if (!st->keep[row * S + s]) continue;
        mx = std::max(mx, st->delta[row * 3 + s / window] * st->dots[row * S + s] / scale);
      }
      double z = 0.0;
      for (std::size_t s = 0; s < S; ++s) {
        if (!st->keep[row * S + s]) continue;
        const double e = std::exp(st->delta[row * 3 + s / window] * st->dots[row * S + s] / scale - mx);
        (*probs)[row * S + s] = e;
        z += e;
      }
      double* orow = out.data().data() + row * D;
      for (std::size_t s = 0; s < S; ++s) {
        if (!st->keep[row * S + s]) continue;
        const double pw = (*probs)[row * S + s] /= z;
        const std::size_t p = static_cast<std::size_t>(static_cast<long>(i) - span_half + static_cast<long>(s));
        const double* vrow = vv.data().data() + (h * T + p) * D;
        for (std::size_t d = 0; d < D; ++d) orow[d] += pw * vrow[d];
      }
    }
  }

  return q.graph().record(
      "gpa_attention", std::move(out), {q, k, v},
      [q, k, v, st, probs, scale, cosine_weights, span_half](Graph& g, const Tensor& go, const Tensor&) {
        const std::size_t H = st->heads, T = st->len, D = st->dim, S = st->slots(), w = st->window;
        const double* qd = g.value(q).data().data();
        const double* kd = g.value(k).data().data();
        const double* vd = g.value(v).data().data();
        const bool need_q = g.requires_grad(q), need_k = g.requires_grad(k), need_v = g.requires_grad(v);
        double* gq = need_q ? g.grad_buffer(q).data().data() : nullptr;
        double* gk = need_k ? g.grad_buffer(k).data().data() : nullptr;
        double* gv = need_v ? g.grad_buffer(v).data().data() : nullptr;
        std::vector<double> dprob(S), dscore(S);
        for (std::size_t h = 0; h < H; ++h) {
          for (std::size_t i = 0; i < T; ++i) {
            const std::size_t row = h * T + i;
            const double* grow = go.data().data() + row * D;
            double weighted = 0.0;
            for (std::size_t s = 0; s < S; ++s) {
              dprob[s] = 0.0;
              if (!st->keep[row * S + s]) continue;
              const std::size_t p = static_cast<std::size_t>(static_cast<long>(i) - span_half + static_cast<long>(s));
              const double* vrow = vd + (h * T + p) * D;
              const double pw = (*probs)[row * S + s];
              double acc = 0.0;
              for (std::size_t d = 0; d < D; ++d) acc += grow[d] * vrow[d];
              dprob[s] = acc;
              weighted += pw * acc;
              if (gv != nullptr) {
                double* gvrow = gv + (h * T + p) * D;
                for (std::size_t d = 0; d < D; ++d) gvrow[d] += pw * grow[d];
              }
            }
            if (!need_q && !need_k) continue;
            double ddelta[3] = {0.0, 0.0, 0.0};
            const double* qi = qd + row * D;
            for (std::size_t s = 0; s < S; ++s) {
              if (!st->keep[row * S + s]) continue;
              const double ds = (*probs)[row * S + s] * (dprob[s] - weighted) / scale;
              const std::size_t a = s / w;
              const double delta = st->delta[row * 3 + a];
              ddelta[a] += ds * st->dots[row * S + s];
              const double ddot = ds * delta;
              if (ddot == 0.0) continue;
              const std::size_t p = static_cast<std::size_t>(static_cast<long>(i) - span_half + static_cast<long>(s));
              const double* kp = kd + (h * T + p) * D;
              if (gq != nullptr)
                for (std::size_t d = 0; d < D; ++d) gq[row * D + d] += ddot * kp[d];
              if (gk != nullptr)
                for (std::size_t d = 0; d < D; ++d) gk[(h * T + p) * D + d] += ddot * qi[d];
            }
            // Cosine weights of the side windows depend on q_i and the anchor query.
            if (!cosine_weights || gq == nullptr) continue;
            const double ni = st->norms[row];
            if (ni < kTinyNorm) continue;
            for (std::size_t a = 0; a < 3; a += 2) {
              if (ddelta[a] == 0.0) continue;
              const long anchor = static_cast<long>(i) + (static_cast<long>(a) - 1) * static_cast<long>(w);
              if (anchor < 0 || anchor >= static_cast<long>(T)) continue;
              const std::size_t nrow = h * T + static_cast<std::size_t>(anchor);
              const double nn = st->norms[nrow];
              if (nn < kTinyNorm) continue;
              const double delta = st->delta[row * 3 + a];
              const double* qn = qd + nrow * D;
              for (std::size_t d = 0; d < D; ++d) {
                gq[row * D + d] += ddelta[a] * (qn[d] / (ni * nn) - delta * qi[d] / (ni * ni));
                gq[nrow * D + d] += ddelta[a] * (qi[d] / (ni * nn) - delta * qn[d] / (nn * nn));
              }
            }
          }
        }
      });
}

Var gpa_forward(const QKV& qkv, const TAAConfig& cfg, AttentionStats* stats) {
  const std::size_t len = qkv.q.value().dim(1);
  if (len < 1) throw ContractError("gpa_forward on an empty sequence");
  const double scale = score_scale_value(cfg.score_scale, len, qkv.q.value().dim(2));
  return merge_heads(gpa_attention(qkv.q, qkv.k, qkv.v, cfg.window, scale, cfg.cosine_weights, stats));
}

// ---------------------------------------------------------------------------
// Dense attention

Var dense_attention(Var q, Var k, Var v, double scale) {
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  if (qv.rank() != 3 || kv.rank() != 3 || vv.shape() != kv.shape() || qv.dim(0) != kv.dim(0) ||
      qv.dim(2) != kv.dim(2)) {
    throw DimensionError("dense_attention shapes: q " + shape_string(qv.shape()) + ", k " + shape_string(kv.shape()) +
                         ", v " + shape_string(vv.shape()));
  }
  const std::size_t H = qv.dim(0), N = qv.dim(1), M = kv.dim(1), D = qv.dim(2);
  auto probs = std::make_shared<Tensor>(Shape{H, N, M});
  Tensor out({H, N, D});
  for (std::size_t h = 0; h < H; ++h) {
    for (std::size_t i = 0; i < N; ++i) {
      const double* qi = qv.data().data() + (h * N + i) * D;
      double* prow = probs->data().data() + (h * N + i) * M;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < M; ++j) {
        const double* kj = kv.data().data() + (h * M + j) * D;
        double dot = 0.0;
        for (std::size_t d = 0; d < D; ++d) dot += qi[d] * kj[d];
        prow[j] = dot / scale;
        mx = std::max(mx, prow[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < M; ++j) z += (prow[j] = std::exp(prow[j] - mx));
      double* orow = out.data().data() + (h * N + i) * D;
      for (std::size_t j = 0; j < M; ++j) {
        prow[j] /= z;
        const double* vj = vv.data().data() + (h * M + j) * D;
        for (std::size_t d = 0; d < D; ++d) orow[d] += prow[j] * vj[d];
      }
    }
  }
  return q.graph().record(
      "dense_attention", std::move(out), {q, k, v},
      [q, k, v, probs, scale, H, N, M, D](Graph& g, const Tensor& go, const Tensor&) {
        const double* qd = g.value(q).data().data();
        const double* kd = g.value(k).data().data();
        const double* vd = g.value(v).data().data();
        double* gq = g.requires_grad(q) ? g.grad_buffer(q).data().data() : nullptr;
        double* gk = g.requires_grad(k) ? g.grad_buffer(k).data().data() : nullptr;
        double* gv = g.requires_grad(v) ? g.grad_buffer(v).data().data() : nullptr;
        std::vector<double> dprob(M);
        for (std::size_t h = 0; h < H; ++h) {
          for (std::size_t i = 0; i < N; ++i) {
            const double* grow = go.data().data() + (h * N + i) * D;
            const double* prow = probs->data().data() + (h * N + i) * M;
            double weighted = 0.0;
            for (std::size_t j = 0; j < M; ++j) {
              const double* vj = vd + (h * M + j) * D;
              double acc = 0.0;
              for (std::size_t d = 0; d < D; ++d) acc += grow[d] * vj[d];
              dprob[j] = acc;
              weighted += prow[j] * acc;
              if (gv != nullptr)
                for (std::size_t d = 0; d < D; ++d) gv[(h * M + j) * D + d] += prow[j] * grow[d];
            }
            const double* qi = qd + (h * N + i) * D;
            for (std::size_t j = 0; j < M; ++j) {
              const double ds = prow[j] * (dprob[j] - weighted) / scale;
              if (ds == 0.0) continue;
              const double* kj = kd + (h * M + j) * D;
              if (gq != nullptr)
                for (std::size_t d = 0; d < D; ++d) gq[(h * N + i) * D + d] += ds * kj[d];
              if (gk != nullptr)
                for (std::size_t d = 0; d < D; ++d) gk[(h * M + j) * D + d] += ds * qi[d];
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Local convolutional shift

namespace {

void require_heads_layout(const char* op, const Tensor& v) {
  if (v.rank() != 3) throw DimensionError(std::string(op) + " expects [H x T x D_h], got " + shape_string(v.shape()));
}

void check_shift_size(std::size_t s) {
  if (s == 0 || s % 2 == 0) throw ConfigError("shift size must be odd and positive, got " + std::to_string(s));
}

}  // namespace

Tensor temporal_shift(const Tensor& v, std::size_t shift_size, ShiftMode mode, int direction) {
  require_heads_layout("temporal_shift", v);
  check_shift_size(shift_size);
  const std::size_t H = v.dim(0), T = v.dim(1), D = v.dim(2);
  Tensor out(v.shape());
  for (std::size_t d = 0; d < D; ++d) {
    const long off = direction * shift_offset(d, shift_size, mode);
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t t = 0; t < T; ++t) {
        const long dst = static_cast<long>(t) + off;
        if (dst < 0 || dst >= static_cast<long>(T)) continue;
        out.at(h, static_cast<std::size_t>(dst), d) = v.at(h, t, d);
      }
  }
  return out;
}

Tensor channel_shift(const Tensor& v, std::size_t shift_size, ShiftMode mode, int direction) {
  require_heads_layout("channel_shift", v);
  check_shift_size(shift_size);
  const std::size_t H = v.dim(0), T = v.dim(1), D = v.dim(2);
  Tensor out(v.shape());
  for (std::size_t t = 0; t < T; ++t) {
    const long off = direction * shift_offset(t, shift_size, mode);
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t d = 0; d < D; ++d) {
        const long dst = static_cast<long>(d) + off;
        if (dst < 0 || dst >= static_cast<long>(D)) continue;
        out.at(h, t, static_cast<std::size_t>(dst)) = v.at(h, t, d);
      }
  }
  return out;
}

Var temporal_shift(Var v, std::size_t shift_size, ShiftMode mode) {
  return v.graph().record("temporal_shift", temporal_shift(v.value(), shift_size, mode, 1), {v},
                          [v, shift_size, mode](Graph& g, const Tensor& go, const Tensor&) {
                            g.accumulate(v, temporal_shift(go, shift_size, mode, -1));
                          });
}

Var channel_shift(Var v, std::size_t shift_size, ShiftMode mode) {
  return v.graph().record("channel_shift", channel_shift(v.value(), shift_size, mode, 1), {v},
                          [v, shift_size, mode](Graph& g, const Tensor& go, const Tensor&) {
                            g.accumulate(v, channel_shift(go, shift_size, mode, -1));
                          });
}

Var lcs_heads(Var v, std::size_t shift_size, ShiftMode mode) {
  return add(add(v, temporal_shift(v, shift_size, mode)), channel_shift(v, shift_size, mode));
}

Var lcs_forward(Var v, const TAAConfig& cfg) { return merge_heads(lcs_heads(v, cfg.shift_size, cfg.shift_mode)); }

Var fuse_branches(Var attn, Var conv, FusionMode mode, Var alpha, Var alpha2) {
  switch (mode) {
    case FusionMode::kFixed11: return add(attn, conv);
    case FusionMode::kAlphaRight: return add(attn, scale_by(alpha, conv));
    case FusionMode::kAlphaLeft: return add(scale_by(alpha, attn), conv);
    case FusionMode::kAlphaComplement: return add(scale_by(alpha, attn), scale_by(one_minus(alpha), conv));
    case FusionMode::kTwoAlphas: return add(scale_by(alpha, attn), scale_by(alpha2, conv));
  }
  throw ConfigError("unhandled fusion mode");
}

// ---------------------------------------------------------------------------
// Block

void init_taa_params(ParameterSet& params, const std::string& prefix, const TAAConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  const std::size_t c = cfg.model_dim;
  for (const char* name : {"q", "k", "v"}) {
    params.add(prefix + ".w" + name, xavier_uniform(c, c, rng));
    params.add(prefix + ".b" + name, Tensor({c}));
  }
  params.add(prefix + ".wo", xavier_uniform(c, c, rng));
  params.add(prefix + ".bo", Tensor({c}));
  if (cfg.fusion_mode != FusionMode::kFixed11) params.add(prefix + ".alpha", Tensor::scalar(0.5));
  if (cfg.fusion_mode == FusionMode::kTwoAlphas) params.add(prefix + ".alpha2", Tensor::scalar(0.5));
}

Var taa_forward(Graph& g, ParameterSet& params, const std::string& prefix, Var x, const TAAConfig& cfg,
                AttentionStats* stats) {
  if (x.value().rank() != 2 || x.value().dim(1) != cfg.model_dim) {
    throw DimensionError("taa_forward: input " + shape_string(x.value().shape()) + " vs model_dim " +
                         std::to_string(cfg.model_dim));
  }
  const QKV qkv = project_qkv(x, bind_param(g, params, prefix + ".wq"), bind_param(g, params, prefix + ".bq"),
                              bind_param(g, params, prefix + ".wk"), bind_param(g, params, prefix + ".bk"),
                              bind_param(g, params, prefix + ".wv"), bind_param(g, params, prefix + ".bv"), cfg.heads);
  Var attn = gpa_forward(qkv, cfg, stats);
  Var conv = lcs_forward(qkv.v, cfg);
  Var alpha = cfg.fusion_mode == FusionMode::kFixed11 ? Var() : bind_param(g, params, prefix + ".alpha");
  Var alpha2 = cfg.fusion_mode == FusionMode::kTwoAlphas ? bind_param(g, params, prefix + ".alpha2") : Var();
  Var fused = fuse_branches(attn, conv, cfg.fusion_mode, alpha, alpha2);
  return linear(fused, bind_param(g, params, prefix + ".wo"), bind_param(g, params, prefix + ".bo"));
}

}  // namespace apf
