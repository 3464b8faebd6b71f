#pragma once

// Independent reference implementations used by the unit and acceptance
// tests. Nothing here calls into the library's kernels.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <vector>

#include "apf/tensor.hpp"
#include "apf/taa.hpp"

namespace apf::oracle {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -2.0, double hi = 2.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = dist(rng);
  return t;
}

inline int offset(std::size_t index, std::size_t s, ShiftMode mode) {
  const int r = static_cast<int>(index % s);
  return mode == ShiftMode::kBidirectional ? r - static_cast<int>((s - 1) / 2) : r;
}

/// Gather form: out[h][t][d] = in[h][t - o(d)][d], zero outside.
inline Tensor temporal_shift(const Tensor& v, std::size_t s, ShiftMode mode) {
  const std::size_t H = v.dim(0), T = v.dim(1), D = v.dim(2);
  Tensor out({H, T, D});
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t d = 0; d < D; ++d) {
        const long src = static_cast<long>(t) - offset(d, s, mode);
        if (src >= 0 && src < static_cast<long>(T)) out.at(h, t, d) = v.at(h, static_cast<std::size_t>(src), d);
      }
  return out;
}

/// Gather form: out[h][t][d] = in[h][t][d - o(t)], zero outside.
inline Tensor channel_shift(const Tensor& v, std::size_t s, ShiftMode mode) {
  const std::size_t H = v.dim(0), T = v.dim(1), D = v.dim(2);
  Tensor out({H, T, D});
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t d = 0; d < D; ++d) {
        const long src = static_cast<long>(d) - offset(t, s, mode);
        if (src >= 0 && src < static_cast<long>(D)) out.at(h, t, d) = v.at(h, t, static_cast<std::size_t>(src));
      }
  return out;
}

inline double cosine(const Tensor& q, std::size_t h, std::size_t a, std::size_t b) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t d = 0; d < q.dim(2); ++d) {
    dot += q.at(h, a, d) * q.at(h, b, d);
    na += q.at(h, a, d) * q.at(h, a, d);
    nb += q.at(h, b, d) * q.at(h, b, d);
  }
  if (na < 1e-24 || nb < 1e-24) return 0.0;
  return dot / std::sqrt(na * nb);
}

/// Enumerates the 3w key positions of every query directly from the window
/// definition: windows of size w centered at anchors i-w, i, i+w.
struct BruteScores {
  std::vector<double> score;  // [H][T][3w]
  std::vector<bool> valid;
};

inline BruteScores gpa_scores(const Tensor& q, const Tensor& k, std::size_t w, bool cosine_weights) {
  const std::size_t H = q.dim(0), T = q.dim(1), D = q.dim(2);
  const long half = static_cast<long>(w / 2);
  BruteScores out{std::vector<double>(H * T * 3 * w, 0.0), std::vector<bool>(H * T * 3 * w, false)};
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t i = 0; i < T; ++i)
      for (int win = 0; win < 3; ++win) {
        const long anchor = static_cast<long>(i) + (win - 1) * static_cast<long>(w);
        if (anchor < 0 || anchor >= static_cast<long>(T)) continue;
        const double delta = cosine_weights ? cosine(q, h, i, static_cast<std::size_t>(anchor)) : 1.0;
        for (long j = 0; j < static_cast<long>(w); ++j) {
          const long p = anchor - half + j;
          if (p < 0 || p >= static_cast<long>(T)) continue;
          double dot = 0.0;
          for (std::size_t d = 0; d < D; ++d) dot += q.at(h, i, d) * k.at(h, static_cast<std::size_t>(p), d);
          const std::size_t slot = (h * T + i) * 3 * w + static_cast<std::size_t>(win) * w + static_cast<std::size_t>(j);
          out.score[slot] = delta * dot;
          out.valid[slot] = true;
        }
      }
  return out;
}

/// Plain softmax(q k^T / scale) v per head.
inline Tensor dense_attention(const Tensor& q, const Tensor& k, const Tensor& v, double scale) {
  const std::size_t H = q.dim(0), N = q.dim(1), M = k.dim(1), D = q.dim(2);
  Tensor out({H, N, v.dim(2)});
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t i = 0; i < N; ++i) {
      std::vector<double> s(M);
      for (std::size_t j = 0; j < M; ++j) {
        double dot = 0.0;
        for (std::size_t d = 0; d < D; ++d) dot += q.at(h, i, d) * k.at(h, j, d);
        s[j] = dot / scale;
      }
      const double mx = *std::max_element(s.begin(), s.end());
      double z = 0.0;
      for (double& x : s) z += (x = std::exp(x - mx));
      for (std::size_t j = 0; j < M; ++j)
        for (std::size_t d = 0; d < v.dim(2); ++d) out.at(h, i, d) += s[j] / z * v.at(h, j, d);
    }
  return out;
}

/// Minimum assignment cost by enumerating every injective map gt -> prediction.
inline double brute_force_assignment(const std::vector<std::vector<double>>& cost) {
  const std::size_t rows = cost.size(), cols = cost.empty() ? 0 : cost[0].size();
  std::vector<std::size_t> perm(rows);
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) total += cost[perm[c]][c];
    best = std::min(best, total);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

/// AP from a PR curve walked by hand: at each TP rank add
/// (recall step) * (max precision at any rank with recall >= current).
inline double average_precision(const std::vector<bool>& tp, std::size_t num_gt) {
  std::vector<double> prec, rec;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < tp.size(); ++i) {
    hits += tp[i] ? 1 : 0;
    prec.push_back(static_cast<double>(hits) / static_cast<double>(i + 1));
    rec.push_back(static_cast<double>(hits) / static_cast<double>(num_gt));
  }
  double ap = 0.0, last = 0.0;
  for (std::size_t i = 0; i < tp.size(); ++i) {
    if (!tp[i]) continue;
    double best = 0.0;
    for (std::size_t j = i; j < tp.size(); ++j) best = std::max(best, prec[j]);
    ap += (rec[i] - last) * best;
    last = rec[i];
  }
  return ap;
}

}  // namespace apf::oracle
