#include "apf/matching.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "apf/errors.hpp"

namespace apf {

void GroundTruth::validate(std::size_t num_classes) const {
  for (std::size_t i = 0; i < segments.size(); ++i) {
    const Segment& s = segments[i];
    if (!(s.start >= 0.0 && s.start < s.end && s.end <= 1.0)) {
      throw ValidationError("ground truth " + std::to_string(i) + " is not a valid normalized segment");
    }
    if (s.label < 0 || static_cast<std::size_t>(s.label) >= num_classes) {
      throw ValidationError("ground truth " + std::to_string(i) + " has label " + std::to_string(s.label) +
                            " outside [0, " + std::to_string(num_classes) + ")");
    }
  }
}

double tiou_1d(const Segment& a, const Segment& b) {
  const double inter = std::max(0.0, std::min(a.end, b.end) - std::max(a.start, b.start));
  const double uni = a.length() + b.length() - inter;
  if (uni <= 0.0) return (a.start == b.start && a.end == b.end) ? 1.0 : 0.0;
  return inter / uni;
}

double diou_1d(const Segment& a, const Segment& b) {
  const double enclosing = std::max(a.end, b.end) - std::min(a.start, b.start);
  if (enclosing <= 0.0) return 1.0;
  const double rho = a.center() - b.center();
  return tiou_1d(a, b) - rho * rho / (enclosing * enclosing);
}

namespace {

// log(sigmoid(z)) and log(1 - sigmoid(z)) without overflow.
double log_sigmoid(double z) { return z >= 0.0 ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z)); }
double sigmoid_value(double z) { return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

// Loss of one logit and its derivative.
std::pair<double, double> focal_term(double z, bool positive, double gamma, double alpha) {
  const double p = sigmoid_value(z);
  if (positive) {
    // -alpha (1-p)^gamma log p
    const double q = 1.0 - p;
    const double lp = log_sigmoid(z);
    const double qg = std::pow(q, gamma);
    const double loss = -alpha * qg * lp;
    // d/dz: dp/dz = p q, dlogp/dz = q
    const double dqg = gamma == 0.0 ? 0.0 : gamma * std::pow(q, gamma - 1.0) * (-p * q);
    const double grad = -alpha * (dqg * lp + qg * q);
    return {loss, grad};
  }
  // -(1-alpha) p^gamma log(1-p)
  const double lq = log_sigmoid(-z);
  const double pg = std::pow(p, gamma);
  const double loss = -(1.0 - alpha) * pg * lq;
  const double dpg = gamma == 0.0 ? 0.0 : gamma * std::pow(p, gamma - 1.0) * (p * (1.0 - p));
  const double grad = -(1.0 - alpha) * (dpg * lq + pg * (-p));
  return {loss, grad};
}

}  // namespace

double focal_loss(std::span<const double> logits, int target, double gamma, double alpha) {
  double total = 0.0;
  for (std::size_t c = 0; c < logits.size(); ++c) {
    total += focal_term(logits[c], static_cast<int>(c) == target, gamma, alpha).first;
  }
  return total;
}

std::vector<std::vector<double>> cost_matrix(const std::vector<Prediction>& preds, const GroundTruth& gts,
                                             const CostWeights& weights) {
  std::vector<std::vector<double>> cost(preds.size(), std::vector<double>(gts.segments.size(), 0.0));
  for (std::size_t n = 0; n < preds.size(); ++n) {
    const Segment pred{preds[n].t_start, preds[n].t_end, 0, 1.0};
    for (std::size_t m = 0; m < gts.segments.size(); ++m) {
      const Segment& gt = gts.segments[m];
      const double prob = sigmoid_value(preds[n].class_logits.at(static_cast<std::size_t>(gt.label)));
      const double l1 = std::abs(pred.start - gt.start) + std::abs(pred.end - gt.end);
      cost[n][m] = weights.cls * (-prob) + weights.l1 * l1 + weights.iou * (1.0 - diou_1d(pred, gt));
    }
  }
  return cost;
}

std::vector<int> MatchResult::targets(std::size_t num_predictions, const GroundTruth& gts) const {
  std::vector<int> out(num_predictions, -1);
  for (const auto& [pred, gt] : pairs) out.at(pred) = gts.segments.at(gt).label;
  return out;
}

MatchResult hungarian_match(const std::vector<std::vector<double>>& cost) {
  const std::size_t rows = cost.size();
  const std::size_t cols = rows == 0 ? 0 : cost.front().size();
  MatchResult result;
  if (cols == 0) {
    for (std::size_t i = 0; i < rows; ++i) result.unmatched.push_back(i);
    return result;
  }
  for (const auto& row : cost) {
    if (row.size() != cols) throw DimensionError("hungarian_match: ragged cost matrix");
    for (double c : row)
      if (!std::isfinite(c)) throw NumericError("hungarian_match: non-finite cost");
  }
  if (rows < cols) {
    throw ContractError("hungarian_match: " + std::to_string(cols) + " ground truths but only " + std::to_string(rows) +
                        " queries; raise the query count");
  }
  // Shortest augmenting path with potentials. Ground truths are the "left"
  // side (n <= m), predictions the "right".
  const std::size_t n = cols, m = rows;
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> owner(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    owner[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = owner[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost[j - 1][i0 - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[owner[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (owner[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      owner[j0] = owner[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> gt_to_pred(n, 0);
  std::vector<char> taken(m, 0);
  for (std::size_t j = 1; j <= m; ++j) {
    if (owner[j] != 0) {
      gt_to_pred[owner[j] - 1] = j - 1;
      taken[j - 1] = 1;
    }
  }
  for (std::size_t g = 0; g < n; ++g) result.pairs.emplace_back(gt_to_pred[g], g);
  for (std::size_t p = 0; p < m; ++p)
    if (!taken[p]) result.unmatched.push_back(p);
  return result;
}

double assignment_cost(const std::vector<std::vector<double>>& cost, const MatchResult& match) {
  double total = 0.0;
  for (const auto& [pred, gt] : match.pairs) total += cost[pred][gt];
  return total;
}

// ---------------------------------------------------------------------------
// Differentiable losses

Var focal_loss(Var logits, std::span<const int> targets, double gamma, double alpha) {
  const Tensor& z = logits.value();
  if (z.rank() != 2 || targets.size() != z.dim(0)) {
    throw DimensionError("focal_loss: logits " + shape_string(z.shape()) + " vs " + std::to_string(targets.size()) +
                         " targets");
  }
  const std::size_t n = z.dim(0), k = z.dim(1);
  Tensor out({n});
  Tensor grad({n, k});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < k; ++c) {
      const auto [loss, d] = focal_term(z.at(i, c), targets[i] == static_cast<int>(c), gamma, alpha);
      out[i] += loss;
      grad.at(i, c) = d;
    }
  }
  return logits.graph().record("focal_loss", std::move(out), {logits},
                               [logits, grad = std::move(grad), n, k](Graph& g, const Tensor& go, const Tensor&) {
                                 Tensor& gz = g.grad_buffer(logits);
                                 for (std::size_t i = 0; i < n; ++i)
                                   for (std::size_t c = 0; c < k; ++c) gz.at(i, c) += go[i] * grad.at(i, c);
                               });
}

namespace {

void require_bounds_pair(const char* op, const Tensor& bounds, const Tensor& targets) {
  if (bounds.rank() != 2 || bounds.dim(1) != 2 || targets.shape() != bounds.shape()) {
    throw DimensionError(std::string(op) + ": bounds " + shape_string(bounds.shape()) + " vs targets " +
                         shape_string(targets.shape()));
  }
}

}  // namespace

Var diou_loss(Var bounds, const Tensor& targets) {
  const Tensor& b = bounds.value();
  require_bounds_pair("diou_loss", b, targets);
  const std::size_t n = b.dim(0);
  Tensor out({n});
  Tensor grad({n, 2});
  for (std::size_t i = 0; i < n; ++i) {
    const double ps = b.at(i, 0), pe = b.at(i, 1), gs = targets.at(i, 0), ge = targets.at(i, 1);
    const Segment pred{ps, pe, 0, 1.0}, gt{gs, ge, 0, 1.0};
    out[i] = 1.0 - diou_1d(pred, gt);

    const double inter = std::max(0.0, std::min(pe, ge) - std::max(ps, gs));
    const double uni = (pe - ps) + (ge - gs) - inter;
    const double enclosing = std::max(pe, ge) - std::min(ps, gs);
    if (uni <= 0.0 || enclosing <= 0.0) continue;
    const double d_inter_s = (inter > 0.0 && ps > gs) ? -1.0 : 0.0;
    const double d_inter_e = (inter > 0.0 && pe < ge) ? 1.0 : 0.0;
    const double d_uni_s = -1.0 - d_inter_s;
    const double d_uni_e = 1.0 - d_inter_e;
    const double d_iou_s = (d_inter_s * uni - inter * d_uni_s) / (uni * uni);
    const double d_iou_e = (d_inter_e * uni - inter * d_uni_e) / (uni * uni);
    const double d_enc_s = ps < gs ? -1.0 : 0.0;
    const double d_enc_e = pe > ge ? 1.0 : 0.0;
    const double rho = 0.5 * (ps + pe) - 0.5 * (gs + ge);
    const double c2 = enclosing * enclosing;
    const double d_pen_s = rho / c2 - 2.0 * rho * rho * d_enc_s / (c2 * enclosing);
    const double d_pen_e = rho / c2 - 2.0 * rho * rho * d_enc_e / (c2 * enclosing);
    // loss = 1 - iou + rho^2 / c^2
    grad.at(i, 0) = -d_iou_s + d_pen_s;
    grad.at(i, 1) = -d_iou_e + d_pen_e;
  }
  return bounds.graph().record("diou_loss", std::move(out), {bounds},
                               [bounds, grad = std::move(grad), n](Graph& g, const Tensor& go, const Tensor&) {
                                 Tensor& gb = g.grad_buffer(bounds);
                                 for (std::size_t i = 0; i < n; ++i) {
                                   gb.at(i, 0) += go[i] * grad.at(i, 0);
                                   gb.at(i, 1) += go[i] * grad.at(i, 1);
                                 }
                               });
}

Var l1_boundary_loss(Var bounds, const Tensor& targets) {
  const Tensor& b = bounds.value();
  require_bounds_pair("l1_boundary_loss", b, targets);
  const std::size_t n = b.dim(0);
  Tensor out({n});
  Tensor sign({n, 2});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < 2; ++j) {
      const double d = b.at(i, j) - targets.at(i, j);
      out[i] += std::abs(d);
      sign.at(i, j) = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
    }
  }
  return bounds.graph().record("l1_boundary_loss", std::move(out), {bounds},
                               [bounds, sign = std::move(sign), n](Graph& g, const Tensor& go, const Tensor&) {
                                 Tensor& gb = g.grad_buffer(bounds);
                                 for (std::size_t i = 0; i < n; ++i)
                                   for (std::size_t j = 0; j < 2; ++j) gb.at(i, j) += go[i] * sign.at(i, j);
                               });
}

LossTerms total_loss(const HeadOutputs& out, const GroundTruth& gts, const MatchResult& match, const LossConfig& cfg) {
  const std::size_t nq = out.logits.value().dim(0);
  const std::vector<int> targets = match.targets(nq, gts);
  LossTerms terms;
  Var cls = mean(focal_loss(out.logits, targets, cfg.gamma, cfg.alpha));
  terms.cls = cls.value().item();
  terms.positives = match.pairs.size();
  if (terms.positives == 0) {
    terms.total = cls;
    return terms;
  }
  std::vector<std::size_t> rows;
  Tensor target_bounds({terms.positives, 2});
  for (std::size_t i = 0; i < match.pairs.size(); ++i) {
    const auto [pred, gt] = match.pairs[i];
    rows.push_back(pred);
    target_bounds.at(i, 0) = gts.segments.at(gt).start;
    target_bounds.at(i, 1) = gts.segments.at(gt).end;
  }
  Var matched = select_rows(out.boundaries, rows);
  const double inv_pos = 1.0 / static_cast<double>(terms.positives);
  Var reg = scale(sum(diou_loss(matched, target_bounds)), inv_pos);
  Var l1 = scale(sum(l1_boundary_loss(matched, target_bounds)), inv_pos);
  terms.reg = reg.value().item();
  terms.l1 = l1.value().item();
  terms.total = add(cls, scale(add(reg, l1), cfg.lambda));
  return terms;
}

LossTerms match_and_loss(const HeadOutputs& out, const GroundTruth& gts, const LossConfig& cfg) {
  const auto preds = decode_predictions(out.logits.value(), out.boundaries.value());
  MatchResult match;
  if (gts.segments.empty()) {
    for (std::size_t i = 0; i < preds.size(); ++i) match.unmatched.push_back(i);
  } else {
    match = hungarian_match(cost_matrix(preds, gts, cfg.cost));
  }
  return total_loss(out, gts, match, cfg);
}

}  // namespace apf
