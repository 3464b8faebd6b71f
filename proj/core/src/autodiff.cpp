#include "apf/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numbers>

#include "apf/errors.hpp"

namespace apf {

// ---------------------------------------------------------------------------
// ParameterSet

Parameter& ParameterSet::add(std::string name, Tensor init) {
  if (index_.contains(name)) throw ContractError("duplicate parameter name: " + name);
  index_.emplace(name, params_.size());
  Tensor grad(init.shape());
  params_.push_back(Parameter{std::move(name), std::move(init), std::move(grad)});
  return params_.back();
}

Parameter& ParameterSet::get(std::string_view name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown parameter: " + std::string(name));
  return params_[it->second];
}

const Parameter& ParameterSet::get(std::string_view name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown parameter: " + std::string(name));
  return params_[it->second];
}

bool ParameterSet::contains(std::string_view name) const { return index_.find(name) != index_.end(); }

std::size_t ParameterSet::scalar_count() const noexcept {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

void ParameterSet::zero_grad() {
  for (auto& p : params_) std::fill(p.grad.data().begin(), p.grad.data().end(), 0.0);
}

double ParameterSet::grad_norm() const {
  double acc = 0.0;
  for (const auto& p : params_)
    for (double g : p.grad.data()) acc += g * g;
  return std::sqrt(acc);
}

// ---------------------------------------------------------------------------
// Graph

namespace {
std::string& fault_slot() {
  static std::string fault;
  return fault;
}
}  // namespace

void set_gradient_fault(std::string op) { fault_slot() = std::move(op); }
const std::string& gradient_fault() { return fault_slot(); }

const Tensor& Var::value() const { return graph_->value(*this); }

Var Graph::constant(Tensor value) {
  nodes_.push_back(Node{"constant", std::move(value), Tensor(), false, false, nullptr, {}});
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Graph::param(Parameter& p) {
  nodes_.push_back(Node{"parameter", p.value, Tensor(), false, true, &p, {}});
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Graph::record(const char* op, Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
  bool needs = false;
  for (const Var& v : inputs) needs = needs || nodes_[v.id()].requires_grad;
  nodes_.push_back(Node{op, std::move(value), Tensor(), false, needs, nullptr, needs ? std::move(backward) : BackwardFn{}});
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Tensor Graph::grad(Var v) const {
  const Node& n = nodes_[v.id()];
  return n.has_grad ? n.grad : Tensor(n.value.shape());
}

Tensor& Graph::grad_buffer(Var v) {
  Node& n = nodes_[v.id()];
  if (!n.has_grad) {
    n.grad = Tensor(n.value.shape());
    n.has_grad = true;
  }
  return n.grad;
}

void Graph::accumulate(Var v, const Tensor& g) {
  if (!nodes_[v.id()].requires_grad) return;
  Tensor& buf = grad_buffer(v);
  auto dst = buf.data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void Graph::backward(Var loss) {
  if (value(loss).size() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " + shape_string(value(loss).shape()));
  }
  for (auto& n : nodes_) n.has_grad = false;
  grad_buffer(loss)[0] = 1.0;
  const std::string& fault = gradient_fault();
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_grad || !n.requires_grad) continue;
    if (n.param != nullptr) {
      auto dst = n.param->grad.data();
      auto src = n.grad.data();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
      continue;
    }
    if (!n.backward) continue;
    if (!fault.empty() && fault == n.op) {
      Tensor flipped = n.grad;
      for (double& g : flipped.data()) g = -g;
      n.backward(*this, flipped, n.value);
    } else {
      n.backward(*this, n.grad, n.value);
    }
  }
}

// ---------------------------------------------------------------------------
// Ops

namespace {

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + " shape mismatch: " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

void require_matrix(const char* op, const Tensor& a) {
  if (a.rank() != 2) throw DimensionError(std::string(op) + " expects a matrix, got " + shape_string(a.shape()));
}

template <typename F>
Tensor map(const Tensor& x, F f) {
  Tensor out(x.shape());
  auto src = x.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = f(src[i]);
  return out;
}

}  // namespace

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

namespace {
double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}
}  // namespace

Var add(Var a, Var b) {
  require_same_shape("add", a.value(), b.value());
  Tensor out = a.value();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return a.graph().record("add", std::move(out), {a, b}, [a, b](Graph& g, const Tensor& go, const Tensor&) {
    g.accumulate(a, go);
    g.accumulate(b, go);
  });
}

Var sub(Var a, Var b) {
  require_same_shape("sub", a.value(), b.value());
  Tensor out = a.value();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return a.graph().record("sub", std::move(out), {a, b}, [a, b](Graph& g, const Tensor& go, const Tensor&) {
    g.accumulate(a, go);
    if (g.requires_grad(b)) {
      Tensor& gb = g.grad_buffer(b);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= go[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same_shape("mul", a.value(), b.value());
  Tensor out = a.value();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.graph().record("mul", std::move(out), {a, b}, [a, b](Graph& g, const Tensor& go, const Tensor&) {
    if (g.requires_grad(a)) {
      Tensor& ga = g.grad_buffer(a);
      const Tensor& bv = g.value(b);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i] * bv[i];
    }
    if (g.requires_grad(b)) {
      Tensor& gb = g.grad_buffer(b);
      const Tensor& av = g.value(a);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += go[i] * av[i];
    }
  });
}

Var scale(Var a, double factor) {
  Tensor out = map(a.value(), [factor](double v) { return v * factor; });
  return a.graph().record("scale", std::move(out), {a}, [a, factor](Graph& g, const Tensor& go, const Tensor&) {
    Tensor& ga = g.grad_buffer(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i] * factor;
  });
}

Var add_scalar(Var a, double offset) {
  Tensor out = map(a.value(), [offset](double v) { return v + offset; });
  return a.graph().record("add_scalar", std::move(out), {a}, [a](Graph& g, const Tensor& go, const Tensor&) { g.accumulate(a, go); });
}

Var scale_by(Var s, Var x) {
  if (s.value().size() != 1) throw DimensionError("scale_by expects a single-element factor");
  const double factor = s.value()[0];
  Tensor out = map(x.value(), [factor](double v) { return v * factor; });
  return x.graph().record("scale_by", std::move(out), {s, x}, [s, x](Graph& g, const Tensor& go, const Tensor&) {
    if (g.requires_grad(s)) {
      const Tensor& xv = g.value(x);
      double acc = 0.0;
      for (std::size_t i = 0; i < xv.size(); ++i) acc += go[i] * xv[i];
      g.grad_buffer(s)[0] += acc;
    }
    if (g.requires_grad(x)) {
      const double f = g.value(s)[0];
      Tensor& gx = g.grad_buffer(x);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i] * f;
    }
  });
}

Var one_minus(Var x) {
  Tensor out = map(x.value(), [](double v) { return 1.0 - v; });
  return x.graph().record("one_minus", std::move(out), {x}, [x](Graph& g, const Tensor& go, const Tensor&) {
    Tensor& gx = g.grad_buffer(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] -= go[i];
  });
}

Var sum(Var a) {
  double acc = 0.0;
  for (double v : a.value().data()) acc += v;
  return a.graph().record("sum", Tensor::scalar(acc), {a}, [a](Graph& g, const Tensor& go, const Tensor&) {
    Tensor& ga = g.grad_buffer(a);
    const double s = go[0];
    for (double& v : ga.data()) v += s;
  });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var sigmoid(Var x) {
  Tensor out = map(x.value(), [](double v) { return 1.0 / (1.0 + std::exp(-v)); });
  return x.graph().record("sigmoid", std::move(out), {x}, [x](Graph& g, const Tensor& go, const Tensor& yv) {
    Tensor& gx = g.grad_buffer(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i] * yv[i] * (1.0 - yv[i]);
  });
}

Var clamp(Var x, double lo, double hi) {
  Tensor out = map(x.value(), [lo, hi](double v) { return std::clamp(v, lo, hi); });
  return x.graph().record("clamp", std::move(out), {x}, [x, lo, hi](Graph& g, const Tensor& go, const Tensor&) {
    const Tensor& xv = g.value(x);
    Tensor& gx = g.grad_buffer(x);
    for (std::size_t i = 0; i < gx.size(); ++i)
      if (xv[i] > lo && xv[i] < hi) gx[i] += go[i];
  });
}

Var activation(Var x, Activation kind) {
  if (kind == Activation::kRelu) {
    Tensor out = map(x.value(), [](double v) { return v > 0.0 ? v : 0.0; });
    return x.graph().record("relu", std::move(out), {x}, [x](Graph& g, const Tensor& go, const Tensor&) {
      const Tensor& xv = g.value(x);
      Tensor& gx = g.grad_buffer(x);
      for (std::size_t i = 0; i < gx.size(); ++i)
        if (xv[i] > 0.0) gx[i] += go[i];
    });
  }
  Tensor out = map(x.value(), gelu);
  return x.graph().record("gelu", std::move(out), {x}, [x](Graph& g, const Tensor& go, const Tensor&) {
    const Tensor& xv = g.value(x);
    Tensor& gx = g.grad_buffer(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i] * gelu_grad(xv[i]);
  });
}

Var matmul(Var a, Var b) {
  Tensor out = apf::matmul(a.value(), b.value());
  return a.graph().record("matmul", std::move(out), {a, b}, [a, b](Graph& g, const Tensor& go, const Tensor&) {
    const Tensor& av = g.value(a);
    const Tensor& bv = g.value(b);
    const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    if (g.requires_grad(a)) kernels::gemm_nt_acc(go.data(), bv.data(), g.grad_buffer(a).data(), m, k, n);
    if (g.requires_grad(b)) kernels::gemm_tn_acc(av.data(), go.data(), g.grad_buffer(b).data(), m, k, n);
  });
}

Var transpose(Var a) {
  Tensor out = apf::transpose(a.value());
  return a.graph().record("transpose", std::move(out), {a}, [a](Graph& g, const Tensor& go, const Tensor&) {
    Tensor& ga = g.grad_buffer(a);
    const std::size_t r = ga.dim(0), c = ga.dim(1);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga.at(i, j) += go.at(j, i);
  });
}

Var add_row_bias(Var x, Var b) {
  const Tensor& xv = x.value();
  require_matrix("add_row_bias", xv);
  if (b.value().size() != xv.dim(1)) {
    throw DimensionError("add_row_bias: bias " + shape_string(b.value().shape()) + " vs rows of " +
                         shape_string(xv.shape()));
  }
  Tensor out = xv;
  const std::size_t n = xv.dim(0), m = xv.dim(1);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out.at(i, j) += b.value()[j];
  return x.graph().record("add_row_bias", std::move(out), {x, b}, [x, b, n, m](Graph& g, const Tensor& go, const Tensor&) {
    g.accumulate(x, go);
    if (g.requires_grad(b)) {
      Tensor& gb = g.grad_buffer(b);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) gb[j] += go.at(i, j);
    }
  });
}

Var linear(Var x, Var w, Var b) { return add_row_bias(matmul(x, w), b); }

Tensor softmax_lastdim(const Tensor& x, std::span<const std::uint8_t> keep) {
  if (!keep.empty() && keep.size() != x.size()) {
    throw DimensionError("softmax mask size " + std::to_string(keep.size()) + " vs input " + shape_string(x.shape()));
  }
  const std::size_t width = x.shape().back();
  const std::size_t rows = x.size() / width;
  Tensor out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * width;
    double mx = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < width; ++j) {
      if (!keep.empty() && !keep[base + j]) continue;
      mx = std::max(mx, x[base + j]);
      any = true;
    }
    if (!any) throw ContractError("softmax: degenerate row " + std::to_string(r) + " is fully masked");
    double z = 0.0;
    for (std::size_t j = 0; j < width; ++j) {
      if (!keep.empty() && !keep[base + j]) continue;
      const double e = std::exp(x[base + j] - mx);
      out[base + j] = e;
      z += e;
    }
    for (std::size_t j = 0; j < width; ++j) out[base + j] /= z;
  }
  return out;
}

Var softmax_lastdim(Var x, std::span<const std::uint8_t> keep) {
  Tensor out = softmax_lastdim(x.value(), keep);
  return x.graph().record("softmax", std::move(out), {x}, [x](Graph& g, const Tensor& go, const Tensor& yv) {
    Tensor& gx = g.grad_buffer(x);
    const std::size_t width = yv.shape().back();
    const std::size_t rows = yv.size() / width;
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t base = r * width;
      double dot = 0.0;
      for (std::size_t j = 0; j < width; ++j) dot += yv[base + j] * go[base + j];
      for (std::size_t j = 0; j < width; ++j) gx[base + j] += yv[base + j] * (go[base + j] - dot);
    }
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Tensor& xv = x.value();
  const std::size_t width = xv.shape().back();
  if (gamma.value().size() != width || beta.value().size() != width) {
    throw DimensionError("layer_norm: affine params " + shape_string(gamma.value().shape()) + " vs input " +
                         shape_string(xv.shape()));
  }
  if (!(eps > 0.0)) throw ContractError("layer_norm: eps must be positive");
  const std::size_t rows = xv.size() / width;
  Tensor normed(xv.shape());
  std::vector<double> inv_std(rows);
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * width;
    double mu = 0.0;
    for (std::size_t j = 0; j < width; ++j) mu += xv[base + j];
    mu /= static_cast<double>(width);
    double var = 0.0;
    for (std::size_t j = 0; j < width; ++j) var += (xv[base + j] - mu) * (xv[base + j] - mu);
    var /= static_cast<double>(width);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < width; ++j) {
      normed[base + j] = (xv[base + j] - mu) * inv_std[r];
      out[base + j] = gamma.value()[j] * normed[base + j] + beta.value()[j];
    }
  }
  return x.graph().record(
      "layer_norm", std::move(out), {x, gamma, beta},
      [x, gamma, beta, normed = std::move(normed), inv_std = std::move(inv_std), width, rows](Graph& g, const Tensor& go,
                                                                                           const Tensor&) {
        const Tensor& gv = g.value(gamma);
        if (g.requires_grad(gamma) || g.requires_grad(beta)) {
          Tensor dgamma(gv.shape()), dbeta(gv.shape());
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < width; ++j) {
              dgamma[j] += go[r * width + j] * normed[r * width + j];
              dbeta[j] += go[r * width + j];
            }
          g.accumulate(gamma, dgamma);
          g.accumulate(beta, dbeta);
        }
        if (!g.requires_grad(x)) return;
        Tensor& gx = g.grad_buffer(x);
        std::vector<double> dn(width);
        for (std::size_t r = 0; r < rows; ++r) {
          const std::size_t base = r * width;
          double mean_dn = 0.0, mean_dn_n = 0.0;
          for (std::size_t j = 0; j < width; ++j) {
            dn[j] = go[base + j] * gv[j];
            mean_dn += dn[j];
            mean_dn_n += dn[j] * normed[base + j];
          }
          mean_dn /= static_cast<double>(width);
          mean_dn_n /= static_cast<double>(width);
          for (std::size_t j = 0; j < width; ++j)
            gx[base + j] += inv_std[r] * (dn[j] - mean_dn - normed[base + j] * mean_dn_n);
        }
      });
}

Var shift_rows(Var x, int k) {
  const Tensor& xv = x.value();
  require_matrix("shift_rows", xv);
  const auto n = static_cast<long>(xv.dim(0));
  const std::size_t m = xv.dim(1);
  Tensor out(xv.shape());
  for (long t = 0; t < n; ++t) {
    const long src = t - k;
    if (src < 0 || src >= n) continue;
    std::copy_n(xv.data().begin() + src * static_cast<long>(m), m, out.data().begin() + t * static_cast<long>(m));
  }
  return x.graph().record("shift_rows", std::move(out), {x}, [x, k, n, m](Graph& g, const Tensor& go, const Tensor&) {
    Tensor& gx = g.grad_buffer(x);
    for (long t = 0; t < n; ++t) {
      const long src = t - k;
      if (src < 0 || src >= n) continue;
      for (std::size_t j = 0; j < m; ++j) gx.at(static_cast<std::size_t>(src), j) += go.at(static_cast<std::size_t>(t), j);
    }
  });
}

Var slice_rows(Var x, std::size_t begin, std::size_t count) {
  const Tensor& xv = x.value();
  require_matrix("slice_rows", xv);
  if (count == 0 || begin + count > xv.dim(0)) {
    throw DimensionError("slice_rows [" + std::to_string(begin) + ", +" + std::to_string(count) + ") out of " +
                         shape_string(xv.shape()));
  }
  const std::size_t m = xv.dim(1);
  Tensor out({count, m});
  std::copy_n(xv.data().begin() + static_cast<long>(begin * m), count * m, out.data().begin());
  return x.graph().record("slice_rows", std::move(out), {x}, [x, begin, count, m](Graph& g, const Tensor& go, const Tensor&) {
    Tensor& gx = g.grad_buffer(x);
    for (std::size_t i = 0; i < count * m; ++i) gx[begin * m + i] += go[i];
  });
}

Var select_rows(Var x, std::span<const std::size_t> rows) {
  const Tensor& xv = x.value();
  require_matrix("select_rows", xv);
  if (rows.empty()) throw DimensionError("select_rows needs at least one row");
  const std::size_t m = xv.dim(1);
  Tensor out({rows.size(), m});
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= xv.dim(0)) throw DimensionError("select_rows index out of range");
    for (std::size_t j = 0; j < m; ++j) out.at(i, j) = xv.at(idx[i], j);
  }
  return x.graph().record("select_rows", std::move(out), {x}, [x, idx, m](Graph& g, const Tensor& go, const Tensor&) {
    Tensor& gx = g.grad_buffer(x);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < m; ++j) gx.at(idx[i], j) += go.at(i, j);
  });
}

Var split_heads(Var x, std::size_t heads) {
  const Tensor& xv = x.value();
  require_matrix("split_heads", xv);
  if (heads == 0 || xv.dim(1) % heads != 0) {
    throw ConfigError("split_heads: width " + std::to_string(xv.dim(1)) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  const std::size_t n = xv.dim(0), d = xv.dim(1) / heads;
  Tensor out({heads, n, d});
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t k = 0; k < d; ++k) out.at(h, t, k) = xv.at(t, h * d + k);
  return x.graph().record("split_heads", std::move(out), {x}, [x, heads, n, d](Graph& g, const Tensor& go, const Tensor&) {
    Tensor& gx = g.grad_buffer(x);
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < n; ++t)
        for (std::size_t k = 0; k < d; ++k) gx.at(t, h * d + k) += go.at(h, t, k);
  });
}

Var merge_heads(Var x) {
  const Tensor& xv = x.value();
  if (xv.rank() != 3) throw DimensionError("merge_heads expects [H x N x D], got " + shape_string(xv.shape()));
  const std::size_t heads = xv.dim(0), n = xv.dim(1), d = xv.dim(2);
  Tensor out({n, heads * d});
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t k = 0; k < d; ++k) out.at(t, h * d + k) = xv.at(h, t, k);
  return x.graph().record("merge_heads", std::move(out), {x}, [x, heads, n, d](Graph& g, const Tensor& go, const Tensor&) {
    Tensor& gx = g.grad_buffer(x);
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < n; ++t)
        for (std::size_t k = 0; k < d; ++k) gx.at(h, t, k) += go.at(t, h * d + k);
  });
}

}  // namespace apf
