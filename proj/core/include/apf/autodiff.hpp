#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "apf/tensor.hpp"

namespace apf {

/// Named trainable leaf with an accumulated gradient of the same shape.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
};

/// Ordered collection of parameters. References stay valid while the set lives.
class ParameterSet {
 public:
  Parameter& add(std::string name, Tensor init);
  Parameter& get(std::string_view name);
  const Parameter& get(std::string_view name) const;
  bool contains(std::string_view name) const;

  std::size_t size() const noexcept { return params_.size(); }
  std::size_t scalar_count() const noexcept;
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void zero_grad();
  double grad_norm() const;

 private:
  std::deque<Parameter> params_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

class Graph;

/// Handle to a node recorded in a Graph.
class Var {
 public:
  Var() = default;
  Var(Graph* graph, std::uint32_t id) : graph_(graph), id_(id) {}

  Graph& graph() const { return *graph_; }
  std::uint32_t id() const noexcept { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool valid() const noexcept { return graph_ != nullptr; }

 private:
  Graph* graph_ = nullptr;
  std::uint32_t id_ = 0;
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so the
/// insertion order is already a topological order.
class Graph {
 public:
  /// Receives the gradient flowing into the node's output and the output value.
  using BackwardFn = std::function<void(Graph&, const Tensor& grad_out, const Tensor& value_out)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  Var param(Parameter& p);

  /// Appends an op node. `backward` is dropped when no input needs gradients.
  Var record(const char* op, Tensor value, std::initializer_list<Var> inputs, BackwardFn backward);

  const Tensor& value(Var v) const { return nodes_[v.id()].value; }
  /// Gradient of the last backward() w.r.t. v (zeros if none reached it).
  Tensor grad(Var v) const;
  bool requires_grad(Var v) const { return nodes_[v.id()].requires_grad; }

  /// Adds `g` into the gradient buffer of `v` (no-op for constants).
  void accumulate(Var v, const Tensor& g);
  /// Mutable gradient buffer of `v`, zero-initialized on first use.
  Tensor& grad_buffer(Var v);

  /// Reverse accumulation from a scalar node; adds into Parameter::grad.
  void backward(Var loss);

  std::size_t size() const noexcept { return nodes_.size(); }
  const char* op_name(std::uint32_t id) const { return nodes_[id].op; }

 private:
  struct Node {
    const char* op;
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    Parameter* param = nullptr;
    BackwardFn backward;
  };
  std::deque<Node> nodes_;
};

/// Test hook: negates the incoming gradient of every node whose op name
/// matches. Empty string disables. Used to verify gradient checks catch bugs.
void set_gradient_fault(std::string op);
const std::string& gradient_fault();

enum class Activation { kGelu, kRelu };

// Elementwise and reductions.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var add_scalar(Var a, double offset);
/// s * x for a single-element s.
Var scale_by(Var s, Var x);
/// 1 - x.
Var one_minus(Var x);
Var sum(Var a);
Var mean(Var a);
Var sigmoid(Var x);
Var clamp(Var x, double lo, double hi);
Var activation(Var x, Activation kind = Activation::kGelu);

// Linear algebra on matrices.
Var matmul(Var a, Var b);
Var transpose(Var a);
/// x[n x m] + b[m] broadcast over rows.
Var add_row_bias(Var x, Var b);
/// x * w + b with w[in x out], b[out].
Var linear(Var x, Var w, Var b);

/// Softmax over the last axis. `keep` (same size as x, or empty) marks
/// unmasked entries; masked outputs are exactly zero.
Var softmax_lastdim(Var x, std::span<const std::uint8_t> keep = {});
Tensor softmax_lastdim(const Tensor& x, std::span<const std::uint8_t> keep = {});

/// Normalizes each row of x over its last axis.
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);

// Structural ops on matrices.
/// out[t] = x[t - k] with zero fill (rows shift down for k > 0).
Var shift_rows(Var x, int k);
Var slice_rows(Var x, std::size_t begin, std::size_t count);
Var select_rows(Var x, std::span<const std::size_t> rows);
/// [N x H*D] -> [H x N x D].
Var split_heads(Var x, std::size_t heads);
/// [H x N x D] -> [N x H*D].
Var merge_heads(Var x);

double gelu(double x);

}  // namespace apf
