#pragma once

#include <functional>
#include <string>
#include <vector>

#include "apf/autodiff.hpp"

namespace apf {

/// Central differences (f(p + h e_i) - f(p - h e_i)) / 2h for every coordinate of p.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& p, double h = 1e-5);

/// Coordinate-wise |a - n| / max(|a|, |n|, floor), maximized over all entries.
/// The floor sits above central-difference roundoff (~1e-10 for O(1) losses at
/// h = 1e-5), so structurally zero gradients compare on an absolute scale.
double max_relative_error(const Tensor& analytic, const Tensor& numeric, double floor = 1e-5);

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  bool passed = false;
};

/// Compares reverse-mode gradients of `loss` against central differences for
/// every parameter in `params`. `loss` must rebuild its graph from the current
/// parameter values on each call.
GradCheckResult check_parameters(const std::string& name, ParameterSet& params,
                                 const std::function<Var(Graph&)>& loss, double tolerance = 1e-4,
                                 double h = 1e-5);

}  // namespace apf
