#include "apf/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "apf/errors.hpp"

namespace apf {

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& p, double h) {
  if (!(h > 0.0)) throw ContractError("finite_diff_grad: step must be positive");
  Tensor grad(p.shape());
  Tensor probe = p;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = f(probe);
    probe[i] = orig - h;
    const double down = f(probe);
    probe[i] = orig;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

double max_relative_error(const Tensor& analytic, const Tensor& numeric, double floor) {
  if (analytic.shape() != numeric.shape()) {
    throw DimensionError("max_relative_error: " + shape_string(analytic.shape()) + " vs " +
                         shape_string(numeric.shape()));
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double a = analytic[i], n = numeric[i];
    const double denom = std::max({std::abs(a), std::abs(n), floor});
    worst = std::max(worst, std::abs(a - n) / denom);
  }
  return worst;
}

GradCheckResult check_parameters(const std::string& name, ParameterSet& params,
                                 const std::function<Var(Graph&)>& loss, double tolerance, double h) {
  params.zero_grad();
  {
    Graph g;
    g.backward(loss(g));
  }
  GradCheckResult result{name, 0.0, 0, true};
  for (Parameter& p : params) {
    const Tensor analytic = p.grad;
    const Tensor saved = p.value;
    auto f = [&](const Tensor& probe) {
      p.value = probe;
      Graph g;
      return loss(g).value().item();
    };
    const Tensor numeric = finite_diff_grad(f, saved, h);
    p.value = saved;
    result.max_rel_error = std::max(result.max_rel_error, max_relative_error(analytic, numeric));
    result.coordinates += saved.size();
  }
  result.passed = result.max_rel_error < tolerance;
  params.zero_grad();
  return result;
}

}  // namespace apf
