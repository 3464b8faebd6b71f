#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "apf/gradcheck.hpp"

namespace apf {

/// Sizes for the built-in gradient suites. Defaults are the small model used
/// for acceptance (T=8, C_D=8, two heads, three queries, 2+2 layers).
struct GradSuiteOptions {
  std::uint64_t seed = 0;
  std::size_t seq_len = 8;
  std::size_t model_dim = 8;
  std::size_t heads = 2;
  std::size_t queries = 3;
  std::size_t encoder_layers = 2;
  std::size_t decoder_layers = 2;
  double tolerance = 1e-4;
  double step = 1e-5;
};

/// "tensor-core", "taa", "model", "matching".
std::vector<std::string> gradcheck_suite_names();

/// One result per checked operation; names are "<suite>/<op>".
std::vector<GradCheckResult> run_gradcheck_suite(const std::string& suite, const GradSuiteOptions& options = {});

}  // namespace apf
