#pragma once

#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "apf/data.hpp"

namespace apf {

void to_json(nlohmann::json& j, const SynthSpec& spec);
void from_json(const nlohmann::json& j, SynthSpec& spec);

}  // namespace apf

namespace apf::cli {

/// Process exit codes.
enum ExitCode : int { kOk = 0, kCheckFailed = 1, kUsage = 2, kNumeric = 3 };

/// Runs one command line (args exclude the program name). Human-readable
/// tables go to `out`, diagnostics and logs to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Tool version recorded in every run manifest.
const char* version();

}  // namespace apf::cli
