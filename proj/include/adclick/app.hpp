#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "adclick/config.hpp"

namespace adclick::app {

/// Command-line entry point. Returns the process exit status; failures print
/// a single `error: code=<code> message="..."` line to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Configuration written by `make-toy` next to the generated data.
nlohmann::json toy_config_tree();

/// Generates the synthetic dataset (data/, heldout/), prompts.json and
/// config.json under `dir`.
void make_toy_workspace(const std::filesystem::path& dir, std::uint64_t seed = 1);

/// `error: code=<code> message="..."` with quotes and newlines escaped.
std::string error_line(const std::string& code, const std::string& message);

}  // namespace adclick::app
