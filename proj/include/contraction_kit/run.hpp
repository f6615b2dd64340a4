#pragma once

// Command-line entry point: config parsing and the train / certify / simulate
// / cvstem / selftest subcommands.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>

#include <json.hpp>

namespace ckit {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;

struct RunConfig {
  std::string subcommand;
  nlohmann::json document = nlohmann::json::object();
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  int threads = 0;
};

/// Checks every key of the config document against the known schema and
/// returns the document with defaults filled in. Throws ConfigError.
nlohmann::json resolve_config(const std::string& subcommand, const nlohmann::json& document,
                              std::optional<std::uint64_t> seed, std::optional<std::string> out);

/// Runs one subcommand; returns the process exit status.
int run(const RunConfig& config, std::ostream& log);

/// Parses argv and dispatches to run().
int run_cli(int argc, char** argv);

}  // namespace ckit
