#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace gammadesk::cli {

/// Bad command line or configuration; the process exits with status 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class ValueKind { Integer, Real, Boolean, Text };

struct KeySpec {
  std::string key;  // "section.name"
  ValueKind kind;
  std::string default_value;
  std::vector<std::string> choices;  // empty: any value of `kind`
  std::string help;
};

/// Every recognised configuration key, grouped by section in file order.
const std::vector<KeySpec>& key_schema();

/// Config file grammar, one item per line:
///   # comment      ; comment      blank line
///   [section]
///   key = value    (whitespace around key and value is trimmed)
/// Keys must appear under a section. Returns "section.key" -> value.
/// Unknown keys, malformed lines and duplicates raise UsageError naming
/// `origin` and the line number.
std::map<std::string, std::string> parse_config_text(std::string_view text, const std::string& origin);

struct RunConfig {
  std::string subcommand;
  std::optional<std::filesystem::path> config_path;
  std::uint64_t seed = 0;
  std::filesystem::path output_dir;
  std::map<std::string, std::string> values;  // every schema key, resolved
};

/// defaults <- config file <- `section.key=value` overrides. Every value is
/// checked against its kind and choices.
RunConfig resolve_config(const std::string& subcommand, const std::optional<std::filesystem::path>& config_path,
                         const std::vector<std::string>& overrides, std::filesystem::path output_dir);

/// Snapshot text that parse_config_text reads back to the same values.
std::string render_config(const RunConfig& config);

/// Runs a resolved configuration. Writes config.resolved.ini, summary.jsonl
/// and, on failure, a FAILED marker. Returns 0 on success and 1 on failure.
int execute(const RunConfig& config, std::ostream& log);

/// Entry point used by the `gammadesk` executable. Exit status: 0 success or
/// help, 1 run failure, 2 usage error.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace gammadesk::cli
