#pragma once

#include <filesystem>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>

namespace sldm::cli {

inline constexpr std::string_view kToolName = "sldm";
inline constexpr std::string_view kToolVersion = "1.0.0";

/// Invalid configuration. `path()` names the offending key, e.g. "sampler.steps".
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string path, const std::string& message);
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

// ---------------------------------------------------------------- tables

/// Empty cells print as nothing; doubles use the shortest round-trip form.
using Cell = std::variant<std::monostate, std::string, double, long long>;

struct Table {
  std::vector<std::string> columns;
  std::vector<std::vector<Cell>> rows;

  Table() = default;
  explicit Table(std::vector<std::string> cols) : columns(std::move(cols)) {}
  void add(std::vector<Cell> row);
  std::size_t column(std::string_view name) const;  // throws std::out_of_range
  double number(std::size_t row, std::size_t col) const;  // NaN for empty or text cells
  std::string text(std::size_t row, std::size_t col) const;
  std::string csv() const;
};

std::string format_cell(const Cell& cell);

// ---------------------------------------------------------------- plots

enum class PlotKind {
  Schedule,    // columns kind, t, mu, sigma, snr: three panels, SNR on a log axis
  Trajectory,  // columns schedule, start, t, x: one panel per schedule, one polyline per start
  Lines,       // y against x, one polyline per value of `group`
  Scatter,     // y against x as points
};

struct PlotRequest {
  PlotKind kind = PlotKind::Lines;
  std::string title;
  std::string x, y, group;
  bool log_x = false;
  bool log_y = false;
  std::size_t max_points = 4000;  // Scatter only
};

/// Self-contained SVG. Every data series is a <polyline> or <g> element with a
/// `data-series` attribute; an empty table gives bare axes.
std::string emit_plot(const Table& table, const PlotRequest& request);

// ---------------------------------------------------------------- config

/// Sections read by `subcommand` with their defaults, plus the top-level seed.
nlohmann::json default_config(std::string_view subcommand);

/// Reads a config file. A run manifest is accepted too; its resolved config is
/// used, and its subcommand must match `subcommand` when both are given.
nlohmann::json load_config_file(const std::filesystem::path& path, std::string_view subcommand = {});

/// Overlays `overrides` onto `base`. Sections unknown to every subcommand and
/// keys absent from a known section raise ConfigError; sections not read by
/// this subcommand are dropped. Values must keep the default's JSON type.
nlohmann::json merge_config(const nlohmann::json& base, const nlohmann::json& overrides);

/// Parses "section.key=value" using the type of the existing value at that key.
void apply_assignment(nlohmann::json& config, std::string_view assignment);
/// Sets `path` from its command-line text, typed like the existing value.
void apply_text(nlohmann::json& config, std::string_view path, std::string_view text);

std::vector<std::string_view> subcommands();

// ---------------------------------------------------------------- runs

struct Check {
  std::string name;
  double value = 0.0;
  std::string limit;  // human-readable, e.g. "< 0.05"
  bool passed = false;
};

struct RunOptions {
  std::string subcommand;
  nlohmann::json config;  // resolved; see default_config
  std::filesystem::path out_dir;
  bool check = false;
  bool plots = true;
  bool quiet = false;
};

struct RunResult {
  int exit_code = 0;
  std::vector<Check> checks;
  std::vector<std::string> outputs;  // file names inside out_dir
};

/// Runs one subcommand. Writes the result files, checks.json and manifest.json
/// into `out_dir`. On an exception every file written by this run is removed
/// and the exception propagates. In check mode a failed gate gives exit code 1.
RunResult run(const RunOptions& options);

/// Command-line front end; returns the process exit status.
int main(int argc, char** argv);

}  // namespace sldm::cli
