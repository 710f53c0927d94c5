#include <cmath>
#include <limits>

#include <fmt/format.h>

#include "sldm/cli.hpp"

namespace sldm::cli {

ConfigError::ConfigError(std::string path, const std::string& message)
    : std::runtime_error(fmt::format("config key '{}': {}", path, message)), path_(std::move(path)) {}

std::string format_cell(const Cell& cell) {
  struct Visitor {
    std::string operator()(std::monostate) const { return {}; }
    std::string operator()(const std::string& s) const {
      if (s.find_first_of(",\"\n") == std::string::npos) return s;
      std::string q = "\"";
      for (char c : s) {
        if (c == '"') q += '"';
        q += c;
      }
      return q + '"';
    }
    std::string operator()(double v) const { return fmt::format("{}", v); }
    std::string operator()(long long v) const { return fmt::format("{}", v); }
  };
  return std::visit(Visitor{}, cell);
}

void Table::add(std::vector<Cell> row) {
  if (row.size() != columns.size())
    throw std::logic_error(fmt::format("table row has {} cells, expected {}", row.size(), columns.size()));
  rows.push_back(std::move(row));
}

std::size_t Table::column(std::string_view name) const {
  for (std::size_t i = 0; i < columns.size(); ++i)
    if (columns[i] == name) return i;
  throw std::out_of_range(fmt::format("no column '{}'", name));
}

double Table::number(std::size_t row, std::size_t col) const {
  const Cell& c = rows.at(row).at(col);
  if (const auto* d = std::get_if<double>(&c)) return *d;
  if (const auto* i = std::get_if<long long>(&c)) return static_cast<double>(*i);
  return std::numeric_limits<double>::quiet_NaN();
}

std::string Table::text(std::size_t row, std::size_t col) const {
  const Cell& c = rows.at(row).at(col);
  if (const auto* s = std::get_if<std::string>(&c)) return *s;
  return format_cell(c);
}

std::string Table::csv() const {
  fmt::memory_buffer out;
  for (std::size_t i = 0; i < columns.size(); ++i) {
    if (i) out.push_back(',');
    fmt::format_to(std::back_inserter(out), "{}", format_cell(columns[i]));
  }
  out.push_back('\n');
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) out.push_back(',');
      fmt::format_to(std::back_inserter(out), "{}", format_cell(row[i]));
    }
    out.push_back('\n');
  }
  return fmt::to_string(out);
}

}  // namespace sldm::cli
