#include <charconv>
#include <fstream>
#include <map>

#include <fmt/format.h>

#include "sldm/cli.hpp"

namespace sldm::cli {
namespace {

using nlohmann::json;

const std::map<std::string, json>& section_defaults() {
  static const std::map<std::string, json> defaults = {
      {"schedule",
       {{"kinds", {"sldm", "ddpm_edm", "ve", "ddim", "fm", "bfn"}},
        {"grid", 1000},
        {"sigma", 0.05},
        {"sigma_min", 1e-3},
        {"sigma_max", 10.0}}},
      {"mixture", {{"weights", {0.5, 0.5}}, {"means", {2.0, -2.0}}, {"variances", {0.25, 0.25}}}},
      {"trajectory",
       {{"steps", 512},
        {"starts", 20},
        {"t_start", 0.9},
        {"t_end", 0.0},
        {"integrator", "rk4"},
        {"delta_point", 1.5},
        {"delta_steps", {1, 2, 3, 5, 10, 40, 512}}}},
      {"truncation",
       {{"steps", {5, 10, 20, 40, 80}},
        {"reference_steps", 4096},
        {"starts", 20},
        {"t_start", 0.9},
        {"t_end", 0.0},
        {"order_t_start", 0.8},
        {"order_t_end", 0.2}}},
      {"theorem1",
       {{"sigmas", {0.01, 0.05, 0.1}},
        {"delta", 0.5},
        {"times", {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9}},
        {"draws", 100000}}},
      {"sampler",
       {{"steps", 0},
        {"sigma", 0.05},
        {"nu", 0.5},
        {"gamma", 1.0},
        {"beta", "mse_optimal"},
        {"beta_scale", 1.0},
        {"init_scale", -1.0},
        {"count", 10000}}},
      {"input", {{"model", ""}}},
      {"dataset", {{"name", "swissroll"}, {"n", 100000}, {"noise", -1.0}}},
      {"model", {{"hidden", 128}, {"layers", 5}, {"fourier_time", false}, {"fourier_features", 8}}},
      {"train",
       {{"epochs", 100},
        {"batch", 2048},
        {"lr", 1e-3},
        {"sigma", 0.05},
        {"time_sampling", "discrete"},
        {"discrete_steps", 40}}},
      {"evaluation", {{"reference_n", 10000}, {"energy_gate", -1.0}, {"coverage_k", 10}}},
      {"temperature",
       {{"nus", {0.0, 0.5, 1.0, 2.0, 3.0}},
        {"taus", {0.5, 1.0}},
        {"langevin_chains", 100000},
        {"langevin_steps", 2000},
        {"langevin_step", 0.1},
        {"variance_tolerance", 0.01}}},
      {"cloud_data",
       {{"shapes", {"cuboctahedron", "icosahedron", "hexagonal_prism"}},
        {"count", 3000},
        {"jitter", 0.02},
        {"data_seed", 1}}},
      {"egnn", {{"layers", 3}, {"hidden", 32}, {"coord_range", 10.0}, {"data_variance", 0.3}}},
      {"cloud_train",
       {{"batch", 32},
        {"steps", 2000},
        {"lr", 1e-3},
        {"sigma", 0.05},
        {"t_n", 0.01},
        {"branch_weight", 0.5},
        {"coord_weight", 1.0},
        {"label_weight", 1.0},
        {"label_loss", "l1"}}},
      {"cloud_sampler",
       {{"steps", 100},
        {"nu", 0.5},
        {"count", 300},
        {"chains_per_batch", 256},
        {"rotation_pairs", 8},
        {"energy_gate", 0.6}}},
      {"report", {{"runs", json::array()}}},
  };
  return defaults;
}

const std::map<std::string, std::vector<std::string>, std::less<>>& subcommand_sections() {
  static const std::map<std::string, std::vector<std::string>, std::less<>> sections = {
      {"schedule", {"schedule"}},
      {"trajectory", {"schedule", "mixture", "trajectory"}},
      {"truncation", {"schedule", "mixture", "truncation"}},
      {"theorem1", {"mixture", "theorem1"}},
      {"temp-study", {"input", "sampler", "evaluation", "temperature"}},
      {"train-toy", {"dataset", "model", "train"}},
      {"sample-toy", {"input", "sampler", "evaluation"}},
      {"train-cloud", {"cloud_data", "egnn", "cloud_train"}},
      {"sample-cloud", {"input", "cloud_sampler"}},
      {"report", {"report"}},
  };
  return sections;
}

std::string type_name(const json& j) {
  if (j.is_boolean()) return "a boolean";
  if (j.is_number_integer()) return "an integer";
  if (j.is_number()) return "a number";
  if (j.is_string()) return "a string";
  if (j.is_array()) return "a list";
  if (j.is_object()) return "a section";
  return "null";
}

// Integers are accepted where numbers are expected; the reverse is not.
bool compatible(const json& want, const json& got) {
  if (want.is_number_float()) return got.is_number();
  if (want.is_number_integer()) return got.is_number_integer();
  if (want.is_array()) {
    if (!got.is_array()) return false;
    if (want.empty()) return true;
    for (const auto& g : got)
      if (!compatible(want.front(), g)) return false;
    return true;
  }
  return want.type() == got.type();
}

// Integers given for real-valued keys are stored as reals.
json normalized(const json& want, const json& got) {
  if (want.is_number_float() && got.is_number()) return got.get<double>();
  if (want.is_array() && !want.empty() && got.is_array()) {
    json out = json::array();
    for (const auto& g : got) out.push_back(normalized(want.front(), g));
    return out;
  }
  return got;
}

json convert_scalar(const json& like, std::string_view text, const std::string& path) {
  const std::string s(text);
  if (like.is_boolean()) {
    if (s == "true" || s == "1" || s == "on") return true;
    if (s == "false" || s == "0" || s == "off") return false;
    throw ConfigError(path, fmt::format("expected a boolean, got '{}'", s));
  }
  if (like.is_number_integer()) {
    long long v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size() || s.empty())
      throw ConfigError(path, fmt::format("expected an integer, got '{}'", s));
    return v;
  }
  if (like.is_number()) {
    double v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size() || s.empty())
      throw ConfigError(path, fmt::format("expected a number, got '{}'", s));
    return v;
  }
  return s;
}

json* locate(json& config, std::string_view path) {
  const auto dot = path.find('.');
  if (dot == std::string_view::npos) {
    if (path == "seed" && config.contains("seed")) return &config["seed"];
    return nullptr;
  }
  const std::string section(path.substr(0, dot)), key(path.substr(dot + 1));
  if (!config.contains(section) || !config[section].contains(key)) return nullptr;
  return &config[section][key];
}

}  // namespace

std::vector<std::string_view> subcommands() {
  return {"schedule",   "trajectory", "truncation",  "theorem1",     "temp-study",
          "train-toy",  "sample-toy", "train-cloud", "sample-cloud", "report"};
}

json default_config(std::string_view subcommand) {
  const auto it = subcommand_sections().find(subcommand);
  if (it == subcommand_sections().end()) throw std::invalid_argument(fmt::format("unknown subcommand '{}'", subcommand));
  json config = json::object();
  config["seed"] = 0;
  for (const auto& s : it->second) config[s] = section_defaults().at(s);
  return config;
}

json load_config_file(const std::filesystem::path& path, std::string_view subcommand) {
  std::ifstream in(path);
  if (!in) throw ConfigError("<file>", fmt::format("cannot open config file '{}'", path.string()));
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("<file>", fmt::format("'{}' is not valid JSON: {}", path.string(), e.what()));
  }
  if (!j.is_object()) throw ConfigError("<file>", "top level must be an object");
  if (j.value("format", "") == "sldm-manifest") {
    const std::string recorded = j.value("subcommand", "");
    if (!subcommand.empty() && recorded != subcommand)
      throw ConfigError("subcommand", fmt::format("manifest was written by '{}', not '{}'", recorded, subcommand));
    if (!j.contains("config") || !j["config"].is_object()) throw ConfigError("config", "manifest has no config section");
    return j["config"];
  }
  return j;
}

json merge_config(const json& base, const json& overrides) {
  json out = base;
  if (!overrides.is_object()) throw ConfigError("<root>", "config must be an object");
  for (const auto& [section, value] : overrides.items()) {
    if (section == "seed") {
      if (!value.is_number_unsigned() && !(value.is_number_integer() && value.get<long long>() >= 0))
        throw ConfigError("seed", fmt::format("expected a non-negative integer, got {}", type_name(value)));
      out["seed"] = value;
      continue;
    }
    if (!section_defaults().count(section)) throw ConfigError(section, "unknown section");
    if (!value.is_object()) throw ConfigError(section, fmt::format("expected a section, got {}", type_name(value)));
    const json& known = section_defaults().at(section);
    for (const auto& [key, v] : value.items()) {
      const std::string path = section + "." + key;
      if (!known.contains(key)) throw ConfigError(path, "unknown key");
      if (!compatible(known[key], v))
        throw ConfigError(path, fmt::format("expected {}, got {}", type_name(known[key]), type_name(v)));
    }
    if (!out.contains(section)) continue;  // not read by this subcommand
    for (const auto& [key, v] : value.items()) out[section][key] = normalized(known[key], v);
  }
  if (!out.contains("seed")) throw ConfigError("seed", "a seed is required");
  return out;
}

void apply_text(json& config, std::string_view path, std::string_view text) {
  json* target = locate(config, path);
  const std::string p(path);
  if (!target) throw ConfigError(p, "unknown key for this subcommand");
  if (target->is_array()) {
    json like = target->empty() ? json("") : target->front();
    json arr = json::array();
    std::string_view rest = text;
    while (!rest.empty()) {
      const auto comma = rest.find(',');
      arr.push_back(convert_scalar(like, rest.substr(0, comma), p));
      if (comma == std::string_view::npos) break;
      rest.remove_prefix(comma + 1);
    }
    *target = std::move(arr);
  } else if (p == "seed") {
    json v = convert_scalar(json(0), text, p);
    if (v.get<long long>() < 0) throw ConfigError(p, "expected a non-negative integer");
    *target = std::move(v);
  } else {
    *target = convert_scalar(*target, text, p);
  }
}

void apply_assignment(json& config, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos)
    throw ConfigError(std::string(assignment), "expected section.key=value");
  apply_text(config, assignment.substr(0, eq), assignment.substr(eq + 1));
}

}  // namespace sldm::cli
