#include <cstdlib>
#include <map>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "sldm/cli.hpp"
#include "sldm/runtime.hpp"

namespace sldm::cli {
namespace {

struct Flag {
  const char* name;
  const char* path;
  const char* help;
};

struct CommandSpec {
  const char* name;
  const char* help;
  std::vector<Flag> flags;
};

const std::vector<CommandSpec>& command_specs() {
  static const std::vector<CommandSpec> specs = {
      {"schedule",
       "Tabulate mu, sigma, their derivatives and SNR for each schedule, and validate the constraints",
       {{"--grid", "schedule.grid", "grid points per schedule"},
        {"--schedules", "schedule.kinds", "comma-separated schedule kinds"},
        {"--sigma", "schedule.sigma", "SLDM noise level"}}},
      {"trajectory",
       "Probability-flow trajectories on the mixture and their mean curvature",
       {{"--schedules", "schedule.kinds", "comma-separated schedule kinds"},
        {"--steps", "trajectory.steps", "integration steps"},
        {"--starts", "trajectory.starts", "starting points (marginal quantiles)"}}},
      {"truncation",
       "Euler/RK4 terminal error against a fine RK4 reference",
       {{"--schedules", "schedule.kinds", "comma-separated schedule kinds"},
        {"--steps", "truncation.steps", "comma-separated step counts"},
        {"--reference-steps", "truncation.reference_steps", "RK4 steps of the reference solution"}}},
      {"theorem1",
       "Empirical frequency of large deviations from the straight-line velocity, against its bound",
       {{"--sigma", "theorem1.sigmas", "comma-separated noise levels"},
        {"--delta", "theorem1.delta", "deviation threshold"},
        {"--times", "theorem1.times", "comma-separated times in (0, 1)"},
        {"--draws", "theorem1.draws", "draws per (sigma, t) cell"}}},
      {"temp-study",
       "Sweep the temperature annealing rate on a trained toy model; tempered Langevin on N(0, 1)",
       {{"--model", "input.model", "toy checkpoint written by train-toy"},
        {"--nus", "temperature.nus", "comma-separated annealing rates"},
        {"--count", "sampler.count", "chains per rate"},
        {"--steps", "sampler.steps", "sampler steps T (0: the model's training grid)"}}},
      {"train-toy",
       "Train the MLP denoiser on a 2-D toy dataset",
       {{"--dataset", "dataset.name", "swissroll, moons or chessboard"},
        {"--n", "dataset.n", "training points"},
        {"--epochs", "train.epochs", "epochs"},
        {"--batch", "train.batch", "batch size"},
        {"--lr", "train.lr", "Adam learning rate"},
        {"--time-sampling", "train.time_sampling", "continuous or discrete"},
        {"--steps", "train.discrete_steps", "T of the discrete training grid"}}},
      {"sample-toy",
       "Sample a trained toy model and score it against fresh data",
       {{"--model", "input.model", "toy checkpoint written by train-toy"},
        {"--count", "sampler.count", "chains"},
        {"--steps", "sampler.steps", "sampler steps T (0: the model's training grid)"},
        {"--nu", "sampler.nu", "temperature annealing rate"},
        {"--gamma", "sampler.gamma", "time-grid exponent"},
        {"--beta", "sampler.beta", "mse_optimal, zero, scaled or table"}}},
      {"train-cloud",
       "Train the equivariant denoiser on toy point-cloud shapes",
       {{"--count", "cloud_data.count", "training clouds"},
        {"--steps", "cloud_train.steps", "optimizer steps"},
        {"--batch", "cloud_train.batch", "clouds per step"},
        {"--lr", "cloud_train.lr", "Adam learning rate"},
        {"--t-n", "cloud_train.t_n", "nucleation time"},
        {"--label-loss", "cloud_train.label_loss", "l1 or cross_entropy"}}},
      {"sample-cloud",
       "Sample point clouds with labels and check the equivariance invariants",
       {{"--model", "input.model", "point-cloud checkpoint written by train-cloud"},
        {"--count", "cloud_sampler.count", "clouds"},
        {"--steps", "cloud_sampler.steps", "sampler steps T"},
        {"--nu", "cloud_sampler.nu", "temperature annealing rate"}}},
      {"report",
       "Collect the checks of finished runs into one table",
       {}},
  };
  return specs;
}

std::string default_text(const nlohmann::json& config, std::string_view path) {
  const auto dot = path.find('.');
  const nlohmann::json& v = config.at(std::string(path.substr(0, dot))).at(std::string(path.substr(dot + 1)));
  if (v.is_array()) {
    std::string s;
    for (const auto& e : v) s += (s.empty() ? "" : ",") + (e.is_string() ? e.get<std::string>() : e.dump());
    return s;
  }
  return v.is_string() ? v.get<std::string>() : v.dump();
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{fmt::format("{} {}: straight-line diffusion experiments", kToolName, kToolVersion)};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kToolVersion));

  struct Common {
    std::string out, config, seed;
    std::vector<std::string> sets, runs;
    bool check = false, no_plots = false, quiet = false;
  };
  std::map<std::string, Common> common;
  std::map<std::string, std::map<std::string, std::string>> values;
  std::map<std::string, CLI::App*> subs;

  for (const auto& spec : command_specs()) {
    CLI::App* sub = app.add_subcommand(spec.name, spec.help);
    subs[spec.name] = sub;
    Common& c = common[spec.name];
    const nlohmann::json defaults = default_config(spec.name);
    sub->add_option("--out", c.out, "output directory (default $SLDM_OUT_DIR/<subcommand>, else runs/<subcommand>)");
    sub->add_option("--config", c.config, "JSON config file with one section per module, or a run manifest");
    sub->add_option("--seed", c.seed, "run seed (default 0)");
    sub->add_option("--set", c.sets, "override any key: section.key=value (repeatable)");
    sub->add_flag("--check", c.check, "exit with status 1 when any gate fails");
    sub->add_flag("--no-plots", c.no_plots, "skip the SVG figures");
    sub->add_flag("--quiet", c.quiet, "no progress or check lines");
    for (const auto& f : spec.flags)
      sub->add_option(f.name, values[spec.name][f.path],
                      fmt::format("{} (default {})", f.help, default_text(defaults, f.path)));
    if (std::string_view(spec.name) == "report") sub->add_option("runs", c.runs, "run directories");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  std::string name;
  for (const auto& [n, sub] : subs)
    if (sub->parsed()) name = n;
  const Common& c = common[name];
  try {
    nlohmann::json config = default_config(name);
    if (!c.config.empty()) config = merge_config(config, load_config_file(c.config, name));
    if (!c.seed.empty()) apply_text(config, "seed", c.seed);
    for (const auto& spec : command_specs()) {
      if (spec.name != name) continue;
      for (const auto& f : spec.flags)
        if (subs[name]->count(f.name) > 0) apply_text(config, f.path, values[name][f.path]);
    }
    for (const auto& s : c.sets) apply_assignment(config, s);
    if (!c.runs.empty()) config["report"]["runs"] = c.runs;

    RunOptions opt;
    opt.subcommand = name;
    opt.config = std::move(config);
    opt.check = c.check;
    opt.plots = !c.no_plots;
    opt.quiet = c.quiet;
    if (!c.out.empty()) opt.out_dir = c.out;
    else if (const char* env = std::getenv("SLDM_OUT_DIR"); env && *env) opt.out_dir = std::filesystem::path(env) / name;
    else opt.out_dir = std::filesystem::path("runs") / name;

    const RunResult res = run(opt);
    if (!opt.quiet) fmt::print("{} outputs in {}\n", res.outputs.size(), opt.out_dir.string());
    return res.exit_code;
  } catch (const ConfigError& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 3;
  }
}

}  // namespace sldm::cli
