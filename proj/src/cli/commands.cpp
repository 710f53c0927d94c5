#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>

#include <fmt/format.h>

#include "sldm/cli.hpp"
#include "sldm/dynamics.hpp"
#include "sldm/equivariant.hpp"
#include "sldm/mixture.hpp"
#include "sldm/nn.hpp"
#include "sldm/schedules.hpp"
#include "sldm/stats.hpp"
#include "sldm/toydata.hpp"

namespace sldm::cli {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------- config access

class Section {
 public:
  Section(const json& config, std::string name) : name_(std::move(name)), j_(config.at(name_)) {}

  std::string path(std::string_view key) const { return fmt::format("{}.{}", name_, key); }

  long long integer(std::string_view key, long long lo, long long hi = 1LL << 40) const {
    const long long v = at(key).get<long long>();
    if (v < lo || v > hi) throw ConfigError(path(key), fmt::format("{} is outside [{}, {}]", v, lo, hi));
    return v;
  }
  int int32(std::string_view key, int lo, int hi = 1 << 30) const { return static_cast<int>(integer(key, lo, hi)); }

  double number(std::string_view key, double lo = -INFINITY, double hi = INFINITY, bool open_lo = false) const {
    const double v = at(key).get<double>();
    if (!std::isfinite(v) || v < lo || v > hi || (open_lo && v == lo))
      throw ConfigError(path(key), fmt::format("{} is outside {}{}, {}]", v, open_lo ? "(" : "[", lo, hi));
    return v;
  }
  std::string text(std::string_view key) const { return at(key).get<std::string>(); }
  bool flag(std::string_view key) const { return at(key).get<bool>(); }

  std::vector<double> numbers(std::string_view key, double lo = -INFINITY, double hi = INFINITY) const {
    std::vector<double> out;
    for (const auto& v : at(key)) {
      const double d = v.get<double>();
      if (!std::isfinite(d) || d < lo || d > hi)
        throw ConfigError(path(key), fmt::format("entry {} is outside [{}, {}]", d, lo, hi));
      out.push_back(d);
    }
    if (out.empty()) throw ConfigError(path(key), "list is empty");
    return out;
  }
  std::vector<int> integers(std::string_view key, int lo) const {
    std::vector<int> out;
    for (const auto& v : at(key)) {
      const long long d = v.get<long long>();
      if (d < lo || d > (1 << 30)) throw ConfigError(path(key), fmt::format("entry {} is below {}", d, lo));
      out.push_back(static_cast<int>(d));
    }
    if (out.empty()) throw ConfigError(path(key), "list is empty");
    return out;
  }
  std::vector<std::string> texts(std::string_view key, bool allow_empty = false) const {
    std::vector<std::string> out;
    for (const auto& v : at(key)) out.push_back(v.get<std::string>());
    if (out.empty() && !allow_empty) throw ConfigError(path(key), "list is empty");
    return out;
  }

  // Runs a library parser and reports its error against this key.
  template <class F>
  auto parse(std::string_view key, const std::string& value, F&& f) const {
    try {
      return f(value);
    } catch (const std::exception& e) {
      throw ConfigError(path(key), e.what());
    }
  }

 private:
  const json& at(std::string_view key) const {
    const std::string k(key);
    if (!j_.contains(k)) throw ConfigError(path(key), "missing");
    return j_.at(k);
  }
  std::string name_;
  const json& j_;
};

// ---------------------------------------------------------------- outputs

class Outputs {
 public:
  explicit Outputs(fs::path dir) : dir_(std::move(dir)) {
    created_dir_ = !fs::exists(dir_);
    fs::create_directories(dir_);
  }

  void write(const std::string& name, const std::string& content) {
    const fs::path target = dir_ / name, tmp = dir_ / (name + ".partial");
    try {
      {
        std::ofstream f(tmp, std::ios::binary);
        if (!f) throw std::runtime_error(fmt::format("cannot write '{}'", tmp.string()));
        f << content;
        if (!f) throw std::runtime_error(fmt::format("write to '{}' failed", tmp.string()));
      }
      fs::rename(tmp, target);
    } catch (...) {
      std::error_code ec;
      fs::remove(tmp, ec);
      throw;
    }
    if (std::find(names_.begin(), names_.end(), name) == names_.end()) names_.push_back(name);
  }

  void drop(const std::string& name) {
    std::error_code ec;
    fs::remove(dir_ / name, ec);
    names_.erase(std::remove(names_.begin(), names_.end(), name), names_.end());
  }

  void remove_all() {
    std::error_code ec;
    for (const auto& n : names_) {
      fs::remove(dir_ / n, ec);
    }
    names_.clear();
    if (created_dir_ && fs::is_empty(dir_, ec)) fs::remove(dir_, ec);
  }

  const std::vector<std::string>& names() const { return names_; }
  const fs::path& dir() const { return dir_; }

 private:
  fs::path dir_;
  bool created_dir_ = false;
  std::vector<std::string> names_;
};

struct Context {
  const RunOptions& opt;
  Outputs& out;
  std::vector<Check>& checks;
  std::uint64_t seed = 0;

  template <class... Args>
  void log(fmt::format_string<Args...> f, Args&&... args) const {
    if (!opt.quiet) fmt::print(stderr, "{}\n", fmt::format(f, std::forward<Args>(args)...));
  }

  void check(std::string name, double value, std::string limit, bool passed) {
    checks.push_back({std::move(name), value, std::move(limit), passed});
  }

  void csv(const std::string& name, const Table& t) { out.write(name, t.csv()); }

  void json_file(const std::string& name, const json& j) { out.write(name, j.dump(2) + "\n"); }

  // Plot failures are reported but never fail the run.
  void plot(const std::string& name, const std::function<std::string()>& make) {
    if (!opt.plots) return;
    try {
      out.write(name, make());
    } catch (const std::exception& e) {
      out.drop(name);
      fmt::print(stderr, "warning: plot '{}' skipped: {}\n", name, e.what());
    }
  }
};

std::string num(double v) { return fmt::format("{}", v); }

PlotRequest request(PlotKind kind, std::string title, std::string x = {}, std::string y = {}, std::string group = {}) {
  PlotRequest r;
  r.kind = kind;
  r.title = std::move(title);
  r.x = std::move(x);
  r.y = std::move(y);
  r.group = std::move(group);
  return r;
}

// ---------------------------------------------------------------- shared readers

std::vector<ScheduleSpec> read_schedules(const json& config) {
  const Section s(config, "schedule");
  const double sig = s.number("sigma", 0.0, INFINITY, true);
  const double smin = s.number("sigma_min", 0.0, 1.0, true);
  const double smax = s.number("sigma_max", 0.0, INFINITY, true);
  std::vector<ScheduleSpec> specs;
  for (const auto& name : s.texts("kinds")) {
    ScheduleSpec spec = ScheduleSpec::of(s.parse("kinds", name, parse_schedule_kind));
    spec.sigma_const = sig;
    spec.sigma_min = smin;
    spec.sigma_max = smax;
    try {
      spec.validate();
    } catch (const std::exception& e) {
      throw ConfigError(s.path("kinds"), e.what());
    }
    for (const auto& other : specs)
      if (other.kind == spec.kind) throw ConfigError(s.path("kinds"), fmt::format("'{}' listed twice", name));
    specs.push_back(spec);
  }
  return specs;
}

GaussianMixture read_mixture(const json& config) {
  const Section s(config, "mixture");
  const auto w = s.numbers("weights", 0.0), m = s.numbers("means"), v = s.numbers("variances", 0.0);
  if (m.size() != w.size()) throw ConfigError(s.path("means"), "needs one entry per weight");
  if (v.size() != w.size()) throw ConfigError(s.path("variances"), "needs one entry per weight");
  std::vector<MixtureComponent> comps;
  for (std::size_t k = 0; k < w.size(); ++k)
    comps.push_back({w[k], Eigen::VectorXd::Constant(1, m[k]), Eigen::VectorXd::Constant(1, v[k])});
  try {
    return GaussianMixture(std::move(comps));
  } catch (const std::exception& e) {
    throw ConfigError(s.path("weights"), e.what());
  }
}

Integrator parse_integrator(const std::string& name) {
  if (name == "euler") return Integrator::Euler;
  if (name == "rk4") return Integrator::Rk4;
  throw std::invalid_argument(fmt::format("unknown integrator '{}' (euler, rk4)", name));
}

TimeSampling parse_time_sampling(const std::string& name) {
  if (name == "continuous") return TimeSampling::Continuous;
  if (name == "discrete") return TimeSampling::Discrete;
  throw std::invalid_argument(fmt::format("unknown time sampling '{}' (continuous, discrete)", name));
}

json read_json_file(const std::string& path, const std::string& key) {
  if (path.empty()) throw ConfigError(key, "a model checkpoint path is required");
  std::ifstream in(path);
  if (!in) throw ConfigError(key, fmt::format("cannot open '{}'", path));
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(key, fmt::format("'{}' is not valid JSON: {}", path, e.what()));
  }
}

// ---------------------------------------------------------------- schedule

void cmd_schedule(Context& ctx) {
  const json& cfg = ctx.opt.config;
  const auto specs = read_schedules(cfg);
  const int grid = Section(cfg, "schedule").int32("grid", 2, 10'000'000);

  Table tab({"kind", "t", "mu", "sigma", "mu_dot", "sigma_dot", "snr"});
  auto guarded = [](auto f) -> Cell {
    try {
      return f();
    } catch (const SingularityError&) {
      return std::monostate{};
    }
  };
  for (const auto& spec : specs) {
    const std::string kind(to_string(spec.kind));
    for (int i = 0; i < grid; ++i) {
      const double t = static_cast<double>(i) / (grid - 1);
      tab.add({kind, t, mu(spec, t), sigma(spec, t), guarded([&] { return mu_dot(spec, t); }),
               guarded([&] { return sigma_dot(spec, t); }), guarded([&] { return snr(spec, t); })});
    }
  }
  ctx.csv("schedule.csv", tab);

  Table cons({"kind", "check", "passed", "whitelisted", "first_violation_t", "detail"});
  for (const auto& spec : specs) {
    const ConstraintReport rep = validate_schedule(spec, grid);
    long long failing = 0;
    for (const auto& c : rep.checks) {
      cons.add({std::string(to_string(spec.kind)), c.name, c.passed ? "true" : "false", c.whitelisted ? "true" : "false",
                c.first_violation_t ? Cell(*c.first_violation_t) : Cell(std::monostate{}), c.detail});
      failing += !c.passed && !c.whitelisted;
    }
    ctx.check(fmt::format("constraints.{}", to_string(spec.kind)), static_cast<double>(failing), "== 0", failing == 0);
  }
  ctx.csv("constraints.csv", cons);
  ctx.plot("schedule.svg", [&] { return emit_plot(tab, request(PlotKind::Schedule, "noise schedules")); });
}

// ---------------------------------------------------------------- trajectory

void cmd_trajectory(Context& ctx) {
  const json& cfg = ctx.opt.config;
  const auto specs = read_schedules(cfg);
  const GaussianMixture data = read_mixture(cfg);
  const Section s(cfg, "trajectory");
  const int steps = s.int32("steps", 2), starts = s.int32("starts", 1, 100000);
  const double t_start = s.number("t_start", 0.0, 1.0 - 1e-6, true);
  const double t_end = s.number("t_end", 0.0, t_start);
  if (t_end >= t_start) throw ConfigError(s.path("t_end"), "must be below t_start");
  const Integrator method = s.parse("integrator", s.text("integrator"), parse_integrator);
  const double point = s.number("delta_point");
  const auto delta_steps = s.integers("delta_steps", 1);
  if (data.dims() != 1) throw ConfigError("mixture.means", "trajectories need one-dimensional data");

  Table traj({"schedule", "start", "t", "x"});
  Table curv({"schedule", "mean_abs_second_derivative"});
  std::map<ScheduleKind, double> mean_curv;
  for (const auto& spec : specs) {
    const std::string kind(to_string(spec.kind));
    const TrajectoryRecord rec = pf_trajectory(data, spec, t_start, t_end, steps, starts, method);
    for (int k = 0; k < starts; ++k)
      for (std::size_t i = 0; i < rec.times.size(); ++i)
        traj.add({kind, static_cast<long long>(k), rec.times[i], rec.states[i](k, 0)});
    const double c = curvature_profile(rec).mean_over(t_end, t_start);
    mean_curv[spec.kind] = c;
    curv.add({kind, c});
  }
  ctx.csv("trajectory.csv", traj);
  ctx.csv("curvature.csv", curv);
  if (mean_curv.count(ScheduleKind::Sldm))
    for (const auto& [kind, c] : mean_curv)
      if (kind != ScheduleKind::Sldm)
        ctx.check(fmt::format("straightness.sldm_below_{}", to_string(kind)), mean_curv[ScheduleKind::Sldm],
                  "< " + num(c), mean_curv[ScheduleKind::Sldm] < c);

  // Delta data: the SLDM flow is a straight line, so Euler is exact at any step count.
  const ScheduleSpec sldm_spec = [&] {
    for (const auto& sp : specs)
      if (sp.kind == ScheduleKind::Sldm) return sp;
    return ScheduleSpec::sldm(Section(cfg, "schedule").number("sigma", 0.0, INFINITY, true));
  }();
  const DeltaDistribution delta{Eigen::VectorXd::Constant(1, point)};
  const GaussianMixture marg = marginal_at(delta, sldm_spec, t_start);
  Eigen::MatrixXd x0(starts, 1);
  for (int k = 0; k < starts; ++k) x0(k, 0) = quantile_1d(marg, (k + 0.5) / starts);
  const ScoreFn score = delta_score_fn(delta, sldm_spec);
  const RhsFn rhs = [&](double t, const Eigen::MatrixXd& x) { return pf_ode_rhs(sldm_spec, score, t, x); };
  const Eigen::MatrixXd exact = x0.array() + (t_start - t_end) * point;
  Table dtab({"steps", "max_terminal_error"});
  for (int n : delta_steps) {
    const TrajectoryRecord rec = integrate_ode(rhs, x0, t_start, t_end, n, Integrator::Euler);
    const double err = (rec.states.back() - exact).cwiseAbs().maxCoeff();
    dtab.add({static_cast<long long>(n), err});
    ctx.check(fmt::format("delta_exact.steps_{}", n), err, "< 1e-12", err < 1e-12);
  }
  ctx.csv("delta.csv", dtab);
  ctx.plot("trajectory.svg", [&] { return emit_plot(traj, request(PlotKind::Trajectory, "probability-flow trajectories")); });
}

// ---------------------------------------------------------------- truncation

void cmd_truncation(Context& ctx) {
  const json& cfg = ctx.opt.config;
  const auto specs = read_schedules(cfg);
  const GaussianMixture data = read_mixture(cfg);
  const Section s(cfg, "truncation");
  auto steps = s.integers("steps", 1);
  std::sort(steps.begin(), steps.end());
  steps.erase(std::unique(steps.begin(), steps.end()), steps.end());
  TruncationConfig main_cfg;
  main_cfg.reference_steps = s.int32("reference_steps", 2);
  main_cfg.n_starts = s.int32("starts", 1, 100000);
  main_cfg.t_start = s.number("t_start", 0.0, 1.0 - 1e-6, true);
  main_cfg.t_end = s.number("t_end", 0.0, 1.0);
  if (main_cfg.t_end >= main_cfg.t_start) throw ConfigError(s.path("t_end"), "must be below t_start");
  TruncationConfig order_cfg = main_cfg;
  order_cfg.t_start = s.number("order_t_start", 0.0, 1.0 - 1e-6, true);
  order_cfg.t_end = s.number("order_t_end", 0.0, 1.0);
  if (order_cfg.t_end >= order_cfg.t_start) throw ConfigError(s.path("order_t_end"), "must be below order_t_start");
  if (data.dims() != 1) throw ConfigError("mixture.means", "the truncation study needs one-dimensional data");

  const std::vector<Integrator> methods{Integrator::Euler, Integrator::Rk4};
  const auto main_rows = truncation_study(data, specs, steps, methods, main_cfg);
  const auto order_rows = truncation_study(data, specs, steps, methods, order_cfg);

  Table tab({"window", "schedule", "integrator", "t_start", "t_end", "steps", "error"});
  Table plot_tab({"series", "steps", "error"});
  for (const auto* rows : {&main_rows, &order_rows}) {
    const TruncationConfig& c = rows == &main_rows ? main_cfg : order_cfg;
    const std::string window = rows == &main_rows ? "main" : "order";
    for (const auto& r : *rows) {
      tab.add({window, std::string(to_string(r.kind)), std::string(to_string(r.method)), c.t_start, c.t_end,
               static_cast<long long>(r.steps), r.error});
      if (rows == &main_rows)
        plot_tab.add({fmt::format("{} {}", to_string(r.kind), to_string(r.method)), static_cast<long long>(r.steps),
                      r.error});
    }
  }
  ctx.csv("truncation.csv", tab);

  auto errors = [&](const std::vector<TruncationRow>& rows, ScheduleKind k, Integrator m) {
    std::vector<double> e;
    for (const auto& r : rows)
      if (r.kind == k && r.method == m) e.push_back(r.error);
    return e;
  };
  Table otab({"window", "schedule", "integrator", "t_start", "t_end", "order"});
  for (const auto& spec : specs)
    for (Integrator m : methods)
      for (const auto* rows : {&main_rows, &order_rows}) {
        const TruncationConfig& c = rows == &main_rows ? main_cfg : order_cfg;
        const double order = steps.size() >= 2 ? observed_order(steps, errors(*rows, spec.kind, m)) : NAN;
        otab.add({rows == &main_rows ? "main" : "order", std::string(to_string(spec.kind)),
                  std::string(to_string(m)), c.t_start, c.t_end, order});
        if (rows != &order_rows || steps.size() < 2) continue;
        const std::string name = fmt::format("order.{}.{}", to_string(m), to_string(spec.kind));
        if (m == Integrator::Euler) ctx.check(name, order, "in [0.8, 1.2]", order >= 0.8 && order <= 1.2);
        else ctx.check(name, order, ">= 3.5", order >= 3.5);
      }
  ctx.csv("orders.csv", otab);

  const bool has_sldm = std::any_of(specs.begin(), specs.end(), [](const auto& sp) { return sp.kind == ScheduleKind::Sldm; });
  if (has_sldm) {
    const double ref = errors(main_rows, ScheduleKind::Sldm, Integrator::Euler).front();
    for (const auto& spec : specs) {
      if (spec.kind == ScheduleKind::Sldm) continue;
      const double other = errors(main_rows, spec.kind, Integrator::Euler).front();
      ctx.check(fmt::format("advantage.sldm_below_{}.steps_{}", to_string(spec.kind), steps.front()), ref,
                "< " + num(other), ref < other);
    }
  }
  ctx.plot("truncation.svg", [&] {
    PlotRequest r = request(PlotKind::Lines, "Euler and RK4 terminal error", "steps", "error", "series");
    r.log_x = r.log_y = true;
    return emit_plot(plot_tab, r);
  });
}

// ---------------------------------------------------------------- theorem1

void cmd_theorem1(Context& ctx) {
  const json& cfg = ctx.opt.config;
  const GaussianMixture data = read_mixture(cfg);
  const Section s(cfg, "theorem1");
  const auto sigmas = s.numbers("sigmas", 1e-12);
  const double delta = s.number("delta", 0.0, INFINITY, true);
  const auto times = s.numbers("times", 1e-9, 1.0 - 1e-9);
  const Eigen::Index draws = s.integer("draws", 1);

  Table tab({"sigma", "delta", "t", "violation_freq", "bound", "std_error", "trials", "within_bound"});
  Table plot_tab({"series", "t", "value"});
  for (std::size_t j = 0; j < sigmas.size(); ++j) {
    const auto rows = theorem1_check(data, sigmas[j], times, delta, draws, stream_key(ctx.seed, j));
    for (const auto& r : rows) {
      tab.add({r.sigma, r.delta, r.t, r.violation_freq, r.bound, r.std_error, static_cast<long long>(r.trials),
               r.within_bound() ? "true" : "false"});
      plot_tab.add({fmt::format("frequency sigma={}", r.sigma), r.t, r.violation_freq});
      plot_tab.add({fmt::format("bound sigma={}", r.sigma), r.t, r.bound});
      ctx.check(fmt::format("theorem1.sigma_{}.t_{}", r.sigma, r.t), r.violation_freq,
                "<= " + num(r.bound + 3.0 * r.std_error), r.within_bound());
    }
  }
  ctx.csv("theorem1.csv", tab);
  ctx.plot("theorem1.svg", [&] {
    PlotRequest r = request(PlotKind::Lines, "deviation frequency and bound", "t", "value", "series");
    r.log_y = true;
    return emit_plot(plot_tab, r);
  });
}

// ---------------------------------------------------------------- toy models

struct ToyCheckpoint {
  Denoiser model;
  ToyDataset train_data;  // regenerated from the recorded dataset settings
  TrainConfig train;
};

ToyCheckpoint load_toy_checkpoint(const json& cfg) {
  const Section in(cfg, "input");
  const std::string path = in.text("model");
  const json j = read_json_file(path, in.path("model"));
  ToyCheckpoint out;
  try {
    out.model = denoiser_from_json(j);
    const json& d = j.at("dataset");
    ToyParams p;
    p.noise = d.at("noise").get<double>();
    out.train_data = generate(parse_toy_name(d.at("name").get<std::string>()), d.at("n").get<Eigen::Index>(), p,
                              d.at("seed").get<std::uint64_t>());
    const json& t = j.at("train");
    out.train.sigma = t.at("sigma").get<double>();
    out.train.time_sampling = parse_time_sampling(t.at("time_sampling").get<std::string>());
    out.train.discrete_steps = t.at("discrete_steps").get<int>();
  } catch (const std::exception& e) {
    throw ConfigError(in.path("model"), fmt::format("'{}' is not a toy checkpoint: {}", path, e.what()));
  }
  return out;
}

// steps = 0 selects the checkpoint's training grid (100 for continuous time).
SamplerConfig read_sampler(const json& cfg, const TrainConfig& train, std::uint64_t seed) {
  const Section s(cfg, "sampler");
  SamplerConfig c;
  c.steps = s.int32("steps", 0);
  if (c.steps == 0) c.steps = train.time_sampling == TimeSampling::Discrete ? train.discrete_steps : 100;
  if (c.steps < 2) throw ConfigError(s.path("steps"), "at least 2 steps are needed");
  c.sigma = s.number("sigma", 0.0, INFINITY, true);
  c.nu = s.number("nu", 0.0);
  c.gamma = s.number("gamma", 0.0, INFINITY, true);
  c.beta_mode = s.parse("beta", s.text("beta"), parse_beta_mode);
  c.beta_scale = s.number("beta_scale", 0.0);
  c.init_scale = s.number("init_scale");
  c.seed = seed;
  try {
    c.validate();
  } catch (const std::exception& e) {
    throw ConfigError("sampler", e.what());
  }
  return c;
}

// Three quarters of the energy distance between 10^4 data points and a
// standard normal sample, measured once per dataset.
double default_energy_gate(ToyName name) {
  switch (name) {
    case ToyName::Swissroll: return 0.0149;
    case ToyName::Moons: return 0.0337;
    case ToyName::Chessboard: return 0.0113;
  }
  return 0.0149;
}

void cmd_train_toy(Context& ctx) {
  const json& cfg = ctx.opt.config;
  const Section d(cfg, "dataset"), m(cfg, "model"), t(cfg, "train");
  const ToyName name = d.parse("name", d.text("name"), parse_toy_name);
  const Eigen::Index n = d.integer("n", 1);
  ToyParams params;
  params.noise = d.number("noise");
  MlpConfig mc;
  mc.hidden = m.int32("hidden", 1);
  mc.layers = m.int32("layers", 2);
  mc.fourier_time = m.flag("fourier_time");
  mc.fourier_features = m.int32("fourier_features", 1);
  TrainConfig tc;
  tc.epochs = t.int32("epochs", 1);
  tc.batch = t.integer("batch", 1);
  tc.lr = t.number("lr", 0.0, INFINITY, true);
  tc.sigma = t.number("sigma", 0.0, INFINITY, true);
  tc.time_sampling = t.parse("time_sampling", t.text("time_sampling"), parse_time_sampling);
  tc.discrete_steps = t.int32("discrete_steps", 2);
  tc.seed = stream_key(ctx.seed, 3);
  try {
    tc.validate();
    mc.validate();
  } catch (const std::exception& e) {
    throw ConfigError("train", e.what());
  }

  const std::uint64_t data_seed = stream_key(ctx.seed, 1);
  const ToyDataset ds = generate(name, n, params, data_seed);
  Denoiser model(mc, stream_key(ctx.seed, 2));
  ctx.log("train-toy: {} points, {} parameters, {} epochs", n, model.parameter_count(), tc.epochs);
  const TrainResult res = train(model, ds.points, tc, [&](int epoch, double loss) {
    if ((epoch + 1) % 10 == 0 || epoch == 0) ctx.log("  epoch {} loss {:.5f}", epoch + 1, loss);
  });

  json ckpt = checkpoint_json(model, tc);
  ckpt["dataset"] = {{"name", to_string(name)}, {"n", n}, {"noise", params.noise}, {"seed", data_seed}};
  ctx.json_file("model.json", ckpt);
  Table loss({"epoch", "loss"});
  for (std::size_t e = 0; e < res.epoch_loss.size(); ++e) loss.add({static_cast<long long>(e + 1), res.epoch_loss[e]});
  ctx.csv("loss.csv", loss);

  const bool finite = std::all_of(res.epoch_loss.begin(), res.epoch_loss.end(), [](double v) { return std::isfinite(v); });
  ctx.check("train.finite_loss", finite ? 1.0 : 0.0, "== 1", finite);
  const double ratio = res.epoch_loss.back() / res.epoch_loss.front();
  ctx.check("train.loss_decreased", ratio, "< 1 (last / first epoch)", ratio < 1.0);
  ctx.plot("loss.svg", [&] {
    PlotRequest r = request(PlotKind::Lines, "training loss", "epoch", "loss");
    r.log_y = true;
    return emit_plot(loss, r);
  });
}

struct ToyEval {
  double energy = 0, floor = 0, coverage = 0, spread = 0, variance = 0;
  CoverageReport cov;
};

ToyEval evaluate_toy(const Eigen::MatrixXd& samples, const ToyDataset& train_data, const Eigen::MatrixXd& reference,
                     const Eigen::MatrixXd& reference2, Eigen::Index k, std::uint64_t seed) {
  ToyEval e;
  e.energy = energy_distance(samples, reference, 4000, seed);
  e.floor = energy_distance(reference2, reference, 4000, seed);
  e.cov = mode_coverage(samples, default_regions(train_data), k);
  e.coverage = e.cov.fraction;
  e.spread = mean_nearest_distance(samples, train_data.points);
  const Eigen::RowVectorXd mean = samples.colwise().mean();
  e.variance = (samples.rowwise() - mean).squaredNorm() / static_cast<double>(samples.rows() * samples.cols());
  return e;
}

void cmd_sample_toy(Context& ctx) {
  const json& cfg = ctx.opt.config;
  const ToyCheckpoint ck = load_toy_checkpoint(cfg);
  const SamplerConfig sc = read_sampler(cfg, ck.train, stream_key(ctx.seed, 1));
  const Section sm(cfg, "sampler"), ev(cfg, "evaluation");
  const Eigen::Index count = sm.integer("count", 1);
  const Eigen::Index ref_n = ev.integer("reference_n", 2);
  const Eigen::Index k = ev.integer("coverage_k", 1);
  double gate = ev.number("energy_gate");
  if (gate < 0) gate = default_energy_gate(ck.train_data.name);
  if (sc.sigma != ck.train.sigma)
    fmt::print(stderr, "warning: sampler sigma {} differs from the training sigma {}\n", sc.sigma, ck.train.sigma);

  ctx.log("sample-toy: {} chains, T = {}, nu = {}", count, sc.steps, sc.nu);
  const ChainResult res = sample_chain(denoiser_eps_model(ck.model), sc, count, 2);
  const ToyDataset& td = ck.train_data;
  // Fresh draws are standardized by their own statistics; map them through the
  // training standardization instead.
  auto restandardize = [&](std::uint64_t s, Eigen::Index n) {
    return td.to_standardized(generate_raw(td.name, n, td.params, s));
  };
  const Eigen::MatrixXd r1 = restandardize(stream_key(ctx.seed, 2), ref_n);
  const Eigen::MatrixXd r2 = restandardize(stream_key(ctx.seed, 3), count);
  const ToyEval e = evaluate_toy(res.samples, td, r1, r2, k, stream_key(ctx.seed, 4));

  std::ostringstream pts;
  write_points_csv(pts, res.samples);
  ctx.out.write("samples.csv", pts.str());
  json metrics = {
      {"dataset", to_string(td.name)},
      {"samples", count},
      {"steps", sc.steps},
      {"nu", sc.nu},
      {"model_evaluations", res.model_evaluations},
      {"energy_distance", e.energy},
      {"energy_distance_noise_floor", e.floor},
      {"energy_gate", gate},
      {"coverage", e.coverage},
      {"regions_covered", e.cov.covered},
      {"regions", e.cov.counts.size()},
      {"mean_nearest_distance", e.spread},
      {"variance", e.variance},
  };
  ctx.json_file("metrics.json", metrics);
  ctx.check("sample.energy_distance", e.energy, "< " + num(gate), e.energy < gate);
  ctx.check("sample.coverage", e.coverage, "== 1", e.coverage == 1.0);
  ctx.check("sample.evaluations", res.model_evaluations, "== " + num(sc.steps - 1), res.model_evaluations == sc.steps - 1);
  ctx.plot("samples.svg", [&] {
    Table t({"x", "y"});
    for (Eigen::Index r = 0; r < res.samples.rows(); ++r) t.add({res.samples(r, 0), res.samples(r, 1)});
    return emit_plot(t, request(PlotKind::Scatter, fmt::format("{} samples", to_string(td.name)), "x", "y"));
  });
}

void cmd_temp_study(Context& ctx) {
  const json& cfg = ctx.opt.config;
  const ToyCheckpoint ck = load_toy_checkpoint(cfg);
  SamplerConfig sc = read_sampler(cfg, ck.train, stream_key(ctx.seed, 1));
  const Section sm(cfg, "sampler"), ev(cfg, "evaluation"), tp(cfg, "temperature");
  const Eigen::Index count = sm.integer("count", 1);
  const Eigen::Index ref_n = ev.integer("reference_n", 2);
  const Eigen::Index k = ev.integer("coverage_k", 1);
  auto nus = tp.numbers("nus", 0.0);
  std::sort(nus.begin(), nus.end());
  const auto taus = tp.numbers("taus", 1e-9);
  const Eigen::Index chains = tp.integer("langevin_chains", 2);
  const int lsteps = tp.int32("langevin_steps", 1);
  const double lstep = tp.number("langevin_step", 0.0, 1.0, true);
  const double tol = tp.number("variance_tolerance", 0.0);

  const ToyDataset& td = ck.train_data;
  const Eigen::MatrixXd r1 = td.to_standardized(generate_raw(td.name, ref_n, td.params, stream_key(ctx.seed, 2)));
  const Eigen::MatrixXd r2 = td.to_standardized(generate_raw(td.name, count, td.params, stream_key(ctx.seed, 3)));

  Table tab({"nu", "coverage", "mean_nearest_distance", "energy_distance", "variance"});
  std::vector<double> spread;
  for (double nu : nus) {
    sc.nu = nu;  // same chain streams for every nu
    ctx.log("temp-study: nu = {}", nu);
    const ChainResult res = sample_chain(denoiser_eps_model(ck.model), sc, count, 2);
    const ToyEval e = evaluate_toy(res.samples, td, r1, r2, k, stream_key(ctx.seed, 4));
    tab.add({nu, e.coverage, e.spread, e.energy, e.variance});
    spread.push_back(e.spread);
    if (nu <= 1.0) ctx.check(fmt::format("temperature.coverage.nu_{}", nu), e.coverage, "== 1", e.coverage == 1.0);
  }
  double worst_rise = 0;
  for (std::size_t i = 1; i < spread.size(); ++i) worst_rise = std::max(worst_rise, spread[i] - spread[i - 1]);
  ctx.check("temperature.spread_nonincreasing", worst_rise, "<= 0 (largest rise between consecutive nu)",
            worst_rise <= 0.0);
  ctx.csv("temperature.csv", tab);

  Table lang({"tau", "variance", "std_error", "target", "discretized_target"});
  const auto score = [](const Eigen::MatrixXd& x) { return Eigen::MatrixXd(-x); };
  for (std::size_t i = 0; i < taus.size(); ++i) {
    const double tau = taus[i];
    const Eigen::MatrixXd x =
        langevin_tempered(score, tau, lstep, lsteps, Eigen::MatrixXd::Zero(chains, 1), stream_key(ctx.seed, 100 + i));
    const Moments mom = sample_moments(x.col(0));
    const double var = x.col(0).squaredNorm() / static_cast<double>(chains);
    const double target = tau * tau;
    lang.add({tau, var, mom.variance_se, target, target / (1.0 - lstep * lstep / 4.0)});
    ctx.check(fmt::format("langevin.tau_{}", tau), var, fmt::format("within {} of {}", tol, target),
              std::abs(var - target) <= tol);
  }
  ctx.csv("langevin.csv", lang);
  ctx.plot("temperature.svg", [&] {
    return emit_plot(tab, request(PlotKind::Lines, "sample spread against nu", "nu", "mean_nearest_distance"));
  });
}

// ---------------------------------------------------------------- point clouds

void cmd_train_cloud(Context& ctx) {
  const json& cfg = ctx.opt.config;
  const Section d(cfg, "cloud_data"), e(cfg, "egnn"), t(cfg, "cloud_train");
  std::vector<Shape> shapes;
  for (const auto& s : d.texts("shapes")) shapes.push_back(d.parse("shapes", s, parse_shape));
  const Eigen::Index count = d.integer("count", 1);
  const double jitter = d.number("jitter", 0.0);
  const std::uint64_t data_seed = static_cast<std::uint64_t>(d.integer("data_seed", 0, (1LL << 53)));

  CloudTrainConfig tc;
  tc.batch = t.integer("batch", 1);
  tc.steps = t.int32("steps", 1);
  tc.lr = t.number("lr", 0.0, INFINITY, true);
  tc.sigma = t.number("sigma", 0.0, INFINITY, true);
  tc.nucleation.t_n = t.number("t_n", 0.0, 1.0);
  tc.nucleation.branch_weight = t.number("branch_weight", 0.0, 1.0);
  tc.nucleation.coord_weight = t.number("coord_weight", 0.0);
  tc.nucleation.label_weight = t.number("label_weight", 0.0);
  tc.nucleation.label_loss = t.parse("label_loss", t.text("label_loss"), parse_label_loss);
  tc.seed = stream_key(ctx.seed, 3);
  EgnnConfig ec;
  ec.layers = e.int32("layers", 1);
  ec.hidden = e.int32("hidden", 1);
  ec.coord_range = e.number("coord_range", 0.0, INFINITY, true);
  ec.data_variance = e.number("data_variance", 0.0, INFINITY, true);
  ec.sigma = tc.sigma;
  try {
    tc.validate();
    ec.validate();
  } catch (const std::exception& ex) {
    throw ConfigError("cloud_train", ex.what());
  }

  const auto data = make_shape_dataset(shapes, count, jitter, data_seed);
  EquivariantDenoiser model(ec, stream_key(ctx.seed, 2));
  ctx.log("train-cloud: {} clouds, {} parameters, {} steps", count, model.parameter_count(), tc.steps);
  const CloudTrainResult res = train_cloud(model, data, tc, [&](int step, const CloudLoss& l) {
    if ((step + 1) % 200 == 0) ctx.log("  step {} loss {:.4f} (coord {:.4f}, label {:.4f})", step + 1, l.total, l.coord, l.label);
  });

  json ckpt = checkpoint_json(model, tc);
  json shape_names = json::array();
  for (Shape s : shapes) shape_names.push_back(to_string(s));
  ckpt["cloud_data"] = {{"shapes", shape_names}, {"count", count}, {"jitter", jitter}, {"data_seed", data_seed}};
  ctx.json_file("model.json", ckpt);
  Table loss({"step", "loss", "coord_loss", "label_loss"});
  for (std::size_t s = 0; s < res.loss.size(); ++s)
    loss.add({static_cast<long long>(s + 1), res.loss[s], res.coord_loss[s], res.label_loss[s]});
  ctx.csv("loss.csv", loss);

  const bool finite = std::all_of(res.loss.begin(), res.loss.end(), [](double v) { return std::isfinite(v); });
  ctx.check("train.finite_loss", finite ? 1.0 : 0.0, "== 1", finite);
  const int window = std::max(1, std::min<int>(200, static_cast<int>(res.coord_loss.size()) / 4));
  const auto smoothed = smooth(res.coord_loss, window);
  const double first = smoothed[static_cast<std::size_t>(window - 1)], last = smoothed.back();
  ctx.check("train.coord_loss_decreased", last / first, "< 1 (smoothed last / first)", last < first);
  ctx.plot("loss.svg", [&] {
    Table t2({"series", "step", "loss"});
    for (std::size_t s = 0; s < smoothed.size(); ++s) t2.add({"coordinate (smoothed)", static_cast<long long>(s + 1), smoothed[s]});
    PlotRequest r = request(PlotKind::Lines, "training loss", "step", "loss", "series");
    r.log_y = true;
    return emit_plot(t2, r);
  });
}

void cmd_sample_cloud(Context& ctx) {
  const json& cfg = ctx.opt.config;
  const Section in(cfg, "input"), s(cfg, "cloud_sampler");
  const std::string path = in.text("model");
  const json j = read_json_file(path, in.path("model"));
  EquivariantDenoiser model;
  std::vector<Shape> shapes;
  double jitter = 0;
  std::uint64_t data_seed = 0;
  try {
    model = egnn_from_json(j);
    const json& d = j.at("cloud_data");
    for (const auto& name : d.at("shapes")) shapes.push_back(parse_shape(name.get<std::string>()));
    jitter = d.at("jitter").get<double>();
    data_seed = d.at("data_seed").get<std::uint64_t>();
  } catch (const std::exception& e) {
    throw ConfigError(in.path("model"), fmt::format("'{}' is not a point-cloud checkpoint: {}", path, e.what()));
  }

  CloudSamplerConfig sc;
  sc.steps = s.int32("steps", 2);
  sc.nu = s.number("nu", 0.0);
  sc.sigma = model.config().sigma;
  sc.chains_per_batch = s.integer("chains_per_batch", 1);
  sc.seed = stream_key(ctx.seed, 1);
  const Eigen::Index count = s.integer("count", 2);
  const Eigen::Index pairs = s.integer("rotation_pairs", 0, count);
  const double gate = s.number("energy_gate", 0.0, INFINITY, true);
  try {
    sc.validate();
  } catch (const std::exception& e) {
    throw ConfigError("cloud_sampler", e.what());
  }

  const Eigen::Index m = shape_template(shapes.front()).coords.rows();
  const CloudModel cm = cloud_model(model);
  ctx.log("sample-cloud: {} clouds of {} points, T = {}", count, m, sc.steps);
  const CloudSample out = sample_cloud(cm, m, count, sc);

  // Paired runs with every noise draw rotated by R must give R x.
  double pair_err = 0;
  if (pairs > 0) {
    Rng rng = Rng::stream(ctx.seed, 5);
    CloudSamplerConfig rc = sc;
    rc.noise_rotation = random_orthogonal(rng);
    const CloudSample rot = sample_cloud(cm, m, pairs, rc);
    for (Eigen::Index c = 0; c < pairs; ++c) {
      const auto& a = out.clouds[static_cast<std::size_t>(c)].coords;
      const auto& b = rot.clouds[static_cast<std::size_t>(c)].coords;
      pair_err = std::max(pair_err, (rotate(a, *rc.noise_rotation) - b).cwiseAbs().maxCoeff());
    }
  }

  // Fresh reference sets from the training distribution, independent of its data seed.
  const auto ref = make_shape_dataset(shapes, count, jitter, stream_key(data_seed, 11));
  const auto ref2 = make_shape_dataset(shapes, count, jitter, stream_key(data_seed, 12));
  const Eigen::MatrixXd fg = sorted_pair_distances(out.clouds), fr = sorted_pair_distances(ref),
                        fr2 = sorted_pair_distances(ref2);
  const double ed = energy_distance(fg, fr, 4000, stream_key(ctx.seed, 6));
  const double floor = energy_distance(fr2, fr, 4000, stream_key(ctx.seed, 6));
  long one_centre = 0;
  for (const auto& c : out.clouds) one_centre += std::count(c.labels.begin(), c.labels.end(), 0) == 1;

  std::ostringstream text;
  write_clouds(text, out.clouds);
  ctx.out.write("clouds.txt", text.str());
  Table prof({"set", "rank", "mean_distance"});
  for (Eigen::Index r = 0; r < fg.cols(); ++r) prof.add({"generated", static_cast<long long>(r), fg.col(r).mean()});
  for (Eigen::Index r = 0; r < fr.cols(); ++r) prof.add({"reference", static_cast<long long>(r), fr.col(r).mean()});
  ctx.csv("distance_profile.csv", prof);
  const json metrics = {{"clouds", count},
                        {"points", m},
                        {"steps", sc.steps},
                        {"nu", sc.nu},
                        {"coordinate_evaluations", out.coordinate_evals},
                        {"label_evaluations", out.label_evals},
                        {"max_com_deviation", out.max_com_deviation},
                        {"rotation_pairs", pairs},
                        {"rotation_pair_error", pair_err},
                        {"pair_distance_energy", ed},
                        {"pair_distance_energy_noise_floor", floor},
                        {"energy_gate", gate},
                        {"one_centre_fraction", static_cast<double>(one_centre) / static_cast<double>(count)}};
  ctx.json_file("metrics.json", metrics);

  ctx.check("cloud.com_deviation", out.max_com_deviation, "< 1e-9", out.max_com_deviation < 1e-9);
  ctx.check("cloud.coordinate_evaluations", static_cast<double>(out.coordinate_evals), "== " + num(sc.steps - 1),
            out.coordinate_evals == sc.steps - 1);
  ctx.check("cloud.label_evaluations", static_cast<double>(out.label_evals), "== 1", out.label_evals == 1);
  if (pairs > 0) ctx.check("cloud.rotated_noise_pairing", pair_err, "< 1e-9", pair_err < 1e-9);
  ctx.check("cloud.pair_distance_energy", ed, "< " + num(gate), ed < gate);
  ctx.plot("distance_profile.svg", [&] {
    return emit_plot(prof, request(PlotKind::Lines, "mean sorted pair distance", "rank", "mean_distance", "set"));
  });
}

// ---------------------------------------------------------------- report

void cmd_report(Context& ctx) {
  const Section s(ctx.opt.config, "report");
  const auto runs = s.texts("runs", true);
  if (runs.empty()) throw ConfigError(s.path("runs"), "no run directories given");
  Table tab({"run", "subcommand", "seed", "check", "value", "limit", "passed"});
  std::string md = "# Run report\n\n| run | subcommand | checks | failed |\n|---|---|---|---|\n";
  json summary = json::array();
  for (const auto& dir : runs) {
    const fs::path mp = fs::path(dir) / "manifest.json", cp = fs::path(dir) / "checks.json";
    const json man = read_json_file(mp.string(), s.path("runs"));
    const json chk = read_json_file(cp.string(), s.path("runs"));
    if (man.value("format", "") != "sldm-manifest")
      throw ConfigError(s.path("runs"), fmt::format("'{}' is not a run manifest", mp.string()));
    long long failed = 0, total = 0;
    for (const auto& c : chk.at("checks")) {
      ++total;
      const bool ok = c.at("passed").get<bool>();
      failed += !ok;
      tab.add({dir, man.at("subcommand").get<std::string>(), man.at("seed").get<long long>(),
               c.at("name").get<std::string>(), c.at("value").is_number() ? Cell(c.at("value").get<double>()) : Cell(),
               c.at("limit").get<std::string>(), ok ? "true" : "false"});
    }
    md += fmt::format("| {} | {} | {} | {} |\n", dir, man.at("subcommand").get<std::string>(), total, failed);
    summary.push_back({{"run", dir},
                       {"subcommand", man.at("subcommand")},
                       {"tool_version", man.at("tool_version")},
                       {"checks", total},
                       {"failed", failed}});
    ctx.check(fmt::format("report.{}", dir), static_cast<double>(failed), "== 0 failed checks", failed == 0);
  }
  ctx.csv("report.csv", tab);
  ctx.json_file("report.json", {{"runs", summary}});
  ctx.out.write("report.md", md);
}

const std::map<std::string, void (*)(Context&), std::less<>>& commands() {
  static const std::map<std::string, void (*)(Context&), std::less<>> table = {
      {"schedule", cmd_schedule},         {"trajectory", cmd_trajectory},   {"truncation", cmd_truncation},
      {"theorem1", cmd_theorem1},         {"temp-study", cmd_temp_study},   {"train-toy", cmd_train_toy},
      {"sample-toy", cmd_sample_toy},     {"train-cloud", cmd_train_cloud}, {"sample-cloud", cmd_sample_cloud},
      {"report", cmd_report},
  };
  return table;
}

json check_json(const Check& c) {
  json v = std::isfinite(c.value) ? json(c.value) : json(nullptr);
  return {{"name", c.name}, {"value", v}, {"limit", c.limit}, {"passed", c.passed}};
}

}  // namespace

RunResult run(const RunOptions& opt) {
  const auto it = commands().find(opt.subcommand);
  if (it == commands().end()) throw std::invalid_argument(fmt::format("unknown subcommand '{}'", opt.subcommand));
  if (!opt.config.contains("seed")) throw ConfigError("seed", "a seed is required");

  Outputs out(opt.out_dir);
  RunResult result;
  Context ctx{opt, out, result.checks, opt.config.at("seed").get<std::uint64_t>()};
  try {
    it->second(ctx);
    json checks = json::array();
    bool all = true;
    for (const auto& c : result.checks) {
      checks.push_back(check_json(c));
      all = all && c.passed;
    }
    ctx.json_file("checks.json", {{"subcommand", opt.subcommand}, {"passed", all}, {"checks", checks}});
    std::vector<std::string> names = out.names();
    std::sort(names.begin(), names.end());
    const json manifest = {{"format", "sldm-manifest"},
                           {"version", 1},
                           {"tool", kToolName},
                           {"tool_version", kToolVersion},
                           {"subcommand", opt.subcommand},
                           {"seed", ctx.seed},
                           {"plots", opt.plots},
                           {"config", opt.config},
                           {"outputs", names}};
    ctx.json_file("manifest.json", manifest);
    result.outputs = out.names();
    result.exit_code = opt.check && !all ? 1 : 0;
  } catch (...) {
    out.remove_all();
    throw;
  }
  if (!opt.quiet)
    for (const auto& c : result.checks)
      fmt::print("{} {} = {} ({})\n", c.passed ? "PASS" : "FAIL", c.name, c.value, c.limit);
  return result;
}

}  // namespace sldm::cli
