#include "sldm/dynamics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include <fmt/format.h>

namespace sldm {

std::string_view to_string(Integrator method) {
  return method == Integrator::Euler ? "euler" : "rk4";
}

std::string_view to_string(BetaMode mode) {
  switch (mode) {
    case BetaMode::MseOptimal: return "mse_optimal";
    case BetaMode::Zero: return "zero";
    case BetaMode::Scaled: return "scaled";
    case BetaMode::Table: return "table";
  }
  return "unknown";
}

BetaMode parse_beta_mode(std::string_view name) {
  for (BetaMode m : {BetaMode::MseOptimal, BetaMode::Zero, BetaMode::Scaled, BetaMode::Table})
    if (to_string(m) == name) return m;
  throw std::invalid_argument(fmt::format("unknown beta mode '{}'", name));
}

ScoreFn mixture_score(const GaussianMixture& data, const ScheduleSpec& spec) {
  return [data, spec](const Eigen::MatrixXd& x, double t) { return marginal_at(data, spec, t).score_rows(x); };
}

PosteriorMeanFn mixture_posterior_mean(const GaussianMixture& data, const ScheduleSpec& spec) {
  return [data, spec](const Eigen::MatrixXd& x, double t) { return posterior_mean_rows(data, spec, t, x); };
}

ScoreFn delta_score_fn(const DeltaDistribution& data, const ScheduleSpec& spec) {
  return [data, spec](const Eigen::MatrixXd& x, double t) {
    const double s = sigma(spec, t);
    if (s <= 0.0) throw SingularityError(fmt::format("delta score undefined at t = {} (sigma = 0)", t));
    Eigen::MatrixXd out = -x;
    out.rowwise() += (mu(spec, t) * data.point).transpose();
    return Eigen::MatrixXd(out / (s * s));
  };
}

Eigen::MatrixXd forward_simulate_sde(const ScheduleSpec& spec, const Eigen::MatrixXd& x0, double t_end,
                                     int n_steps, std::uint64_t seed) {
  if (n_steps < 1) throw std::invalid_argument("forward_simulate_sde: n_steps must be >= 1");
  if (!(t_end > 0.0 && t_end <= 1.0)) throw std::invalid_argument("forward_simulate_sde: t_end must lie in (0, 1]");
  const double dt = t_end / n_steps;
  const double sqrt_dt = std::sqrt(dt);
  std::vector<double> drift(static_cast<std::size_t>(n_steps)), diffusion(static_cast<std::size_t>(n_steps));
  for (int k = 0; k < n_steps; ++k) {
    const double t = k * dt;
    drift[static_cast<std::size_t>(k)] = drift_coeff(spec, t);
    diffusion[static_cast<std::size_t>(k)] = std::sqrt(diffusion_coeff_sq(spec, t));
  }
  const double mu0 = mu(spec, 0.0);
  const double sigma0 = sigma(spec, 0.0);

  Eigen::MatrixXd out(x0.rows(), x0.cols());
  std::vector<double> state(static_cast<std::size_t>(x0.cols()));
  for (Eigen::Index p = 0; p < x0.rows(); ++p) {
    Rng rng = Rng::stream(seed, static_cast<std::uint64_t>(p));
    for (Eigen::Index d = 0; d < x0.cols(); ++d)
      state[static_cast<std::size_t>(d)] = mu0 * x0(p, d) + sigma0 * rng.normal();
    for (int k = 0; k < n_steps; ++k) {
      const double f = drift[static_cast<std::size_t>(k)];
      const double g = diffusion[static_cast<std::size_t>(k)];
      for (auto& v : state) v += f * v * dt + g * sqrt_dt * rng.normal();
    }
    for (Eigen::Index d = 0; d < x0.cols(); ++d) out(p, d) = state[static_cast<std::size_t>(d)];
  }
  if (!out.allFinite()) throw DivergenceError("forward_simulate_sde: non-finite state");
  return out;
}

Eigen::MatrixXd pf_ode_rhs(const ScheduleSpec& spec, const ScoreFn& score, double t, const Eigen::MatrixXd& x) {
  const double f = drift_coeff(spec, t);
  const double s = sigma(spec, t);
  const double weight = sigma_sigma_dot(spec, t) - s * s * f;
  if (weight == 0.0) return f * x;
  return f * x - weight * score(x, t);
}

Eigen::MatrixXd pf_ode_rhs_expectation(const ScheduleSpec& spec, const PosteriorMeanFn& posterior_mean, double t,
                                       const Eigen::MatrixXd& x) {
  const double s = sigma(spec, t);
  if (s <= 0.0) throw SingularityError(fmt::format("pf_ode_rhs_expectation: sigma(t) = 0 at t = {}", t));
  const Eigen::MatrixXd e = posterior_mean(x, t);
  const double log_sigma_rate = sigma_sigma_dot(spec, t) / (s * s);  // sigma_dot / sigma
  return mu_dot(spec, t) * e + log_sigma_rate * (x - mu(spec, t) * e);
}

TrajectoryRecord integrate_ode(const RhsFn& rhs, const Eigen::MatrixXd& x_start, double t_start, double t_end,
                               int n_steps, Integrator method) {
  if (n_steps < 1) throw std::invalid_argument("integrate_ode: n_steps must be >= 1");
  TrajectoryRecord rec;
  rec.times.reserve(static_cast<std::size_t>(n_steps) + 1);
  rec.states.reserve(static_cast<std::size_t>(n_steps) + 1);
  for (int k = 0; k <= n_steps; ++k)
    rec.times.push_back(k == n_steps ? t_end : t_start + (t_end - t_start) * k / n_steps);

  Eigen::MatrixXd x = x_start;
  rec.states.push_back(x);
  for (int k = 0; k < n_steps; ++k) {
    const double t = rec.times[static_cast<std::size_t>(k)];
    const double h = rec.times[static_cast<std::size_t>(k) + 1] - t;
    const Eigen::MatrixXd k1 = rhs(t, x);
    if (k > 0) rec.derivative_estimates.push_back(k1);
    if (method == Integrator::Euler) {
      x += h * k1;
    } else {
      const double t_mid = t + 0.5 * h;
      const double t_next = rec.times[static_cast<std::size_t>(k) + 1];
      const Eigen::MatrixXd k2 = rhs(t_mid, x + 0.5 * h * k1);
      const Eigen::MatrixXd k3 = rhs(t_mid, x + 0.5 * h * k2);
      const Eigen::MatrixXd k4 = rhs(t_next, x + h * k3);
      x += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    if (!x.allFinite())
      throw DivergenceError(fmt::format("integrate_ode: non-finite state after step {} (t = {})", k + 1,
                                        rec.times[static_cast<std::size_t>(k) + 1]));
    rec.states.push_back(x);
  }
  return rec;
}

double CurvatureProfile::mean_over(double t_lo, double t_hi) const {
  double acc = 0.0;
  Eigen::Index count = 0;
  for (std::size_t i = 0; i < times.size(); ++i) {
    if (times[i] < t_lo || times[i] > t_hi) continue;
    acc += magnitude.row(static_cast<Eigen::Index>(i)).sum();
    count += magnitude.cols();
  }
  return count == 0 ? 0.0 : acc / static_cast<double>(count);
}

CurvatureProfile curvature_profile(const TrajectoryRecord& trajectory) {
  const std::size_t n = trajectory.times.size();
  if (n < 3) throw std::invalid_argument("curvature_profile: need at least three time points");
  const Eigen::Index rows = trajectory.states.front().rows();
  CurvatureProfile out;
  out.magnitude.resize(static_cast<Eigen::Index>(n - 2), rows);
  for (std::size_t i = 1; i + 1 < n; ++i) {
    const double h0 = trajectory.times[i] - trajectory.times[i - 1];
    const double h1 = trajectory.times[i + 1] - trajectory.times[i];
    const Eigen::MatrixXd d2 = 2.0 *
                               ((trajectory.states[i + 1] - trajectory.states[i]) / h1 -
                                (trajectory.states[i] - trajectory.states[i - 1]) / h0) /
                               (h0 + h1);
    out.times.push_back(trajectory.times[i]);
    out.magnitude.row(static_cast<Eigen::Index>(i - 1)) = d2.rowwise().norm().transpose();
  }
  return out;
}

std::vector<double> sampler_time_grid(int steps, double gamma) {
  if (steps < 1) throw std::invalid_argument("sampler_time_grid: steps must be >= 1");
  if (!(gamma >= 1.0)) throw std::invalid_argument("sampler_time_grid: gamma must be >= 1");
  std::vector<double> grid(static_cast<std::size_t>(steps) + 1);
  for (int i = 0; i <= steps; ++i) {
    const double u = static_cast<double>(i) / steps;
    grid[static_cast<std::size_t>(i)] = gamma == 1.0 ? u : 1.0 - std::pow(1.0 - u, gamma);
  }
  grid.front() = 0.0;
  grid.back() = 1.0;
  return grid;
}

Eigen::MatrixXd sldm_reverse_step(const Eigen::MatrixXd& x, double t, double dt, const Eigen::MatrixXd& score,
                                  double sigma) {
  if (!(t > 0.0 && t < 1.0))
    throw std::invalid_argument(fmt::format("sldm_reverse_step: t = {} must lie in (0, 1); t = 1 is skipped", t));
  if (!(dt > 0.0 && dt <= t)) throw std::invalid_argument("sldm_reverse_step: dt must lie in (0, t]");
  const double factor = (1.0 - t + dt) / (1.0 - t);
  return factor * (x + (sigma * sigma) * score);
}

double annealed_noise_scale(double t, double nu, double sigma) {
  if (nu < 0.0) throw std::invalid_argument("annealed_noise_scale: nu must be >= 0");
  return std::pow(t, nu) * std::numbers::sqrt2 * sigma;
}

ReverseStep generalized_reverse_step(const Eigen::MatrixXd& x, double t, double dt, const Eigen::MatrixXd& score,
                                     double sigma, double beta_t) {
  if (!(beta_t >= 0.0)) throw std::invalid_argument("generalized_reverse_step: beta must be non-negative");
  if (!(t > 0.0 && t < 1.0))
    throw std::invalid_argument(fmt::format("generalized_reverse_step: t = {} must lie in (0, 1)", t));
  if (!(dt > 0.0 && dt <= t)) throw std::invalid_argument("generalized_reverse_step: dt must lie in (0, t]");
  const double ratio = dt / (1.0 - t);
  ReverseStep step;
  step.mean = (1.0 + ratio) * x + ((1.0 + beta_t) * ratio * sigma * sigma) * score;
  step.noise_scale = std::sqrt(2.0 * beta_t * ratio) * sigma;
  return step;
}

void SamplerConfig::validate() const {
  if (steps < 2) throw std::invalid_argument("sampler: steps must be >= 2");
  if (!(sigma > 0.0)) throw std::invalid_argument("sampler: sigma must be positive");
  if (!(nu >= 0.0)) throw std::invalid_argument("sampler: nu must be >= 0");
  if (!(gamma >= 1.0)) throw std::invalid_argument("sampler: gamma must be >= 1");
  if (beta_mode == BetaMode::Scaled && !(beta_scale >= 0.0))
    throw std::invalid_argument("sampler: beta_scale must be >= 0");
  if (beta_mode == BetaMode::Table) {
    if (beta_table.size() != static_cast<std::size_t>(steps) + 1)
      throw std::invalid_argument("sampler: beta_table must have steps + 1 entries");
    for (double b : beta_table)
      if (!(b >= 0.0)) throw std::invalid_argument("sampler: beta_table entries must be >= 0");
  }
}

ChainResult sample_chain(const EpsModel& model, const SamplerConfig& config, Eigen::Index n_chains, int dims,
                         const ChainInit& init) {
  config.validate();
  const int T = config.steps;
  const double sig = config.sigma;
  const std::vector<double> grid = sampler_time_grid(T, config.gamma);

  std::vector<Rng> streams;
  streams.reserve(static_cast<std::size_t>(n_chains));
  for (Eigen::Index c = 0; c < n_chains; ++c) streams.push_back(Rng::stream(config.seed, static_cast<std::uint64_t>(c)));

  const double init_scale = config.init_scale < 0.0 ? sig : config.init_scale;
  Eigen::MatrixXd x(n_chains, dims);
  for (Eigen::Index c = 0; c < n_chains; ++c) {
    Rng& rng = streams[static_cast<std::size_t>(c)];
    if (init) {
      const Eigen::VectorXd row = init(rng);
      if (row.size() != dims) throw std::invalid_argument("sample_chain: initializer returned wrong dimension");
      x.row(c) = row.transpose();
    } else {
      for (int d = 0; d < dims; ++d) x(c, d) = init_scale * rng.normal();
    }
  }

  ChainResult result;
  for (int i = T - 1; i >= 1; --i) {
    const double t = grid[static_cast<std::size_t>(i)];
    const double dt = t - grid[static_cast<std::size_t>(i) - 1];
    const Eigen::MatrixXd eps = model(x, t);
    ++result.model_evaluations;
    if (eps.rows() != x.rows() || eps.cols() != x.cols())
      throw std::invalid_argument("sample_chain: model output shape mismatch");

    double noise = 0.0;
    if (config.beta_mode == BetaMode::MseOptimal) {
      x = ((1.0 - t + dt) / (1.0 - t)) * (x - sig * eps);
      noise = std::numbers::sqrt2 * sig;
    } else {
      double beta = 0.0;
      if (config.beta_mode == BetaMode::Scaled) beta = config.beta_scale * (1.0 - t) / dt;
      if (config.beta_mode == BetaMode::Table) beta = config.beta_table[static_cast<std::size_t>(i)];
      ReverseStep step = generalized_reverse_step(x, t, dt, -eps / sig, sig, beta);
      x = std::move(step.mean);
      noise = step.noise_scale;
    }
    if (i > 1) {
      const double scale = std::pow(t, config.nu) * noise;
      if (scale != 0.0)
        for (Eigen::Index c = 0; c < n_chains; ++c) {
          Rng& rng = streams[static_cast<std::size_t>(c)];
          for (int d = 0; d < dims; ++d) x(c, d) += scale * rng.normal();
        }
    }
    if (!x.allFinite()) throw DivergenceError(fmt::format("sample_chain: non-finite state at t = {}", t));
  }
  result.samples = std::move(x);
  return result;
}

EpsModel analytic_eps_model(const GaussianMixture& data, double sigma) {
  const ScheduleSpec spec = ScheduleSpec::sldm(sigma);
  return [data, spec, sigma](const Eigen::MatrixXd& x, double t) {
    return Eigen::MatrixXd(-sigma * marginal_at(data, spec, t).score_rows(x));
  };
}

Eigen::MatrixXd langevin_tempered(const std::function<Eigen::MatrixXd(const Eigen::MatrixXd&)>& score, double tau,
                                  double step_scale, int n_steps, const Eigen::MatrixXd& x_init,
                                  std::uint64_t seed) {
  if (!(tau > 0.0)) throw std::invalid_argument("langevin_tempered: tau must be positive");
  if (!(step_scale > 0.0)) throw std::invalid_argument("langevin_tempered: step scale must be positive");
  std::vector<Rng> streams;
  streams.reserve(static_cast<std::size_t>(x_init.rows()));
  for (Eigen::Index r = 0; r < x_init.rows(); ++r) streams.push_back(Rng::stream(seed, static_cast<std::uint64_t>(r)));

  const double half_h = 0.5 * step_scale * step_scale;
  const double noise = tau * step_scale;
  Eigen::MatrixXd x = x_init;
  for (int k = 0; k < n_steps; ++k) {
    x += half_h * score(x);
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      Rng& rng = streams[static_cast<std::size_t>(r)];
      for (Eigen::Index d = 0; d < x.cols(); ++d) x(r, d) += noise * rng.normal();
    }
    if ((k & 63) == 63 && !x.allFinite())
      throw DivergenceError(fmt::format("langevin_tempered: diverged after {} steps", k + 1));
  }
  if (!x.allFinite()) throw DivergenceError("langevin_tempered: diverged");
  return x;
}

double theorem1_bound(double sigma, double delta, double t) {
  const double one_minus_t = 1.0 - t;
  return (sigma * sigma) / (delta * delta * one_minus_t * one_minus_t);
}

std::vector<Theorem1Row> theorem1_check(const GaussianMixture& data, double sigma, const std::vector<double>& t_grid,
                                        double delta, Eigen::Index n_samples, std::uint64_t seed) {
  if (!(sigma > 0.0)) throw std::invalid_argument("theorem1_check: sigma must be positive");
  if (!(delta > 0.0)) throw std::invalid_argument("theorem1_check: delta must be positive");
  const ScheduleSpec spec = ScheduleSpec::sldm(sigma);
  const PosteriorMeanFn pm = mixture_posterior_mean(data, spec);

  std::vector<Theorem1Row> rows;
  for (std::size_t j = 0; j < t_grid.size(); ++j) {
    const double t = t_grid[j];
    if (!(t > 0.0 && t < 1.0)) throw std::invalid_argument("theorem1_check: grid times must lie in (0, 1)");
    Rng rng = Rng::stream(seed, j);
    const Eigen::MatrixXd x0 = data.sample(n_samples, rng);
    const Eigen::MatrixXd xt = (1.0 - t) * x0 + sigma * rng.normal_matrix(x0.rows(), x0.cols());
    const Eigen::MatrixXd residual = pf_ode_rhs_expectation(spec, pm, t, xt) + xt / (1.0 - t);

    Theorem1Row row;
    row.t = t;
    row.sigma = sigma;
    row.delta = delta;
    row.trials = residual.size();
    const Eigen::Index hits = (residual.array().abs() >= delta).count();
    row.violation_freq = static_cast<double>(hits) / static_cast<double>(row.trials);
    row.std_error = std::sqrt(row.violation_freq * (1.0 - row.violation_freq) / static_cast<double>(row.trials));
    row.bound = theorem1_bound(sigma, delta, t);
    rows.push_back(row);
  }
  return rows;
}

Eigen::MatrixXd marginal_quantile_points(const GaussianMixture& data, const ScheduleSpec& spec, double t, int n) {
  if (n < 1) throw std::invalid_argument("marginal_quantile_points: n must be >= 1");
  const GaussianMixture marginal = marginal_at(data, spec, t);
  Eigen::MatrixXd pts(n, 1);
  for (int k = 0; k < n; ++k) pts(k, 0) = quantile_1d(marginal, (k + 0.5) / n);
  return pts;
}

TrajectoryRecord pf_trajectory(const GaussianMixture& data, const ScheduleSpec& spec, double t_start, double t_end,
                               int n_steps, int n_starts, Integrator method) {
  const ScoreFn score = mixture_score(data, spec);
  const RhsFn rhs = [&](double t, const Eigen::MatrixXd& x) { return pf_ode_rhs(spec, score, t, x); };
  return integrate_ode(rhs, marginal_quantile_points(data, spec, t_start, n_starts), t_start, t_end, n_steps, method);
}

std::vector<TruncationRow> truncation_study(const GaussianMixture& data, const std::vector<ScheduleSpec>& specs,
                                            const std::vector<int>& steps, const std::vector<Integrator>& methods,
                                            const TruncationConfig& config) {
  std::vector<TruncationRow> rows;
  for (const ScheduleSpec& spec : specs) {
    const ScoreFn score = mixture_score(data, spec);
    const RhsFn rhs = [&](double t, const Eigen::MatrixXd& x) { return pf_ode_rhs(spec, score, t, x); };
    const Eigen::MatrixXd start = marginal_quantile_points(data, spec, config.t_start, config.n_starts);
    const Eigen::MatrixXd reference =
        integrate_ode(rhs, start, config.t_start, config.t_end, config.reference_steps, Integrator::Rk4).states.back();
    for (Integrator method : methods)
      for (int n : steps) {
        const Eigen::MatrixXd end = integrate_ode(rhs, start, config.t_start, config.t_end, n, method).states.back();
        rows.push_back({spec.kind, method, n, (end - reference).array().abs().mean()});
      }
  }
  return rows;
}

double observed_order(const std::vector<int>& steps, const std::vector<double>& errors) {
  if (steps.size() != errors.size() || steps.size() < 2)
    throw std::invalid_argument("observed_order: need at least two (steps, error) pairs");
  const auto n = static_cast<double>(steps.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < steps.size(); ++i) {
    if (!(errors[i] > 0.0)) throw std::invalid_argument("observed_order: errors must be positive");
    const double lx = std::log(static_cast<double>(steps[i]));
    const double ly = std::log(errors[i]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  return -(n * sxy - sx * sy) / (n * sxx - sx * sx);
}

}  // namespace sldm
