#pragma once

#include <cstdint>
#include <functional>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "sldm/mixture.hpp"
#include "sldm/rng.hpp"
#include "sldm/schedules.hpp"

namespace sldm {

// All batched quantities hold one sample per row.

/// Score of the time-t marginal, evaluated row-wise.
using ScoreFn = std::function<Eigen::MatrixXd(const Eigen::MatrixXd& x, double t)>;
/// E[x_0 | x_t], evaluated row-wise.
using PosteriorMeanFn = std::function<Eigen::MatrixXd(const Eigen::MatrixXd& x, double t)>;
/// Noise prediction eps_hat = phi(x_t, t).
using EpsModel = std::function<Eigen::MatrixXd(const Eigen::MatrixXd& x, double t)>;
/// Right-hand side dx/dt = rhs(t, x).
using RhsFn = std::function<Eigen::MatrixXd(double t, const Eigen::MatrixXd& x)>;

/// Thrown when a state leaves the finite range.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrajectoryRecord {
  std::vector<double> times;              // strictly monotone
  std::vector<Eigen::MatrixXd> states;    // one per time
  std::vector<Eigen::MatrixXd> derivative_estimates;  // one per interior time, optional
};

enum class Integrator { Euler, Rk4 };
std::string_view to_string(Integrator method);

ScoreFn mixture_score(const GaussianMixture& data, const ScheduleSpec& spec);
PosteriorMeanFn mixture_posterior_mean(const GaussianMixture& data, const ScheduleSpec& spec);
ScoreFn delta_score_fn(const DeltaDistribution& data, const ScheduleSpec& spec);

/// Euler-Maruyama paths of dx = f x dt + g dW from t = 0 to t_end. Each row of
/// `x0` is one path; it starts from mu(0) x0 + sigma(0) eps so that every
/// schedule (including SLDM with sigma(0) > 0) begins on its t = 0 marginal.
/// Path i draws from Rng::stream(seed, i).
Eigen::MatrixXd forward_simulate_sde(const ScheduleSpec& spec, const Eigen::MatrixXd& x0, double t_end,
                                     int n_steps, std::uint64_t seed);

/// dx/dt = f x - (sigma sigma_dot - sigma^2 f) score.
Eigen::MatrixXd pf_ode_rhs(const ScheduleSpec& spec, const ScoreFn& score, double t, const Eigen::MatrixXd& x);
/// dx/dt = mu_dot E[x0|x] + (sigma_dot / sigma)(x - mu E[x0|x]).
Eigen::MatrixXd pf_ode_rhs_expectation(const ScheduleSpec& spec, const PosteriorMeanFn& posterior_mean, double t,
                                       const Eigen::MatrixXd& x);

/// Fixed-step integration on a uniform grid from t_start to t_end (either
/// direction). Throws DivergenceError on a non-finite state.
TrajectoryRecord integrate_ode(const RhsFn& rhs, const Eigen::MatrixXd& x_start, double t_start, double t_end,
                               int n_steps, Integrator method);

/// |d^2x/dt^2| from central second differences (non-uniform grids allowed).
/// Endpoints are omitted.
struct CurvatureProfile {
  std::vector<double> times;
  Eigen::MatrixXd magnitude;  // (interior times) x (rows of the state)

  /// Mean over all rows and the interior times inside [t_lo, t_hi].
  double mean_over(double t_lo, double t_hi) const;
};
CurvatureProfile curvature_profile(const TrajectoryRecord& trajectory);

/// Sampler time grid t_i = 1 - (1 - i/T)^gamma, i = 0..T. gamma = 1 is
/// uniform; gamma > 1 concentrates steps near t = 1.
std::vector<double> sampler_time_grid(int steps, double gamma);

/// Deterministic part of the SLDM reverse step,
/// ((1 - t + dt) / (1 - t)) (x + sigma^2 score). Noise is added by the caller.
Eigen::MatrixXd sldm_reverse_step(const Eigen::MatrixXd& x, double t, double dt, const Eigen::MatrixXd& score,
                                  double sigma);

/// t^nu sqrt(2) sigma.
double annealed_noise_scale(double t, double nu, double sigma);

struct ReverseStep {
  Eigen::MatrixXd mean;
  double noise_scale = 0.0;  // multiplies a standard normal draw
};
/// Reverse update with Langevin weight beta_t:
/// mean = ((1-t+dt)/(1-t)) x + (1 + beta) (dt/(1-t)) sigma^2 score,
/// noise = sqrt(2 beta dt / (1-t)) sigma.
ReverseStep generalized_reverse_step(const Eigen::MatrixXd& x, double t, double dt, const Eigen::MatrixXd& score,
                                     double sigma, double beta_t);

enum class BetaMode {
  MseOptimal,  // beta = (1 - t) / dt
  Zero,        // probability-flow Euler step
  Scaled,      // beta = beta_scale * (1 - t) / dt
  Table,       // beta = beta_table[i] at step i (indexed 0..T)
};
std::string_view to_string(BetaMode mode);
BetaMode parse_beta_mode(std::string_view name);

struct SamplerConfig {
  int steps = 100;          // T
  double sigma = 0.05;
  double nu = 0.0;          // temperature annealing rate
  double gamma = 1.0;       // time-grid exponent
  BetaMode beta_mode = BetaMode::MseOptimal;
  double beta_scale = 1.0;
  std::vector<double> beta_table;
  /// Standard deviation of the initial draw; negative means use `sigma`.
  double init_scale = -1.0;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Optional per-chain initial state. Receives the chain's own stream.
using ChainInit = std::function<Eigen::VectorXd(Rng& chain_rng)>;

struct ChainResult {
  Eigen::MatrixXd samples;
  int model_evaluations = 0;  // batched calls, equals T - 1
};

/// SLDM ancestral sampler: start at t_{T-1}, skip t = 1, one model call per
/// step, annealed noise on every step but the last. Chain c uses
/// Rng::stream(seed, c), so output is independent of batching.
ChainResult sample_chain(const EpsModel& model, const SamplerConfig& config, Eigen::Index n_chains, int dims,
                         const ChainInit& init = {});

/// eps_hat = -sigma * score of the SLDM marginal of `data`.
EpsModel analytic_eps_model(const GaussianMixture& data, double sigma);

/// Unadjusted Langevin dynamics x <- x + 0.5 g^2 score(x) + tau g xi whose
/// stationary law approximates p^(1/tau^2). Row i draws from stream (seed, i).
Eigen::MatrixXd langevin_tempered(const std::function<Eigen::MatrixXd(const Eigen::MatrixXd&)>& score, double tau,
                                  double step_scale, int n_steps, const Eigen::MatrixXd& x_init,
                                  std::uint64_t seed);

struct Theorem1Row {
  double t = 0.0;
  double sigma = 0.0;
  double delta = 0.0;
  double violation_freq = 0.0;
  double bound = 0.0;      // sigma^2 / (delta^2 (1 - t)^2), unclipped
  double std_error = 0.0;  // binomial, from the empirical frequency
  Eigen::Index trials = 0;
  bool within_bound() const { return violation_freq <= bound + 3.0 * std_error; }
};

/// Empirical P(|dx/dt + x/(1-t)| >= delta) under the SLDM probability-flow
/// ODE, with x_t drawn from the exact marginal, per dimension.
std::vector<Theorem1Row> theorem1_check(const GaussianMixture& data, double sigma, const std::vector<double>& t_grid,
                                        double delta, Eigen::Index n_samples, std::uint64_t seed);
double theorem1_bound(double sigma, double delta, double t);

// Truncation-error study on one-dimensional mixture data.

struct TruncationRow {
  ScheduleKind kind = ScheduleKind::Sldm;
  Integrator method = Integrator::Euler;
  int steps = 0;
  double error = 0.0;  // mean |x(t_end) - reference| over starting points
};

struct TruncationConfig {
  double t_start = 0.9;
  double t_end = 0.0;
  int n_starts = 20;
  int reference_steps = 4096;
};

/// Starting points: n quantiles (k + 0.5)/n of the time-t marginal.
Eigen::MatrixXd marginal_quantile_points(const GaussianMixture& data, const ScheduleSpec& spec, double t, int n);

std::vector<TruncationRow> truncation_study(const GaussianMixture& data, const std::vector<ScheduleSpec>& specs,
                                            const std::vector<int>& steps, const std::vector<Integrator>& methods,
                                            const TruncationConfig& config);

/// Least-squares slope of -log(error) against log(steps).
double observed_order(const std::vector<int>& steps, const std::vector<double>& errors);

/// Probability-flow trajectories from marginal quantiles at t_start down to t_end.
TrajectoryRecord pf_trajectory(const GaussianMixture& data, const ScheduleSpec& spec, double t_start, double t_end,
                               int n_steps, int n_starts, Integrator method);

}  // namespace sldm
