#pragma once

#include <vector>

#include <Eigen/Dense>

#include "sldm/rng.hpp"
#include "sldm/schedules.hpp"

namespace sldm {

struct MixtureComponent {
  double weight = 1.0;
  Eigen::VectorXd mean;
  Eigen::VectorXd variance;  // diagonal
};

/// Diagonal-covariance Gaussian mixture. Immutable after construction.
/// Batched queries take one point per row.
class GaussianMixture {
 public:
  /// Throws std::invalid_argument unless weights are positive and sum to 1
  /// (within 1e-12), all variances are positive and dimensions agree.
  explicit GaussianMixture(std::vector<MixtureComponent> components);

  /// 0.5 N(2, 1/4) + 0.5 N(-2, 1/4), the one-dimensional trajectory example.
  static GaussianMixture symmetric_bimodal();
  /// Single isotropic Gaussian.
  static GaussianMixture gaussian(const Eigen::VectorXd& mean, double variance);

  int dims() const { return dims_; }
  const std::vector<MixtureComponent>& components() const { return components_; }

  double log_density(const Eigen::VectorXd& x) const;
  Eigen::VectorXd score(const Eigen::VectorXd& x) const;
  /// Posterior component probabilities, computed in log space.
  Eigen::VectorXd responsibilities(const Eigen::VectorXd& x) const;

  Eigen::VectorXd log_density_rows(const Eigen::MatrixXd& x) const;
  Eigen::MatrixXd score_rows(const Eigen::MatrixXd& x) const;

  Eigen::VectorXd mean() const;
  /// Per-dimension variance of the whole mixture.
  Eigen::VectorXd variance() const;

  Eigen::MatrixXd sample(Eigen::Index n, Rng& rng) const;

 private:
  // Fills log(w_k N(x; m_k, v_k)) for one row.
  void component_log_terms(const double* x, Eigen::Index stride, double* out) const;

  int dims_ = 0;
  std::vector<MixtureComponent> components_;
  std::vector<double> log_norm_;           // log w_k - 0.5 sum log(2 pi v_k)
  std::vector<Eigen::VectorXd> inv_var_;
};

/// Inverse CDF of a one-dimensional mixture (bisection on the exact CDF).
double quantile_1d(const GaussianMixture& mixture, double p);

/// Point mass at `point`.
struct DeltaDistribution {
  Eigen::VectorXd point;
};

/// Exact law of x_t = mu(t) x_0 + sigma(t) eps for mixture data.
GaussianMixture marginal_at(const GaussianMixture& data, const ScheduleSpec& spec, double t);
/// N(mu(t) a, sigma(t)^2 I). Requires sigma(t) > 0.
GaussianMixture marginal_at(const DeltaDistribution& data, const ScheduleSpec& spec, double t);

/// E[x_0 | x_t] = (x_t + sigma(t)^2 score_t(x_t)) / mu(t). Throws
/// SingularityError when mu(t) = 0.
Eigen::VectorXd posterior_mean(const GaussianMixture& data, const ScheduleSpec& spec, double t,
                               const Eigen::VectorXd& x_t);
Eigen::MatrixXd posterior_mean_rows(const GaussianMixture& data, const ScheduleSpec& spec, double t,
                                    const Eigen::MatrixXd& x_t);
Eigen::VectorXd posterior_mean(const DeltaDistribution& data, const ScheduleSpec& spec, double t,
                               const Eigen::VectorXd& x_t);

/// -(x - mu(t) a) / sigma(t)^2.
Eigen::VectorXd delta_score(const DeltaDistribution& data, const ScheduleSpec& spec, double t,
                            const Eigen::VectorXd& x);

}  // namespace sldm
