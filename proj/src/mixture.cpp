#include "sldm/mixture.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

#include <fmt/format.h>

namespace sldm {
namespace {

void require_finite(const Eigen::VectorXd& x, const char* what) {
  if (!x.allFinite()) throw std::invalid_argument(fmt::format("{}: non-finite input", what));
}

double log_sum_exp(const double* v, std::size_t n) {
  double hi = v[0];
  for (std::size_t k = 1; k < n; ++k) hi = std::max(hi, v[k]);
  double acc = 0.0;
  for (std::size_t k = 0; k < n; ++k) acc += std::exp(v[k] - hi);
  return hi + std::log(acc);
}

}  // namespace

GaussianMixture::GaussianMixture(std::vector<MixtureComponent> components)
    : components_(std::move(components)) {
  if (components_.empty()) throw std::invalid_argument("GaussianMixture: no components");
  dims_ = static_cast<int>(components_.front().mean.size());
  if (dims_ < 1) throw std::invalid_argument("GaussianMixture: dims must be >= 1");
  double total = 0.0;
  for (const auto& c : components_) {
    if (c.mean.size() != dims_ || c.variance.size() != dims_)
      throw std::invalid_argument("GaussianMixture: component dimension mismatch");
    if (!(c.weight > 0.0)) throw std::invalid_argument("GaussianMixture: weights must be positive");
    if (!(c.variance.array() > 0.0).all() || !c.variance.allFinite())
      throw std::invalid_argument("GaussianMixture: variances must be positive and finite");
    if (!c.mean.allFinite()) throw std::invalid_argument("GaussianMixture: non-finite mean");
    total += c.weight;
  }
  if (std::abs(total - 1.0) > 1e-12)
    throw std::invalid_argument(fmt::format("GaussianMixture: weights sum to {}, expected 1", total));

  for (const auto& c : components_) {
    log_norm_.push_back(std::log(c.weight) -
                        0.5 * (c.variance.array() * 2.0 * std::numbers::pi).log().sum());
    inv_var_.push_back(c.variance.cwiseInverse());
  }
}

GaussianMixture GaussianMixture::symmetric_bimodal() {
  Eigen::VectorXd v(1);
  v << 0.25;
  return GaussianMixture({{0.5, Eigen::VectorXd::Constant(1, 2.0), v},
                          {0.5, Eigen::VectorXd::Constant(1, -2.0), v}});
}

GaussianMixture GaussianMixture::gaussian(const Eigen::VectorXd& mean, double variance) {
  return GaussianMixture({{1.0, mean, Eigen::VectorXd::Constant(mean.size(), variance)}});
}

void GaussianMixture::component_log_terms(const double* x, Eigen::Index stride, double* out) const {
  for (std::size_t k = 0; k < components_.size(); ++k) {
    const auto& m = components_[k].mean;
    const auto& iv = inv_var_[k];
    double q = 0.0;
    for (int d = 0; d < dims_; ++d) {
      const double diff = x[d * stride] - m[d];
      q += diff * diff * iv[d];
    }
    out[k] = log_norm_[k] - 0.5 * q;
  }
}

double GaussianMixture::log_density(const Eigen::VectorXd& x) const {
  require_finite(x, "log_density");
  if (x.size() != dims_) throw std::invalid_argument("log_density: dimension mismatch");
  std::vector<double> terms(components_.size());
  component_log_terms(x.data(), 1, terms.data());
  return log_sum_exp(terms.data(), terms.size());
}

Eigen::VectorXd GaussianMixture::responsibilities(const Eigen::VectorXd& x) const {
  require_finite(x, "responsibilities");
  if (x.size() != dims_) throw std::invalid_argument("responsibilities: dimension mismatch");
  std::vector<double> terms(components_.size());
  component_log_terms(x.data(), 1, terms.data());
  const double lse = log_sum_exp(terms.data(), terms.size());
  Eigen::VectorXd r(static_cast<Eigen::Index>(terms.size()));
  for (std::size_t k = 0; k < terms.size(); ++k) r[static_cast<Eigen::Index>(k)] = std::exp(terms[k] - lse);
  return r;
}

Eigen::VectorXd GaussianMixture::score(const Eigen::VectorXd& x) const {
  const Eigen::VectorXd r = responsibilities(x);
  Eigen::VectorXd s = Eigen::VectorXd::Zero(dims_);
  for (std::size_t k = 0; k < components_.size(); ++k)
    s -= r[static_cast<Eigen::Index>(k)] * (x - components_[k].mean).cwiseProduct(inv_var_[k]);
  return s;
}

Eigen::VectorXd GaussianMixture::log_density_rows(const Eigen::MatrixXd& x) const {
  if (x.cols() != dims_) throw std::invalid_argument("log_density_rows: dimension mismatch");
  if (!x.allFinite()) throw std::invalid_argument("log_density_rows: non-finite input");
  Eigen::VectorXd out(x.rows());
  std::vector<double> terms(components_.size());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    component_log_terms(x.data() + i, x.rows(), terms.data());
    out[i] = log_sum_exp(terms.data(), terms.size());
  }
  return out;
}

Eigen::MatrixXd GaussianMixture::score_rows(const Eigen::MatrixXd& x) const {
  if (x.cols() != dims_) throw std::invalid_argument("score_rows: dimension mismatch");
  if (!x.allFinite()) throw std::invalid_argument("score_rows: non-finite input");
  const std::size_t nk = components_.size();
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(x.rows(), dims_);
  std::vector<double> terms(nk);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    component_log_terms(x.data() + i, x.rows(), terms.data());
    const double lse = log_sum_exp(terms.data(), nk);
    for (std::size_t k = 0; k < nk; ++k) {
      const double r = std::exp(terms[k] - lse);
      const auto& m = components_[k].mean;
      const auto& iv = inv_var_[k];
      for (int d = 0; d < dims_; ++d) out(i, d) -= r * (x(i, d) - m[d]) * iv[d];
    }
  }
  return out;
}

Eigen::VectorXd GaussianMixture::mean() const {
  Eigen::VectorXd m = Eigen::VectorXd::Zero(dims_);
  for (const auto& c : components_) m += c.weight * c.mean;
  return m;
}

Eigen::VectorXd GaussianMixture::variance() const {
  const Eigen::VectorXd m = mean();
  Eigen::VectorXd v = Eigen::VectorXd::Zero(dims_);
  for (const auto& c : components_)
    v += c.weight * (c.variance + (c.mean - m).cwiseAbs2());
  return v;
}

Eigen::MatrixXd GaussianMixture::sample(Eigen::Index n, Rng& rng) const {
  Eigen::MatrixXd out(n, dims_);
  for (Eigen::Index i = 0; i < n; ++i) {
    double u = rng.uniform();
    std::size_t k = 0;
    while (k + 1 < components_.size() && u >= components_[k].weight) {
      u -= components_[k].weight;
      ++k;
    }
    const auto& c = components_[k];
    for (int d = 0; d < dims_; ++d) out(i, d) = c.mean[d] + std::sqrt(c.variance[d]) * rng.normal();
  }
  return out;
}

double quantile_1d(const GaussianMixture& mixture, double p) {
  if (mixture.dims() != 1) throw std::invalid_argument("quantile_1d: mixture must be one-dimensional");
  if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument("quantile_1d: p must lie in (0, 1)");
  auto cdf = [&](double x) {
    double acc = 0.0;
    for (const auto& c : mixture.components())
      acc += c.weight * 0.5 * std::erfc(-(x - c.mean[0]) / std::sqrt(2.0 * c.variance[0]));
    return acc;
  };
  double lo = 0.0, hi = 0.0;
  for (const auto& c : mixture.components()) {
    const double spread = 40.0 * std::sqrt(c.variance[0]);
    lo = std::min(lo, c.mean[0] - spread);
    hi = std::max(hi, c.mean[0] + spread);
  }
  for (int it = 0; it < 200 && hi - lo > 1e-15 * std::max(1.0, std::abs(lo) + std::abs(hi)); ++it) {
    const double mid = 0.5 * (lo + hi);
    (cdf(mid) < p ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

GaussianMixture marginal_at(const GaussianMixture& data, const ScheduleSpec& spec, double t) {
  const double m = mu(spec, t);
  const double s = sigma(spec, t);
  std::vector<MixtureComponent> comps;
  comps.reserve(data.components().size());
  for (const auto& c : data.components())
    comps.push_back({c.weight, m * c.mean, (m * m) * c.variance.array() + s * s});
  return GaussianMixture(std::move(comps));
}

GaussianMixture marginal_at(const DeltaDistribution& data, const ScheduleSpec& spec, double t) {
  const double s = sigma(spec, t);
  if (s <= 0.0)
    throw SingularityError(fmt::format("marginal_at: delta data has a degenerate marginal at t = {}", t));
  return GaussianMixture::gaussian(mu(spec, t) * data.point, s * s);
}

Eigen::VectorXd posterior_mean(const GaussianMixture& data, const ScheduleSpec& spec, double t,
                               const Eigen::VectorXd& x_t) {
  const double m = mu(spec, t);
  if (m <= 0.0) throw SingularityError(fmt::format("posterior_mean: mu(t) = 0 at t = {}", t));
  const double s = sigma(spec, t);
  const GaussianMixture marginal = marginal_at(data, spec, t);
  return (x_t + (s * s) * marginal.score(x_t)) / m;
}

Eigen::MatrixXd posterior_mean_rows(const GaussianMixture& data, const ScheduleSpec& spec, double t,
                                    const Eigen::MatrixXd& x_t) {
  const double m = mu(spec, t);
  if (m <= 0.0) throw SingularityError(fmt::format("posterior_mean: mu(t) = 0 at t = {}", t));
  const double s = sigma(spec, t);
  const GaussianMixture marginal = marginal_at(data, spec, t);
  return (x_t + (s * s) * marginal.score_rows(x_t)) / m;
}

Eigen::VectorXd delta_score(const DeltaDistribution& data, const ScheduleSpec& spec, double t,
                            const Eigen::VectorXd& x) {
  require_finite(x, "delta_score");
  const double s = sigma(spec, t);
  if (s <= 0.0) throw SingularityError(fmt::format("delta_score: sigma(t) = 0 at t = {}", t));
  return -(x - mu(spec, t) * data.point) / (s * s);
}

Eigen::VectorXd posterior_mean(const DeltaDistribution& data, const ScheduleSpec& spec, double t,
                               const Eigen::VectorXd& x_t) {
  const double m = mu(spec, t);
  if (m <= 0.0) throw SingularityError(fmt::format("posterior_mean: mu(t) = 0 at t = {}", t));
  const double s = sigma(spec, t);
  return (x_t + (s * s) * delta_score(data, spec, t, x_t)) / m;
}

}  // namespace sldm
