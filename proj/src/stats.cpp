#include "sldm/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace sldm {

double normal_cdf(double x, double mean, double sd) {
  return 0.5 * std::erfc(-(x - mean) / (sd * std::numbers::sqrt2));
}

double ks_statistic(std::vector<double> samples, const std::function<double(double)>& cdf) {
  if (samples.empty()) throw std::invalid_argument("ks_statistic: no samples");
  std::sort(samples.begin(), samples.end());
  const auto n = static_cast<double>(samples.size());
  double d = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double f = cdf(samples[i]);
    d = std::max({d, (static_cast<double>(i) + 1.0) / n - f, f - static_cast<double>(i) / n});
  }
  return d;
}

double ks_critical_value(std::size_t n, double alpha) {
  if (n == 0 || !(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("ks_critical_value: bad arguments");
  return std::sqrt(-0.5 * std::log(alpha / 2.0)) / std::sqrt(static_cast<double>(n));
}

Moments sample_moments(const Eigen::Ref<const Eigen::VectorXd>& x) {
  if (x.size() < 2) throw std::invalid_argument("sample_moments: need at least two values");
  const auto n = static_cast<double>(x.size());
  Moments m;
  m.mean = x.mean();
  const Eigen::ArrayXd c = x.array() - m.mean;
  m.variance = c.square().mean();
  const double m4 = c.square().square().mean();
  m.mean_se = std::sqrt(m.variance / n);
  m.variance_se = std::sqrt(std::max(0.0, m4 - m.variance * m.variance) / n);
  return m;
}

}  // namespace sldm
