#pragma once

#include <functional>
#include <vector>

#include <Eigen/Dense>

namespace sldm {

double normal_cdf(double x, double mean = 0.0, double sd = 1.0);

/// sup |F_n - F| for the empirical CDF of `samples`.
double ks_statistic(std::vector<double> samples, const std::function<double(double)>& cdf);
/// Asymptotic one-sample Kolmogorov-Smirnov critical value at level alpha.
double ks_critical_value(std::size_t n, double alpha);

struct Moments {
  double mean = 0.0;
  double variance = 0.0;  // population (divide by n)
  double mean_se = 0.0;   // sqrt(variance / n)
  double variance_se = 0.0;  // sqrt((m4 - variance^2) / n)
};
Moments sample_moments(const Eigen::Ref<const Eigen::VectorXd>& x);

}  // namespace sldm
