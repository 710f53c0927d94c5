#include <doctest.h>

#include <cmath>
#include <numbers>

#include "sldm/mixture.hpp"

using namespace sldm;

namespace {

GaussianMixture two_d_mixture() {
  return GaussianMixture({{0.2, Eigen::Vector2d(1.0, -0.5), Eigen::Vector2d(0.3, 0.6)},
                          {0.5, Eigen::Vector2d(-1.5, 2.0), Eigen::Vector2d(0.05, 0.2)},
                          {0.3, Eigen::Vector2d(0.0, 0.0), Eigen::Vector2d(1.0, 1.0)}});
}

// Direct Bayesian posterior: each component is a Gaussian prior on x0 with a
// linear-Gaussian observation x_t = mu x0 + sigma eps.
Eigen::VectorXd direct_posterior_mean(const GaussianMixture& data, double m, double s, const Eigen::VectorXd& x) {
  const auto& comps = data.components();
  std::vector<double> logw(comps.size());
  double hi = -INFINITY;
  for (std::size_t k = 0; k < comps.size(); ++k) {
    double lw = std::log(comps[k].weight);
    for (Eigen::Index d = 0; d < x.size(); ++d) {
      const double var = m * m * comps[k].variance[d] + s * s;
      const double r = x[d] - m * comps[k].mean[d];
      lw += -0.5 * std::log(2 * std::numbers::pi * var) - 0.5 * r * r / var;
    }
    logw[k] = lw;
    hi = std::max(hi, lw);
  }
  double z = 0;
  for (double lw : logw) z += std::exp(lw - hi);
  Eigen::VectorXd out = Eigen::VectorXd::Zero(x.size());
  for (std::size_t k = 0; k < comps.size(); ++k) {
    const double w = std::exp(logw[k] - hi) / z;
    for (Eigen::Index d = 0; d < x.size(); ++d) {
      const double v = comps[k].variance[d];
      const double gain = m * v / (m * m * v + s * s);
      out[d] += w * (comps[k].mean[d] + gain * (x[d] - m * comps[k].mean[d]));
    }
  }
  return out;
}

}  // namespace

TEST_SUITE("mixture") {
  TEST_CASE("construction validation") {
    Eigen::VectorXd one = Eigen::VectorXd::Ones(1);
    CHECK_THROWS_AS(GaussianMixture({{0.4, one, one}, {0.5, -one, one}}), std::invalid_argument);
    CHECK_THROWS_AS(GaussianMixture({{1.0, one, Eigen::VectorXd::Zero(1)}}), std::invalid_argument);
    CHECK_THROWS_AS(GaussianMixture({{0.5, one, one}, {0.5, Eigen::VectorXd::Ones(2), Eigen::VectorXd::Ones(2)}}),
                    std::invalid_argument);
    CHECK_THROWS_AS(GaussianMixture({}), std::invalid_argument);
  }

  TEST_CASE("marginal of a delta") {
    const auto m = marginal_at(DeltaDistribution{Eigen::VectorXd::Constant(1, 2.0)}, ScheduleSpec::sldm(0.05), 0.5);
    REQUIRE(m.components().size() == 1);
    CHECK(m.components()[0].mean[0] == doctest::Approx(1.0));
    CHECK(m.components()[0].variance[0] == doctest::Approx(0.0025));
  }

  TEST_CASE("marginal of the bimodal mixture") {
    const auto data = GaussianMixture::symmetric_bimodal();
    const auto m0 = marginal_at(data, ScheduleSpec::sldm(0.05), 0.0);
    CHECK(m0.components()[0].mean[0] == 2.0);
    CHECK(m0.components()[0].variance[0] == doctest::Approx(0.25 + 0.0025));
    const auto m = marginal_at(data, ScheduleSpec::sldm(0.05), 0.75);
    CHECK(m.components()[0].weight == 0.5);
    CHECK(m.components()[0].mean[0] == doctest::Approx(0.5));
    CHECK(m.components()[1].mean[0] == doctest::Approx(-0.5));
    CHECK(m.components()[0].variance[0] == doctest::Approx(0.25 * 0.0625 + 0.0025));
  }

  TEST_CASE("marginal moments match Monte Carlo") {
    const auto data = GaussianMixture::symmetric_bimodal();
    const auto spec = ScheduleSpec::sldm(0.05);
    const double t = 0.75;
    Rng rng(7);
    const Eigen::Index n = 1'000'000;
    const Eigen::MatrixXd x0 = data.sample(n, rng);
    const Eigen::ArrayXd xt = (mu(spec, t) * x0.col(0)).array() + sigma(spec, t) * rng.normal_matrix(n, 1).array();
    const double mean = xt.mean();
    const double var = (xt - mean).square().mean();
    const double m4 = (xt - mean).pow(4).mean();
    const auto marg = marginal_at(data, spec, t);
    CHECK(std::abs(mean - marg.mean()[0]) < 3 * std::sqrt(var / n));
    CHECK(std::abs(var - marg.variance()[0]) < 3 * std::sqrt((m4 - var * var) / n));
  }

  TEST_CASE("score is the gradient of the log density") {
    for (const auto& data : {two_d_mixture(), GaussianMixture::symmetric_bimodal()}) {
      Rng rng(3);
      for (int i = 0; i < 100; ++i) {
        Eigen::VectorXd x = 2.0 * rng.normal_matrix(data.dims(), 1).col(0);
        const Eigen::VectorXd s = data.score(x);
        for (int d = 0; d < data.dims(); ++d) {
          const double h = 1e-5;
          Eigen::VectorXd xp = x, xm = x;
          xp[d] += h;
          xm[d] -= h;
          const double fd = (data.log_density(xp) - data.log_density(xm)) / (2 * h);
          CHECK(std::abs(fd - s[d]) <= 1e-5 * std::max(1.0, std::abs(s[d])));
        }
      }
    }
  }

  TEST_CASE("batched queries agree with single-point queries") {
    const auto data = two_d_mixture();
    Rng rng(11);
    const Eigen::MatrixXd x = rng.normal_matrix(17, 2);
    const Eigen::MatrixXd s = data.score_rows(x);
    const Eigen::VectorXd ld = data.log_density_rows(x);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      CHECK((s.row(i).transpose() - data.score(x.row(i).transpose())).norm() < 1e-13);
      CHECK(ld[i] == doctest::Approx(data.log_density(x.row(i).transpose())).epsilon(1e-14));
    }
  }

  TEST_CASE("score stays finite at small variance far from the modes") {
    const auto data = marginal_at(GaussianMixture::symmetric_bimodal(), ScheduleSpec::sldm(0.05), 1.0);
    const Eigen::VectorXd x = Eigen::VectorXd::Constant(1, 40.0);
    CHECK(std::isfinite(data.log_density(x)));
    CHECK(data.score(x).allFinite());
  }

  TEST_CASE("symmetric mixture has zero score and posterior mean at the origin") {
    const auto data = GaussianMixture::symmetric_bimodal();
    const Eigen::VectorXd zero = Eigen::VectorXd::Zero(1);
    CHECK(std::abs(data.score(zero)[0]) < 1e-15);
    CHECK(std::abs(posterior_mean(data, ScheduleSpec::sldm(), 0.4, zero)[0]) < 1e-15);
  }

  TEST_CASE("posterior mean agrees with the direct Bayesian posterior") {
    const auto data1 = GaussianMixture::symmetric_bimodal();
    const Eigen::VectorXd x = Eigen::VectorXd::Constant(1, 1.2);
    const auto spec = ScheduleSpec::sldm(0.05);
    CHECK(std::abs(posterior_mean(data1, spec, 0.5, x)[0] - direct_posterior_mean(data1, 0.5, 0.05, x)[0]) < 1e-9);

    const auto data2 = two_d_mixture();
    Rng rng(5);
    for (ScheduleKind k : kAllScheduleKinds) {
      const auto s = ScheduleSpec::of(k);
      for (int i = 0; i < 50; ++i) {
        const double t = rng.uniform(0.01, 0.95);
        const Eigen::VectorXd xt = 1.5 * rng.normal_matrix(2, 1).col(0);
        const Eigen::VectorXd a = posterior_mean(data2, s, t, xt);
        const Eigen::VectorXd b = direct_posterior_mean(data2, mu(s, t), sigma(s, t), xt);
        CHECK((a - b).lpNorm<Eigen::Infinity>() < 1e-9);
      }
    }
  }

  TEST_CASE("delta data") {
    const DeltaDistribution delta{Eigen::Vector2d(2.0, -1.0)};
    const auto spec = ScheduleSpec::sldm(0.05);
    const Eigen::VectorXd x = Eigen::Vector2d(0.3, 0.9);
    const Eigen::VectorXd s = delta_score(delta, spec, 0.6, x);
    CHECK((s - (-(x - 0.4 * delta.point) / 0.0025)).norm() < 1e-10);
    CHECK((posterior_mean(delta, spec, 0.6, x) - delta.point).norm() < 1e-12);
    CHECK_THROWS_AS(posterior_mean(delta, spec, 1.0, x), SingularityError);
    CHECK_THROWS_AS(delta_score(delta, ScheduleSpec::ddpm_edm(), 0.0, x), SingularityError);
  }

  TEST_CASE("quantiles invert the CDF") {
    const auto data = GaussianMixture::symmetric_bimodal();
    CHECK(std::abs(quantile_1d(data, 0.5)) < 1e-9);
    const double q = quantile_1d(data, 0.1);
    double cdf = 0;
    for (const auto& c : data.components())
      cdf += c.weight * 0.5 * std::erfc(-(q - c.mean[0]) / std::sqrt(2 * c.variance[0]));
    CHECK(cdf == doctest::Approx(0.1).epsilon(1e-10));
  }

  TEST_CASE("sampling reproduces weights") {
    const GaussianMixture data({{0.3, Eigen::VectorXd::Constant(1, -3.0), Eigen::VectorXd::Constant(1, 0.01)},
                                {0.7, Eigen::VectorXd::Constant(1, 3.0), Eigen::VectorXd::Constant(1, 0.01)}});
    Rng rng(1);
    const Eigen::MatrixXd x = data.sample(200000, rng);
    const double frac = (x.array() < 0).cast<double>().mean();
    CHECK(std::abs(frac - 0.3) < 4 * std::sqrt(0.21 / 200000));
  }
}
