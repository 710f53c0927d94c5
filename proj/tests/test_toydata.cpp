#include <doctest.h>

#include <cmath>
#include <sstream>

#include "sldm/rng.hpp"
#include "sldm/toydata.hpp"

using namespace sldm;

namespace {

// O(n m) reference for the V-statistic energy distance.
double brute_energy(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  auto mean_dist = [](const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
    double s = 0;
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      for (Eigen::Index j = 0; j < y.rows(); ++j) s += (x.row(i) - y.row(j)).norm();
    return s / static_cast<double>(x.rows() * y.rows());
  };
  return 2 * mean_dist(a, b) - mean_dist(a, a) - mean_dist(b, b);
}

Eigen::MatrixXd gaussian(Eigen::Index n, int d, double shift, std::uint64_t seed) {
  Rng rng(seed);
  return rng.normal_matrix(n, d).array() + shift;
}

}  // namespace

TEST_SUITE("toydata") {
  TEST_CASE("chessboard occupies only the on cells") {
    const ToyParams p;
    const Eigen::MatrixXd raw = generate_raw(ToyName::Chessboard, 20000, p, 3);
    std::vector<long> count(16, 0);
    for (Eigen::Index r = 0; r < raw.rows(); ++r) {
      const int i = static_cast<int>(std::floor((raw(r, 0) + 2.0)));
      const int j = static_cast<int>(std::floor((raw(r, 1) + 2.0)));
      REQUIRE(i >= 0);
      REQUIRE(i < 4);
      REQUIRE(j >= 0);
      REQUIRE(j < 4);
      ++count[static_cast<std::size_t>(4 * i + j)];
    }
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) {
        if ((i + j) % 2 == 0) CHECK(count[static_cast<std::size_t>(4 * i + j)] > 2000);
        else CHECK(count[static_cast<std::size_t>(4 * i + j)] == 0);
      }
  }

  TEST_CASE("standardization") {
    for (ToyName name : {ToyName::Swissroll, ToyName::Moons, ToyName::Chessboard}) {
      const ToyDataset ds = generate(name, 100000, {}, 11);
      const Eigen::RowVector2d mean = ds.points.colwise().mean();
      const Eigen::RowVector2d var = (ds.points.rowwise() - mean).colwise().squaredNorm() / 100000.0;
      CHECK(std::abs(mean(0)) < 1e-3);
      CHECK(std::abs(mean(1)) < 1e-3);
      CHECK(var(0) == doctest::Approx(1.0).epsilon(1e-2));
      CHECK(var(1) == doctest::Approx(1.0).epsilon(1e-2));
      CHECK(ds.points.allFinite());
      const Eigen::MatrixXd back = ds.to_standardized(ds.to_raw(ds.points));
      CHECK((back - ds.points).cwiseAbs().maxCoeff() < 1e-12);
    }
  }

  TEST_CASE("same seed gives the same dataset") {
    const ToyDataset a = generate(ToyName::Moons, 5000, {}, 7);
    const ToyDataset b = generate(ToyName::Moons, 5000, {}, 7);
    const ToyDataset c = generate(ToyName::Moons, 5000, {}, 8);
    CHECK(a.points == b.points);
    CHECK(a.points != c.points);
  }

  TEST_CASE("swissroll radius follows the angle") {
    ToyParams p;
    p.noise = 0.0;
    const Eigen::MatrixXd raw = generate_raw(ToyName::Swissroll, 2000, p, 1);
    for (Eigen::Index r = 0; r < raw.rows(); ++r) {
      const double rad = raw.row(r).norm();
      CHECK(rad >= 1.5 * M_PI - 1e-9);
      CHECK(rad <= 4.5 * M_PI + 1e-9);
    }
  }

  TEST_CASE("names and errors") {
    for (ToyName name : {ToyName::Swissroll, ToyName::Moons, ToyName::Chessboard})
      CHECK(parse_toy_name(to_string(name)) == name);
    CHECK_THROWS_AS(parse_toy_name("spiral"), std::invalid_argument);
    CHECK_THROWS_AS(generate(ToyName::Moons, 0, {}, 1), std::invalid_argument);
    ToyParams bad;
    bad.cells = 1;
    CHECK_THROWS_AS(generate(ToyName::Chessboard, 10, bad, 1), std::invalid_argument);
  }

  TEST_CASE("energy distance matches the brute-force V-statistic") {
    const Eigen::MatrixXd a1 = gaussian(300, 1, 0.0, 1), b1 = gaussian(250, 1, 0.7, 2);
    CHECK(energy_distance(a1, b1) == doctest::Approx(brute_energy(a1, b1)).epsilon(1e-10));
    const Eigen::MatrixXd a2 = gaussian(300, 2, 0.0, 3), b2 = gaussian(250, 2, 0.7, 4);
    CHECK(energy_distance(a2, b2) == doctest::Approx(brute_energy(a2, b2)).epsilon(1e-10));
  }

  TEST_CASE("energy distance properties") {
    const Eigen::MatrixXd a = gaussian(2000, 2, 0.0, 5), b = gaussian(1500, 2, 0.3, 6);
    CHECK(energy_distance(a, a) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(energy_distance(a, b) == doctest::Approx(energy_distance(b, a)).epsilon(1e-12));
    CHECK(energy_distance(a, b) > 0.0);
    CHECK_THROWS_AS(energy_distance(a, gaussian(10, 1, 0.0, 1)), std::invalid_argument);
  }

  TEST_CASE("separated Gaussians exceed the same-distribution baseline") {
    const Eigen::MatrixXd x = gaussian(10000, 1, 0.0, 21);
    const Eigen::MatrixXd same = gaussian(10000, 1, 0.0, 22);
    const Eigen::MatrixXd far = gaussian(10000, 1, 5.0, 23);
    const double baseline = energy_distance(x, same);
    const double shifted = energy_distance(x, far);
    CHECK(shifted > 10.0 * baseline);
    // E|X - Y| for X - Y ~ N(5, 2) minus E|X - X'| for N(0, 2), times 2.
    const double s = std::sqrt(2.0), mu = 5.0;
    const double e_xy = s * std::sqrt(2.0 / M_PI) * std::exp(-mu * mu / (2 * s * s)) + mu * std::erf(mu / (s * std::sqrt(2.0)));
    const double e_xx = s * std::sqrt(2.0 / M_PI);
    CHECK(shifted == doctest::Approx(2 * e_xy - 2 * e_xx).epsilon(0.02));
  }

  TEST_CASE("subsampling is deterministic") {
    const Eigen::MatrixXd a = gaussian(6000, 2, 0.0, 1), b = gaussian(6000, 2, 0.1, 2);
    CHECK(energy_distance(a, b, 1000, 4) == energy_distance(a, b, 1000, 4));
  }

  TEST_CASE("mode coverage") {
    const ToyDataset ds = generate(ToyName::Chessboard, 20000, {}, 2);
    const auto regions = chessboard_regions(ds);
    REQUIRE(regions.size() == 8);
    CHECK(mode_coverage(ds.points, regions).fraction == 1.0);

    // Everything in one cell.
    const Eigen::MatrixXd one_cell = ds.to_standardized(Eigen::MatrixXd::Constant(50, 2, -1.5));
    const CoverageReport rep = mode_coverage(one_cell, regions);
    CHECK(rep.covered == 1);
    CHECK(rep.fraction == doctest::Approx(1.0 / 8.0));
    CHECK(mode_coverage(one_cell, regions, 51).covered == 0);

    for (ToyName name : {ToyName::Swissroll, ToyName::Moons}) {
      const ToyDataset m = generate(name, 20000, {}, 4);
      CHECK(mode_coverage(m.points, default_regions(m)).fraction == 1.0);
    }
  }

  TEST_CASE("region containment") {
    const Region box = BoxRegion{{0.0, 0.0}, {1.0, 2.0}};
    const Region disk = DiskRegion{{1.0, 1.0}, 0.5};
    CHECK(contains(box, 0.5, 1.5));
    CHECK_FALSE(contains(box, 1.5, 1.5));
    CHECK(contains(disk, 1.3, 1.3));
    CHECK_FALSE(contains(disk, 1.4, 1.4));
  }

  TEST_CASE("nearest distance matches brute force") {
    const Eigen::MatrixXd ref = gaussian(700, 2, 0.0, 8);
    Eigen::MatrixXd s = gaussian(300, 2, 0.0, 9) * 2.0;
    s(0, 0) = 40.0;  // far outside the reference bounding box
    double want = 0;
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
      double best = INFINITY;
      for (Eigen::Index j = 0; j < ref.rows(); ++j) best = std::min(best, (s.row(i) - ref.row(j)).norm());
      want += best;
    }
    want /= static_cast<double>(s.rows());
    CHECK(mean_nearest_distance(s, ref) == doctest::Approx(want).epsilon(1e-12));
    CHECK(mean_nearest_distance(ref, ref) == 0.0);
  }

  TEST_CASE("csv and metric records") {
    Eigen::MatrixXd p(2, 2);
    p << 0.5, -1.0, 2.0, 0.25;
    std::ostringstream out;
    write_points_csv(out, p);
    const std::string text = out.str();
    CHECK(text.rfind("x,y\n", 0) == 0);
    CHECK(std::count(text.begin(), text.end(), '\n') == 3);
    const auto j = to_json(MetricRecord{"energy_distance", 0.125, 10000, 3});
    CHECK(j["metric"] == "energy_distance");
    CHECK(j["value"] == 0.125);
    CHECK(j["n"] == 10000);
    CHECK(j["seed"] == 3);
  }
}
