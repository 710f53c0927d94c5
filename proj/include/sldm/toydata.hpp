#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

namespace sldm {

enum class ToyName { Swissroll, Moons, Chessboard };
std::string_view to_string(ToyName name);
ToyName parse_toy_name(std::string_view name);

struct ToyParams {
  /// Gaussian jitter before standardization; negative selects the per-dataset
  /// default (swissroll 0.4, moons 0.05, chessboard 0).
  double noise = -1.0;
  int cells = 4;            // chessboard cells per side
  double half_width = 2.0;  // chessboard spans [-half_width, half_width]^2
};

/// Standardized 2-D point set: points = (raw - shift) / scale per axis.
struct ToyDataset {
  ToyName name = ToyName::Swissroll;
  ToyParams params;
  std::uint64_t seed = 0;
  Eigen::MatrixXd points;  // n x 2
  Eigen::Vector2d shift = Eigen::Vector2d::Zero();
  Eigen::Vector2d scale = Eigen::Vector2d::Ones();

  Eigen::MatrixXd to_raw(const Eigen::MatrixXd& standardized) const;
  Eigen::MatrixXd to_standardized(const Eigen::MatrixXd& raw) const;
};

double default_noise(ToyName name);

/// Raw (unstandardized) samples.
Eigen::MatrixXd generate_raw(ToyName name, Eigen::Index n, const ToyParams& params, std::uint64_t seed);
/// Generates and standardizes to zero mean, unit per-axis variance.
ToyDataset generate(ToyName name, Eigen::Index n, const ToyParams& params, std::uint64_t seed);

/// Energy distance between the empirical measures of `a` and `b`:
/// 2 E|A - B| - E|A - A'| - E|B - B'|, diagonal pairs included, so the value is
/// non-negative and exactly 0 for identical sets. One-dimensional inputs are
/// handled exactly in O(n log n); otherwise each set is reduced to at most
/// `max_points` rows chosen deterministically from `seed`.
double energy_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, Eigen::Index max_points = 4000,
                       std::uint64_t seed = 0);

struct BoxRegion {
  Eigen::Vector2d lo, hi;
};
struct DiskRegion {
  Eigen::Vector2d center;
  double radius = 0.0;
};
using Region = std::variant<BoxRegion, DiskRegion>;
bool contains(const Region& region, double x, double y);

struct CoverageReport {
  std::vector<Eigen::Index> counts;  // per region
  int covered = 0;
  double fraction = 0.0;
};
/// A region counts as covered when it holds at least `k` samples.
CoverageReport mode_coverage(const Eigen::MatrixXd& samples, const std::vector<Region>& regions, Eigen::Index k = 10);

/// "On" cells of the chessboard, (i + j) even, in standardized coordinates.
std::vector<Region> chessboard_regions(const ToyDataset& ds);
/// Disks along the data manifold in standardized coordinates: `count` angles
/// evenly spaced along the spiral or the two moons, radius relative to the
/// standardized scale.
std::vector<Region> manifold_regions(const ToyDataset& ds, int count = 12, double radius = 0.25);
/// Chessboard cells or manifold disks, whichever fits the dataset.
std::vector<Region> default_regions(const ToyDataset& ds);

/// Mean Euclidean distance from each sample to its nearest reference point
/// (exact, grid-bucketed).
double mean_nearest_distance(const Eigen::MatrixXd& samples, const Eigen::MatrixXd& reference);

void write_points_csv(std::ostream& out, const Eigen::MatrixXd& points);

struct MetricRecord {
  std::string metric;
  double value = 0.0;
  Eigen::Index n = 0;
  std::uint64_t seed = 0;
};
nlohmann::json to_json(const MetricRecord& record);

}  // namespace sldm
