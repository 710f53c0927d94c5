#include "sldm/toydata.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include <fmt/format.h>

#include "sldm/rng.hpp"

namespace sldm {

std::string_view to_string(ToyName name) {
  switch (name) {
    case ToyName::Swissroll: return "swissroll";
    case ToyName::Moons: return "moons";
    case ToyName::Chessboard: return "chessboard";
  }
  return "unknown";
}

ToyName parse_toy_name(std::string_view name) {
  for (ToyName n : {ToyName::Swissroll, ToyName::Moons, ToyName::Chessboard})
    if (to_string(n) == name) return n;
  throw std::invalid_argument(fmt::format("unknown dataset '{}' (expected swissroll, moons or chessboard)", name));
}

double default_noise(ToyName name) {
  switch (name) {
    case ToyName::Swissroll: return 0.4;
    case ToyName::Moons: return 0.05;
    case ToyName::Chessboard: return 0.0;
  }
  return 0.0;
}

Eigen::MatrixXd ToyDataset::to_raw(const Eigen::MatrixXd& standardized) const {
  Eigen::MatrixXd out = standardized.array().rowwise() * scale.transpose().array();
  out.rowwise() += shift.transpose();
  return out;
}

Eigen::MatrixXd ToyDataset::to_standardized(const Eigen::MatrixXd& raw) const {
  Eigen::MatrixXd out = raw.rowwise() - shift.transpose();
  return out.array().rowwise() / scale.transpose().array();
}

namespace {

constexpr double kPi = std::numbers::pi;

Eigen::Vector2d swissroll_point(double theta) { return {theta * std::cos(theta), theta * std::sin(theta)}; }

// Outer arc for u in [0, 1), inner arc for u in [1, 2).
Eigen::Vector2d moons_point(double u) {
  if (u < 1.0) {
    const double a = kPi * u;
    return {std::cos(a), std::sin(a)};
  }
  const double a = kPi * (u - 1.0);
  return {1.0 - std::cos(a), 0.5 - std::sin(a)};
}

}  // namespace

Eigen::MatrixXd generate_raw(ToyName name, Eigen::Index n, const ToyParams& params, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("generate: n must be >= 1");
  const double noise = params.noise < 0.0 ? default_noise(name) : params.noise;
  Eigen::MatrixXd pts(n, 2);
  Rng rng(seed);
  switch (name) {
    case ToyName::Swissroll:
      for (Eigen::Index i = 0; i < n; ++i) {
        const Eigen::Vector2d p = swissroll_point(1.5 * kPi * (1.0 + 2.0 * rng.uniform()));
        pts(i, 0) = p.x() + noise * rng.normal();
        pts(i, 1) = p.y() + noise * rng.normal();
      }
      break;
    case ToyName::Moons:
      for (Eigen::Index i = 0; i < n; ++i) {
        const Eigen::Vector2d p = moons_point(rng.uniform() < 0.5 ? rng.uniform() : 1.0 + rng.uniform());
        pts(i, 0) = p.x() + noise * rng.normal();
        pts(i, 1) = p.y() + noise * rng.normal();
      }
      break;
    case ToyName::Chessboard: {
      if (params.cells < 2) throw std::invalid_argument("chessboard: cells must be >= 2");
      if (!(params.half_width > 0.0)) throw std::invalid_argument("chessboard: half_width must be positive");
      std::vector<std::pair<int, int>> on;
      for (int i = 0; i < params.cells; ++i)
        for (int j = 0; j < params.cells; ++j)
          if ((i + j) % 2 == 0) on.emplace_back(i, j);
      const double w = 2.0 * params.half_width / params.cells;
      for (Eigen::Index r = 0; r < n; ++r) {
        const auto [i, j] = on[rng.below(on.size())];
        pts(r, 0) = -params.half_width + w * (i + rng.uniform()) + noise * rng.normal();
        pts(r, 1) = -params.half_width + w * (j + rng.uniform()) + noise * rng.normal();
      }
      break;
    }
  }
  return pts;
}

ToyDataset generate(ToyName name, Eigen::Index n, const ToyParams& params, std::uint64_t seed) {
  if (n < 2) throw std::invalid_argument("generate: need at least two points to standardize");
  ToyDataset ds;
  ds.name = name;
  ds.params = params;
  ds.seed = seed;
  const Eigen::MatrixXd raw = generate_raw(name, n, params, seed);
  ds.shift = raw.colwise().mean().transpose();
  const Eigen::MatrixXd centered = raw.rowwise() - ds.shift.transpose();
  ds.scale = (centered.colwise().squaredNorm() / static_cast<double>(n)).cwiseSqrt().transpose();
  ds.points = ds.to_standardized(raw);
  return ds;
}

namespace {

// Sum over unordered pairs of |x_i - x_j| for a sorted vector.
double sorted_pair_sum(const std::vector<double>& v) {
  double acc = 0.0;
  const auto n = static_cast<double>(v.size());
  for (std::size_t k = 0; k < v.size(); ++k) acc += v[k] * (2.0 * static_cast<double>(k) - n + 1.0);
  return acc;
}

double energy_distance_1d(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  std::vector<double> va(a.data(), a.data() + a.rows()), vb(b.data(), b.data() + b.rows());
  std::sort(va.begin(), va.end());
  std::sort(vb.begin(), vb.end());
  std::vector<double> all(va.size() + vb.size());
  std::merge(va.begin(), va.end(), vb.begin(), vb.end(), all.begin());
  const double sa = sorted_pair_sum(va), sb = sorted_pair_sum(vb), sall = sorted_pair_sum(all);
  const auto n = static_cast<double>(va.size()), m = static_cast<double>(vb.size());
  const double cross = (sall - sa - sb) / (n * m);
  const double within_a = 2.0 * sa / (n * n);
  const double within_b = 2.0 * sb / (m * m);
  return std::max(0.0, 2.0 * cross - (within_a + within_b));
}

Eigen::MatrixXd subsample(const Eigen::MatrixXd& x, Eigen::Index max_points, std::uint64_t seed) {
  if (x.rows() <= max_points) return x;
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(x.rows()));
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  Rng rng(seed);
  for (Eigen::Index i = 0; i < max_points; ++i) {
    const auto j = i + static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(x.rows() - i)));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  Eigen::MatrixXd out(max_points, x.cols());
  for (Eigen::Index i = 0; i < max_points; ++i) out.row(i) = x.row(idx[static_cast<std::size_t>(i)]);
  return out;
}

double mean_pairwise_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  constexpr Eigen::Index kBlock = 512;
  const Eigen::VectorXd na = a.rowwise().squaredNorm(), nb = b.rowwise().squaredNorm();
  double acc = 0.0;
  for (Eigen::Index i0 = 0; i0 < a.rows(); i0 += kBlock) {
    const Eigen::Index bi = std::min(kBlock, a.rows() - i0);
    const Eigen::MatrixXd g = a.middleRows(i0, bi) * b.transpose();
    for (Eigen::Index j = 0; j < b.rows(); ++j)
      for (Eigen::Index i = 0; i < bi; ++i) acc += std::sqrt(std::max(0.0, na[i0 + i] + nb[j] - 2.0 * g(i, j)));
  }
  return acc / (static_cast<double>(a.rows()) * static_cast<double>(b.rows()));
}

}  // namespace

double energy_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, Eigen::Index max_points,
                       std::uint64_t seed) {
  if (a.rows() < 1 || b.rows() < 1) throw std::invalid_argument("energy_distance: empty sample set");
  if (a.cols() != b.cols()) throw std::invalid_argument("energy_distance: dimension mismatch");
  if (!a.allFinite() || !b.allFinite()) throw std::invalid_argument("energy_distance: non-finite samples");
  if (a.cols() == 1) return energy_distance_1d(a, b);
  if (max_points < 2) throw std::invalid_argument("energy_distance: max_points must be >= 2");
  // Both sets use the same selection stream so that identical inputs stay identical.
  const Eigen::MatrixXd sa = subsample(a, max_points, seed);
  const Eigen::MatrixXd sb = subsample(b, max_points, seed);
  const double cross = mean_pairwise_distance(sa, sb);
  const double within_a = mean_pairwise_distance(sa, sa);
  const double within_b = mean_pairwise_distance(sb, sb);
  return std::max(0.0, 2.0 * cross - (within_a + within_b));
}

bool contains(const Region& region, double x, double y) {
  if (const auto* box = std::get_if<BoxRegion>(&region))
    return x >= box->lo.x() && x < box->hi.x() && y >= box->lo.y() && y < box->hi.y();
  const auto& disk = std::get<DiskRegion>(region);
  const double dx = x - disk.center.x(), dy = y - disk.center.y();
  return dx * dx + dy * dy <= disk.radius * disk.radius;
}

CoverageReport mode_coverage(const Eigen::MatrixXd& samples, const std::vector<Region>& regions, Eigen::Index k) {
  if (samples.cols() != 2) throw std::invalid_argument("mode_coverage: samples must be two-dimensional");
  if (regions.empty()) throw std::invalid_argument("mode_coverage: no regions");
  CoverageReport rep;
  rep.counts.assign(regions.size(), 0);
  for (Eigen::Index i = 0; i < samples.rows(); ++i)
    for (std::size_t r = 0; r < regions.size(); ++r)
      if (contains(regions[r], samples(i, 0), samples(i, 1))) ++rep.counts[r];
  for (Eigen::Index c : rep.counts) rep.covered += c >= k;
  rep.fraction = static_cast<double>(rep.covered) / static_cast<double>(regions.size());
  return rep;
}

std::vector<Region> chessboard_regions(const ToyDataset& ds) {
  const int cells = ds.params.cells;
  const double hw = ds.params.half_width;
  const double w = 2.0 * hw / cells;
  std::vector<Region> out;
  for (int i = 0; i < cells; ++i)
    for (int j = 0; j < cells; ++j) {
      if ((i + j) % 2 != 0) continue;
      const Eigen::Vector2d lo(-hw + w * i, -hw + w * j), hi(-hw + w * (i + 1), -hw + w * (j + 1));
      out.emplace_back(BoxRegion{(lo - ds.shift).cwiseQuotient(ds.scale), (hi - ds.shift).cwiseQuotient(ds.scale)});
    }
  return out;
}

std::vector<Region> manifold_regions(const ToyDataset& ds, int count, double radius) {
  if (count < 1) throw std::invalid_argument("manifold_regions: count must be >= 1");
  std::vector<Region> out;
  for (int k = 0; k < count; ++k) {
    const double u = (k + 0.5) / count;
    Eigen::Vector2d raw;
    if (ds.name == ToyName::Swissroll) raw = swissroll_point(1.5 * kPi * (1.0 + 2.0 * u));
    else if (ds.name == ToyName::Moons) raw = moons_point(2.0 * u);
    else throw std::invalid_argument("manifold_regions: chessboard has no one-dimensional manifold");
    out.emplace_back(DiskRegion{(raw - ds.shift).cwiseQuotient(ds.scale), radius});
  }
  return out;
}

std::vector<Region> default_regions(const ToyDataset& ds) {
  return ds.name == ToyName::Chessboard ? chessboard_regions(ds) : manifold_regions(ds);
}

double mean_nearest_distance(const Eigen::MatrixXd& samples, const Eigen::MatrixXd& reference) {
  if (samples.cols() != 2 || reference.cols() != 2)
    throw std::invalid_argument("mean_nearest_distance: points must be two-dimensional");
  if (samples.rows() < 1 || reference.rows() < 1) throw std::invalid_argument("mean_nearest_distance: empty input");
  if (!samples.allFinite() || !reference.allFinite())
    throw std::invalid_argument("mean_nearest_distance: non-finite input");

  const Eigen::Vector2d lo = samples.colwise().minCoeff().transpose().cwiseMin(reference.colwise().minCoeff().transpose());
  const Eigen::Vector2d hi = samples.colwise().maxCoeff().transpose().cwiseMax(reference.colwise().maxCoeff().transpose());
  const int side = std::max(1, static_cast<int>(std::sqrt(static_cast<double>(reference.rows()) / 4.0)));
  const double h = std::max({(hi - lo).maxCoeff() / side, 1e-12});
  const int nx = std::max(1, static_cast<int>(std::ceil((hi.x() - lo.x()) / h)) + 1);
  const int ny = std::max(1, static_cast<int>(std::ceil((hi.y() - lo.y()) / h)) + 1);
  auto cell_of = [&](double x, double y) {
    const int cx = std::clamp(static_cast<int>((x - lo.x()) / h), 0, nx - 1);
    const int cy = std::clamp(static_cast<int>((y - lo.y()) / h), 0, ny - 1);
    return std::pair{cx, cy};
  };

  // Counting sort of reference points into cells.
  std::vector<int> start(static_cast<std::size_t>(nx) * ny + 1, 0);
  std::vector<int> cell_index(static_cast<std::size_t>(reference.rows()));
  for (Eigen::Index i = 0; i < reference.rows(); ++i) {
    const auto [cx, cy] = cell_of(reference(i, 0), reference(i, 1));
    cell_index[static_cast<std::size_t>(i)] = cy * nx + cx;
    ++start[static_cast<std::size_t>(cy * nx + cx) + 1];
  }
  std::partial_sum(start.begin(), start.end(), start.begin());
  std::vector<int> order(static_cast<std::size_t>(reference.rows()));
  std::vector<int> fill(start.begin(), start.end() - 1);
  for (Eigen::Index i = 0; i < reference.rows(); ++i)
    order[static_cast<std::size_t>(fill[static_cast<std::size_t>(cell_index[static_cast<std::size_t>(i)])]++)] =
        static_cast<int>(i);

  double total = 0.0;
  for (Eigen::Index s = 0; s < samples.rows(); ++s) {
    const double qx = samples(s, 0), qy = samples(s, 1);
    const auto [cx, cy] = cell_of(qx, qy);
    double best = std::numeric_limits<double>::infinity();
    for (int ring = 0;; ++ring) {
      for (int gy = cy - ring; gy <= cy + ring; ++gy) {
        if (gy < 0 || gy >= ny) continue;
        for (int gx = cx - ring; gx <= cx + ring; ++gx) {
          if (gx < 0 || gx >= nx) continue;
          if (std::max(std::abs(gx - cx), std::abs(gy - cy)) != ring) continue;
          const auto c = static_cast<std::size_t>(gy * nx + gx);
          for (int p = start[c]; p < start[c + 1]; ++p) {
            const int r = order[static_cast<std::size_t>(p)];
            const double dx = reference(r, 0) - qx, dy = reference(r, 1) - qy;
            best = std::min(best, dx * dx + dy * dy);
          }
        }
      }
      // Anything outside the searched square is at least this far away.
      const double bx = std::min(qx - (lo.x() + (cx - ring) * h), lo.x() + (cx + ring + 1) * h - qx);
      const double by = std::min(qy - (lo.y() + (cy - ring) * h), lo.y() + (cy + ring + 1) * h - qy);
      const double bound = std::max(0.0, std::min(bx, by));
      const bool exhausted = cx - ring <= 0 && cy - ring <= 0 && cx + ring >= nx - 1 && cy + ring >= ny - 1;
      if (best <= bound * bound || exhausted) break;
    }
    total += std::sqrt(best);
  }
  return total / static_cast<double>(samples.rows());
}

void write_points_csv(std::ostream& out, const Eigen::MatrixXd& points) {
  for (Eigen::Index d = 0; d < points.cols(); ++d) out << (d ? "," : "") << (points.cols() <= 3 ? "xyz"[d] : 'x');
  out << '\n';
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    for (Eigen::Index d = 0; d < points.cols(); ++d) out << (d ? "," : "") << fmt::format("{:.17g}", points(i, d));
    out << '\n';
  }
}

nlohmann::json to_json(const MetricRecord& record) {
  return {{"metric", record.metric}, {"value", record.value}, {"n", record.n}, {"seed", record.seed}};
}

}  // namespace sldm
