#pragma once

#include <cstdint>
#include <limits>
#include <random>

#include <Eigen/Dense>

namespace sldm {

/// SplitMix64 finalizer. Used both as the stream key hash and as the
/// generator step.
constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Key for the `index`-th independent stream derived from a run seed.
constexpr std::uint64_t stream_key(std::uint64_t seed, std::uint64_t index) noexcept {
  return splitmix64(splitmix64(seed) ^ splitmix64(index + 0x632be59bd9b4e019ULL));
}

/// Counter-based 64-bit engine: output k is splitmix64(key + k * gamma).
/// Small enough to keep one per sampler chain.
class SplitMixEngine {
 public:
  using result_type = std::uint64_t;

  explicit SplitMixEngine(std::uint64_t key = 0) noexcept : state_(key) {}

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

  result_type operator()() noexcept {
    const std::uint64_t out = splitmix64(state_);
    state_ += 0x9e3779b97f4a7c15ULL;
    return out;
  }

 private:
  std::uint64_t state_;
};

/// One random stream. Chains, paths and datasets each own one, seeded via
/// stream_key(seed, index), so results do not depend on evaluation order.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(splitmix64(seed)) {}

  static Rng stream(std::uint64_t seed, std::uint64_t index) {
    Rng r(0);
    r.engine_ = SplitMixEngine(stream_key(seed, index));
    return r;
  }

  double normal() { return normal_(engine_); }
  /// Uniform on [0, 1).
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(engine_); }

  Eigen::MatrixXd normal_matrix(Eigen::Index rows, Eigen::Index cols) {
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = normal();
    return m;
  }

  SplitMixEngine& engine() { return engine_; }

 private:
  SplitMixEngine engine_;
  std::normal_distribution<double> normal_;
};

}  // namespace sldm
