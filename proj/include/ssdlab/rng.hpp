#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

#include "ssdlab/common.hpp"

namespace ssdlab {

/// Deterministic random source. One root seed, named substreams, explicit
/// Box-Muller gaussians so results do not depend on the standard library's
/// distribution internals.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed), seed_hint_(seed) {}

  /// Substream derived from (seed, name); independent of draws on the parent.
  static Rng substream(std::uint64_t root_seed, std::string_view name) {
    std::uint64_t h = fnv1a(name.data(), name.size(), root_seed ^ 0x9e3779b97f4a7c15ull);
    return Rng(splitmix(h));
  }

  Rng substream(std::string_view name) const {
    std::uint64_t h = fnv1a(name.data(), name.size(), seed_hint_ ^ 0x9e3779b97f4a7c15ull);
    return Rng(splitmix(h));
  }

  /// Uniform in [0, 1).
  Scalar uniform() {
    return static_cast<Scalar>(engine_() >> 11) * 0x1.0p-53;
  }

  Scalar uniform(Scalar lo, Scalar hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi] inclusive, unbiased via rejection.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    check(hi >= lo, "uniform_int: empty range");
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    std::uint64_t r;
    do {
      r = engine_();
    } while (r >= limit);
    return lo + static_cast<std::int64_t>(r % span);
  }

  /// Standard gaussian via Box-Muller (pair drawn per call, second discarded).
  Scalar normal() {
    Scalar u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const Scalar u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  Mat normal_mat(Eigen::Index rows, Eigen::Index cols) {
    Mat m(rows, cols);
    for (Eigen::Index c = 0; c < cols; ++c)
      for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = normal();
    return m;
  }

  Mat uniform_mat(Eigen::Index rows, Eigen::Index cols, Scalar lo, Scalar hi) {
    Mat m(rows, cols);
    for (Eigen::Index c = 0; c < cols; ++c)
      for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = uniform(lo, hi);
    return m;
  }

 private:
  static std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
  }

  std::mt19937_64 engine_;
  std::uint64_t seed_hint_ = 0;
};

}  // namespace ssdlab
