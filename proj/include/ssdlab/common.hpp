#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace ssdlab {

using Scalar = double;
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
using Arr = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

/// Violated precondition or API contract.
struct ContractError : std::runtime_error {
  explicit ContractError(const std::string& what) : std::runtime_error(what) {}
};

/// Invalid or out-of-schema configuration. CLI exit code 2.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// NaN/divergence during compute. CLI exit code 3.
struct NumericalError : std::runtime_error {
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

/// Unreachable or misbehaving external service. CLI exit code 4.
struct ExternalServiceError : std::runtime_error {
  explicit ExternalServiceError(const std::string& what) : std::runtime_error(what) {}
};

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw ContractError(msg);
}

/// FNV-1a over raw bytes; used for parameter checksums and content hashes.
inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 1469598103934665603ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline std::uint64_t hash_mat(const Mat& m, std::uint64_t h = 1469598103934665603ull) {
  return fnv1a(m.data(), sizeof(Scalar) * static_cast<std::size_t>(m.size()), h);
}

}  // namespace ssdlab
