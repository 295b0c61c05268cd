#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace neurocodec {

// Error taxonomy shared by all modules. The CLI maps these onto process
// exit codes: ConfigError -> 2, DataError -> 3, NumericError -> 4.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& msg) : Error(msg) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& msg) : Error(msg) {}
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw DataError(msg);
}

// FNV-1a 64-bit. Used for manifest hashes and for deriving seeds from
// string tags (movie ids, stage names).
inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = 1469598103934665603ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<std::uint64_t>(p[i]);
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::uint64_t fnv1a64(std::string_view s,
                             std::uint64_t h = 1469598103934665603ULL) {
  return fnv1a64(s.data(), s.size(), h);
}

// Count helpers for "floor(fraction*n)" / "ceil(fraction*n)" policies.
// The 1e-9 nudge keeps exact rational intents (0.3*10 == 3) stable under
// binary rounding of the fraction.
inline int count_floor(double fraction, std::int64_t n) {
  return static_cast<int>(fraction * static_cast<double>(n) + 1e-9);
}

inline int count_ceil(double fraction, std::int64_t n) {
  const double x = fraction * static_cast<double>(n) - 1e-9;
  const auto t = static_cast<std::int64_t>(x);
  return static_cast<int>(static_cast<double>(t) >= x ? t : t + 1);
}

}  // namespace neurocodec
