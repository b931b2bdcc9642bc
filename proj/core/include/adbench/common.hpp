#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

namespace adbench {

// Base error for everything raised by the library. Subclasses exist so
// callers can distinguish "your config is wrong" from "your data is broken".
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid shapes, dimension mismatches, malformed op arguments.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// Invalid configuration values (hyperparameters, model configs, CLI args).
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Corrupt or unreadable files, format violations.
class FormatError : public Error {
 public:
  explicit FormatError(const std::string& msg) : Error(msg) {}
};

// Numeric failures: NaN/Inf where finite values are required.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& msg) : Error(msg) {}
};

namespace detail {
inline void cat_into(std::ostringstream&) {}
template <typename A, typename... Rest>
void cat_into(std::ostringstream& os, const A& a, const Rest&... rest) {
  os << a;
  cat_into(os, rest...);
}
}  // namespace detail

// strcat-style message builder: msg("dim ", i, " mismatch: ", a, " vs ", b)
template <typename... Args>
std::string msg(const Args&... args) {
  std::ostringstream os;
  detail::cat_into(os, args...);
  return os.str();
}

// splitmix64, used to derive independent RNG streams from (seed, index)
// pairs so that e.g. per-subject generation is order-independent.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  return splitmix64(splitmix64(a) ^ (0x9e3779b97f4a7c15ULL + b));
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  return mix_seed(mix_seed(a, b), c);
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed) { return Rng(splitmix64(seed)); }

// FNV-1a 64-bit, used for config hashes and content checksums.
inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a64(const std::string& s) {
  return fnv1a64(s.data(), s.size());
}

std::string hex64(std::uint64_t v);

// Kernel threading. All kernels are deterministic by construction (each
// output element is reduced serially by a single thread), so results are
// bit-identical across thread counts. ADBENCH_STRICT=1 additionally pins
// execution to one thread.
int kernel_threads();
void set_kernel_threads(int n);
bool strict_mode();

}  // namespace adbench
