#pragma once

#include <cstdint>
#include <functional>
#include <iostream>
#include <random>
#include <stdexcept>
#include <string>

namespace pclr {

/// Base of every error raised by the library. The CLI maps the concrete
/// subclass to a process exit status.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration: bad ranges, unknown keys, unsupported variants.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A function was called outside its domain (shape, length, norm, phase).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Malformed or truncated file.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// I/O or dataset-content problems.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss or parameters.
class NumericalError : public Error {
 public:
  using Error::Error;
};

using Rng = std::mt19937_64;

/// Sink for warnings and progress lines.
using LogFn = std::function<void(const std::string&)>;

inline void log_stderr(const std::string& line) { std::cerr << line << '\n'; }

/// Derives an independent stream seed from a base seed and a tag, so that
/// e.g. epoch 7 of a run always sees the same draws regardless of what
/// happened before it.
inline std::uint64_t mix_seed(std::uint64_t base, std::uint64_t tag) {
  // splitmix64 finalizer
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (tag + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t base, std::uint64_t tag_a, std::uint64_t tag_b) {
  return mix_seed(mix_seed(base, tag_a), tag_b);
}

/// Stable string hash (FNV-1a), for deriving seeds from patient ids.
inline std::uint64_t hash_string(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline constexpr double kSampleRateHz = 120.0;
inline constexpr int kNumLeads = 4;
inline constexpr int kSegmentSeconds = 60;
inline constexpr int kSegmentSamples = 7200;
inline constexpr int kWindowSamples = 1024;
inline constexpr int kHourSamples = 432000;

}  // namespace pclr
