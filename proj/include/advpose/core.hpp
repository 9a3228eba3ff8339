// Shared plumbing: error types, deterministic RNG, float encoding helpers.
#pragma once

#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace advpose {

// ------ errors ------

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

#define ADVPOSE_ERROR_TYPE(Name)                  \
  struct Name : Error {                           \
    using Error::Error;                           \
    Name() : Error(#Name) {}                      \
  }

ADVPOSE_ERROR_TYPE(NonPositiveDepth);
ADVPOSE_ERROR_TYPE(ShapeMismatch);
ADVPOSE_ERROR_TYPE(DegenerateMap);
ADVPOSE_ERROR_TYPE(MissingLabels);
ADVPOSE_ERROR_TYPE(NoForwardRecorded);
ADVPOSE_ERROR_TYPE(NonFiniteValue);
ADVPOSE_ERROR_TYPE(IoError);
ADVPOSE_ERROR_TYPE(BadMagic);
ADVPOSE_ERROR_TYPE(VersionMismatch);
ADVPOSE_ERROR_TYPE(CountMismatch);
ADVPOSE_ERROR_TYPE(ZeroHeadSegment);
ADVPOSE_ERROR_TYPE(DegenerateConfiguration);
ADVPOSE_ERROR_TYPE(UnknownVariant);
ADVPOSE_ERROR_TYPE(ConfigError);

#undef ADVPOSE_ERROR_TYPE

// ------ deterministic rng ------

// splitmix64. Chosen over std::mt19937 + <random> distributions because the
// standard distributions are implementation-defined; every transform here is
// spelled out so streams are bit-identical across compilers.
struct Rng {
  uint64_t state = 0;

  Rng() = default;
  explicit Rng(uint64_t seed) : state(seed) {}

  uint64_t next() {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // [0,1)
  double uniform01() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double a, double b) { return a + (b - a) * uniform01(); }

  // [0,n)
  uint64_t uniform_index(uint64_t n) {
    return static_cast<uint64_t>((static_cast<__uint128_t>(next()) * n) >> 64);
  }

  // Box-Muller, cosine branch only (no cached second sample: keeps the draw
  // count per call fixed, which matters for stream accounting in tests).
  double normal() {
    double u1 = 1.0 - uniform01();  // (0,1]
    double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  // Gaussian truncated to mean +- max_sigmas by rejection.
  double trunc_normal(double mean, double std, double max_sigmas = 2.0) {
    if (std == 0.0) return mean;
    for (;;) {
      double z = normal();
      if (std::abs(z) <= max_sigmas) return mean + std * z;
    }
  }
};

// Decorrelated stream for (seed, index) pairs, e.g. one stream per sample.
inline uint64_t mix_seed(uint64_t seed, uint64_t index) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline uint64_t mix_seed(uint64_t seed, std::string_view tag, uint64_t index = 0) {
  uint64_t h = 1469598103934665603ULL;  // FNV-1a
  for (char c : tag) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  return mix_seed(mix_seed(seed, h), index);
}

// ------ float encoding ------

// 32-bit little-endian floats as lowercase hex, 8 chars per value.
inline void append_f32_hex(std::string& out, float v) {
  uint32_t u = std::bit_cast<uint32_t>(v);
  static const char* digits = "0123456789abcdef";
  for (int byte = 0; byte < 4; byte++) {
    uint8_t b = static_cast<uint8_t>(u >> (8 * byte));
    out.push_back(digits[b >> 4]);
    out.push_back(digits[b & 0xf]);
  }
}

inline std::string f32_hex(const std::vector<float>& vals) {
  std::string out;
  out.reserve(vals.size() * 8);
  for (float v : vals) append_f32_hex(out, v);
  return out;
}

inline std::vector<float> parse_f32_hex(std::string_view hex) {
  if (hex.size() % 8 != 0) throw IoError("hex float blob length not a multiple of 8");
  auto nibble = [](char c) -> uint32_t {
    if (c >= '0' && c <= '9') return static_cast<uint32_t>(c - '0');
    if (c >= 'a' && c <= 'f') return static_cast<uint32_t>(c - 'a' + 10);
    if (c >= 'A' && c <= 'F') return static_cast<uint32_t>(c - 'A' + 10);
    throw IoError("bad hex digit in float blob");
  };
  std::vector<float> out(hex.size() / 8);
  for (size_t i = 0; i < out.size(); i++) {
    uint32_t u = 0;
    for (int byte = 0; byte < 4; byte++) {
      uint32_t hi = nibble(hex[i * 8 + 2 * byte]);
      uint32_t lo = nibble(hex[i * 8 + 2 * byte + 1]);
      u |= ((hi << 4) | lo) << (8 * byte);
    }
    out[i] = std::bit_cast<float>(u);
  }
  return out;
}

// Round through f32 precision; dataset files store f32 so generated values are
// quantised up front to make write -> read the identity.
inline double quantize_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

// Shortest round-trip decimal text for CSV output (deterministic formatting).
inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace advpose
