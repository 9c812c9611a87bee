// pathfield: counter-based deterministic random numbers. Every Gaussian
// draw is a pure function of (seed, stream, step, component), so ensembles
// are reproducible bit-for-bit at any thread count and stream usage can be
// audited for independence.
#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace pathfield {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

}  // namespace detail

// FNV-1a hash of a label; used to give each ensemble its own stream block.
inline std::uint64_t stream_offset(std::string_view label) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (const char ch : label) {
    h ^= static_cast<unsigned char>(ch);
    h *= 0x100000001B3ULL;
  }
  return h;
}

// Deterministic sub-seed for a sweep cell or nested run.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                                 std::uint64_t c = 0) {
  std::uint64_t h = detail::splitmix64(seed ^ 0xA5A5A5A55A5A5A5AULL);
  h = detail::splitmix64(h ^ a);
  h = detail::splitmix64(h ^ (b * 0x9E3779B97F4A7C15ULL));
  h = detail::splitmix64(h ^ (c * 0xC2B2AE3D27D4EB4FULL));
  return h;
}

// Stateless field of random variates indexed by (stream, step, component).
class NoiseField {
 public:
  explicit NoiseField(std::uint64_t seed) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t word(std::uint64_t stream, std::uint64_t step, std::uint64_t comp) const {
    std::uint64_t h = detail::splitmix64(seed_ ^ 0x6A09E667F3BCC909ULL);
    h = detail::splitmix64(h ^ stream);
    h = detail::splitmix64(h ^ (step * 0xD6E8FEB86659FD93ULL));
    h = detail::splitmix64(h ^ (comp * 0xA0761D6478BD642FULL));
    return h;
  }

  // Uniform in (0, 1].
  double uniform01(std::uint64_t stream, std::uint64_t step, std::uint64_t comp) const {
    return (static_cast<double>(word(stream, step, comp) >> 11) + 1.0) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller; one variate per counter triple.
  double gauss(std::uint64_t stream, std::uint64_t step, std::uint64_t comp) const {
    const double u1 = uniform01(stream, step, 2 * comp);
    const double u2 = uniform01(stream, step, 2 * comp + 1);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  std::uint64_t seed_;
};

// Records which stream labels a computation consumed so tests can assert
// that nominally independent ensembles share no streams.
class StreamLedger {
 public:
  void record(std::string label) { labels_.insert(std::move(label)); }

  const std::set<std::string>& labels() const { return labels_; }

  bool disjoint_from(const StreamLedger& other) const {
    for (const auto& l : labels_)
      if (other.labels_.count(l) > 0) return false;
    return true;
  }

  void merge(const StreamLedger& other) {
    labels_.insert(other.labels_.begin(), other.labels_.end());
  }

 private:
  std::set<std::string> labels_;
};

}  // namespace pathfield
