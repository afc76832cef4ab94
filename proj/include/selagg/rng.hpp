#pragma once

// Counter-based random numbers: the n-th draw of a stream is a pure function
// of (seed, stream_id, n), so per-image randomness does not depend on which
// thread processes the image or in which order.

#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "selagg/tensor.hpp"

namespace selagg {

namespace detail {

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

}  // namespace detail

class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream_id) : seed_(seed), stream_id_(stream_id) {
    key_ = detail::splitmix64(detail::splitmix64(seed_) ^ (stream_id_ * 0xD1B54A32D192ED03ull));
  }

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream_id() const noexcept { return stream_id_; }
  std::uint64_t counter() const noexcept { return counter_; }

  /// Independent stream derived from this one; does not advance the counter.
  RngStream substream(std::uint64_t id) const {
    return RngStream(detail::splitmix64(key_ ^ 0xA0761D6478BD642Full), id);
  }

  std::uint64_t next_u64() {
    const std::uint64_t x = key_ + detail::splitmix64(counter_++);
    return detail::splitmix64(x ^ (x >> 29));
  }

  /// Uniform in the open interval (0, 1).
  double uniform() { return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53; }

  /// Uniform integer in [0, n) without modulo bias.
  std::uint64_t uniform_index(std::uint64_t n) {
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x;
    do x = next_u64(); while (x >= limit);
    return x % n;
  }

  /// Box-Muller; each call consumes two uniforms.
  double normal() {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      const std::uint64_t j = uniform_index(i);
      std::swap(first[i - 1], first[j]);
    }
  }

  std::vector<std::size_t> permutation(std::size_t n) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    shuffle(idx.begin(), idx.end());
    return idx;
  }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

template <typename T = float>
Tensor<T> rand_normal(const Dims& dims, RngStream& rng, double stddev = 1.0) {
  Tensor<T> out(dims);
  for (T& v : out.values()) v = static_cast<T>(rng.normal() * stddev);
  return out;
}

template <typename T = float>
Tensor<T> rand_uniform(const Dims& dims, RngStream& rng, double lo = 0.0, double hi = 1.0) {
  Tensor<T> out(dims);
  for (T& v : out.values()) v = static_cast<T>(lo + (hi - lo) * rng.uniform());
  return out;
}

}  // namespace selagg
