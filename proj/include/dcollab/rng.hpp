#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dcollab/errors.hpp"
#include "dcollab/hash.hpp"

namespace dcollab {

// Deterministic random source. Wraps std::mt19937_64 (whose output sequence
// is fixed by the standard) but implements all distributions by hand, since
// std::*_distribution algorithms are implementation-defined and would break
// cross-platform reproducibility of dataset hashes.
//
// Substreams are derived by name or index from the construction seed, so e.g.
// data generation and weight init never share a stream, and a child's
// identity does not depend on how much of the parent was consumed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  // Named substream: child("init"), child("data"), ...
  Rng child(const std::string& name) const {
    Fnv1a64 h;
    h.update_u64(seed_);
    h.update(name);
    return Rng(splitmix64(h.digest()));
  }

  // Indexed substream, e.g. one per sample or per run.
  Rng child(std::uint64_t index) const {
    Fnv1a64 h;
    h.update_u64(seed_);
    h.update_u64(index + 0x9e3779b97f4a7c15ull);
    return Rng(splitmix64(h.digest()));
  }

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return engine_(); }

  // Uniform on [0, 1), 53-bit resolution.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller. One value per pair of uniforms; the sine
  // branch is discarded to keep state consumption per call fixed.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();  // log(0) guard
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  bool bernoulli(double p) { return uniform() < p; }

  // Uniform integer in [0, n). Rejection sampling, no modulo bias.
  std::uint64_t randint(std::uint64_t n) {
    if (n == 0) throw UsageError("randint: n must be positive");
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
  }

  // In-place Fisher-Yates. std::shuffle's draw pattern is unspecified, so we
  // roll our own for reproducibility.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(randint(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Engine state round trip (text format fixed by the standard). Note the
  // construction seed travels separately; see checkpoint manifests.
  std::string state() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }

  void set_state(const std::string& s) {
    std::istringstream is(s);
    is >> engine_;
    if (!is) throw FormatError("rng: malformed engine state string");
  }

 private:
  static std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
  }

  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace dcollab
