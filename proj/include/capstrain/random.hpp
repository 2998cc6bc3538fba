#ifndef CAPSTRAIN_RANDOM_HPP
#define CAPSTRAIN_RANDOM_HPP

#include <cstdint>
#include <random>
#include <span>
#include <utility>
#include <vector>

namespace capstrain {

/// SplitMix64 finaliser; used to derive independent stream seeds.
std::uint64_t splitmix64(std::uint64_t x);

/// Seed for a named sub-stream (epoch shuffles, initialisation, subsets).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

/// Portable random source.
///
/// The engine is std::mt19937_64, whose output sequence is fixed by the
/// standard. The standard distributions are not portable across library
/// implementations, so the conversions below are written out: uniform() uses
/// the top 53 bits, normal() is Box-Muller, below() is rejection sampling and
/// shuffle() is Fisher-Yates driven by below().
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  /// Uniform double in [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal(double mean = 0.0, double stddev = 1.0);
  /// Uniform integer in [0, n); n > 0.
  std::uint64_t below(std::uint64_t n);

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace capstrain

#endif  // CAPSTRAIN_RANDOM_HPP
