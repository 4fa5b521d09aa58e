#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace qprel {

/// Mixes (seed, stream, index) into an independent 64-bit seed. Generators use
/// this to give every entry its own stream, so output never depends on the
/// order in which entries are produced.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0);

/// Named stream ids keep derived seeds of different generators apart.
enum class Stream : std::uint64_t {
  World = 1,
  Pairs,
  Exposures,
  Purchases,
  Cot,
  Init,
  Shuffle,
  Synth,
  Prefs,
  Kto,
  GradCheck,
};

inline std::uint64_t derive_seed(std::uint64_t seed, Stream stream, std::uint64_t index = 0) {
  return derive_seed(seed, static_cast<std::uint64_t>(stream), index);
}

/// Thin wrapper over mt19937_64 whose value mappings are fixed here rather
/// than delegated to the implementation-defined std distributions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n). n must be positive.
  std::size_t below(std::size_t n);
  bool bernoulli(double p) { return uniform() < p; }
  /// Index drawn proportionally to non-negative weights (at least one positive).
  std::size_t weighted(std::span<const double> weights);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace qprel
