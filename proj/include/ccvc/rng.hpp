#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace ccvc {

// Derives a child seed from a parent seed and a stream tag. Used everywhere a
// component needs its own deterministic random stream (branch init, per-step
// augmentation, dropout masks) so that results are reproducible regardless of
// call order and bit-identical across resume boundaries.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9E3779B97F4A7C15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  return mix_seed(mix_seed(a, b), c);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c,
                              std::uint64_t d) {
  return mix_seed(mix_seed(a, b, c), d);
}

// Stream tags for mix_seed. Arbitrary distinct constants.
namespace streams {
inline constexpr std::uint64_t kInitBranch1 = 0x11;
inline constexpr std::uint64_t kInitBranch2 = 0x12;
inline constexpr std::uint64_t kInitMapHead = 0x13;
inline constexpr std::uint64_t kSceneTrain = 0x21;
inline constexpr std::uint64_t kSceneVal = 0x22;
inline constexpr std::uint64_t kSplit = 0x23;
inline constexpr std::uint64_t kSamplerLabelled = 0x31;
inline constexpr std::uint64_t kSamplerUnlabelled = 0x32;
inline constexpr std::uint64_t kWeakLabelled = 0x33;
inline constexpr std::uint64_t kWeakUnlabelled = 0x34;
inline constexpr std::uint64_t kStrong = 0x35;
inline constexpr std::uint64_t kDropout = 0x41;
}  // namespace streams

// SplitMix64 generator. Deliberately not std::mt19937: the sequence is fixed
// by this header alone (libstdc++ distributions are implementation-defined),
// and its state is a single word, which keeps checkpoints trivially exact.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

  int below_int(int n) { return static_cast<int>(below(static_cast<std::uint64_t>(n))); }

  bool bernoulli(double p) { return uniform() < p; }

  // Box-Muller. Two draws per call; no cached spare, so the stream position
  // is a pure function of the number of calls.
  double gaussian() {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_;
};

}  // namespace ccvc
