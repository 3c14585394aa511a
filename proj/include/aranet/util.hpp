#pragma once

#include <cstdint>
#include <functional>
#include <random>

namespace aranet {

// Deterministic uniform generator. The engine sequence is pinned by the
// standard, and the [0,1) mapping below avoids std::uniform_real_distribution,
// whose output is implementation defined.
class Prng {
public:
  explicit Prng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  double uniform() {
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) {
    return lo + (hi - lo) * uniform();
  }

  std::int64_t index(std::int64_t n) {
    return static_cast<std::int64_t>(eng_() % static_cast<std::uint64_t>(n));
  }

private:
  std::mt19937_64 eng_;
};

// Stable mixing of a base seed with a stream id (sample index, step number).
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

// Worker thread cap from ARANET_THREADS; unset or invalid means 1.
int worker_threads();

// Runs fn(i) for i in [0, n). With threads <= 1 this is a plain loop, and the
// chunked variant keeps results addressable by index either way.
void parallel_for(std::int64_t n, int threads, const std::function<void(std::int64_t)>& fn);

}  // namespace aranet
