#pragma once

#include <cstdint>
#include <stdexcept>

namespace trgcn {

// Counter-based deterministic RNG. Every random decision in the project is
// drawn from a stream keyed by (seed, stream id, up to three coordinates),
// so components can be re-run or reordered without perturbing each other.
enum class Stream : std::uint64_t {
    init = 1,
    dropout = 2,
    shuffle = 3,
    split = 4,
    synthetic = 5,
    tokens = 6,
};

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

class CounterRng {
  public:
    CounterRng(std::uint64_t seed, Stream stream, std::uint64_t a = 0, std::uint64_t b = 0,
               std::uint64_t c = 0) {
        key_ = splitmix64(seed);
        key_ = splitmix64(key_ ^ static_cast<std::uint64_t>(stream));
        key_ = splitmix64(key_ ^ a);
        key_ = splitmix64(key_ ^ b);
        key_ = splitmix64(key_ ^ c);
    }

    // Stateless draw: the value at a fixed counter position.
    std::uint64_t word_at(std::uint64_t counter) const {
        return splitmix64(key_ + splitmix64(counter));
    }
    double uniform_at(std::uint64_t counter) const {
        return static_cast<double>(word_at(counter) >> 11) * 0x1.0p-53;
    }

    // Stateful draws advance an internal counter.
    std::uint64_t next_word() { return word_at(counter_++); }
    double uniform() { return uniform_at(counter_++); }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, n).
    std::uint64_t uniform_int(std::uint64_t n) {
        if (n == 0) throw std::invalid_argument("uniform_int: n must be positive");
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t w;
        do {
            w = next_word();
        } while (w >= limit);
        return w % n;
    }

  private:
    std::uint64_t key_ = 0;
    std::uint64_t counter_ = 0;
};

}  // namespace trgcn
