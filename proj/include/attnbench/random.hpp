#pragma once

#include <cstddef>
#include <cstdint>
#include <random>

namespace attnbench {

/// Seedable generator threaded explicitly through initialization, dropout,
/// sampling and shuffling. The conversions below are written out so results
/// do not depend on the standard library's distribution implementations.
class Rng {
  public:
    using result_type = std::uint64_t;

    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    static constexpr result_type min() { return std::mt19937_64::min(); }
    static constexpr result_type max() { return std::mt19937_64::max(); }
    result_type operator()() { return engine_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n), n > 0. Rejection sampling avoids modulo bias.
    std::size_t below(std::size_t n) {
        const std::uint64_t bound = static_cast<std::uint64_t>(n);
        const std::uint64_t limit = max() - max() % bound;
        std::uint64_t draw;
        do {
            draw = engine_();
        } while (draw >= limit);
        return static_cast<std::size_t>(draw % bound);
    }

    /// Fisher-Yates shuffle of a random-access range.
    template <typename It>
    void shuffle(It first, It last) {
        const auto n = static_cast<std::size_t>(last - first);
        for (std::size_t i = n; i > 1; --i) {
            std::size_t j = below(i);
            std::swap(first[i - 1], first[j]);
        }
    }

    /// Independent child stream derived from this one.
    Rng fork() { return Rng(engine_() ^ 0x9E3779B97F4A7C15ULL); }

  private:
    std::mt19937_64 engine_;
};

} // namespace attnbench
