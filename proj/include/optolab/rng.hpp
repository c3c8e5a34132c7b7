#pragma once

// Counter-based random stream: output i is a keyed hash of the counter, so
// streams can be split by key and resumed from a (key, counter) pair.

#include <cmath>
#include <cstdint>
#include <numbers>

namespace optolab {

inline std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

class CounterRng {
public:
    CounterRng() = default;
    explicit CounterRng(std::uint64_t key, std::uint64_t counter = 0)
        : key_(mix64(key ^ 0x5851f42d4c957f2dULL)), counter_(counter) {}

    /// Independent stream derived from this one's key; does not advance this stream.
    CounterRng split(std::uint64_t stream) const {
        CounterRng r;
        r.key_ = mix64(key_ ^ mix64(stream + 0x632be59bd9b4e019ULL));
        r.counter_ = 0;
        return r;
    }

    std::uint64_t next_u64() { return mix64(key_ ^ mix64(counter_++)); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, n), unbiased by rejection.
    std::uint64_t below(std::uint64_t n) {
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t x = next_u64();
        while (x >= limit) x = next_u64();
        return x % n;
    }

    /// Standard normal via Box-Muller; consumes two draws.
    double normal() {
        double u1 = uniform();
        const double u2 = uniform();
        if (u1 < 0x1.0p-60) u1 = 0x1.0p-60;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    std::uint64_t key() const { return key_; }
    std::uint64_t counter() const { return counter_; }
    static CounterRng from_state(std::uint64_t key, std::uint64_t counter) {
        CounterRng r;
        r.key_ = key;
        r.counter_ = counter;
        return r;
    }

    friend bool operator==(const CounterRng&, const CounterRng&) = default;

private:
    std::uint64_t key_ = 0;
    std::uint64_t counter_ = 0;
};

}  // namespace optolab
