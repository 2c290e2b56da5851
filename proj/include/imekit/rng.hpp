#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

#include "imekit/common.hpp"

namespace imekit {

// SplitMix64 finalizer. Used both as a stream generator and as the mixing
// function of the counter-based generator below.
constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

// Maps 64 random bits to [0, 1) with 53 bits of precision.
constexpr double to_unit(std::uint64_t bits) {
    return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

/// Counter-based generator keyed by (seed, layer, tensor name).
///
/// Element i of a tensor is splitmix64(key ^ splitmix64(i)) where
/// key = splitmix64(seed ^ splitmix64(layer ^ fnv1a(name))). Any element can
/// be regenerated independently, which is what the weight fixtures rely on.
class CounterRng {
public:
    CounterRng(std::uint64_t seed, std::uint64_t layer, std::string_view name)
        : key_(splitmix64(seed ^ splitmix64(layer ^ fnv1a(name)))) {}

    std::uint64_t bits(std::uint64_t index) const { return splitmix64(key_ ^ splitmix64(index)); }

    float uniform(std::uint64_t index, double lo, double hi) const {
        return static_cast<float>(lo + (hi - lo) * to_unit(bits(index)));
    }

private:
    std::uint64_t key_;
};

/// Sequential generator for sampling and level assignment.
class StreamRng {
public:
    explicit StreamRng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next() {
        state_ += 0x9E3779B97F4A7C15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    double uniform() { return to_unit(next()); }

    std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : next() % n; }

    double normal() {
        double u1 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

private:
    std::uint64_t state_;
};

} // namespace imekit
