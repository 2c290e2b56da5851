#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "imekit/common.hpp"

namespace imekit {

/// Rotates each (2i, 2i+1) pair of a head_dim vector by delta * base^(-2i/head_dim).
/// Angles and products are evaluated in double and stored back as float so
/// that repeated shifts compose to within float rounding.
inline void rope_rotate_inplace(std::span<float> v, long long delta, double rope_base) {
    const std::size_t dim = v.size();
    if (delta == 0) return;
    for (std::size_t i = 0; i + 1 < dim; i += 2) {
        const double theta = std::pow(rope_base, -static_cast<double>(i) / static_cast<double>(dim));
        const double angle = static_cast<double>(delta) * theta;
        const double c = std::cos(angle);
        const double s = std::sin(angle);
        const double x = v[i];
        const double y = v[i + 1];
        v[i] = static_cast<float>(x * c - y * s);
        v[i + 1] = static_cast<float>(x * s + y * c);
    }
}

inline std::vector<float> rope_rotate(std::span<const float> v, long long delta, double rope_base) {
    std::vector<float> out(v.begin(), v.end());
    rope_rotate_inplace(out, delta, rope_base);
    return out;
}

/// RoPE at absolute position `pos` is a rotation by pos from position zero.
inline std::vector<float> apply_rope(std::span<const float> v, long long pos, double rope_base) {
    return rope_rotate(v, pos, rope_base);
}

} // namespace imekit
