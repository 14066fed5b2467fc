// SPDX-License-Identifier: Apache-2.0
#include "xmoe/rng.hpp"

#include <cmath>

#include "xmoe/common.hpp"

namespace xmoe {

uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

// splitmix64 finalizer
uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

Rng::Rng(uint64_t seed) : seed_(seed), state_(seed) {}

Rng Rng::child(std::string_view label) const {
    return Rng(mix64(seed_ ^ fnv1a64(label)));
}

Rng Rng::child(std::string_view label, uint64_t index) const {
    return Rng(mix64(mix64(seed_ ^ fnv1a64(label)) + index));
}

uint64_t Rng::next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

double Rng::next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::next_gauss() {
    // Marsaglia polar method; rejection order is part of the stream contract.
    for (;;) {
        const double u = 2.0 * next_double() - 1.0;
        const double v = 2.0 * next_double() - 1.0;
        const double s = u * u + v * v;
        if (s > 0.0 && s < 1.0) {
            return u * std::sqrt(-2.0 * std::log(s) / s);
        }
    }
}

int64_t Rng::next_below(int64_t n) {
    if (n <= 0) {
        throw Error::runtime("Rng::next_below: n must be positive");
    }
    const uint64_t bound = static_cast<uint64_t>(n);
    // rejection sampling for an unbiased draw
    const uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    for (;;) {
        const uint64_t r = next_u64();
        if (r < limit) {
            return static_cast<int64_t>(r % bound);
        }
    }
}

}  // namespace xmoe
