// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string_view>

namespace xmoe {

uint64_t fnv1a64(std::string_view s);
uint64_t mix64(uint64_t x);

// Deterministic splittable RNG. The uniform stream is pure integer
// arithmetic (splitmix64), so a given seed yields the same stream on any
// platform. Child streams are derived from the parent's seed and a label
// only, never from draw order, so the derivation is order-insensitive.
class Rng {
public:
    explicit Rng(uint64_t seed);

    Rng child(std::string_view label) const;
    Rng child(std::string_view label, uint64_t index) const;

    uint64_t next_u64();
    double next_double();           // uniform in [0, 1), 53-bit resolution
    double next_gauss();            // standard normal, Marsaglia polar method
    int64_t next_below(int64_t n);  // uniform in {0, ..., n-1}

    uint64_t seed() const { return seed_; }

private:
    uint64_t seed_;
    uint64_t state_;
};

}  // namespace xmoe
