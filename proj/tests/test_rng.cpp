// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <vector>

#include "xmoe/rng.hpp"

using namespace xmoe;

TEST_SUITE_BEGIN("rng");

TEST_CASE("identical seed gives identical stream") {
    Rng a(1234567);
    Rng b(1234567);
    for (int i = 0; i < 1000; ++i) {
        CHECK(a.next_u64() == b.next_u64());
    }
}

TEST_CASE("different seeds diverge") {
    Rng a(1);
    Rng b(2);
    int same = 0;
    for (int i = 0; i < 100; ++i) {
        same += a.next_u64() == b.next_u64() ? 1 : 0;
    }
    CHECK(same == 0);
}

TEST_CASE("child derivation is order-insensitive") {
    Rng root(42);
    Rng c1 = root.child("data");
    root.next_u64();  // advancing the parent stream must not affect children
    root.next_u64();
    Rng c2 = root.child("data");
    for (int i = 0; i < 100; ++i) {
        CHECK(c1.next_u64() == c2.next_u64());
    }
}

TEST_CASE("labeled children are mutually independent streams") {
    Rng root(7);
    Rng a = root.child("mask", 3);
    Rng b = root.child("mask", 4);
    Rng c = root.child("batch", 3);
    int eq_ab = 0, eq_ac = 0;
    for (int i = 0; i < 200; ++i) {
        const uint64_t x = a.next_u64();
        eq_ab += x == b.next_u64() ? 1 : 0;
        eq_ac += x == c.next_u64() ? 1 : 0;
    }
    CHECK(eq_ab == 0);
    CHECK(eq_ac == 0);
}

TEST_CASE("next_double is in [0,1) and roughly uniform") {
    Rng r(99);
    double sum = 0.0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
        const double x = r.next_double();
        REQUIRE(x >= 0.0);
        REQUIRE(x < 1.0);
        sum += x;
    }
    CHECK(std::abs(sum / n - 0.5) < 0.01);
}

TEST_CASE("next_below is unbiased over small ranges") {
    Rng r(5);
    std::vector<int> counts(7, 0);
    const int n = 70000;
    for (int i = 0; i < n; ++i) {
        ++counts[r.next_below(7)];
    }
    for (int c : counts) {
        CHECK(std::abs(c - n / 7) < 500);
    }
}

TEST_CASE("gauss moments are sane") {
    Rng r(2024);
    double sum = 0.0, sq = 0.0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double x = r.next_gauss();
        sum += x;
        sq += x * x;
    }
    CHECK(std::abs(sum / n) < 0.02);
    CHECK(std::abs(sq / n - 1.0) < 0.02);
}

TEST_SUITE_END();
