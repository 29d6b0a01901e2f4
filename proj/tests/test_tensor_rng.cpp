#include <cmath>

#include "doctest.h"
#include "qrn/rng.hpp"
#include "qrn/tensor.hpp"

using namespace qrn;

TEST_CASE("tensor shape/data consistency is enforced") {
    Tensor t({2, 3}, std::vector<float>{1, 2, 3, 4, 5, 6});
    CHECK(t.size() == 6);
    CHECK(t.at2(1, 2) == 6.0f);
    CHECK_THROWS_AS(Tensor({2, 3}, std::vector<float>{1, 2}), Error);
    CHECK_THROWS_AS(Tensor({0, 3}), Error);
}

TEST_CASE("tensor finiteness check") {
    Tensor t({2, 2});
    CHECK(t.all_finite());
    t[3] = std::numeric_limits<float>::infinity();
    CHECK_FALSE(t.all_finite());
    CHECK_THROWS_AS(t.require_finite("test"), Error);
}

TEST_CASE("rng streams are deterministic and role-separated") {
    Rng a(123), b(123), c(124);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    bool differs = false;
    Rng a2(123);
    for (int i = 0; i < 100; ++i) differs |= (a2.next_u64() != c.next_u64());
    CHECK(differs);

    CHECK(derive_seed(7, "train/clean") == derive_seed(7, "train/clean"));
    CHECK(derive_seed(7, "train/clean") != derive_seed(7, "train/noise"));
    CHECK(derive_seed(7, "train/clean") != derive_seed(8, "train/clean"));
}

TEST_CASE("rng uniform and normal sample statistics") {
    Rng rng(2024);
    const int n = 200000;
    double sum = 0, sumsq = 0;
    for (int i = 0; i < n; ++i) {
        double u = rng.uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
        sum += u;
        sumsq += u * u;
    }
    double mean = sum / n;
    double var = sumsq / n - mean * mean;
    CHECK(mean == doctest::Approx(0.5).epsilon(0.01));
    CHECK(var == doctest::Approx(1.0 / 12.0).epsilon(0.02));

    sum = sumsq = 0;
    for (int i = 0; i < n; ++i) {
        double g = rng.normal();
        sum += g;
        sumsq += g * g;
    }
    mean = sum / n;
    var = sumsq / n - mean * mean;
    CHECK(std::abs(mean) < 0.01);
    CHECK(var == doctest::Approx(1.0).epsilon(0.02));
}
