#include <doctest.h>

#include <cmath>
#include <stdexcept>
#include <limits>

#include "capskit/rng.hpp"
#include "capskit/squash.hpp"

using namespace capskit;

namespace {

Tensor random_vec(Rng& rng, std::int64_t d, double lo = -1.0, double hi = 1.0) {
    Tensor t({d});
    for (double& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

// Independent baseline: v = (||s||^2/(1+||s||^2)) s/||s||, written from the
// plain sum of squares rather than the library's norm path.
Tensor eq1_squash(const Tensor& s) {
    double nsq = 0;
    for (double v : s.data) nsq += v * v;
    Tensor out({s.size()});
    if (nsq < 1e-30) return out;
    const double n = std::sqrt(nsq);
    const double scale = nsq / (1.0 + nsq) / n;
    for (std::int64_t i = 0; i < s.size(); ++i) out(i) = scale * s(i);
    return out;
}

double norm2(const Tensor& v) {
    double s = 0;
    for (double x : v.data) s += x * x;
    return std::sqrt(s);
}

}  // namespace

TEST_CASE("squash_norm_m closed forms") {
    for (int m : {1, 2, 3, 5, 10}) {
        Tensor z({2});
        Tensor vz = squash_norm_m(z, m);
        CHECK(vz(0) == 0.0);
        CHECK(vz(1) == 0.0);

        Tensor e({2}, {1.0, 0.0});
        Tensor ve = squash_norm_m(e, m);
        CHECK(ve(0) == doctest::Approx(0.5).epsilon(1e-14));
        CHECK(ve(1) == 0.0);
    }

    Tensor s({2}, {3.0, 4.0});
    Tensor v1 = squash_norm_m(s, 1);
    CHECK(v1(0) == doctest::Approx(0.525).epsilon(1e-14));
    CHECK(v1(1) == doctest::Approx(0.7).epsilon(1e-14));

    Tensor s3({2}, {1.0, 2.0});
    Tensor v3 = squash_norm_m(s3, 3);
    CHECK(v3(0) == doctest::Approx(0.402492).epsilon(1e-6));
    CHECK(v3(1) == doctest::Approx(0.804984).epsilon(1e-6));
}

TEST_CASE("squash m=2 is pointwise the classic squash") {
    Rng rng(101);
    for (int trial = 0; trial < 1000; ++trial) {
        Tensor s = random_vec(rng, 8, -3.0, 3.0);
        Tensor a = squash_norm_m(s, 2);
        Tensor b = eq1_squash(s);
        for (std::int64_t i = 0; i < 8; ++i) CHECK(std::fabs(a(i) - b(i)) <= 1e-12);
    }
}

TEST_CASE("squash_inf closed forms") {
    Tensor s({2}, {3.0, -4.0});
    Tensor v = squash_inf(s);
    CHECK(v(0) == doctest::Approx(0.48).epsilon(1e-14));
    CHECK(v(1) == doctest::Approx(-0.64).epsilon(1e-14));

    Tensor z({2});
    Tensor vz = squash_inf(z);
    CHECK(vz(0) == 0.0);
    CHECK(vz(1) == 0.0);

    Tensor ones({2}, {1.0, 1.0});
    Tensor vo = squash_inf(ones);
    CHECK(vo(0) == doctest::Approx(0.35355339).epsilon(1e-7));
    CHECK(vo(1) == doctest::Approx(0.35355339).epsilon(1e-7));
}

TEST_CASE("squash_kl matches the printed formula") {
    Tensor s({1, 2}, {1.0, 0.0});
    Tensor sigma({1, 2}, {1.0 / std::sqrt(2.0), 0.0});
    Tensor v = squash_kl(s, sigma);
    CHECK(v(0, 0) == doctest::Approx(0.41421356237309503).epsilon(1e-12));
    CHECK(v(0, 1) == 0.0);
}

TEST_CASE("squash_kl zero sigma zeroes the output") {
    Rng rng(5);
    Tensor s = Tensor({3, 4});
    for (double& x : s.data) x = rng.uniform(-2.0, 2.0);
    Tensor sigma({3, 4});
    Tensor v = squash_kl(s, sigma);
    for (double x : v.data) CHECK(x == 0.0);
}

TEST_CASE("squash_kl common sigma scaling keeps directions") {
    Rng rng(9);
    Tensor s({3, 4});
    Tensor sigma({3, 4});
    for (double& x : s.data) x = rng.uniform(-2.0, 2.0);
    for (double& x : sigma.data) x = rng.uniform(-2.0, 2.0);
    Tensor v1 = squash_kl(s, sigma);
    Tensor sigma2 = sigma;
    for (double& x : sigma2.data) x *= 3.5;
    Tensor v2 = squash_kl(s, sigma2);
    for (std::int64_t j = 0; j < 3; ++j) {
        // same direction row by row: v2 = t_j v1 with t_j > 0
        double t = 0;
        for (std::int64_t k = 0; k < 4; ++k) {
            if (std::fabs(v1(j, k)) > 1e-9) {
                t = v2(j, k) / v1(j, k);
                break;
            }
        }
        CHECK(t > 0.0);
        for (std::int64_t k = 0; k < 4; ++k) {
            CHECK(v2(j, k) == doctest::Approx(t * v1(j, k)).epsilon(1e-9));
        }
    }
}

TEST_CASE("squash_kl rejects empty input") {
    Tensor s({0, 4});
    Tensor sigma({0, 4});
    CHECK_THROWS_AS(squash_kl(s, sigma), std::invalid_argument);
}

TEST_CASE("squash_backward zero upstream gradient") {
    Rng rng(3);
    Tensor s = random_vec(rng, 8);
    Tensor g({8});
    for (int m : {1, 2, 3}) {
        Tensor gs = squash_backward(s, SquashSpec::norm_m(m), g);
        for (double v : gs.data) CHECK(v == 0.0);
    }
    Tensor gsi = squash_backward(s, SquashSpec::infinity(), g);
    for (double v : gsi.data) CHECK(v == 0.0);
}

TEST_CASE("squash direction preservation and boundedness") {
    Rng rng(77);
    for (int trial = 0; trial < 200; ++trial) {
        Tensor s = random_vec(rng, 6, -3.0, 3.0);
        const double ns = norm2(s);
        if (ns < 1e-6) continue;
        for (int m : {1, 2, 3, 4, 5, 10}) {
            Tensor v = squash_norm_m(s, m);
            const double nv = norm2(v);
            CHECK(nv < 1.0);
            // cosine similarity 1: v is a non-negative multiple of s
            double dot = 0;
            for (std::int64_t i = 0; i < 6; ++i) dot += v(i) * s(i);
            CHECK(dot / (nv * ns) == doctest::Approx(1.0).epsilon(1e-12));
            // magnitude identity
            const double nm = vector_norm(s, static_cast<double>(m));
            const double a = std::pow(nm, static_cast<double>(m));
            CHECK(nv == doctest::Approx(a / (1.0 + a)).epsilon(1e-10));
        }
        Tensor vi = squash_inf(s);
        const double nvi = norm2(vi);
        const double ninf = vector_norm(s, std::numeric_limits<double>::infinity());
        CHECK(nvi < 1.0);
        CHECK(nvi == doctest::Approx(ninf / (1.0 + ninf)).epsilon(1e-10));
    }
}

TEST_CASE("squash magnitude strictly increases with input scale") {
    Rng rng(13);
    Tensor dir = random_vec(rng, 5);
    for (int m : {1, 2, 3, 10}) {
        double prev = -1.0;
        for (double t : {0.1, 0.5, 1.0, 2.0, 5.0, 20.0}) {
            Tensor s({5});
            for (std::int64_t i = 0; i < 5; ++i) s(i) = t * dir(i);
            const double nv = norm2(squash_norm_m(s, m));
            CHECK(nv > prev);
            prev = nv;
        }
    }
}

TEST_CASE("magnitude response steepens toward a unit-norm jump as m grows") {
    // response gap between ||s||_m = 1.1 and 0.9 must grow with m
    Rng rng(29);
    Tensor dir = random_vec(rng, 8);
    double prev_gap = 0.0;
    for (int m : {2, 3, 4, 5, 10}) {
        const double nm = vector_norm(dir, static_cast<double>(m));
        Tensor hi({8}), lo({8});
        for (std::int64_t i = 0; i < 8; ++i) {
            hi(i) = dir(i) * (1.1 / nm);
            lo(i) = dir(i) * (0.9 / nm);
        }
        const double gap = norm2(squash_norm_m(hi, m)) - norm2(squash_norm_m(lo, m));
        CHECK(gap > prev_gap);
        prev_gap = gap;
    }
}

TEST_CASE("large m saturates instead of overflowing") {
    Tensor s({4}, {300.0, -250.0, 100.0, 50.0});
    Tensor v = squash_norm_m(s, 10);
    CHECK(v.all_finite());
    CHECK(norm2(v) < 1.0);
    CHECK(norm2(v) > 0.999);
    Tensor g({4}, {1.0, 1.0, 1.0, 1.0});
    Tensor gs = squash_backward(s, SquashSpec::norm_m(10), g);
    CHECK(gs.all_finite());
}
