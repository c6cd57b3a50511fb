#include <doctest.h>

#include <cmath>
#include <stdexcept>
#include <limits>

#include "capskit/rng.hpp"
#include "capskit/tensor.hpp"
#include "capskit/verify.hpp"

using namespace capskit;

namespace {
const double kInf = std::numeric_limits<double>::infinity();

Tensor random_tensor(Rng& rng, std::vector<std::int64_t> shape, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.data) v = rng.uniform(lo, hi);
    return t;
}
}  // namespace

TEST_CASE("conv2d output shape arithmetic") {
    Tensor in({1, 28, 28});
    Tensor k({256, 1, 9, 9});
    Tensor b({256});
    Tensor out = conv2d(in, k, b, 1);
    CHECK(out.shape == std::vector<std::int64_t>{256, 20, 20});

    Tensor in2({256, 20, 20});
    Tensor k2({256, 256, 9, 9});
    Tensor b2({256});
    Tensor out2 = conv2d(in2, k2, b2, 2);
    CHECK(out2.shape == std::vector<std::int64_t>{256, 6, 6});
}

TEST_CASE("conv2d 1x1 kernel closed form") {
    Tensor in({1, 1, 1}, {5.0});
    Tensor k({1, 1, 1, 1}, {2.0});
    Tensor b({1}, {3.0});
    Tensor out = conv2d(in, k, b, 1);
    CHECK(out(0, 0, 0) == doctest::Approx(13.0).epsilon(1e-15));
}

TEST_CASE("conv2d channel mismatch throws") {
    Tensor in({2, 5, 5});
    Tensor k({1, 3, 3, 3});
    Tensor b({1});
    CHECK_THROWS_AS(conv2d(in, k, b, 1), std::invalid_argument);
}

TEST_CASE("conv2d zero kernel zero bias gives zeros") {
    Rng rng(11);
    Tensor in = random_tensor(rng, {2, 6, 6});
    Tensor k({3, 2, 3, 3});
    Tensor b({3});
    Tensor out = conv2d(in, k, b, 1);
    for (double v : out.data) CHECK(v == 0.0);
}

TEST_CASE("conv2d_backward 1x1 closed form") {
    Tensor in({1, 1, 1}, {5.0});
    Tensor k({1, 1, 1, 1}, {2.0});
    Tensor grad_out({1, 1, 1}, {1.0});
    Conv2dGrads g = conv2d_backward(grad_out, in, k, 1);
    CHECK(g.input(0, 0, 0) == doctest::Approx(2.0).epsilon(1e-15));
    CHECK(g.kernels(0, 0, 0, 0) == doctest::Approx(5.0).epsilon(1e-15));
    CHECK(g.bias(0) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("conv2d_backward zero upstream gradient") {
    Rng rng(3);
    Tensor in = random_tensor(rng, {1, 5, 5});
    Tensor k = random_tensor(rng, {2, 1, 3, 3});
    Tensor grad_out({2, 3, 3});
    Conv2dGrads g = conv2d_backward(grad_out, in, k, 1);
    for (double v : g.input.data) CHECK(v == 0.0);
    for (double v : g.kernels.data) CHECK(v == 0.0);
    for (double v : g.bias.data) CHECK(v == 0.0);
}

TEST_CASE("conv2d_backward matches central finite differences") {
    Rng rng(17);
    Tensor in = random_tensor(rng, {1, 6, 6});
    Tensor k = random_tensor(rng, {1, 1, 3, 3});
    Tensor b = random_tensor(rng, {1});
    Tensor out = conv2d(in, k, b, 1);
    Tensor w = random_tensor(rng, out.shape);

    auto weighted = [&](const Tensor& o) {
        double acc = 0;
        for (std::size_t i = 0; i < o.data.size(); ++i) acc += o.data[i] * w.data[i];
        return acc;
    };

    Conv2dGrads g = conv2d_backward(w, in, k, 1);

    Tensor fd_in = finite_diff([&](const Tensor& x) { return weighted(conv2d(x, k, b, 1)); }, in);
    Tensor fd_k = finite_diff([&](const Tensor& x) { return weighted(conv2d(in, x, b, 1)); }, k);
    Tensor fd_b = finite_diff([&](const Tensor& x) { return weighted(conv2d(in, k, x, 1)); }, b);

    auto max_rel = [](const Tensor& a, const Tensor& n) {
        double worst = 0;
        for (std::size_t i = 0; i < a.data.size(); ++i) {
            const double rel = std::fabs(a.data[i] - n.data[i]) /
                               std::max({std::fabs(a.data[i]), std::fabs(n.data[i]), 1e-8});
            worst = std::max(worst, rel);
        }
        return worst;
    };
    CHECK(max_rel(g.input, fd_in) <= 1e-6);
    CHECK(max_rel(g.kernels, fd_k) <= 1e-6);
    CHECK(max_rel(g.bias, fd_b) <= 1e-6);
}

TEST_CASE("softmax basics") {
    Tensor t({3}, {0.0, 0.0, 0.0});
    Tensor y = softmax(t, 0);
    for (std::int64_t i = 0; i < 3; ++i) CHECK(y(i) == doctest::Approx(1.0 / 3).epsilon(1e-14));

    Tensor t2({2}, {0.0, std::log(2.0)});
    Tensor y2 = softmax(t2, 0);
    CHECK(y2(0) == doctest::Approx(1.0 / 3).epsilon(1e-14));
    CHECK(y2(1) == doctest::Approx(2.0 / 3).epsilon(1e-14));

    Tensor t3({2}, {1000.0, 1000.0});
    Tensor y3 = softmax(t3, 0);
    CHECK(y3(0) == doctest::Approx(0.5).epsilon(1e-14));
    CHECK(y3(1) == doctest::Approx(0.5).epsilon(1e-14));
    CHECK(y3.all_finite());
}

TEST_CASE("softmax sums to one and is shift invariant") {
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor t = random_tensor(rng, {4, 6}, -5.0, 5.0);
        Tensor y = softmax(t, 1);
        for (std::int64_t i = 0; i < 4; ++i) {
            double sum = 0;
            for (std::int64_t j = 0; j < 6; ++j) {
                sum += y(i, j);
                CHECK(y(i, j) > 0.0);
                CHECK(y(i, j) < 1.0);
            }
            CHECK(std::fabs(sum - 1.0) <= 1e-12);
        }
        const double shift = rng.uniform(-100.0, 100.0);
        Tensor t2 = t;
        for (double& v : t2.data) v += shift;
        Tensor y2 = softmax(t2, 1);
        for (std::size_t i = 0; i < y.data.size(); ++i) {
            CHECK(std::fabs(y.data[i] - y2.data[i]) <= 1e-12);
        }
    }
}

TEST_CASE("vector_norm closed forms") {
    Tensor v({2}, {3.0, 4.0});
    CHECK(vector_norm(v, 2.0) == doctest::Approx(5.0).epsilon(1e-15));
    CHECK(vector_norm(v, 1.0) == doctest::Approx(7.0).epsilon(1e-15));
    Tensor v2({2}, {3.0, -4.0});
    CHECK(vector_norm(v2, kInf) == doctest::Approx(4.0).epsilon(1e-15));
}

TEST_CASE("vector_norm rejects fractional p") {
    Tensor v({2}, {1.0, 1.0});
    CHECK_THROWS_AS(vector_norm(v, 2.5), std::invalid_argument);
    CHECK_THROWS_AS(vector_norm(v, 0.0), std::invalid_argument);
}

TEST_CASE("vector_norm large p does not overflow") {
    Tensor v({3}, {1e200, 2e200, -3e200});
    const double n = vector_norm(v, 10.0);
    CHECK(std::isfinite(n));
    CHECK(n >= 3e200);
}

TEST_CASE("vector_norm properties: triangle, homogeneity, monotone limit to inf") {
    Rng rng(23);
    const double ps[] = {1, 2, 4, 8, 16, 64};
    for (int trial = 0; trial < 40; ++trial) {
        Tensor a = random_tensor(rng, {6}, -2.0, 2.0);
        Tensor b = random_tensor(rng, {6}, -2.0, 2.0);
        Tensor sum({6});
        for (std::int64_t i = 0; i < 6; ++i) sum(i) = a(i) + b(i);
        const double alpha = rng.uniform(-3.0, 3.0);
        Tensor scaled({6});
        for (std::int64_t i = 0; i < 6; ++i) scaled(i) = alpha * a(i);

        for (double p : ps) {
            CHECK(vector_norm(sum, p) <= vector_norm(a, p) + vector_norm(b, p) + 1e-12);
            CHECK(vector_norm(scaled, p) ==
                  doctest::Approx(std::fabs(alpha) * vector_norm(a, p)).epsilon(1e-12));
        }

        const double ninf = vector_norm(a, kInf);
        double prev = std::numeric_limits<double>::infinity();
        for (double p : ps) {
            const double np = vector_norm(a, p);
            CHECK(np >= ninf - 1e-12);  // approaches from above
            CHECK(np <= prev + 1e-12);  // monotone in p
            prev = np;
        }
    }
}

TEST_CASE("matvec_votes identity and closed forms") {
    const std::int64_t nin = 3, nout = 2, d = 4;
    Tensor W({nin, nout, d, d});
    for (std::int64_t i = 0; i < nin; ++i)
        for (std::int64_t j = 0; j < nout; ++j)
            for (std::int64_t k = 0; k < d; ++k) W(i, j, k, k) = 1.0;
    Rng rng(7);
    Tensor u = random_tensor(rng, {nin, d});
    Tensor out = matvec_votes(W, u);
    for (std::int64_t i = 0; i < nin; ++i)
        for (std::int64_t j = 0; j < nout; ++j)
            for (std::int64_t k = 0; k < d; ++k)
                CHECK(out(i, j, k) == doctest::Approx(u(i, k)).epsilon(1e-15));

    Tensor zeros({nin, d});
    Tensor out0 = matvec_votes(W, zeros);
    for (double v : out0.data) CHECK(v == 0.0);

    Tensor W1({1, 1, 2, 2}, {2.0, 0.0, 0.0, 3.0});
    Tensor u1({1, 2}, {1.0, 1.0});
    Tensor o1 = matvec_votes(W1, u1);
    CHECK(o1(0, 0, 0) == doctest::Approx(2.0).epsilon(1e-15));
    CHECK(o1(0, 0, 1) == doctest::Approx(3.0).epsilon(1e-15));

    Tensor bad({nin, d + 1});
    CHECK_THROWS_AS(matvec_votes(W, bad), std::invalid_argument);
}
