#include <doctest.h>

#include <cmath>
#include <stdexcept>
#include <cstring>

#include "capskit/capsnet.hpp"
#include "capskit/rng.hpp"

using namespace capskit;

namespace {

Tensor random_tensor(Rng& rng, std::vector<std::int64_t> shape, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

double norm2_row(const Tensor& t, std::int64_t row) {
    double s = 0;
    for (std::int64_t k = 0; k < t.dim(1); ++k) s += t(row, k) * t(row, k);
    return std::sqrt(s);
}

}  // namespace

TEST_CASE("dynamic routing with a single class forces full coupling") {
    // two inputs, both voting (2,0): s = (4,0), v = (16/17)(1,0)
    Tensor u_hat({2, 1, 2}, {2.0, 0.0, 2.0, 0.0});
    RoutingOutput out = dynamic_routing(u_hat, 3, SquashSpec::norm_m(2));
    CHECK(out.c(0, 0) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(out.c(1, 0) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(out.v(0, 0) == doctest::Approx(16.0 / 17.0).epsilon(1e-12));
    CHECK(out.v(0, 1) == 0.0);
}

TEST_CASE("dynamic routing with zero votes keeps couplings uniform") {
    Tensor u_hat({3, 4, 2});
    RoutingTrace trace;
    RoutingOutput out = dynamic_routing(u_hat, 3, SquashSpec::norm_m(2), nullptr, &trace);
    for (const Tensor& c : trace.c) {
        for (double v : c.data) CHECK(v == doctest::Approx(0.25).epsilon(1e-14));
    }
    for (double v : out.v.data) CHECK(v == 0.0);
}

TEST_CASE("dynamic routing suppresses the disagreeing vote (2x2 hand trace)") {
    // u_hat[i][j]: input 1 votes (1,0) to both classes; input 2 votes (1,0)
    // to A and (-1,0) to B. Expected couplings from the frozen hand trace.
    Tensor u_hat({2, 2, 2}, {1.0, 0.0, 1.0, 0.0,    // i=0: A, B
                             1.0, 0.0, -1.0, 0.0});  // i=1: A, B
    RoutingTrace trace;
    RoutingOutput out = dynamic_routing(u_hat, 3, SquashSpec::norm_m(2), nullptr, &trace);

    CHECK(out.c(1, 0) > out.c(1, 1));
    CHECK(out.c(1, 0) == doctest::Approx(0.7517216912687424).epsilon(1e-12));
    CHECK(out.c(1, 1) == doctest::Approx(0.24827830873125759).epsilon(1e-12));

    // agreement monotonicity across the three iterations
    REQUIRE(trace.c.size() == 3);
    CHECK(trace.c[0](1, 0) == doctest::Approx(0.5).epsilon(1e-14));
    CHECK(trace.c[1](1, 0) == doctest::Approx(0.6224593312018546).epsilon(1e-12));
    CHECK(trace.c[0](1, 0) < trace.c[1](1, 0));
    CHECK(trace.c[1](1, 0) < trace.c[2](1, 0));
    CHECK(trace.c[0](1, 1) > trace.c[1](1, 1));
    CHECK(trace.c[1](1, 1) > trace.c[2](1, 1));
}

TEST_CASE("coupling rows stay on the simplex at every iteration") {
    Rng rng(41);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor u_hat = random_tensor(rng, {5, 3, 4}, -2.0, 2.0);
        RoutingTrace trace;
        dynamic_routing(u_hat, 4, SquashSpec::norm_m(2), nullptr, &trace);
        for (const Tensor& c : trace.c) {
            for (std::int64_t i = 0; i < 5; ++i) {
                double sum = 0;
                for (std::int64_t j = 0; j < 3; ++j) {
                    sum += c(i, j);
                    CHECK(c(i, j) > 0.0);
                    CHECK(c(i, j) < 1.0);
                }
                CHECK(std::fabs(sum - 1.0) <= 1e-10);
            }
        }
    }
}

TEST_CASE("single routing iteration equals uniform average plus squash") {
    Rng rng(43);
    for (int trial = 0; trial < 20; ++trial) {
        const std::int64_t nin = 4, nout = 3, dout = 5;
        Tensor u_hat = random_tensor(rng, {nin, nout, dout}, -2.0, 2.0);
        RoutingOutput out = dynamic_routing(u_hat, 1, SquashSpec::norm_m(2));
        for (std::int64_t j = 0; j < nout; ++j) {
            Tensor s({dout});
            for (std::int64_t i = 0; i < nin; ++i) {
                for (std::int64_t d = 0; d < dout; ++d) s(d) += u_hat(i, j, d) / nout;
            }
            Tensor v = squash_norm_m(s, 2);
            for (std::int64_t d = 0; d < dout; ++d) {
                CHECK(std::fabs(out.v(j, d) - v(d)) <= 1e-12);
            }
        }
    }
}

TEST_CASE("routing backward: zero gradient in, zero gradient out") {
    Rng rng(47);
    Tensor u_hat = random_tensor(rng, {3, 2, 4});
    RoutingTrace trace;
    dynamic_routing(u_hat, 3, SquashSpec::norm_m(2), nullptr, &trace);
    Tensor g_v({2, 4});
    Tensor g = dynamic_routing_backward(trace, u_hat, nullptr, g_v);
    for (double v : g.data) CHECK(v == 0.0);
}

TEST_CASE("single-iteration routing backward matches the closed form") {
    Rng rng(53);
    const std::int64_t nin = 3, nout = 2, dout = 4;
    Tensor u_hat = random_tensor(rng, {nin, nout, dout});
    RoutingTrace trace;
    dynamic_routing(u_hat, 1, SquashSpec::norm_m(2), nullptr, &trace);
    Tensor g_v = random_tensor(rng, {nout, dout});
    Tensor g = dynamic_routing_backward(trace, u_hat, nullptr, g_v);

    // closed form: v_j = squash(sum_i u_ij / nout)
    for (std::int64_t j = 0; j < nout; ++j) {
        Tensor s({dout});
        for (std::int64_t i = 0; i < nin; ++i)
            for (std::int64_t d = 0; d < dout; ++d) s(d) += u_hat(i, j, d) / nout;
        Tensor gj({dout});
        for (std::int64_t d = 0; d < dout; ++d) gj(d) = g_v(j, d);
        Tensor gs = squash_backward(s, SquashSpec::norm_m(2), gj);
        for (std::int64_t i = 0; i < nin; ++i) {
            for (std::int64_t d = 0; d < dout; ++d) {
                CHECK(std::fabs(g(i, j, d) - gs(d) / nout) <= 1e-12);
            }
        }
    }
}

TEST_CASE("self routing: zero routing matrix gives uniform couplings") {
    const ArchConfig arch = ArchConfig::tiny();
    const RoutingSpec routing = RoutingSpec::self_routing(SquashSpec::norm_m(2));
    CapsNetParams params = CapsNetParams::init(arch, routing, 7);
    params.w_route->fill(0.0);
    Rng rng(3);
    Tensor u = random_tensor(rng, {arch.num_primary_caps(), arch.primary_dim});
    RoutingOutput out = self_routing(u, params, routing.squash);
    for (double c : out.c.data) {
        CHECK(c == doctest::Approx(1.0 / static_cast<double>(arch.num_classes)).epsilon(1e-14));
    }
}

TEST_CASE("self routing single-class and analytic two-class composition") {
    // Nout = 1: coupling is 1, v = squash(sum of votes)
    Tensor W1({2, 1, 2, 2}, {1, 0, 0, 1, 1, 0, 0, 1});
    CapsNetParams p1;
    p1.W = W1;
    p1.w_route = Tensor({2, 2, 1});
    Tensor u1({2, 2}, {0.3, 0.1, 0.2, 0.4});
    RoutingOutput o1 = self_routing(u1, p1, SquashSpec::norm_m(2));
    CHECK(o1.c(0, 0) == doctest::Approx(1.0).epsilon(1e-15));
    Tensor s({2}, {0.5, 0.5});
    Tensor expect = squash_norm_m(s, 2);
    CHECK(o1.v(0, 0) == doctest::Approx(expect(0)).epsilon(1e-12));
    CHECK(o1.v(0, 1) == doctest::Approx(expect(1)).epsilon(1e-12));

    // Nin = 1, Nout = 2, logits (0, ln 2) -> c = (1/3, 2/3)
    CapsNetParams p2;
    p2.W = Tensor({1, 2, 2, 2}, {1, 0, 0, 1, 1, 0, 0, 1});  // identity votes
    p2.w_route = Tensor({1, 2, 2});
    (*p2.w_route)(0, 0, 0) = 0.0;
    (*p2.w_route)(0, 0, 1) = std::log(2.0);
    Tensor u2({1, 2}, {1.0, 0.0});
    RoutingOutput o2 = self_routing(u2, p2, SquashSpec::norm_m(2));
    CHECK(o2.c(0, 0) == doctest::Approx(1.0 / 3).epsilon(1e-12));
    CHECK(o2.c(0, 1) == doctest::Approx(2.0 / 3).epsilon(1e-12));
    for (std::int64_t j = 0; j < 2; ++j) {
        Tensor sj({2}, {o2.c(0, j) * u2(0, 0), o2.c(0, j) * u2(0, 1)});
        Tensor vj = squash_norm_m(sj, 2);
        CHECK(o2.v(j, 0) == doctest::Approx(vj(0)).epsilon(1e-12));
        CHECK(o2.v(j, 1) == doctest::Approx(vj(1)).epsilon(1e-12));
    }
}

TEST_CASE("self routing requires the routing matrix") {
    const ArchConfig arch = ArchConfig::tiny();
    CapsNetParams params =
        CapsNetParams::init(arch, RoutingSpec::dynamic(3, SquashSpec::norm_m(2)), 7);
    Rng rng(3);
    Tensor u = random_tensor(rng, {arch.num_primary_caps(), arch.primary_dim});
    CHECK_THROWS_AS(self_routing(u, params, SquashSpec::norm_m(2)), std::invalid_argument);
}

TEST_CASE("primary caps shape on the full MNIST plan") {
    const ArchConfig arch = ArchConfig::full();
    CHECK(arch.num_primary_caps() == 1152);
    CHECK(arch.primary_h() == 6);
    CHECK(arch.primary_w() == 6);

    Tensor features({arch.primary_types * arch.primary_dim, 6, 6});
    Tensor u = primary_caps(features, arch, SquashSpec::norm_m(2));
    CHECK(u.shape == std::vector<std::int64_t>{1152, 8});
    for (double v : u.data) CHECK(v == 0.0);  // zero features -> zero capsules
}

TEST_CASE("primary caps activity norms stay below one") {
    const ArchConfig arch = ArchConfig::tiny();
    Rng rng(9);
    Tensor features =
        random_tensor(rng, {arch.primary_types * arch.primary_dim, arch.primary_h(),
                            arch.primary_w()},
                      -4.0, 4.0);
    Tensor u = primary_caps(features, arch, SquashSpec::norm_m(2));
    for (std::int64_t i = 0; i < u.dim(0); ++i) CHECK(norm2_row(u, i) < 1.0);
}

TEST_CASE("forward: bounded scores, purity, determinism") {
    const ArchConfig arch = ArchConfig::tiny();
    const RoutingSpec routing = RoutingSpec::dynamic(3, SquashSpec::norm_m(2));
    CapsNetParams params = CapsNetParams::init(arch, routing, 1234);
    Rng rng(5);
    Tensor image = random_tensor(rng, {1, 4, 4}, 0.0, 1.0);

    ForwardResult a = forward(image, params, arch, routing);
    ForwardResult b = forward(image, params, arch, routing);
    for (std::int64_t j = 0; j < a.class_scores.size(); ++j) {
        CHECK(a.class_scores(j) >= 0.0);
        CHECK(a.class_scores(j) < 1.0);
    }
    CHECK(std::memcmp(a.class_scores.data.data(), b.class_scores.data.data(),
                      a.class_scores.data.size() * sizeof(double)) == 0);
    CHECK(a.prediction == b.prediction);

    CapsNetParams params2 = CapsNetParams::init(arch, routing, 1234);
    ForwardResult c = forward(image, params2, arch, routing);
    CHECK(std::memcmp(a.class_scores.data.data(), c.class_scores.data.data(),
                      a.class_scores.data.size() * sizeof(double)) == 0);
}

TEST_CASE("forward rejects mis-shaped images") {
    const ArchConfig arch = ArchConfig::tiny();
    const RoutingSpec routing = RoutingSpec::dynamic(3, SquashSpec::norm_m(2));
    CapsNetParams params = CapsNetParams::init(arch, routing, 1);
    Tensor wrong({1, 5, 5});
    CHECK_THROWS_AS(forward(wrong, params, arch, routing), std::invalid_argument);
}

TEST_CASE("margin loss closed forms") {
    Tensor perfect({10});
    perfect.fill(0.1);
    perfect(3) = 0.9;
    CHECK(margin_loss(perfect, 3) == doctest::Approx(0.0).epsilon(1e-15));

    Tensor one_wrong = perfect;
    one_wrong(7) = 0.2;
    CHECK(margin_loss(one_wrong, 3) == doctest::Approx(0.005).epsilon(1e-12));

    Tensor zeros({10});
    CHECK(margin_loss(zeros, 0) == doctest::Approx(0.81).epsilon(1e-12));

    CHECK_THROWS_AS(margin_loss(zeros, 10), std::invalid_argument);
    CHECK_THROWS_AS(margin_loss(zeros, -1), std::invalid_argument);
}

TEST_CASE("inactive hinges give exactly zero parameter gradients") {
    const ArchConfig arch = ArchConfig::tiny();
    const RoutingSpec routing = RoutingSpec::dynamic(3, SquashSpec::norm_m(2));
    CapsNetParams params = CapsNetParams::init(arch, routing, 3);
    Rng rng(5);
    Tensor image = random_tensor(rng, {1, 4, 4}, 0.0, 1.0);
    ForwardTrace trace;
    forward(image, params, arch, routing, &trace);

    // force the zero-loss regime: target score at m+, all others at m-
    trace.scores.fill(0.05);
    trace.scores(1) = 0.95;
    CHECK(margin_loss(trace.scores, 1) == 0.0);
    CapsNetParams g = backward(trace, params, arch, routing, 1);
    g.for_each_tensor([](const Tensor& t) {
        for (double v : t.data) CHECK(v == 0.0);
    });
}

TEST_CASE("network argmax is stable across reruns") {
    const ArchConfig arch = ArchConfig::tiny();
    for (bool self_route : {false, true}) {
        const RoutingSpec routing = self_route
                                        ? RoutingSpec::self_routing(SquashSpec::norm_m(2))
                                        : RoutingSpec::dynamic(3, SquashSpec::norm_m(2));
        CapsNetParams params = CapsNetParams::init(arch, routing, 99);
        Rng rng(17);
        for (int trial = 0; trial < 10; ++trial) {
            Tensor image = random_tensor(rng, {1, 4, 4}, 0.0, 1.0);
            const int p1 = forward(image, params, arch, routing).prediction;
            Tensor image2 = image;
            for (double& v : image2.data) v *= 1.0;
            const int p2 = forward(image2, params, arch, routing).prediction;
            CHECK(p1 == p2);
        }
    }
}

TEST_CASE("kl squash routes and differentiates inside the network") {
    const ArchConfig arch = ArchConfig::tiny();
    const RoutingSpec routing = RoutingSpec::dynamic(3, SquashSpec::kl());
    CapsNetParams params = CapsNetParams::init(arch, routing, 21);
    Rng rng(23);
    Tensor image = random_tensor(rng, {1, 4, 4}, 0.0, 1.0);
    ForwardTrace trace;
    ForwardResult out = forward(image, params, arch, routing, &trace);
    CHECK(out.class_scores.all_finite());
    CapsNetParams g = backward(trace, params, arch, routing, 0);
    CHECK(g.all_finite());
}

TEST_CASE("self routing rejects the kl squash") {
    CHECK_THROWS_AS(
        [] {
            const ArchConfig arch = ArchConfig::tiny();
            const RoutingSpec routing = RoutingSpec::self_routing(SquashSpec::kl());
            CapsNetParams params = CapsNetParams::init(arch, routing, 3);
            Tensor u({arch.num_primary_caps(), arch.primary_dim});
            self_routing(u, params, routing.squash);
        }(),
        std::invalid_argument);
}
