#include <doctest.h>

#include <cmath>
#include <stdexcept>
#include <string>

#include "capskit/verify.hpp"

using namespace capskit;

TEST_CASE("finite differences on analytic functions") {
    Tensor x({1}, {3.0});
    Tensor g = finite_diff([](const Tensor& t) { return t(0) * t(0); }, x);
    CHECK(std::fabs(g(0) - 6.0) <= 1e-9);

    Tensor y({4}, {1.0, -2.0, 0.5, 3.0});
    Tensor gc = finite_diff([](const Tensor&) { return 42.0; }, y);
    for (double v : gc.data) CHECK(v == 0.0);

    Tensor z({3}, {1.0, 2.0, 3.0});
    Tensor gz = finite_diff(
        [](const Tensor& t) {
            double s = 0;
            for (double v : t.data) s += v * v;
            return s;
        },
        z);
    CHECK(std::fabs(gz(0) - 2.0) <= 1e-8);
    CHECK(std::fabs(gz(1) - 4.0) <= 1e-8);
    CHECK(std::fabs(gz(2) - 6.0) <= 1e-8);
}

TEST_CASE("finite_diff rejects bad epsilon and non-finite evaluations") {
    Tensor x({2}, {1.0, 1.0});
    CHECK_THROWS_AS(finite_diff([](const Tensor& t) { return t(0); }, x, 0.0),
                    std::invalid_argument);
    try {
        finite_diff([](const Tensor& t) { return std::log(t(0) - 10.0); }, x);
        FAIL("expected oracle error");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("coordinate 0") != std::string::npos);
    }
}

TEST_CASE("registry covers every backward family") {
    const auto& ops = registered_ops();
    auto has = [&](const std::string& n) {
        for (const auto& o : ops)
            if (o == n) return true;
        return false;
    };
    CHECK(has("conv2d_backward"));
    CHECK(has("squash_s1_backward"));
    CHECK(has("squash_s2_backward"));
    CHECK(has("squash_s10_backward"));
    CHECK(has("squash_sinf_backward"));
    CHECK(has("dynamic_routing_backward"));
    CHECK(has("dynamic_routing_backward_kl"));
    CHECK(has("self_routing_backward"));
    CHECK(has("capsnet_backward_s2_dynamic"));
    CHECK(has("capsnet_backward_sinf_self"));
    CHECK_THROWS_AS(check_op("no_such_op", 1, 1, 1e-6), std::invalid_argument);
}

TEST_CASE("spot checks hold their thresholds") {
    GradReport r = check_op("squash_s2_backward", 50, 7, 1e-6);
    CHECK(r.pass);
    CHECK(r.max_rel_err <= 1e-6);

    GradReport rt = check_op("dynamic_routing_backward", 10, 11, 1e-5);
    CHECK(rt.pass);

    GradReport ri = check_op("squash_sinf_backward", 50, 13, 1e-6);
    CHECK(ri.pass);
}

TEST_CASE("filtered runs restrict to matching ops") {
    auto reports = run_checks("squash", 3, 5);
    CHECK(!reports.empty());
    for (const auto& r : reports) {
        CHECK(r.op.find("squash") != std::string::npos);
        CHECK(r.pass);
    }
}

TEST_CASE("the fault fixture is caught by the oracle") {
    register_fault_fixture();
    GradReport r = check_op("fault_fixture", 5, 3, 1e-6);
    CHECK_FALSE(r.pass);
    CHECK(r.max_rel_err > 1e-3);
}

TEST_CASE("report csv dialect") {
    GradReport r;
    r.op = "demo";
    r.trials = 5;
    r.max_rel_err = 1e-9;
    r.max_abs_err = 2e-9;
    r.pass = true;
    const std::string csv = reports_to_csv({r});
    CHECK(csv.find("op,trials,max_rel_err,max_abs_err,pass") == 0);
    CHECK(csv.find("demo,5,") != std::string::npos);
    CHECK(csv.find(",1\n") != std::string::npos);
}
