#ifndef CAPSKIT_VERIFY_HPP_
#define CAPSKIT_VERIFY_HPP_

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "capskit/tensor.hpp"

namespace capskit {

struct GradReport {
    std::string op;
    int trials = 0;
    double max_rel_err = 0;
    double max_abs_err = 0;
    std::int64_t worst_index = -1;
    double threshold = 0;
    bool pass = false;
};

/* Central differences per coordinate: (f(x+eps e_k) - f(x-eps e_k)) / (2 eps).
 * Never touches analytic backward code. Throws when f goes non-finite,
 * naming the coordinate. */
Tensor finite_diff(const std::function<double(const Tensor&)>& f, const Tensor& theta,
                   double epsilon = 1e-5);

/* Run one registered check: seeded random trials at small shapes, analytic
 * vs finite differences, rel err = |a-n| / max(|a|,|n|,1e-8). Failures are
 * reported, not thrown. */
GradReport check_op(const std::string& name, int trials, std::uint64_t seed, double threshold);

const std::vector<std::string>& registered_ops();
double default_threshold(const std::string& name);

/* Every registered op whose name contains `filter` (empty = all). */
std::vector<GradReport> run_checks(const std::string& filter, int trials, std::uint64_t seed);

/* Registers a deliberately wrong backward so the failure path is testable. */
void register_fault_fixture();

std::string reports_to_csv(const std::vector<GradReport>& reports);

}  // namespace capskit

#endif  // CAPSKIT_VERIFY_HPP_
