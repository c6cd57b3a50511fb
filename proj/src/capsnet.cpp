#include "capskit/capsnet.hpp"

#include <cmath>
#include <stdexcept>

#include "capskit/rng.hpp"

namespace capskit {

namespace {

constexpr double kEps = 1e-12;
constexpr double kMarginPlus = 0.9;
constexpr double kMarginMinus = 0.1;
constexpr double kMarginLambda = 0.5;

// The Kl formula lives at the routing layer; primaries fall back to m = 2.
SquashSpec primary_squash(const SquashSpec& spec) {
    return spec.variant == SquashVariant::Kl ? SquashSpec::norm_m(2) : spec;
}

Tensor glorot_uniform(std::vector<std::int64_t> shape, std::int64_t fan_in,
                      std::int64_t fan_out, Rng& rng) {
    Tensor t(std::move(shape));
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (double& v : t.data) v = rng.uniform(-a, a);
    return t;
}

}  // namespace

ArchConfig ArchConfig::full(std::int64_t channels, std::int64_t h, std::int64_t w) {
    ArchConfig a;
    a.in_channels = channels;
    a.in_h = h;
    a.in_w = w;
    return a;
}

ArchConfig ArchConfig::reduced(std::int64_t channels, std::int64_t h, std::int64_t w) {
    ArchConfig a = full(channels, h, w);
    a.conv1_filters = 64;
    a.primary_types = 8;
    return a;
}

ArchConfig ArchConfig::tiny() {
    ArchConfig a;
    a.in_channels = 1;
    a.in_h = 4;
    a.in_w = 4;
    a.conv1_filters = 2;
    a.conv1_kernel = 3;
    a.conv1_stride = 1;
    a.primary_types = 2;
    a.primary_dim = 2;
    a.primary_kernel = 2;
    a.primary_stride = 1;
    a.num_classes = 2;
    a.class_dim = 2;
    return a;
}

std::optional<ArchConfig> ArchConfig::preset(const std::string& name, std::int64_t channels,
                                             std::int64_t h, std::int64_t w,
                                             std::int64_t classes) {
    ArchConfig a;
    if (name == "full") {
        a = full(channels, h, w);
    } else if (name == "reduced") {
        a = reduced(channels, h, w);
    } else if (name == "tiny") {
        a = tiny();
    } else {
        return std::nullopt;
    }
    if (name != "tiny") a.num_classes = classes;
    return a;
}

void ArchConfig::validate() const {
    if (in_h < conv1_kernel || in_w < conv1_kernel) {
        throw std::invalid_argument("arch: conv1 kernel does not fit the input");
    }
    if (conv1_h() < primary_kernel || conv1_w() < primary_kernel) {
        throw std::invalid_argument("arch: primary kernel does not fit conv1 output");
    }
    if (num_classes < 2 || class_dim < 1 || primary_types < 1 || primary_dim < 1) {
        throw std::invalid_argument("arch: degenerate layer sizes");
    }
}

RoutingSpec RoutingSpec::dynamic(int iterations, SquashSpec squash) {
    if (iterations < 1) throw std::invalid_argument("routing: iterations must be >= 1");
    return {Method::Dynamic, iterations, squash};
}

RoutingSpec RoutingSpec::self_routing(SquashSpec squash) {
    return {Method::SelfRouting, 1, squash};
}

std::string RoutingSpec::method_name() const {
    return method == Method::Dynamic ? "dynamic" : "self";
}

CapsNetParams CapsNetParams::init(const ArchConfig& arch, const RoutingSpec& routing,
                                  std::uint64_t seed) {
    arch.validate();
    Rng rng(seed);
    CapsNetParams p;
    const std::int64_t c1_fan_in = arch.in_channels * arch.conv1_kernel * arch.conv1_kernel;
    const std::int64_t c1_fan_out = arch.conv1_filters * arch.conv1_kernel * arch.conv1_kernel;
    p.conv1_kernels = glorot_uniform(
        {arch.conv1_filters, arch.in_channels, arch.conv1_kernel, arch.conv1_kernel}, c1_fan_in,
        c1_fan_out, rng);
    p.conv1_bias = Tensor({arch.conv1_filters});

    const std::int64_t prim_ch = arch.primary_types * arch.primary_dim;
    const std::int64_t p_fan_in = arch.conv1_filters * arch.primary_kernel * arch.primary_kernel;
    const std::int64_t p_fan_out = prim_ch * arch.primary_kernel * arch.primary_kernel;
    p.primary_kernels =
        glorot_uniform({prim_ch, arch.conv1_filters, arch.primary_kernel, arch.primary_kernel},
                       p_fan_in, p_fan_out, rng);
    p.primary_bias = Tensor({prim_ch});

    const std::int64_t nin = arch.num_primary_caps();
    p.W = glorot_uniform({nin, arch.num_classes, arch.class_dim, arch.primary_dim},
                         arch.primary_dim, arch.class_dim, rng);
    if (routing.method == RoutingSpec::Method::SelfRouting) {
        p.w_route = glorot_uniform({nin, arch.primary_dim, arch.num_classes}, arch.primary_dim,
                                   arch.num_classes, rng);
    }
    return p;
}

CapsNetParams CapsNetParams::zeros_like(const CapsNetParams& p) {
    CapsNetParams z;
    z.conv1_kernels = Tensor(p.conv1_kernels.shape);
    z.conv1_bias = Tensor(p.conv1_bias.shape);
    z.primary_kernels = Tensor(p.primary_kernels.shape);
    z.primary_bias = Tensor(p.primary_bias.shape);
    z.W = Tensor(p.W.shape);
    if (p.w_route) z.w_route = Tensor(p.w_route->shape);
    return z;
}

std::int64_t CapsNetParams::total_size() const {
    std::int64_t n = 0;
    for_each_tensor([&](const Tensor& t) { n += t.size(); });
    return n;
}

bool CapsNetParams::all_finite() const {
    bool ok = true;
    for_each_tensor([&](const Tensor& t) { ok = ok && t.all_finite(); });
    return ok;
}

RoutingOutput dynamic_routing(const Tensor& u_hat, int iterations, const SquashSpec& squash,
                              const Tensor* o_hat, RoutingTrace* trace) {
    if (u_hat.rank() != 3) throw std::invalid_argument("dynamic_routing: u_hat must be [Nin,Nout,dout]");
    if (iterations < 1) throw std::invalid_argument("dynamic_routing: iterations must be >= 1");
    const bool kl = squash.variant == SquashVariant::Kl;
    if (kl && o_hat == nullptr) {
        throw std::invalid_argument("dynamic_routing: Kl squash needs the o_hat aggregates");
    }
    if (kl && !o_hat->same_shape(u_hat)) {
        throw std::invalid_argument("dynamic_routing: o_hat shape mismatch");
    }
    const std::int64_t nin = u_hat.dim(0), nout = u_hat.dim(1), dout = u_hat.dim(2);

    if (trace) {
        trace->iterations = iterations;
        trace->squash = squash;
        trace->c.clear();
        trace->s.clear();
        trace->v.clear();
        trace->sigma.clear();
    }

    Tensor b({nin, nout});  // log priors start at zero = uniform coupling
    Tensor c, s({nout, dout}), v({nout, dout}), sigma;
    for (int t = 0; t < iterations; ++t) {
        c = softmax(b, 1);
        s.fill(0.0);
        for (std::int64_t i = 0; i < nin; ++i) {
            for (std::int64_t j = 0; j < nout; ++j) {
                const double cij = c(i, j);
                const double* uv = &u_hat.data[static_cast<std::size_t>((i * nout + j) * dout)];
                double* sj = &s.data[static_cast<std::size_t>(j * dout)];
                for (std::int64_t dd = 0; dd < dout; ++dd) sj[dd] += cij * uv[dd];
            }
        }
        if (kl) {
            sigma = Tensor({nout, dout});
            for (std::int64_t i = 0; i < nin; ++i) {
                for (std::int64_t j = 0; j < nout; ++j) {
                    const double cij = c(i, j);
                    const double* ov = &o_hat->data[static_cast<std::size_t>((i * nout + j) * dout)];
                    double* sj = &sigma.data[static_cast<std::size_t>(j * dout)];
                    for (std::int64_t dd = 0; dd < dout; ++dd) sj[dd] += cij * ov[dd];
                }
            }
            v = squash_kl(s, sigma);
        } else {
            for (std::int64_t j = 0; j < nout; ++j) {
                detail::squash_row(&s.data[static_cast<std::size_t>(j * dout)],
                                   &v.data[static_cast<std::size_t>(j * dout)], dout, squash);
            }
        }
        if (trace) {
            trace->c.push_back(c);
            trace->s.push_back(s);
            trace->v.push_back(v);
            if (kl) trace->sigma.push_back(sigma);
        }
        if (t + 1 < iterations) {
            // agreement update: b_ij += v_j . u_hat_ij
            for (std::int64_t i = 0; i < nin; ++i) {
                for (std::int64_t j = 0; j < nout; ++j) {
                    const double* uv = &u_hat.data[static_cast<std::size_t>((i * nout + j) * dout)];
                    const double* vj = &v.data[static_cast<std::size_t>(j * dout)];
                    double agree = 0.0;
                    for (std::int64_t dd = 0; dd < dout; ++dd) agree += vj[dd] * uv[dd];
                    b(i, j) += agree;
                }
            }
        }
    }
    return {v, c, b};
}

Tensor dynamic_routing_backward(const RoutingTrace& trace, const Tensor& u_hat,
                                const Tensor* o_hat, const Tensor& grad_v, Tensor* grad_o_hat) {
    const std::int64_t nin = u_hat.dim(0), nout = u_hat.dim(1), dout = u_hat.dim(2);
    const int T = trace.iterations;
    const bool kl = trace.squash.variant == SquashVariant::Kl;
    if (kl && (o_hat == nullptr || grad_o_hat == nullptr)) {
        throw std::invalid_argument("dynamic_routing_backward: Kl needs o_hat and grad_o_hat");
    }

    Tensor g_u(u_hat.shape);
    if (kl) *grad_o_hat = Tensor(u_hat.shape);
    Tensor g_b({nin, nout});  // gradient w.r.t. the logits entering iteration t+1
    Tensor g_v({nout, dout}), g_s({nout, dout}), g_c({nin, nout});

    for (int t = T - 1; t >= 0; --t) {
        const Tensor& c_t = trace.c[static_cast<std::size_t>(t)];
        const Tensor& s_t = trace.s[static_cast<std::size_t>(t)];
        const Tensor& v_t = trace.v[static_cast<std::size_t>(t)];

        if (t == T - 1) {
            g_v = grad_v;
        } else {
            // v_t fed the additive update b += v . u_hat; b itself passes through
            g_v.fill(0.0);
            for (std::int64_t i = 0; i < nin; ++i) {
                for (std::int64_t j = 0; j < nout; ++j) {
                    const double gb = g_b(i, j);
                    if (gb == 0.0) continue;
                    const double* uv = &u_hat.data[static_cast<std::size_t>((i * nout + j) * dout)];
                    const double* vj = &v_t.data[static_cast<std::size_t>(j * dout)];
                    double* gv_j = &g_v.data[static_cast<std::size_t>(j * dout)];
                    double* gu_ij = &g_u.data[static_cast<std::size_t>((i * nout + j) * dout)];
                    for (std::int64_t dd = 0; dd < dout; ++dd) {
                        gv_j[dd] += gb * uv[dd];
                        gu_ij[dd] += gb * vj[dd];
                    }
                }
            }
        }

        g_c.fill(0.0);
        if (kl) {
            const Tensor& sigma_t = trace.sigma[static_cast<std::size_t>(t)];
            // v_j = r_j s_j with r_j = n_j / (1 + max_k n_k), n_j = ||sigma_j||
            std::vector<double> n(static_cast<std::size_t>(nout));
            double max_n = 0.0;
            std::int64_t jstar = 0;
            for (std::int64_t j = 0; j < nout; ++j) {
                n[static_cast<std::size_t>(j)] =
                    vector_norm(&sigma_t.data[static_cast<std::size_t>(j * dout)], dout, 2.0);
                if (n[static_cast<std::size_t>(j)] > max_n) {
                    max_n = n[static_cast<std::size_t>(j)];
                    jstar = j;
                }
            }
            const double denom = 1.0 + max_n;
            std::vector<double> g_r(static_cast<std::size_t>(nout));
            for (std::int64_t j = 0; j < nout; ++j) {
                const double r = n[static_cast<std::size_t>(j)] / denom;
                double gr = 0.0;
                for (std::int64_t dd = 0; dd < dout; ++dd) {
                    g_s(j, dd) = r * g_v(j, dd);
                    gr += g_v(j, dd) * s_t(j, dd);
                }
                g_r[static_cast<std::size_t>(j)] = gr;
            }
            std::vector<double> g_n(static_cast<std::size_t>(nout));
            for (std::int64_t j = 0; j < nout; ++j) {
                g_n[static_cast<std::size_t>(j)] = g_r[static_cast<std::size_t>(j)] / denom;
            }
            double g_max = 0.0;
            for (std::int64_t l = 0; l < nout; ++l) {
                g_max -= g_r[static_cast<std::size_t>(l)] * n[static_cast<std::size_t>(l)] /
                         (denom * denom);
            }
            g_n[static_cast<std::size_t>(jstar)] += g_max;
            Tensor g_sigma({nout, dout});
            for (std::int64_t j = 0; j < nout; ++j) {
                if (n[static_cast<std::size_t>(j)] < kEps) continue;
                const double gn_over_n = g_n[static_cast<std::size_t>(j)] / n[static_cast<std::size_t>(j)];
                for (std::int64_t dd = 0; dd < dout; ++dd) {
                    g_sigma(j, dd) = gn_over_n * sigma_t(j, dd);
                }
            }
            for (std::int64_t i = 0; i < nin; ++i) {
                for (std::int64_t j = 0; j < nout; ++j) {
                    const double cij = c_t(i, j);
                    const double* ov = &o_hat->data[static_cast<std::size_t>((i * nout + j) * dout)];
                    double* go = &grad_o_hat->data[static_cast<std::size_t>((i * nout + j) * dout)];
                    const double* gs_j = &g_sigma.data[static_cast<std::size_t>(j * dout)];
                    double acc = 0.0;
                    for (std::int64_t dd = 0; dd < dout; ++dd) {
                        acc += gs_j[dd] * ov[dd];
                        go[dd] += cij * gs_j[dd];
                    }
                    g_c(i, j) += acc;
                }
            }
        } else {
            for (std::int64_t j = 0; j < nout; ++j) {
                detail::squash_row_backward(&s_t.data[static_cast<std::size_t>(j * dout)],
                                            &g_v.data[static_cast<std::size_t>(j * dout)],
                                            &g_s.data[static_cast<std::size_t>(j * dout)], dout,
                                            trace.squash);
            }
        }

        // s_j = sum_i c_ij u_hat_ij
        for (std::int64_t i = 0; i < nin; ++i) {
            for (std::int64_t j = 0; j < nout; ++j) {
                const double cij = c_t(i, j);
                const double* uv = &u_hat.data[static_cast<std::size_t>((i * nout + j) * dout)];
                double* gu_ij = &g_u.data[static_cast<std::size_t>((i * nout + j) * dout)];
                const double* gs_j = &g_s.data[static_cast<std::size_t>(j * dout)];
                double acc = 0.0;
                for (std::int64_t dd = 0; dd < dout; ++dd) {
                    acc += gs_j[dd] * uv[dd];
                    gu_ij[dd] += cij * gs_j[dd];
                }
                g_c(i, j) += acc;
            }
        }

        // c_t = softmax(b_t) rows; accumulate into the pass-through gradient
        Tensor g_b_softmax = softmax_backward(c_t, g_c, 1);
        for (std::size_t k = 0; k < g_b.data.size(); ++k) g_b.data[k] += g_b_softmax.data[k];
    }
    return g_u;
}

RoutingOutput self_routing(const Tensor& u, const CapsNetParams& params, const SquashSpec& squash,
                           SelfRoutingTrace* trace) {
    if (!params.w_route) {
        throw std::invalid_argument("self_routing: W_route is missing from the parameters");
    }
    if (squash.variant == SquashVariant::Kl) {
        throw std::invalid_argument("self_routing: Kl squash is only defined for dynamic routing");
    }
    const Tensor& wr = *params.w_route;  // [Nin, din, Nout]
    const std::int64_t nin = u.dim(0), din = u.dim(1), nout = wr.dim(2);
    if (wr.dim(0) != nin || wr.dim(1) != din) {
        throw std::invalid_argument("self_routing: W_route shape mismatch");
    }

    Tensor z({nin, nout});
    for (std::int64_t i = 0; i < nin; ++i) {
        for (std::int64_t d = 0; d < din; ++d) {
            const double uv = u(i, d);
            const double* wrow = &wr.data[static_cast<std::size_t>((i * din + d) * nout)];
            double* zrow = &z.data[static_cast<std::size_t>(i * nout)];
            for (std::int64_t j = 0; j < nout; ++j) zrow[j] += uv * wrow[j];
        }
    }
    Tensor c = softmax(z, 1);
    Tensor u_hat = matvec_votes(params.W, u);
    const std::int64_t dout = u_hat.dim(2);
    Tensor s({nout, dout});
    for (std::int64_t i = 0; i < nin; ++i) {
        for (std::int64_t j = 0; j < nout; ++j) {
            const double cij = c(i, j);
            const double* uv = &u_hat.data[static_cast<std::size_t>((i * nout + j) * dout)];
            double* sj = &s.data[static_cast<std::size_t>(j * dout)];
            for (std::int64_t dd = 0; dd < dout; ++dd) sj[dd] += cij * uv[dd];
        }
    }
    Tensor v({nout, dout});
    for (std::int64_t j = 0; j < nout; ++j) {
        detail::squash_row(&s.data[static_cast<std::size_t>(j * dout)],
                           &v.data[static_cast<std::size_t>(j * dout)], dout, squash);
    }
    if (trace) {
        trace->z = z;
        trace->c = c;
        trace->u_hat = u_hat;
        trace->s = s;
        trace->squash = squash;
    }
    return {v, c, Tensor{}};
}

SelfRoutingGrads self_routing_backward(const SelfRoutingTrace& trace, const Tensor& u,
                                       const CapsNetParams& params, const Tensor& grad_v) {
    const Tensor& wr = *params.w_route;
    const std::int64_t nin = u.dim(0), din = u.dim(1);
    const std::int64_t nout = trace.u_hat.dim(1), dout = trace.u_hat.dim(2);

    SelfRoutingGrads g{Tensor(u.shape), Tensor(params.W.shape), Tensor(wr.shape)};

    Tensor g_s({nout, dout});
    for (std::int64_t j = 0; j < nout; ++j) {
        detail::squash_row_backward(&trace.s.data[static_cast<std::size_t>(j * dout)],
                                    &grad_v.data[static_cast<std::size_t>(j * dout)],
                                    &g_s.data[static_cast<std::size_t>(j * dout)], dout,
                                    trace.squash);
    }

    Tensor g_c({nin, nout});
    Tensor g_u_hat({nin, nout, dout});
    for (std::int64_t i = 0; i < nin; ++i) {
        for (std::int64_t j = 0; j < nout; ++j) {
            const double cij = trace.c(i, j);
            const double* uv = &trace.u_hat.data[static_cast<std::size_t>((i * nout + j) * dout)];
            double* gu = &g_u_hat.data[static_cast<std::size_t>((i * nout + j) * dout)];
            const double* gs_j = &g_s.data[static_cast<std::size_t>(j * dout)];
            double acc = 0.0;
            for (std::int64_t dd = 0; dd < dout; ++dd) {
                acc += gs_j[dd] * uv[dd];
                gu[dd] = cij * gs_j[dd];
            }
            g_c(i, j) = acc;
        }
    }

    // votes u_hat_ij = W_ij u_i
    for (std::int64_t i = 0; i < nin; ++i) {
        for (std::int64_t j = 0; j < nout; ++j) {
            for (std::int64_t dd = 0; dd < dout; ++dd) {
                const double gu = g_u_hat(i, j, dd);
                if (gu == 0.0) continue;
                for (std::int64_t e = 0; e < din; ++e) {
                    g.W(i, j, dd, e) += gu * u(i, e);
                    g.u(i, e) += gu * params.W(i, j, dd, e);
                }
            }
        }
    }

    // routing logits z_ij = sum_d W_route[i,d,j] u_id
    Tensor g_z = softmax_backward(trace.c, g_c, 1);
    for (std::int64_t i = 0; i < nin; ++i) {
        for (std::int64_t d = 0; d < din; ++d) {
            const double uv = u(i, d);
            const double* wrow = &wr.data[static_cast<std::size_t>((i * din + d) * nout)];
            double* gwrow = &g.w_route.data[static_cast<std::size_t>((i * din + d) * nout)];
            const double* gzrow = &g_z.data[static_cast<std::size_t>(i * nout)];
            double acc = 0.0;
            for (std::int64_t j = 0; j < nout; ++j) {
                gwrow[j] += gzrow[j] * uv;
                acc += gzrow[j] * wrow[j];
            }
            g.u(i, d) += acc;
        }
    }
    return g;
}

Tensor primary_caps(const Tensor& features, const ArchConfig& arch, const SquashSpec& squash) {
    const std::int64_t ph = features.dim(1), pw = features.dim(2);
    if (features.dim(0) != arch.primary_types * arch.primary_dim || ph != arch.primary_h() ||
        pw != arch.primary_w()) {
        throw std::invalid_argument("primary_caps: features shape " + features.shape_str() +
                                    " does not match the configured architecture");
    }
    const std::int64_t nin = arch.num_primary_caps();
    const std::int64_t din = arch.primary_dim;
    Tensor u({nin, din});
    const SquashSpec spec = primary_squash(squash);
    std::vector<double> row(static_cast<std::size_t>(din));
    for (std::int64_t t = 0; t < arch.primary_types; ++t) {
        for (std::int64_t y = 0; y < ph; ++y) {
            for (std::int64_t x = 0; x < pw; ++x) {
                const std::int64_t i = (t * ph + y) * pw + x;
                for (std::int64_t d = 0; d < din; ++d) row[static_cast<std::size_t>(d)] = features(t * din + d, y, x);
                detail::squash_row(row.data(), &u.data[static_cast<std::size_t>(i * din)], din, spec);
            }
        }
    }
    return u;
}

ForwardResult forward(const Tensor& image, const CapsNetParams& params, const ArchConfig& arch,
                      const RoutingSpec& routing, ForwardTrace* trace) {
    if (image.rank() != 3 || image.dim(0) != arch.in_channels || image.dim(1) != arch.in_h ||
        image.dim(2) != arch.in_w) {
        throw std::invalid_argument("forward: image shape " + image.shape_str() +
                                    " does not match the configured architecture");
    }
    const bool kl = routing.squash.variant == SquashVariant::Kl;

    Tensor conv1_pre = conv2d(image, params.conv1_kernels, params.conv1_bias, arch.conv1_stride);
    Tensor conv1_act = relu(conv1_pre);
    Tensor primary_pre = conv2d(conv1_act, params.primary_kernels, params.primary_bias,
                                arch.primary_stride);

    // reshape + per-capsule squash, keeping the raw rows for the backward pass
    const std::int64_t nin = arch.num_primary_caps();
    const std::int64_t din = arch.primary_dim;
    const std::int64_t ph = arch.primary_h(), pw = arch.primary_w();
    Tensor u_raw({nin, din});
    for (std::int64_t t = 0; t < arch.primary_types; ++t) {
        for (std::int64_t y = 0; y < ph; ++y) {
            for (std::int64_t x = 0; x < pw; ++x) {
                const std::int64_t i = (t * ph + y) * pw + x;
                for (std::int64_t d = 0; d < din; ++d) u_raw(i, d) = primary_pre(t * din + d, y, x);
            }
        }
    }
    const SquashSpec prim_spec = primary_squash(routing.squash);
    Tensor u({nin, din});
    for (std::int64_t i = 0; i < nin; ++i) {
        detail::squash_row(&u_raw.data[static_cast<std::size_t>(i * din)],
                           &u.data[static_cast<std::size_t>(i * din)], din, prim_spec);
    }

    RoutingOutput routed;
    Tensor u_hat, o_hat, w_fnorm;
    RoutingTrace rtrace;
    SelfRoutingTrace strace;
    if (routing.method == RoutingSpec::Method::Dynamic) {
        u_hat = matvec_votes(params.W, u);
        if (kl) {
            const std::int64_t nout = arch.num_classes, dout = arch.class_dim;
            w_fnorm = Tensor({nin, nout});
            for (std::int64_t i = 0; i < nin; ++i) {
                for (std::int64_t j = 0; j < nout; ++j) {
                    const double* wm = &params.W.data[static_cast<std::size_t>(
                        ((i * nout + j) * dout) * din)];
                    double ss = 0.0;
                    for (std::int64_t k = 0; k < dout * din; ++k) ss += wm[k] * wm[k];
                    w_fnorm(i, j) = std::sqrt(ss);
                }
            }
            o_hat = Tensor(u_hat.shape);
            for (std::int64_t i = 0; i < nin; ++i) {
                for (std::int64_t j = 0; j < nout; ++j) {
                    const double f = w_fnorm(i, j);
                    if (f < kEps) continue;  // o = Wu/||W||_F with W = 0 is the zero vector
                    const double inv = 1.0 / f;
                    for (std::int64_t dd = 0; dd < dout; ++dd) {
                        o_hat(i, j, dd) = u_hat(i, j, dd) * inv;
                    }
                }
            }
        }
        routed = dynamic_routing(u_hat, routing.iterations, routing.squash, kl ? &o_hat : nullptr,
                                 trace ? &rtrace : nullptr);
    } else {
        routed = self_routing(u, params, routing.squash, trace ? &strace : nullptr);
    }

    const std::int64_t nclass = routed.v.dim(0);
    Tensor scores({nclass});
    int best = 0;
    for (std::int64_t j = 0; j < nclass; ++j) {
        scores(j) = vector_norm(&routed.v.data[static_cast<std::size_t>(j * routed.v.dim(1))],
                                routed.v.dim(1), 2.0);
        if (scores(j) > scores(best)) best = static_cast<int>(j);
    }

    if (trace) {
        trace->image = image;
        trace->conv1_pre = std::move(conv1_pre);
        trace->conv1_act = std::move(conv1_act);
        trace->primary_pre = std::move(primary_pre);
        trace->u_raw = std::move(u_raw);
        trace->u = std::move(u);
        trace->u_hat = std::move(u_hat);
        trace->o_hat = std::move(o_hat);
        trace->w_fnorm = std::move(w_fnorm);
        trace->routing = std::move(rtrace);
        trace->self_rt = std::move(strace);
        trace->v = routed.v;
        trace->scores = scores;
    }
    return {routed.v, scores, best};
}

double margin_loss(const Tensor& class_scores, int label) {
    if (class_scores.rank() != 1) throw std::invalid_argument("margin_loss: scores must be 1-D");
    if (label < 0 || label >= class_scores.size()) {
        throw std::invalid_argument("margin_loss: label " + std::to_string(label) +
                                    " out of range for " + std::to_string(class_scores.size()) +
                                    " classes");
    }
    double loss = 0.0;
    for (std::int64_t j = 0; j < class_scores.size(); ++j) {
        const double sc = class_scores(j);
        if (j == label) {
            const double h = std::max(0.0, kMarginPlus - sc);
            loss += h * h;
        } else {
            const double h = std::max(0.0, sc - kMarginMinus);
            loss += kMarginLambda * h * h;
        }
    }
    return loss;
}

Tensor margin_loss_grad(const Tensor& class_scores, int label) {
    if (label < 0 || label >= class_scores.size()) {
        throw std::invalid_argument("margin_loss_grad: label out of range");
    }
    Tensor g({class_scores.size()});
    for (std::int64_t j = 0; j < class_scores.size(); ++j) {
        const double sc = class_scores(j);
        if (j == label) {
            const double h = std::max(0.0, kMarginPlus - sc);
            g(j) = -2.0 * h;
        } else {
            const double h = std::max(0.0, sc - kMarginMinus);
            g(j) = 2.0 * kMarginLambda * h;
        }
    }
    return g;
}

CapsNetParams backward(const ForwardTrace& trace, const CapsNetParams& params,
                       const ArchConfig& arch, const RoutingSpec& routing, int label) {
    const bool kl = routing.squash.variant == SquashVariant::Kl;
    const std::int64_t nin = arch.num_primary_caps();
    const std::int64_t din = arch.primary_dim;
    const std::int64_t nout = arch.num_classes, dout = arch.class_dim;

    CapsNetParams g = CapsNetParams::zeros_like(params);

    // margin loss -> class vectors (d||v||/dv = v/||v||)
    Tensor g_scores = margin_loss_grad(trace.scores, label);
    Tensor g_v({nout, dout});
    for (std::int64_t j = 0; j < nout; ++j) {
        const double sc = trace.scores(j);
        if (sc < kEps) continue;
        const double gs = g_scores(j) / sc;
        for (std::int64_t dd = 0; dd < dout; ++dd) g_v(j, dd) = gs * trace.v(j, dd);
    }

    Tensor g_u({nin, din});
    if (routing.method == RoutingSpec::Method::Dynamic) {
        Tensor g_o;
        Tensor g_u_hat = dynamic_routing_backward(trace.routing, trace.u_hat,
                                                  kl ? &trace.o_hat : nullptr, g_v,
                                                  kl ? &g_o : nullptr);
        for (std::int64_t i = 0; i < nin; ++i) {
            const double* ui = &trace.u.data[static_cast<std::size_t>(i * din)];
            double* gui = &g_u.data[static_cast<std::size_t>(i * din)];
            for (std::int64_t j = 0; j < nout; ++j) {
                const double* gu_ij = &g_u_hat.data[static_cast<std::size_t>((i * nout + j) * dout)];
                const double* wm = &params.W.data[static_cast<std::size_t>(((i * nout + j) * dout) * din)];
                double* gwm = &g.W.data[static_cast<std::size_t>(((i * nout + j) * dout) * din)];
                for (std::int64_t dd = 0; dd < dout; ++dd) {
                    const double gu = gu_ij[dd];
                    if (gu == 0.0) continue;
                    const double* wrow = wm + dd * din;
                    double* gwrow = gwm + dd * din;
                    for (std::int64_t e = 0; e < din; ++e) {
                        gwrow[e] += gu * ui[e];
                        gui[e] += gu * wrow[e];
                    }
                }
                if (kl) {
                    const double f = trace.w_fnorm(i, j);
                    if (f < kEps) continue;
                    const double* go_ij = &g_o.data[static_cast<std::size_t>((i * nout + j) * dout)];
                    const double* o_ij = &trace.o_hat.data[static_cast<std::size_t>((i * nout + j) * dout)];
                    double go_dot_o = 0.0;
                    for (std::int64_t dd = 0; dd < dout; ++dd) go_dot_o += go_ij[dd] * o_ij[dd];
                    const double inv_f = 1.0 / f;
                    for (std::int64_t dd = 0; dd < dout; ++dd) {
                        const double go = go_ij[dd];
                        const double* wrow = wm + dd * din;
                        double* gwrow = gwm + dd * din;
                        for (std::int64_t e = 0; e < din; ++e) {
                            // o = W u / ||W||_F depends on W through both factors
                            gwrow[e] += go * ui[e] * inv_f -
                                        go_dot_o * wrow[e] * inv_f * inv_f;
                            gui[e] += go * wrow[e] * inv_f;
                        }
                    }
                }
            }
        }
    } else {
        SelfRoutingGrads sg = self_routing_backward(trace.self_rt, trace.u, params, g_v);
        g_u = std::move(sg.u);
        g.W = std::move(sg.W);
        *g.w_route = std::move(sg.w_route);
    }

    // primary squash rows
    const SquashSpec prim_spec = primary_squash(routing.squash);
    Tensor g_u_raw({nin, din});
    for (std::int64_t i = 0; i < nin; ++i) {
        detail::squash_row_backward(&trace.u_raw.data[static_cast<std::size_t>(i * din)],
                                    &g_u.data[static_cast<std::size_t>(i * din)],
                                    &g_u_raw.data[static_cast<std::size_t>(i * din)], din,
                                    prim_spec);
    }

    // back to feature-map layout
    const std::int64_t ph = arch.primary_h(), pw = arch.primary_w();
    Tensor g_primary_pre({arch.primary_types * din, ph, pw});
    for (std::int64_t t = 0; t < arch.primary_types; ++t) {
        for (std::int64_t y = 0; y < ph; ++y) {
            for (std::int64_t x = 0; x < pw; ++x) {
                const std::int64_t i = (t * ph + y) * pw + x;
                for (std::int64_t d = 0; d < din; ++d) {
                    g_primary_pre(t * din + d, y, x) = g_u_raw(i, d);
                }
            }
        }
    }

    Conv2dGrads gp = conv2d_backward(g_primary_pre, trace.conv1_act, params.primary_kernels,
                                     arch.primary_stride);
    g.primary_kernels = std::move(gp.kernels);
    g.primary_bias = std::move(gp.bias);

    Tensor g_conv1_pre = relu_backward(trace.conv1_pre, gp.input);
    Conv2dGrads gc = conv2d_backward(g_conv1_pre, trace.image, params.conv1_kernels,
                                     arch.conv1_stride);
    g.conv1_kernels = std::move(gc.kernels);
    g.conv1_bias = std::move(gc.bias);
    return g;
}

}  // namespace capskit
