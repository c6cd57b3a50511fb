#include "capskit/squash.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace capskit {

namespace {

constexpr double kOriginEps = 1e-12;
// Above this, ||s||_m^m overflows double; the magnitude factor is saturated.
constexpr double kLogSaturation = 300.0;

}  // namespace

std::optional<SquashSpec> SquashSpec::parse(const std::string& name) {
    if (name == "sinf") return infinity();
    if (name == "kl") return kl();
    if (name.size() >= 2 && name[0] == 's') {
        int m = 0;
        for (std::size_t i = 1; i < name.size(); ++i) {
            if (name[i] < '0' || name[i] > '9') return std::nullopt;
            m = m * 10 + (name[i] - '0');
        }
        if (m >= 1) return norm_m(m);
    }
    return std::nullopt;
}

const std::vector<std::string>& SquashSpec::valid_names() {
    static const std::vector<std::string> names = {"s1", "s2", "s3", "s4",
                                                   "s5", "s10", "sinf", "kl"};
    return names;
}

std::string SquashSpec::name() const {
    switch (variant) {
        case SquashVariant::NormM:
            return "s" + std::to_string(m);
        case SquashVariant::Infinity:
            return "sinf";
        case SquashVariant::Kl:
            return "kl";
    }
    return "?";
}

namespace detail {

void squash_row(const double* s, double* v, std::int64_t d, const SquashSpec& spec) {
    const double n2 = vector_norm(s, d, 2.0);
    if (n2 < kOriginEps) {
        for (std::int64_t i = 0; i < d; ++i) v[i] = 0.0;  // defined limit at the origin
        return;
    }
    double factor;
    if (spec.variant == SquashVariant::Infinity) {
        const double ninf = vector_norm(s, d, std::numeric_limits<double>::infinity());
        factor = ninf / (1.0 + ninf);
    } else {
        const int m = spec.m;
        const double nm = vector_norm(s, d, static_cast<double>(m));
        if (m * std::log(nm) > kLogSaturation) {
            factor = 1.0;
        } else {
            const double a = std::pow(nm, static_cast<double>(m));
            factor = a / (1.0 + a);
        }
    }
    // saturation keeps ||v|| < 1 even where a/(1+a) rounds to 1
    factor = std::min(factor, 1.0 - 1e-12);
    const double scale = factor / n2;
    for (std::int64_t i = 0; i < d; ++i) v[i] = scale * s[i];
}

void squash_row_backward(const double* s, const double* grad_v, double* grad_s, std::int64_t d,
                         const SquashSpec& spec) {
    const double n2 = vector_norm(s, d, 2.0);
    if (n2 < kOriginEps) {
        for (std::int64_t i = 0; i < d; ++i) grad_s[i] = 0.0;
        return;
    }
    double gv_dot_s = 0.0;
    for (std::int64_t i = 0; i < d; ++i) gv_dot_s += grad_v[i] * s[i];
    const double n2_3 = n2 * n2 * n2;

    if (spec.variant == SquashVariant::NormM) {
        const int m = spec.m;
        const double nm = vector_norm(s, d, static_cast<double>(m));
        double factor, dfactor_da;  // factor = a/(1+a), dfactor_da = 1/(1+a)^2
        if (m * std::log(nm) > kLogSaturation) {
            factor = 1.0;
            dfactor_da = 0.0;  // saturated tail is flat
        } else {
            const double a = std::pow(nm, static_cast<double>(m));
            factor = a / (1.0 + a);
            dfactor_da = 1.0 / ((1.0 + a) * (1.0 + a));
        }
        if (factor > 1.0 - 1e-12) {
            factor = 1.0 - 1e-12;
            dfactor_da = 0.0;
        }
        const double scale = factor / n2;
        for (std::int64_t i = 0; i < d; ++i) {
            // da/ds_i = m |s_i|^(m-1) sign(s_i)
            double da;
            if (m == 1) {
                da = s[i] > 0.0 ? 1.0 : (s[i] < 0.0 ? -1.0 : 0.0);
            } else if (m == 2) {
                da = 2.0 * s[i];
            } else {
                const double mag = std::fabs(s[i]);
                da = mag == 0.0 ? 0.0
                                : m * std::pow(mag, static_cast<double>(m - 1)) *
                                      (s[i] > 0.0 ? 1.0 : -1.0);
            }
            grad_s[i] =
                scale * grad_v[i] + gv_dot_s * (dfactor_da * da / n2 - factor * s[i] / n2_3);
        }
        return;
    }

    // Infinity: subgradient at ties picks the lowest index achieving the max.
    std::int64_t kstar = 0;
    double mx = std::fabs(s[0]);
    for (std::int64_t i = 1; i < d; ++i) {
        if (std::fabs(s[i]) > mx) {
            mx = std::fabs(s[i]);
            kstar = i;
        }
    }
    double factor = mx / (1.0 + mx);
    double dfactor = 1.0 / ((1.0 + mx) * (1.0 + mx));
    if (factor > 1.0 - 1e-12) {
        factor = 1.0 - 1e-12;
        dfactor = 0.0;
    }
    const double scale = factor / n2;
    const double sgn = s[kstar] >= 0.0 ? 1.0 : -1.0;
    for (std::int64_t i = 0; i < d; ++i) {
        grad_s[i] = scale * grad_v[i] - gv_dot_s * factor * s[i] / n2_3;
    }
    grad_s[kstar] += gv_dot_s * dfactor * sgn / n2;
}

}  // namespace detail

Tensor squash_norm_m(const Tensor& s, int m) {
    if (s.rank() != 1) throw std::invalid_argument("squash_norm_m: s must be 1-D");
    if (m < 1) throw std::invalid_argument("squash_norm_m: m must be >= 1");
    Tensor v({s.size()});
    detail::squash_row(s.data.data(), v.data.data(), s.size(), SquashSpec::norm_m(m));
    return v;
}

Tensor squash_inf(const Tensor& s) {
    if (s.rank() != 1) throw std::invalid_argument("squash_inf: s must be 1-D");
    Tensor v({s.size()});
    detail::squash_row(s.data.data(), v.data.data(), s.size(), SquashSpec::infinity());
    return v;
}

Tensor squash_kl(const Tensor& s_all, const Tensor& sigma_all) {
    if (s_all.rank() != 2 || sigma_all.rank() != 2) {
        throw std::invalid_argument("squash_kl: s_all and sigma_all must be [J,d]");
    }
    if (!s_all.same_shape(sigma_all)) {
        throw std::invalid_argument("squash_kl: shape mismatch " + s_all.shape_str() + " vs " +
                                    sigma_all.shape_str());
    }
    const std::int64_t J = s_all.dim(0), d = s_all.dim(1);
    if (J == 0) throw std::invalid_argument("squash_kl: J must be positive");
    std::vector<double> norms(static_cast<std::size_t>(J));
    double max_norm = 0.0;
    for (std::int64_t j = 0; j < J; ++j) {
        norms[static_cast<std::size_t>(j)] =
            vector_norm(&sigma_all.data[static_cast<std::size_t>(j * d)], d, 2.0);
        max_norm = std::max(max_norm, norms[static_cast<std::size_t>(j)]);
    }
    Tensor v(s_all.shape);
    for (std::int64_t j = 0; j < J; ++j) {
        const double r = norms[static_cast<std::size_t>(j)] / (1.0 + max_norm);
        for (std::int64_t k = 0; k < d; ++k) v(j, k) = r * s_all(j, k);
    }
    return v;
}

Tensor squash_backward(const Tensor& s, const SquashSpec& spec, const Tensor& grad_v) {
    if (s.rank() != 1 || !s.same_shape(grad_v)) {
        throw std::invalid_argument("squash_backward: s and grad_v must be matching 1-D tensors");
    }
    if (spec.variant == SquashVariant::Kl) {
        throw std::invalid_argument("squash_backward: Kl backward is owned by the routing caller");
    }
    Tensor gs({s.size()});
    detail::squash_row_backward(s.data.data(), grad_v.data.data(), gs.data.data(), s.size(), spec);
    return gs;
}

Tensor apply_squash(const Tensor& s, const SquashSpec& spec) {
    switch (spec.variant) {
        case SquashVariant::NormM:
            return squash_norm_m(s, spec.m);
        case SquashVariant::Infinity:
            return squash_inf(s);
        case SquashVariant::Kl:
            throw std::invalid_argument("apply_squash: Kl needs sigma aggregates, use squash_kl");
    }
    throw std::logic_error("apply_squash: unknown variant");
}

}  // namespace capskit
