#ifndef CAPSKIT_SQUASH_HPP_
#define CAPSKIT_SQUASH_HPP_

#include <optional>
#include <string>
#include <vector>

#include "capskit/tensor.hpp"

namespace capskit {

enum class SquashVariant { NormM, Infinity, Kl };

/* Which squash nonlinearity a capsule layer applies.
 * NormM(m) scales s by ||s||_m^m / (1 + ||s||_m^m); m = 2 is the classic
 * v = (||s||^2/(1+||s||^2)) s/||s|| squash. Infinity uses ||s||_inf.
 * Kl is the routing-level formula that rescales s_j by the aggregate
 * sigma norms (see squash_kl). */
struct SquashSpec {
    SquashVariant variant = SquashVariant::NormM;
    int m = 2;

    static SquashSpec norm_m(int m_) { return {SquashVariant::NormM, m_}; }
    static SquashSpec infinity() { return {SquashVariant::Infinity, 0}; }
    static SquashSpec kl() { return {SquashVariant::Kl, 0}; }

    // "s1".."s5", "s10", "sinf", "kl"
    static std::optional<SquashSpec> parse(const std::string& name);
    static const std::vector<std::string>& valid_names();
    std::string name() const;

    bool operator==(const SquashSpec& o) const {
        return variant == o.variant && (variant != SquashVariant::NormM || m == o.m);
    }
};

/* v = (||s||_m^m / (1 + ||s||_m^m)) * s/||s||_2, zero at the origin. */
Tensor squash_norm_m(const Tensor& s, int m);

/* v = (||s||_inf / (1 + ||s||_inf)) * s/||s||_2, zero at the origin. */
Tensor squash_inf(const Tensor& s);

/* Row-wise v_j = (||sigma_j||_2 / (1 + max_k ||sigma_k||_2)) * s_j.
 * sigma_all holds the caller's coupling-weighted, Frobenius-normalized vote
 * aggregates; both tensors are [J,d]. */
Tensor squash_kl(const Tensor& s_all, const Tensor& sigma_all);

/* Analytic vector-Jacobian product for NormM and Infinity. The Kl variant has
 * no standalone backward; its caller chains through the explicit formula. */
Tensor squash_backward(const Tensor& s, const SquashSpec& spec, const Tensor& grad_v);

/* Dispatch on NormM/Infinity; throws for Kl (needs sigma aggregates). */
Tensor apply_squash(const Tensor& s, const SquashSpec& spec);

namespace detail {
// Allocation-free row variants used by the capsule layers.
void squash_row(const double* s, double* v, std::int64_t d, const SquashSpec& spec);
void squash_row_backward(const double* s, const double* grad_v, double* grad_s, std::int64_t d,
                         const SquashSpec& spec);
}  // namespace detail

}  // namespace capskit

#endif  // CAPSKIT_SQUASH_HPP_
