#ifndef CAPSKIT_CAPSNET_HPP_
#define CAPSKIT_CAPSNET_HPP_

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "capskit/squash.hpp"
#include "capskit/tensor.hpp"

namespace capskit {

/* Fixed two-conv capsule architecture: conv1 + ReLU, a convolutional primary
 * capsule layer, then one class-capsule layer reached by routing. */
struct ArchConfig {
    std::int64_t in_channels = 1, in_h = 28, in_w = 28;
    std::int64_t conv1_filters = 256;
    int conv1_kernel = 9, conv1_stride = 1;
    std::int64_t primary_types = 32, primary_dim = 8;
    int primary_kernel = 9, primary_stride = 2;
    std::int64_t num_classes = 10, class_dim = 16;

    // conv1 256 filters, 32 capsule types of dim 8, 10 classes of dim 16
    static ArchConfig full(std::int64_t channels = 1, std::int64_t h = 28, std::int64_t w = 28);
    // conv1 64 filters, 8 capsule types; same layer plan at CI-friendly width
    static ArchConfig reduced(std::int64_t channels = 1, std::int64_t h = 28, std::int64_t w = 28);
    // 4x4 input, 2 primary caps of dim 2, 2 classes of dim 2 (gradient checks)
    static ArchConfig tiny();
    static std::optional<ArchConfig> preset(const std::string& name, std::int64_t channels,
                                            std::int64_t h, std::int64_t w,
                                            std::int64_t classes);

    std::int64_t conv1_h() const { return (in_h - conv1_kernel) / conv1_stride + 1; }
    std::int64_t conv1_w() const { return (in_w - conv1_kernel) / conv1_stride + 1; }
    std::int64_t primary_h() const { return (conv1_h() - primary_kernel) / primary_stride + 1; }
    std::int64_t primary_w() const { return (conv1_w() - primary_kernel) / primary_stride + 1; }
    std::int64_t num_primary_caps() const { return primary_types * primary_h() * primary_w(); }

    void validate() const;  // throws when the layer plan does not fit the input
};

struct RoutingSpec {
    enum class Method { Dynamic, SelfRouting };
    Method method = Method::Dynamic;
    int iterations = 3;  // Dynamic only; SelfRouting is a single pass
    SquashSpec squash = SquashSpec::norm_m(2);

    static RoutingSpec dynamic(int iterations, SquashSpec squash);
    static RoutingSpec self_routing(SquashSpec squash);
    std::string method_name() const;
};

/* All learnable weights. Doubles as the gradient container: backward() returns
 * one of these with the same shapes. */
struct CapsNetParams {
    Tensor conv1_kernels, conv1_bias;
    Tensor primary_kernels, primary_bias;
    Tensor W;  // [Nin, Nout, dout, din] transformation matrices
    std::optional<Tensor> w_route;  // [Nin, din, Nout], self routing only

    static CapsNetParams init(const ArchConfig& arch, const RoutingSpec& routing,
                              std::uint64_t seed);
    static CapsNetParams zeros_like(const CapsNetParams& p);

    std::int64_t total_size() const;
    bool all_finite() const;

    // fixed traversal order shared by the optimizer and (de)serialization
    template <typename Fn>
    void for_each_tensor(Fn&& fn) {
        fn(conv1_kernels);
        fn(conv1_bias);
        fn(primary_kernels);
        fn(primary_bias);
        fn(W);
        if (w_route) fn(*w_route);
    }
    template <typename Fn>
    void for_each_tensor(Fn&& fn) const {
        fn(conv1_kernels);
        fn(conv1_bias);
        fn(primary_kernels);
        fn(primary_bias);
        fn(W);
        if (w_route) fn(*w_route);
    }
};

struct RoutingOutput {
    Tensor v;  // [Nout, dout] output activity vectors
    Tensor c;  // [Nin, Nout] coupling coefficients (final iteration)
    Tensor b;  // [Nin, Nout] final logits (Dynamic only; empty for SelfRouting)
};

/* Saved forward state for the unrolled backward pass. */
struct RoutingTrace {
    int iterations = 0;
    SquashSpec squash;
    std::vector<Tensor> c;      // per iteration [Nin,Nout]
    std::vector<Tensor> s;      // per iteration [Nout,dout]
    std::vector<Tensor> v;      // per iteration [Nout,dout]
    std::vector<Tensor> sigma;  // Kl only, per iteration [Nout,dout]
};

/* Routing-by-agreement over precomputed votes u_hat [Nin,Nout,dout].
 * Logits start at zero; each iteration couples by softmax over classes,
 * aggregates, squashes, and (except the last) raises b_ij by v_j . u_hat_ij.
 * Kl squash needs o_hat, the Frobenius-normalized votes. */
RoutingOutput dynamic_routing(const Tensor& u_hat, int iterations, const SquashSpec& squash,
                              const Tensor* o_hat = nullptr, RoutingTrace* trace = nullptr);

/* Exact gradient of the unrolled iterations (couplings are differentiated
 * through, no stop-gradient). grad_o_hat is filled for the Kl variant. */
Tensor dynamic_routing_backward(const RoutingTrace& trace, const Tensor& u_hat,
                                const Tensor* o_hat, const Tensor& grad_v,
                                Tensor* grad_o_hat = nullptr);

struct SelfRoutingTrace {
    Tensor z;      // [Nin,Nout] routing logits
    Tensor c;      // [Nin,Nout]
    Tensor u_hat;  // [Nin,Nout,dout]
    Tensor s;      // [Nout,dout]
    SquashSpec squash;
};

/* Non-iterative routing: c[i,.] = softmax(W_route[i]^T u[i]), votes from
 * W (pose), one aggregation pass. */
RoutingOutput self_routing(const Tensor& u, const CapsNetParams& params,
                           const SquashSpec& squash, SelfRoutingTrace* trace = nullptr);

struct SelfRoutingGrads {
    Tensor u;        // [Nin,din]
    Tensor W;        // [Nin,Nout,dout,din]
    Tensor w_route;  // [Nin,din,Nout]
};

SelfRoutingGrads self_routing_backward(const SelfRoutingTrace& trace, const Tensor& u,
                                       const CapsNetParams& params, const Tensor& grad_v);

/* Reshape primary conv features [types*dim, H', W'] into capsules [Nin, din]
 * and squash each. Kl configs squash primaries with the classic m=2 rule
 * (the Kl formula only exists at the routing layer). */
Tensor primary_caps(const Tensor& features, const ArchConfig& arch, const SquashSpec& squash);

struct ForwardTrace {
    Tensor image;
    Tensor conv1_pre, conv1_act;
    Tensor primary_pre;          // [types*dim, ph, pw]
    Tensor u_raw;                // [Nin, din] pre-squash capsule inputs
    Tensor u;                    // [Nin, din] squashed primaries
    Tensor u_hat;                // [Nin,Nout,dout] (dynamic)
    Tensor o_hat;                // Kl only
    Tensor w_fnorm;              // [Nin,Nout] Frobenius norms of W (Kl only)
    RoutingTrace routing;        // dynamic
    SelfRoutingTrace self_rt;    // self routing
    Tensor v;                    // [Nclass, dout]
    Tensor scores;               // [Nclass]
};

struct ForwardResult {
    Tensor class_vectors;  // [Nclass, dout]
    Tensor class_scores;   // [Nclass] = ||v_j||_2
    int prediction = -1;
};

ForwardResult forward(const Tensor& image, const CapsNetParams& params, const ArchConfig& arch,
                      const RoutingSpec& routing, ForwardTrace* trace = nullptr);

/* Margin loss with m+ = 0.9, m- = 0.1, lambda = 0.5. */
double margin_loss(const Tensor& class_scores, int label);
Tensor margin_loss_grad(const Tensor& class_scores, int label);

/* Gradient of margin_loss(forward(image)) w.r.t. every parameter. */
CapsNetParams backward(const ForwardTrace& trace, const CapsNetParams& params,
                       const ArchConfig& arch, const RoutingSpec& routing, int label);

}  // namespace capskit

#endif  // CAPSKIT_CAPSNET_HPP_
