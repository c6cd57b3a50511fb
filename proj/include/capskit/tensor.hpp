#ifndef CAPSKIT_TENSOR_HPP_
#define CAPSKIT_TENSOR_HPP_

#include <cstdint>
#include <string>
#include <vector>

namespace capskit {

/* Dense n-dimensional array of doubles, row-major flat storage.
 * No views or strides; every op below is a pure function of its inputs. */
struct Tensor {
    std::vector<std::int64_t> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<std::int64_t> s);
    Tensor(std::vector<std::int64_t> s, std::vector<double> d);

    static Tensor zeros(std::vector<std::int64_t> s) { return Tensor(std::move(s)); }
    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    std::int64_t dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

    double& operator()(std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
    double operator()(std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }
    double& operator()(std::int64_t i, std::int64_t j) {
        return data[static_cast<std::size_t>(i * shape[1] + j)];
    }
    double operator()(std::int64_t i, std::int64_t j) const {
        return data[static_cast<std::size_t>(i * shape[1] + j)];
    }
    double& operator()(std::int64_t i, std::int64_t j, std::int64_t k) {
        return data[static_cast<std::size_t>((i * shape[1] + j) * shape[2] + k)];
    }
    double operator()(std::int64_t i, std::int64_t j, std::int64_t k) const {
        return data[static_cast<std::size_t>((i * shape[1] + j) * shape[2] + k)];
    }
    double& operator()(std::int64_t i, std::int64_t j, std::int64_t k, std::int64_t l) {
        return data[static_cast<std::size_t>(((i * shape[1] + j) * shape[2] + k) * shape[3] + l)];
    }
    double operator()(std::int64_t i, std::int64_t j, std::int64_t k, std::int64_t l) const {
        return data[static_cast<std::size_t>(((i * shape[1] + j) * shape[2] + k) * shape[3] + l)];
    }

    bool same_shape(const Tensor& other) const { return shape == other.shape; }
    bool all_finite() const;
    void fill(double v);

    std::string shape_str() const;
};

std::int64_t shape_product(const std::vector<std::int64_t>& shape);

/* Valid-padding 2-D convolution.
 * input [C,H,W], kernels [F,C,k,k], bias [F], output [F,H',W'] with
 * H' = (H-k)/stride + 1 (integer floor). */
Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias, int stride);

struct Conv2dGrads {
    Tensor input;
    Tensor kernels;
    Tensor bias;
};

/* Exact adjoint of conv2d with respect to input, kernels and bias. */
Conv2dGrads conv2d_backward(const Tensor& grad_out, const Tensor& saved_input,
                            const Tensor& kernels, int stride);

/* Softmax along one axis, max-subtracted. */
Tensor softmax(const Tensor& logits, int axis);

/* Vector-Jacobian product of softmax: y = softmax(x, axis), given dL/dy returns dL/dx. */
Tensor softmax_backward(const Tensor& y, const Tensor& grad_y, int axis);

/* p-norm of a 1-D tensor; p must be a positive integer or infinity
 * (std::numeric_limits<double>::infinity()). Finite p factors out the max
 * magnitude before exponentiation so large p never overflows. */
double vector_norm(const Tensor& v, double p);
double vector_norm(const double* v, std::int64_t n, double p);

/* Per-pair matrix-vector products: out[i,j] = W[i,j] * u[i].
 * W [Nin,Nout,dout,din], u [Nin,din], out [Nin,Nout,dout]. */
Tensor matvec_votes(const Tensor& W, const Tensor& u);

Tensor relu(const Tensor& x);
Tensor relu_backward(const Tensor& saved_pre, const Tensor& grad_out);

}  // namespace capskit

#endif  // CAPSKIT_TENSOR_HPP_
