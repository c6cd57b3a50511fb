#include "capskit/tensor.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace capskit {

std::int64_t shape_product(const std::vector<std::int64_t>& shape) {
    std::int64_t p = 1;
    for (auto d : shape) p *= d;
    return p;
}

Tensor::Tensor(std::vector<std::int64_t> s) : shape(std::move(s)) {
    for (auto d : shape) {
        if (d < 0) throw std::invalid_argument("Tensor: extents must be non-negative");
    }
    data.assign(static_cast<std::size_t>(shape_product(shape)), 0.0);
}

Tensor::Tensor(std::vector<std::int64_t> s, std::vector<double> d)
    : shape(std::move(s)), data(std::move(d)) {
    for (auto e : shape) {
        if (e < 0) throw std::invalid_argument("Tensor: extents must be non-negative");
    }
    if (shape_product(shape) != static_cast<std::int64_t>(data.size())) {
        throw std::invalid_argument("Tensor: shape/data length mismatch");
    }
}

bool Tensor::all_finite() const {
    for (double v : data) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

void Tensor::fill(double v) { std::fill(data.begin(), data.end(), v); }

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

namespace {

// Batch-level parallelism lives in the training harness; a nested BLAS pool
// would only oversubscribe the cores.
const bool kBlasEnvReady = [] {
    setenv("OPENBLAS_NUM_THREADS", "1", 0);
    return true;
}();

// Patch matrix, row-major [C*kh*kw, OH*OW]:
// col[(c*kh + ky)*kw + kx][oy*OW + ox] = input(c, oy*s + ky, ox*s + kx)
void im2col(const Tensor& input, std::int64_t OH, std::int64_t OW, std::int64_t kh,
            std::int64_t kw, int stride, double* col) {
    const std::int64_t H = input.dim(1), W = input.dim(2);
    const std::int64_t C = input.dim(0);
    const std::int64_t ohw = OH * OW;
    for (std::int64_t c = 0; c < C; ++c) {
        for (std::int64_t ky = 0; ky < kh; ++ky) {
            for (std::int64_t kx = 0; kx < kw; ++kx) {
                double* dst = col + ((c * kh + ky) * kw + kx) * ohw;
                for (std::int64_t oy = 0; oy < OH; ++oy) {
                    const double* src =
                        &input.data[static_cast<std::size_t>((c * H + oy * stride + ky) * W + kx)];
                    for (std::int64_t ox = 0; ox < OW; ++ox) {
                        dst[oy * OW + ox] = src[ox * stride];
                    }
                }
            }
        }
    }
}

void check_conv_shapes(const Tensor& input, const Tensor& kernels, int stride, const char* op) {
    if (input.rank() != 3) throw std::invalid_argument(std::string(op) + ": input must be [C,H,W]");
    if (kernels.rank() != 4) {
        throw std::invalid_argument(std::string(op) + ": kernels must be [F,C,k,k]");
    }
    if (stride < 1) throw std::invalid_argument(std::string(op) + ": stride must be >= 1");
    if (kernels.dim(1) != input.dim(0)) {
        throw std::invalid_argument(std::string(op) + ": kernel channels " +
                                    std::to_string(kernels.dim(1)) +
                                    " do not match input channels " +
                                    std::to_string(input.dim(0)));
    }
    if (input.dim(1) < kernels.dim(2) || input.dim(2) < kernels.dim(3)) {
        throw std::invalid_argument(std::string(op) + ": kernel larger than input");
    }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias, int stride) {
    check_conv_shapes(input, kernels, stride, "conv2d");
    const std::int64_t H = input.dim(1), W = input.dim(2);
    const std::int64_t F = kernels.dim(0), kh = kernels.dim(2), kw = kernels.dim(3);
    if (bias.rank() != 1 || bias.dim(0) != F) {
        throw std::invalid_argument("conv2d: bias must be [F]");
    }
    const std::int64_t OH = (H - kh) / stride + 1;
    const std::int64_t OW = (W - kw) / stride + 1;
    const std::int64_t ckk = input.dim(0) * kh * kw;
    const std::int64_t ohw = OH * OW;

    Tensor out({F, OH, OW});
    std::vector<double> col(static_cast<std::size_t>(ckk * ohw));
    im2col(input, OH, OW, kh, kw, stride, col.data());
    // out[F, ohw] = kernels[F, ckk] . col[ckk, ohw]
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, static_cast<int>(F),
                static_cast<int>(ohw), static_cast<int>(ckk), 1.0, kernels.data.data(),
                static_cast<int>(ckk), col.data(), static_cast<int>(ohw), 0.0, out.data.data(),
                static_cast<int>(ohw));
    for (std::int64_t f = 0; f < F; ++f) {
        const double b = bias(f);
        double* row = &out.data[static_cast<std::size_t>(f * ohw)];
        for (std::int64_t p = 0; p < ohw; ++p) row[p] += b;
    }
    return out;
}

Conv2dGrads conv2d_backward(const Tensor& grad_out, const Tensor& saved_input,
                            const Tensor& kernels, int stride) {
    check_conv_shapes(saved_input, kernels, stride, "conv2d_backward");
    const std::int64_t C = saved_input.dim(0), H = saved_input.dim(1), W = saved_input.dim(2);
    const std::int64_t F = kernels.dim(0), kh = kernels.dim(2), kw = kernels.dim(3);
    const std::int64_t OH = (H - kh) / stride + 1;
    const std::int64_t OW = (W - kw) / stride + 1;
    if (grad_out.rank() != 3 || grad_out.dim(0) != F || grad_out.dim(1) != OH ||
        grad_out.dim(2) != OW) {
        throw std::invalid_argument("conv2d_backward: grad_out shape " + grad_out.shape_str() +
                                    " does not match forward output");
    }
    const std::int64_t ckk = C * kh * kw;
    const std::int64_t ohw = OH * OW;

    Conv2dGrads g{Tensor({C, H, W}), Tensor({F, C, kh, kw}), Tensor({F})};
    std::vector<double> col(static_cast<std::size_t>(ckk * ohw));
    im2col(saved_input, OH, OW, kh, kw, stride, col.data());

    // grad_kernels[F, ckk] = grad_out[F, ohw] . col^T
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, static_cast<int>(F),
                static_cast<int>(ckk), static_cast<int>(ohw), 1.0, grad_out.data.data(),
                static_cast<int>(ohw), col.data(), static_cast<int>(ohw), 0.0,
                g.kernels.data.data(), static_cast<int>(ckk));

    // gcol[ckk, ohw] = kernels^T . grad_out, then scatter-add onto the input
    std::vector<double> gcol(static_cast<std::size_t>(ckk * ohw));
    cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, static_cast<int>(ckk),
                static_cast<int>(ohw), static_cast<int>(F), 1.0, kernels.data.data(),
                static_cast<int>(ckk), grad_out.data.data(), static_cast<int>(ohw), 0.0,
                gcol.data(), static_cast<int>(ohw));
    for (std::int64_t c = 0; c < C; ++c) {
        for (std::int64_t ky = 0; ky < kh; ++ky) {
            for (std::int64_t kx = 0; kx < kw; ++kx) {
                const double* src = gcol.data() + ((c * kh + ky) * kw + kx) * ohw;
                for (std::int64_t oy = 0; oy < OH; ++oy) {
                    double* dst =
                        &g.input.data[static_cast<std::size_t>((c * H + oy * stride + ky) * W + kx)];
                    for (std::int64_t ox = 0; ox < OW; ++ox) {
                        dst[ox * stride] += src[oy * OW + ox];
                    }
                }
            }
        }
    }

    for (std::int64_t f = 0; f < F; ++f) {
        const double* go = &grad_out.data[static_cast<std::size_t>(f * ohw)];
        double gb = 0.0;
        for (std::int64_t p = 0; p < ohw; ++p) gb += go[p];
        g.bias(f) = gb;
    }
    return g;
}

namespace {

struct AxisSplit {
    std::int64_t outer, len, inner;
};

AxisSplit split_axis(const Tensor& t, int axis) {
    if (axis < 0 || axis >= t.rank()) throw std::invalid_argument("softmax: axis out of range");
    AxisSplit s{1, t.dim(axis), 1};
    for (int i = 0; i < axis; ++i) s.outer *= t.dim(i);
    for (int i = axis + 1; i < t.rank(); ++i) s.inner *= t.dim(i);
    return s;
}

}  // namespace

Tensor softmax(const Tensor& logits, int axis) {
    const AxisSplit s = split_axis(logits, axis);
    Tensor out(logits.shape);
    for (std::int64_t o = 0; o < s.outer; ++o) {
        for (std::int64_t in = 0; in < s.inner; ++in) {
            const std::int64_t base = o * s.len * s.inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::int64_t k = 0; k < s.len; ++k) {
                mx = std::max(mx, logits.data[static_cast<std::size_t>(base + k * s.inner)]);
            }
            double sum = 0.0;
            for (std::int64_t k = 0; k < s.len; ++k) {
                const double e = std::exp(logits.data[static_cast<std::size_t>(base + k * s.inner)] - mx);
                out.data[static_cast<std::size_t>(base + k * s.inner)] = e;
                sum += e;
            }
            for (std::int64_t k = 0; k < s.len; ++k) {
                out.data[static_cast<std::size_t>(base + k * s.inner)] /= sum;
            }
        }
    }
    return out;
}

Tensor softmax_backward(const Tensor& y, const Tensor& grad_y, int axis) {
    if (!y.same_shape(grad_y)) throw std::invalid_argument("softmax_backward: shape mismatch");
    const AxisSplit s = split_axis(y, axis);
    Tensor gx(y.shape);
    for (std::int64_t o = 0; o < s.outer; ++o) {
        for (std::int64_t in = 0; in < s.inner; ++in) {
            const std::int64_t base = o * s.len * s.inner + in;
            double dot = 0.0;
            for (std::int64_t k = 0; k < s.len; ++k) {
                const auto idx = static_cast<std::size_t>(base + k * s.inner);
                dot += y.data[idx] * grad_y.data[idx];
            }
            for (std::int64_t k = 0; k < s.len; ++k) {
                const auto idx = static_cast<std::size_t>(base + k * s.inner);
                gx.data[idx] = y.data[idx] * (grad_y.data[idx] - dot);
            }
        }
    }
    return gx;
}

double vector_norm(const double* v, std::int64_t n, double p) {
    const bool inf = std::isinf(p);
    if (!inf && (p < 1.0 || p != std::floor(p))) {
        throw std::invalid_argument("vector_norm: p must be a positive integer or infinity");
    }
    double mx = 0.0;
    for (std::int64_t i = 0; i < n; ++i) mx = std::max(mx, std::fabs(v[i]));
    if (inf || mx == 0.0) return mx;
    if (p == 1.0) {
        double s = 0.0;
        for (std::int64_t i = 0; i < n; ++i) s += std::fabs(v[i]);
        return s;
    }
    if (p == 2.0) {
        double s = 0.0;
        for (std::int64_t i = 0; i < n; ++i) {
            const double r = v[i] / mx;
            s += r * r;
        }
        return mx * std::sqrt(s);
    }
    // Factor out the max so |v_k|^p never overflows, even for p = 10 and beyond.
    double s = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        s += std::pow(std::fabs(v[i]) / mx, p);
    }
    return mx * std::pow(s, 1.0 / p);
}

double vector_norm(const Tensor& v, double p) {
    if (v.rank() != 1) throw std::invalid_argument("vector_norm: tensor must be 1-D");
    return vector_norm(v.data.data(), v.size(), p);
}

Tensor matvec_votes(const Tensor& W, const Tensor& u) {
    if (W.rank() != 4) throw std::invalid_argument("matvec_votes: W must be [Nin,Nout,dout,din]");
    if (u.rank() != 2) throw std::invalid_argument("matvec_votes: u must be [Nin,din]");
    const std::int64_t Nin = W.dim(0), Nout = W.dim(1), dout = W.dim(2), din = W.dim(3);
    if (u.dim(0) != Nin || u.dim(1) != din) {
        throw std::invalid_argument("matvec_votes: u shape " + u.shape_str() +
                                    " does not agree with W " + W.shape_str());
    }
    Tensor out({Nin, Nout, dout});
    for (std::int64_t i = 0; i < Nin; ++i) {
        const double* ui = &u.data[static_cast<std::size_t>(i * din)];
        for (std::int64_t j = 0; j < Nout; ++j) {
            const double* wm = &W.data[static_cast<std::size_t>(((i * Nout + j) * dout) * din)];
            double* o = &out.data[static_cast<std::size_t>((i * Nout + j) * dout)];
            for (std::int64_t d = 0; d < dout; ++d) {
                double acc = 0.0;
                const double* wrow = wm + d * din;
                for (std::int64_t e = 0; e < din; ++e) acc += wrow[e] * ui[e];
                o[d] = acc;
            }
        }
    }
    return out;
}

Tensor relu(const Tensor& x) {
    Tensor out(x.shape);
    for (std::size_t i = 0; i < x.data.size(); ++i) out.data[i] = x.data[i] > 0.0 ? x.data[i] : 0.0;
    return out;
}

Tensor relu_backward(const Tensor& saved_pre, const Tensor& grad_out) {
    if (!saved_pre.same_shape(grad_out)) throw std::invalid_argument("relu_backward: shape mismatch");
    Tensor gx(saved_pre.shape);
    for (std::size_t i = 0; i < gx.data.size(); ++i) {
        gx.data[i] = saved_pre.data[i] > 0.0 ? grad_out.data[i] : 0.0;
    }
    return gx;
}

}  // namespace capskit
