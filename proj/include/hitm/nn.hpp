#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "hitm/tensor.hpp"

// Differentiable primitives used to assemble the detector. Forward passes are
// plain loops over CHW tensors; every forward has a hand-written backward that
// is chain-rule composable. No graph, no implicit broadcasting.

namespace hitm::nn {

inline double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

namespace detail {

/// Half-open range of output positions ox for which the input position
/// ix = ox*stride - pad + k lies inside [0, limit).
struct OutRange {
    std::size_t lo, hi;
};

inline OutRange valid_out_range(std::size_t out_size, int stride, int pad,
                                std::size_t k, std::size_t limit) {
    const long off = static_cast<long>(k) - pad;  // ix = ox*stride + off
    long lo = 0;
    if (off < 0) lo = (-off + stride - 1) / stride;
    long hi = static_cast<long>(out_size);
    // need ox*stride + off <= limit-1
    const long num = static_cast<long>(limit) - 1 - off;
    hi = num < 0 ? 0 : std::min(hi, num / stride + 1);
    lo = std::min(std::max(lo, 0L), static_cast<long>(out_size));
    hi = std::max(hi, lo);
    return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

inline void check_conv_shapes(const Tensor& input, const Tensor& kernels,
                              const Tensor& bias, int stride, int pad) {
    if (input.rank() != 3)
        throw std::invalid_argument("conv2d: input must be CxHxW, got " +
                                    input.shape_string());
    if (kernels.rank() != 4)
        throw std::invalid_argument("conv2d: kernels must be CoxCixKhxKw, got " +
                                    kernels.shape_string());
    if (bias.rank() != 1 || bias.shape[0] != kernels.shape[0])
        throw std::invalid_argument("conv2d: bias must be [Co], got " +
                                    bias.shape_string());
    if (kernels.shape[1] != input.shape[0])
        throw std::invalid_argument("conv2d: input channels " +
                                    std::to_string(input.shape[0]) +
                                    " do not match kernel channels " +
                                    std::to_string(kernels.shape[1]));
    if (kernels.shape[2] % 2 == 0 || kernels.shape[3] % 2 == 0)
        throw std::invalid_argument("conv2d: kernel sides must be odd, got " +
                                    kernels.shape_string());
    if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
    if (pad < 0) throw std::invalid_argument("conv2d: pad must be >= 0");
    const std::size_t H = input.shape[1], W = input.shape[2];
    const std::size_t kH = kernels.shape[2], kW = kernels.shape[3];
    if (H + 2 * pad < kH || W + 2 * pad < kW ||
        (H + 2 * pad - kH) % stride != 0 || (W + 2 * pad - kW) % stride != 0)
        throw std::invalid_argument(
            "conv2d: output size is not integral for input " +
            input.shape_string() + ", kernel " + kernels.shape_string() +
            ", stride " + std::to_string(stride) + ", pad " +
            std::to_string(pad));
}

}  // namespace detail

/// Cross-correlation with zero padding. input [Ci,H,W], kernels [Co,Ci,kH,kW],
/// bias [Co] -> output [Co,H',W'] with H' = (H + 2 pad - kH)/stride + 1.
inline Tensor conv2d_forward(const Tensor& input, const Tensor& kernels,
                             const Tensor& bias, int stride, int pad) {
    detail::check_conv_shapes(input, kernels, bias, stride, pad);
    const std::size_t Ci = input.shape[0], H = input.shape[1], W = input.shape[2];
    const std::size_t Co = kernels.shape[0], kH = kernels.shape[2], kW = kernels.shape[3];
    const std::size_t Ho = (H + 2 * pad - kH) / stride + 1;
    const std::size_t Wo = (W + 2 * pad - kW) / stride + 1;

    Tensor out({Co, Ho, Wo});
    for (std::size_t co = 0; co < Co; ++co) {
        double* out_plane = out.data.data() + co * Ho * Wo;
        const double b = bias[co];
        for (std::size_t i = 0; i < Ho * Wo; ++i) out_plane[i] = b;
        for (std::size_t ci = 0; ci < Ci; ++ci) {
            const double* in_plane = input.data.data() + ci * H * W;
            for (std::size_t ky = 0; ky < kH; ++ky) {
                for (std::size_t kx = 0; kx < kW; ++kx) {
                    const double w =
                        kernels.data[((co * Ci + ci) * kH + ky) * kW + kx];
                    if (w == 0.0) continue;
                    const auto ry = detail::valid_out_range(Ho, stride, pad, ky, H);
                    const auto rx = detail::valid_out_range(Wo, stride, pad, kx, W);
                    for (std::size_t oy = ry.lo; oy < ry.hi; ++oy) {
                        const std::size_t iy = oy * stride - pad + ky;
                        const double* in_row = in_plane + iy * W;
                        double* out_row = out_plane + oy * Wo;
                        const long xoff = static_cast<long>(kx) - pad;
                        if (stride == 1) {
                            const double* in_base = in_row + xoff;
                            for (std::size_t ox = rx.lo; ox < rx.hi; ++ox)
                                out_row[ox] += w * in_base[ox];
                        } else {
                            for (std::size_t ox = rx.lo; ox < rx.hi; ++ox)
                                out_row[ox] += w * in_row[ox * stride + xoff];
                        }
                    }
                }
            }
        }
    }
    return out;
}

struct Conv2dGrads {
    Tensor input;
    Tensor kernels;
    Tensor bias;
};

/// Gradients of conv2d_forward. grad_out must have the forward's output shape;
/// saved_input and kernels are the forward arguments.
inline Conv2dGrads conv2d_backward(const Tensor& grad_out, const Tensor& saved_input,
                                   const Tensor& kernels, int stride, int pad,
                                   bool need_weight_grads = true) {
    const std::size_t Ci = saved_input.shape[0], H = saved_input.shape[1],
                      W = saved_input.shape[2];
    const std::size_t Co = kernels.shape[0], kH = kernels.shape[2], kW = kernels.shape[3];
    Tensor bias_dummy({Co});
    detail::check_conv_shapes(saved_input, kernels, bias_dummy, stride, pad);
    const std::size_t Ho = (H + 2 * pad - kH) / stride + 1;
    const std::size_t Wo = (W + 2 * pad - kW) / stride + 1;
    if (grad_out.shape != std::vector<std::size_t>{Co, Ho, Wo})
        throw std::invalid_argument("conv2d_backward: grad_out shape " +
                                    grad_out.shape_string() + " does not match " +
                                    "forward output");

    Conv2dGrads g;
    g.input = Tensor({Ci, H, W});
    if (need_weight_grads) {
        g.kernels = Tensor({Co, Ci, kH, kW});
        g.bias = Tensor({Co});
    }

    for (std::size_t co = 0; co < Co; ++co) {
        const double* go_plane = grad_out.data.data() + co * Ho * Wo;
        if (need_weight_grads) {
            double acc = 0.0;
            for (std::size_t i = 0; i < Ho * Wo; ++i) acc += go_plane[i];
            g.bias[co] = acc;
        }
        for (std::size_t ci = 0; ci < Ci; ++ci) {
            const double* in_plane = saved_input.data.data() + ci * H * W;
            double* gi_plane = g.input.data.data() + ci * H * W;
            for (std::size_t ky = 0; ky < kH; ++ky) {
                for (std::size_t kx = 0; kx < kW; ++kx) {
                    const double w =
                        kernels.data[((co * Ci + ci) * kH + ky) * kW + kx];
                    double wacc = 0.0;
                    const auto ry = detail::valid_out_range(Ho, stride, pad, ky, H);
                    const auto rx = detail::valid_out_range(Wo, stride, pad, kx, W);
                    for (std::size_t oy = ry.lo; oy < ry.hi; ++oy) {
                        const std::size_t iy = oy * stride - pad + ky;
                        const double* in_row = in_plane + iy * W;
                        double* gi_row = gi_plane + iy * W;
                        const double* go_row = go_plane + oy * Wo;
                        const long xoff = static_cast<long>(kx) - pad;
                        if (stride == 1) {
                            double* gi_base = gi_row + xoff;
                            const double* in_base = in_row + xoff;
                            for (std::size_t ox = rx.lo; ox < rx.hi; ++ox) {
                                gi_base[ox] += w * go_row[ox];
                                wacc += in_base[ox] * go_row[ox];
                            }
                        } else {
                            for (std::size_t ox = rx.lo; ox < rx.hi; ++ox) {
                                gi_row[ox * stride + xoff] += w * go_row[ox];
                                wacc += in_row[ox * stride + xoff] * go_row[ox];
                            }
                        }
                    }
                    if (need_weight_grads)
                        g.kernels.data[((co * Ci + ci) * kH + ky) * kW + kx] = wacc;
                }
            }
        }
    }
    return g;
}

inline Tensor leaky_relu_forward(const Tensor& x, double slope) {
    Tensor out = x;
    for (double& v : out.data) v = v > 0.0 ? v : slope * v;
    return out;
}

inline Tensor leaky_relu_backward(const Tensor& grad_out, const Tensor& saved_input,
                                  double slope) {
    grad_out.require_same_shape(saved_input, "leaky_relu_backward");
    Tensor g = grad_out;
    for (std::size_t i = 0; i < g.size(); ++i)
        if (saved_input[i] <= 0.0) g[i] *= slope;
    return g;
}

inline Tensor sigmoid_forward(const Tensor& x) {
    Tensor out = x;
    for (double& v : out.data) v = sigmoid(v);
    return out;
}

/// Backward from the saved forward *output* y = sigmoid(x): dx = g * y * (1-y).
inline Tensor sigmoid_backward(const Tensor& grad_out, const Tensor& saved_output) {
    grad_out.require_same_shape(saved_output, "sigmoid_backward");
    Tensor g = grad_out;
    for (std::size_t i = 0; i < g.size(); ++i) {
        const double y = saved_output[i];
        g[i] *= y * (1.0 - y);
    }
    return g;
}

namespace detail {

struct AxisStrides {
    std::size_t outer, axis_len, inner;
};

inline AxisStrides axis_strides(const Tensor& x, std::size_t axis) {
    if (axis >= x.rank())
        throw std::invalid_argument("softmax: axis " + std::to_string(axis) +
                                    " out of range for " + x.shape_string());
    AxisStrides s{1, x.shape[axis], 1};
    for (std::size_t i = 0; i < axis; ++i) s.outer *= x.shape[i];
    for (std::size_t i = axis + 1; i < x.rank(); ++i) s.inner *= x.shape[i];
    return s;
}

}  // namespace detail

/// Softmax along `axis`, computed with max-subtraction. Output sums to 1
/// along the axis.
inline Tensor softmax_forward(const Tensor& x, std::size_t axis) {
    const auto s = detail::axis_strides(x, axis);
    Tensor out = x;
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t in = 0; in < s.inner; ++in) {
            const std::size_t base = o * s.axis_len * s.inner + in;
            double mx = x.data[base];
            for (std::size_t a = 1; a < s.axis_len; ++a)
                mx = std::max(mx, x.data[base + a * s.inner]);
            double sum = 0.0;
            for (std::size_t a = 0; a < s.axis_len; ++a) {
                const double e = std::exp(x.data[base + a * s.inner] - mx);
                out.data[base + a * s.inner] = e;
                sum += e;
            }
            for (std::size_t a = 0; a < s.axis_len; ++a)
                out.data[base + a * s.inner] /= sum;
        }
    }
    return out;
}

/// Backward from the saved forward output y: dx_i = y_i (g_i - sum_j g_j y_j).
inline Tensor softmax_backward(const Tensor& grad_out, const Tensor& saved_output,
                               std::size_t axis) {
    grad_out.require_same_shape(saved_output, "softmax_backward");
    const auto s = detail::axis_strides(saved_output, axis);
    Tensor g = grad_out;
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t in = 0; in < s.inner; ++in) {
            const std::size_t base = o * s.axis_len * s.inner + in;
            double dot = 0.0;
            for (std::size_t a = 0; a < s.axis_len; ++a)
                dot += grad_out.data[base + a * s.inner] *
                       saved_output.data[base + a * s.inner];
            for (std::size_t a = 0; a < s.axis_len; ++a) {
                const std::size_t i = base + a * s.inner;
                g.data[i] = saved_output.data[i] * (grad_out.data[i] - dot);
            }
        }
    }
    return g;
}

struct MaxPoolResult {
    Tensor output;
    /// Flat input-plane index of the chosen element, per output element.
    std::vector<std::size_t> argmax;
};

/// 2x2 max pooling with stride 2. H and W must be even. Ties resolve to the
/// first element in scan order, so the pass is deterministic.
inline MaxPoolResult maxpool2_forward(const Tensor& x) {
    if (x.rank() != 3)
        throw std::invalid_argument("maxpool2: input must be CxHxW, got " +
                                    x.shape_string());
    const std::size_t C = x.shape[0], H = x.shape[1], W = x.shape[2];
    if (H % 2 != 0 || W % 2 != 0)
        throw std::invalid_argument("maxpool2: H and W must be even, got " +
                                    x.shape_string());
    MaxPoolResult r;
    r.output = Tensor({C, H / 2, W / 2});
    r.argmax.resize(r.output.size());
    for (std::size_t c = 0; c < C; ++c) {
        const double* in_plane = x.data.data() + c * H * W;
        for (std::size_t oy = 0; oy < H / 2; ++oy) {
            for (std::size_t ox = 0; ox < W / 2; ++ox) {
                std::size_t best = (2 * oy) * W + 2 * ox;
                double best_v = in_plane[best];
                const std::size_t cand[3] = {(2 * oy) * W + 2 * ox + 1,
                                             (2 * oy + 1) * W + 2 * ox,
                                             (2 * oy + 1) * W + 2 * ox + 1};
                for (std::size_t idx : cand) {
                    if (in_plane[idx] > best_v) {
                        best_v = in_plane[idx];
                        best = idx;
                    }
                }
                const std::size_t out_idx = (c * (H / 2) + oy) * (W / 2) + ox;
                r.output.data[out_idx] = best_v;
                r.argmax[out_idx] = best;
            }
        }
    }
    return r;
}

inline Tensor maxpool2_backward(const Tensor& grad_out,
                                const std::vector<std::size_t>& argmax,
                                const std::vector<std::size_t>& input_shape) {
    if (grad_out.size() != argmax.size())
        throw std::invalid_argument("maxpool2_backward: grad/argmax size mismatch");
    Tensor g(input_shape);
    const std::size_t C = input_shape[0], H = input_shape[1], W = input_shape[2];
    const std::size_t plane = H * W, out_plane = (H / 2) * (W / 2);
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < out_plane; ++i)
            g.data[c * plane + argmax[c * out_plane + i]] +=
                grad_out.data[c * out_plane + i];
    return g;
}

}  // namespace hitm::nn
