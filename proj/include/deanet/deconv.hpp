#pragma once

// Detail-enhanced convolution: one vanilla 3x3 branch plus four difference
// branches (CDC, ADC, HDC, VDC), each stored in its natural pair
// parameterization. Every branch lowers to an equivalent dense 3x3 kernel,
// and the five kernels sum into a single fused kernel that reproduces the
// parallel form exactly.

#include <array>
#include <string>

#include "deanet/tensor.hpp"

namespace deanet {

/// Ring positions of a 3x3 patch, clockwise from the top-left corner.
inline constexpr std::array<std::array<int, 2>, 8> kRing = {{
    {0, 0}, {0, 1}, {0, 2}, {1, 2}, {2, 2}, {2, 1}, {2, 0}, {1, 0},
}};

template <typename T>
struct DEConvParamsT {
    TensorPtrT<T> vc;    // [oc,ic,3,3] vanilla kernel
    TensorPtrT<T> cdc;   // [oc,ic,3,3] per-tap weights, each paired with the center
    TensorPtrT<T> adc;   // [oc,ic,1,8] ring weights, clockwise from top-left
    TensorPtrT<T> hdc;   // [oc,ic,3,2] per-row (left-pair, right-pair) weights
    TensorPtrT<T> vdc;   // [oc,ic,2,3] per-column (top-pair, bottom-pair) weights
    TensorPtrT<T> bias;  // [oc,1,1,1], shared by the whole DEConv

    int out_channels() const { return vc->shape.n; }
    int in_channels() const { return vc->shape.c; }
};

using DEConvParams = DEConvParamsT<float>;

template <typename T>
struct FusedKernelT {
    TensorPtrT<T> kernel;  // [oc,ic,3,3]
    TensorPtrT<T> bias;    // [oc,1,1,1]
};

using FusedKernel = FusedKernelT<float>;

namespace detail {

template <typename T>
void check_branch_shape(const TensorPtrT<T>& t, int oc, int ic, int h, int w,
                        const char* name) {
    if (!t || t->shape != Shape{oc, ic, h, w}) {
        throw DimensionError(std::string("DEConv: ") + name + " must be [" +
                             std::to_string(oc) + "," + std::to_string(ic) + "," +
                             std::to_string(h) + "," + std::to_string(w) + "]");
    }
}

}  // namespace detail

/// Zero-initialized parameter set. Only 3x3 spatial extent is supported.
template <typename T>
DEConvParamsT<T> make_deconv_params(int out_channels, int in_channels) {
    if (out_channels < 1 || in_channels < 1) {
        throw DimensionError("DEConv: channel counts must be positive");
    }
    DEConvParamsT<T> p;
    p.vc = make_leaf<T>({out_channels, in_channels, 3, 3});
    p.cdc = make_leaf<T>({out_channels, in_channels, 3, 3});
    p.adc = make_leaf<T>({out_channels, in_channels, 1, 8});
    p.hdc = make_leaf<T>({out_channels, in_channels, 3, 2});
    p.vdc = make_leaf<T>({out_channels, in_channels, 2, 3});
    p.bias = make_leaf<T>({out_channels, 1, 1, 1});
    return p;
}

template <typename T>
void validate_deconv_params(const DEConvParamsT<T>& p) {
    const int oc = p.vc ? p.vc->shape.n : 0;
    const int ic = p.vc ? p.vc->shape.c : 0;
    detail::check_branch_shape(p.vc, oc, ic, 3, 3, "vc");
    detail::check_branch_shape(p.cdc, oc, ic, 3, 3, "cdc");
    detail::check_branch_shape(p.adc, oc, ic, 1, 8, "adc");
    detail::check_branch_shape(p.hdc, oc, ic, 3, 2, "hdc");
    detail::check_branch_shape(p.vdc, oc, ic, 2, 3, "vdc");
    if (!p.bias || p.bias->shape != Shape{oc, 1, 1, 1}) {
        throw DimensionError("DEConv: bias must be [oc,1,1,1]");
    }
}

// Each equivalent-kernel constructor is a linear map from the raw branch
// weights to a dense 3x3 kernel, differentiable so training can run on the
// branch parameterization directly.

/// CDC pairs every tap with the center: out = sum_p w(p)*(x(p) - x(center)).
/// Dense form: Ke(p) = w(p) for p != center, Ke(center) = w(center) - sum w.
template <typename T>
TensorPtrT<T> equivalent_kernel_cdc(const TensorPtrT<T>& cdc, TapeT<T>* tape = nullptr) {
    const Shape s = cdc->shape;
    if (s.h != 3 || s.w != 3) throw DimensionError("equivalent_kernel_cdc: weights must be 3x3");
    auto ke = make_tensor<T>(s);
    const std::size_t slices = std::size_t(s.n) * s.c;
    for (std::size_t sl = 0; sl < slices; ++sl) {
        const T* w = cdc->data.data() + sl * 9;
        T* k = ke->data.data() + sl * 9;
        // w(center) cancels out of w(center) - sum(w); summing the other
        // eight taps keeps that cancellation exact in floating point
        double total = 0.0;
        for (int i = 0; i < 9; ++i) {
            if (i != 4) total += double(w[i]);
        }
        for (int i = 0; i < 9; ++i) k[i] = w[i];
        k[4] = T(-total);
    }
    if (tape && cdc->requires_grad) {
        ke->requires_grad = true;
        tape->record(ke, [cdc, ke, slices] {
            cdc->ensure_grad();
            for (std::size_t sl = 0; sl < slices; ++sl) {
                const T* gk = ke->grad.data() + sl * 9;
                T* gw = cdc->grad.data() + sl * 9;
                const T gc = gk[4];
                for (int i = 0; i < 9; ++i) {
                    if (i != 4) gw[i] += gk[i] - gc;
                }
                // center weight cancels out of the dense form entirely
            }
        });
    }
    return ke;
}

/// ADC pairs clockwise ring neighbours: out = sum_i w_i*(x(r_i) - x(r_{i+1})).
/// Dense form: Ke(r_i) = w_i - w_{i-1}, Ke(center) = 0.
template <typename T>
TensorPtrT<T> equivalent_kernel_adc(const TensorPtrT<T>& adc, TapeT<T>* tape = nullptr) {
    const Shape s = adc->shape;
    if (s.h != 1 || s.w != 8) throw DimensionError("equivalent_kernel_adc: expected 8 ring weights");
    auto ke = make_tensor<T>(Shape{s.n, s.c, 3, 3});
    const std::size_t slices = std::size_t(s.n) * s.c;
    for (std::size_t sl = 0; sl < slices; ++sl) {
        const T* w = adc->data.data() + sl * 8;
        T* k = ke->data.data() + sl * 9;
        for (int i = 0; i < 8; ++i) {
            k[kRing[i][0] * 3 + kRing[i][1]] = w[i] - w[(i + 7) % 8];
        }
        k[4] = T(0);
    }
    if (tape && adc->requires_grad) {
        ke->requires_grad = true;
        tape->record(ke, [adc, ke, slices] {
            adc->ensure_grad();
            for (std::size_t sl = 0; sl < slices; ++sl) {
                const T* gk = ke->grad.data() + sl * 9;
                T* gw = adc->grad.data() + sl * 8;
                for (int i = 0; i < 8; ++i) {
                    gw[i] += gk[kRing[i][0] * 3 + kRing[i][1]] -
                             gk[kRing[(i + 1) % 8][0] * 3 + kRing[(i + 1) % 8][1]];
                }
            }
        });
    }
    return ke;
}

/// HDC uses two horizontal pairs per row: a_r*(x[r][1]-x[r][0]) and
/// b_r*(x[r][2]-x[r][1]). Dense row: [-a_r, a_r - b_r, b_r], row sum 0.
/// a=b=(1,2,1) yields the horizontal Sobel kernel.
template <typename T>
TensorPtrT<T> equivalent_kernel_hdc(const TensorPtrT<T>& hdc, TapeT<T>* tape = nullptr) {
    const Shape s = hdc->shape;
    if (s.h != 3 || s.w != 2) throw DimensionError("equivalent_kernel_hdc: expected [oc,ic,3,2]");
    auto ke = make_tensor<T>(Shape{s.n, s.c, 3, 3});
    const std::size_t slices = std::size_t(s.n) * s.c;
    for (std::size_t sl = 0; sl < slices; ++sl) {
        const T* w = hdc->data.data() + sl * 6;
        T* k = ke->data.data() + sl * 9;
        for (int r = 0; r < 3; ++r) {
            const T a = w[r * 2 + 0], b = w[r * 2 + 1];
            k[r * 3 + 0] = -a;
            k[r * 3 + 1] = a - b;
            k[r * 3 + 2] = b;
        }
    }
    if (tape && hdc->requires_grad) {
        ke->requires_grad = true;
        tape->record(ke, [hdc, ke, slices] {
            hdc->ensure_grad();
            for (std::size_t sl = 0; sl < slices; ++sl) {
                const T* gk = ke->grad.data() + sl * 9;
                T* gw = hdc->grad.data() + sl * 6;
                for (int r = 0; r < 3; ++r) {
                    gw[r * 2 + 0] += gk[r * 3 + 1] - gk[r * 3 + 0];
                    gw[r * 2 + 1] += gk[r * 3 + 2] - gk[r * 3 + 1];
                }
            }
        });
    }
    return ke;
}

/// VDC is the transpose construction of HDC: dense column [-a_c, a_c - b_c,
/// b_c]^T per column, column sum 0. a=b=(1,2,1) yields the vertical Sobel.
template <typename T>
TensorPtrT<T> equivalent_kernel_vdc(const TensorPtrT<T>& vdc, TapeT<T>* tape = nullptr) {
    const Shape s = vdc->shape;
    if (s.h != 2 || s.w != 3) throw DimensionError("equivalent_kernel_vdc: expected [oc,ic,2,3]");
    auto ke = make_tensor<T>(Shape{s.n, s.c, 3, 3});
    const std::size_t slices = std::size_t(s.n) * s.c;
    for (std::size_t sl = 0; sl < slices; ++sl) {
        const T* w = vdc->data.data() + sl * 6;
        T* k = ke->data.data() + sl * 9;
        for (int col = 0; col < 3; ++col) {
            const T a = w[0 * 3 + col], b = w[1 * 3 + col];
            k[0 * 3 + col] = -a;
            k[1 * 3 + col] = a - b;
            k[2 * 3 + col] = b;
        }
    }
    if (tape && vdc->requires_grad) {
        ke->requires_grad = true;
        tape->record(ke, [vdc, ke, slices] {
            vdc->ensure_grad();
            for (std::size_t sl = 0; sl < slices; ++sl) {
                const T* gk = ke->grad.data() + sl * 9;
                T* gw = vdc->grad.data() + sl * 6;
                for (int col = 0; col < 3; ++col) {
                    gw[0 * 3 + col] += gk[1 * 3 + col] - gk[0 * 3 + col];
                    gw[1 * 3 + col] += gk[2 * 3 + col] - gk[1 * 3 + col];
                }
            }
        });
    }
    return ke;
}

template <typename T>
ConvSpec deconv_spec(const DEConvParamsT<T>& p) {
    return ConvSpec{p.in_channels(), p.out_channels(), 3, 3, 1, 1, 1};
}

/// Training-form forward: five parallel stride-1 pad-1 convolutions summed,
/// bias applied once. Gradients flow to the raw branch weights.
template <typename T>
TensorPtrT<T> deconv_forward_unfused(const TensorPtrT<T>& x, const DEConvParamsT<T>& p,
                                     TapeT<T>* tape = nullptr) {
    validate_deconv_params(p);
    const ConvSpec spec = deconv_spec(p);
    auto y = conv2d(x, p.vc, p.bias, spec, tape);
    y = add(y, conv2d(x, equivalent_kernel_cdc(p.cdc, tape), TensorPtrT<T>{}, spec, tape), tape);
    y = add(y, conv2d(x, equivalent_kernel_adc(p.adc, tape), TensorPtrT<T>{}, spec, tape), tape);
    y = add(y, conv2d(x, equivalent_kernel_hdc(p.hdc, tape), TensorPtrT<T>{}, spec, tape), tape);
    y = add(y, conv2d(x, equivalent_kernel_vdc(p.vdc, tape), TensorPtrT<T>{}, spec, tape), tape);
    return y;
}

/// Collapse the five branches into one dense kernel; the shared bias passes
/// through unchanged. Pure inference-time transform.
template <typename T>
FusedKernelT<T> reparameterize(const DEConvParamsT<T>& p) {
    validate_deconv_params(p);
    auto k_cdc = equivalent_kernel_cdc<T>(p.cdc);
    auto k_adc = equivalent_kernel_adc<T>(p.adc);
    auto k_hdc = equivalent_kernel_hdc<T>(p.hdc);
    auto k_vdc = equivalent_kernel_vdc<T>(p.vdc);
    FusedKernelT<T> f;
    f.kernel = make_tensor<T>(p.vc->shape);
    for (std::size_t i = 0; i < f.kernel->numel(); ++i) {
        f.kernel->data[i] = p.vc->data[i] + k_cdc->data[i] + k_adc->data[i] +
                            k_hdc->data[i] + k_vdc->data[i];
    }
    f.bias = make_tensor<T>(p.bias->shape);
    f.bias->data = p.bias->data;
    return f;
}

/// Inference-form forward: a single dense 3x3 convolution.
template <typename T>
TensorPtrT<T> deconv_forward_fused(const TensorPtrT<T>& x, const FusedKernelT<T>& f) {
    const Shape ks = f.kernel->shape;
    if (ks.h != 3 || ks.w != 3) throw DimensionError("deconv_forward_fused: kernel must be 3x3");
    const ConvSpec spec{ks.c, ks.n, 3, 3, 1, 1, 1};
    return conv2d(x, f.kernel, f.bias, spec);
}

}  // namespace deanet
