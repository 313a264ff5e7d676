#pragma once

// Minimal dense NCHW tensor engine with reverse-mode autodiff.
// Scalar type is a template parameter: float is the working precision,
// double exists for high-accuracy gradient checking.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <memory>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

namespace deanet {

struct DimensionError : public std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NumericError : public std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Rank-4 NCHW shape. Dims are non-negative; numel is the product.
struct Shape {
    int n = 0;
    int c = 0;
    int h = 0;
    int w = 0;

    friend bool operator==(const Shape&, const Shape&) = default;

    std::size_t numel() const {
        return std::size_t(n) * std::size_t(c) * std::size_t(h) * std::size_t(w);
    }

    std::string str() const {
        std::ostringstream os;
        os << "[" << n << "," << c << "," << h << "," << w << "]";
        return os.str();
    }
};

/// Geometry of a (possibly grouped, strided) 2-D convolution.
struct ConvSpec {
    int in_channels = 0;
    int out_channels = 0;
    int kernel_h = 0;
    int kernel_w = 0;
    int stride = 1;
    int padding = 0;
    int groups = 1;

    int out_size(int in, int kernel) const {
        return (in + 2 * padding - kernel) / stride + 1;
    }

    void validate() const {
        if (in_channels < 1 || out_channels < 1 || kernel_h < 1 || kernel_w < 1 ||
            stride < 1 || padding < 0 || groups < 1) {
            throw DimensionError("ConvSpec: all fields must be positive (padding >= 0)");
        }
        if (in_channels % groups != 0 || out_channels % groups != 0) {
            throw DimensionError("ConvSpec: channel counts must be divisible by groups");
        }
    }
};

template <typename T>
struct TensorT {
    Shape shape;
    std::vector<T> data;
    bool requires_grad = false;
    std::vector<T> grad;  // empty until a gradient is needed

    TensorT() = default;
    explicit TensorT(Shape s, T fill = T(0)) : shape(s), data(s.numel(), fill) {}

    std::size_t numel() const { return data.size(); }

    std::size_t index(int in, int ic, int iy, int ix) const {
        return ((std::size_t(in) * shape.c + ic) * shape.h + iy) * shape.w + ix;
    }

    T& at(int in, int ic, int iy, int ix) { return data[index(in, ic, iy, ix)]; }
    T at(int in, int ic, int iy, int ix) const { return data[index(in, ic, iy, ix)]; }

    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), T(0));
    }

    void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

template <typename T>
using TensorPtrT = std::shared_ptr<TensorT<T>>;

using Tensor = TensorT<float>;
using TensorPtr = TensorPtrT<float>;

template <typename T>
TensorPtrT<T> make_tensor(Shape s, T fill = T(0)) {
    return std::make_shared<TensorT<T>>(s, fill);
}

/// Leaf with requires_grad set and a zero-initialized gradient buffer.
template <typename T>
TensorPtrT<T> make_leaf(Shape s, T fill = T(0)) {
    auto t = std::make_shared<TensorT<T>>(s, fill);
    t->requires_grad = true;
    t->ensure_grad();
    return t;
}

template <typename T>
TensorPtrT<T> make_uniform(Shape s, std::mt19937& rng, T lo = T(-1), T hi = T(1)) {
    auto t = std::make_shared<TensorT<T>>(s);
    std::uniform_real_distribution<double> dist{double(lo), double(hi)};
    for (auto& v : t->data) v = T(dist(rng));
    return t;
}

namespace detail {

inline int floor_div(int a, int b) {
    int q = a / b;
    int r = a % b;
    return (r != 0 && ((r < 0) != (b < 0))) ? q - 1 : q;
}

inline int ceil_div(int a, int b) { return floor_div(a + b - 1, b); }

// Internal worker cap. Reads DEACONV_THREADS once; default 1 keeps every
// run deterministic without configuration.
inline int& thread_cap() {
    static int cap = [] {
        const char* s = std::getenv("DEACONV_THREADS");
        int v = s ? std::atoi(s) : 1;
        return v < 1 ? 1 : v;
    }();
    return cap;
}

inline void set_thread_cap(int n) { thread_cap() = n < 1 ? 1 : n; }

// Static partition over [0, count). Each index owns disjoint output, and the
// per-index reduction order is fixed, so results are bitwise identical for
// any worker count.
template <typename F>
void parallel_for(int count, F&& fn) {
    const int workers = std::min(thread_cap(), count);
    if (workers <= 1) {
        for (int i = 0; i < count; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int t = 0; t < workers; ++t) {
        const int lo = int(std::int64_t(count) * t / workers);
        const int hi = int(std::int64_t(count) * (t + 1) / workers);
        pool.emplace_back([lo, hi, &fn] {
            for (int i = lo; i < hi; ++i) fn(i);
        });
    }
    for (auto& th : pool) th.join();
}

template <typename T>
void check_finite(const TensorT<T>& t, const char* what) {
    for (const T v : t.data) {
        if (!std::isfinite(double(v))) {
            throw NumericError(std::string(what) + ": non-finite value");
        }
    }
}

}  // namespace detail

/// Records backward rules in forward order; replaying them in reverse
/// accumulates d(loss)/d(leaf) into every requires_grad tensor.
template <typename T>
class TapeT {
public:
    void record(TensorPtrT<T> output, std::function<void()> backward_fn) {
        nodes_.push_back(Node{std::move(output), std::move(backward_fn)});
    }

    std::size_t size() const { return nodes_.size(); }

    void backward(const TensorPtrT<T>& loss) {
        if (loss->shape != Shape{1, 1, 1, 1}) {
            throw DimensionError("backward: loss must be a 1x1x1x1 scalar, got " +
                                 loss->shape.str());
        }
        bool recorded = false;
        for (const auto& node : nodes_) {
            if (node.output == loss) {
                recorded = true;
                break;
            }
        }
        if (!recorded) {
            throw DimensionError("backward: loss was not produced by an op on this tape");
        }
        // Intermediate grads are scratch; leaf grads persist and accumulate
        // across repeated backward calls.
        for (auto& node : nodes_) node.output->grad.clear();
        loss->grad.assign(1, T(1));
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            if (!it->output->grad.empty()) it->fn();
        }
    }

private:
    struct Node {
        TensorPtrT<T> output;
        std::function<void()> fn;
    };
    std::vector<Node> nodes_;
};

using Tape = TapeT<float>;

template <typename T>
void backward(TapeT<T>& tape, const TensorPtrT<T>& loss) {
    tape.backward(loss);
}

// ---------------------------------------------------------------------------
// Convolution kernels (direct, cache-friendly over output rows)

namespace detail {

template <typename T>
void conv2d_forward(TensorT<T>& y, const TensorT<T>& x, const TensorT<T>& k,
                    const TensorT<T>* bias, const ConvSpec& spec) {
    const int ih = x.shape.h, iw = x.shape.w;
    const int oh = y.shape.h, ow = y.shape.w;
    const int kh = spec.kernel_h, kw = spec.kernel_w;
    const int s = spec.stride, p = spec.padding;
    const int icpg = spec.in_channels / spec.groups;
    const int ocpg = spec.out_channels / spec.groups;
    const T* xb = x.data.data();
    const T* kb = k.data.data();
    T* yb = y.data.data();

    // Forward sums accumulate in double so that downstream finite-difference
    // checks are not drowned by per-tap rounding; results store back to T.
    const int planes = x.shape.n * spec.out_channels;
    parallel_for(planes, [&](int plane) {
        const int in = plane / spec.out_channels;
        const int oc = plane % spec.out_channels;
        const int g = oc / ocpg;
        std::vector<double> acc(std::size_t(oh) * ow, bias ? double(bias->data[oc]) : 0.0);
        for (int icg = 0; icg < icpg; ++icg) {
            const int ic = g * icpg + icg;
            const T* xplane = xb + (std::size_t(in) * spec.in_channels + ic) * ih * iw;
            const T* kk = kb + (std::size_t(oc) * icpg + icg) * kh * kw;
            for (int ky = 0; ky < kh; ++ky) {
                for (int kx = 0; kx < kw; ++kx) {
                    const double wgt = double(kk[ky * kw + kx]);
                    const int ox0 = std::max(0, ceil_div(p - kx, s));
                    const int ox1 = std::min(ow, floor_div(iw - 1 + p - kx, s) + 1);
                    if (ox1 <= ox0) continue;
                    for (int oy = 0; oy < oh; ++oy) {
                        const int iy = oy * s - p + ky;
                        if (iy < 0 || iy >= ih) continue;
                        const T* xrow = xplane + std::size_t(iy) * iw;
                        double* arow = acc.data() + std::size_t(oy) * ow;
                        if (s == 1) {
                            const T* xr = xrow + (kx - p);
                            for (int ox = ox0; ox < ox1; ++ox) arow[ox] += wgt * double(xr[ox]);
                        } else {
                            for (int ox = ox0; ox < ox1; ++ox) {
                                arow[ox] += wgt * double(xrow[ox * s - p + kx]);
                            }
                        }
                    }
                }
            }
        }
        T* yplane = yb + (std::size_t(in) * spec.out_channels + oc) * oh * ow;
        for (std::size_t i = 0; i < acc.size(); ++i) yplane[i] = T(acc[i]);
    });
}

// Accumulates into x.grad / k.grad / bias.grad for whichever inputs want it.
template <typename T>
void conv2d_backward(TensorT<T>& y, const TensorT<T>& x, const TensorT<T>& k,
                     const TensorT<T>* bias, const ConvSpec& spec,
                     TensorT<T>* xg, TensorT<T>* kg, TensorT<T>* bg) {
    const int ih = x.shape.h, iw = x.shape.w;
    const int oh = y.shape.h, ow = y.shape.w;
    const int kh = spec.kernel_h, kw = spec.kernel_w;
    const int s = spec.stride, p = spec.padding;
    const int icpg = spec.in_channels / spec.groups;
    const int ocpg = spec.out_channels / spec.groups;
    const T* gyb = y.grad.data();
    const T* xb = x.data.data();
    const T* kb = k.data.data();
    (void)bias;

    if (xg) {
        xg->ensure_grad();
        T* gxb = xg->grad.data();
        parallel_for(x.shape.n, [&](int in) {
            std::vector<double> acc(std::size_t(spec.in_channels) * ih * iw, 0.0);
            for (int oc = 0; oc < spec.out_channels; ++oc) {
                const int g = oc / ocpg;
                const T* gyplane = gyb + (std::size_t(in) * spec.out_channels + oc) * oh * ow;
                for (int icg = 0; icg < icpg; ++icg) {
                    const int ic = g * icpg + icg;
                    double* gxplane = acc.data() + std::size_t(ic) * ih * iw;
                    const T* kk = kb + (std::size_t(oc) * icpg + icg) * kh * kw;
                    for (int ky = 0; ky < kh; ++ky) {
                        for (int kx = 0; kx < kw; ++kx) {
                            const double wgt = double(kk[ky * kw + kx]);
                            const int ox0 = std::max(0, ceil_div(p - kx, s));
                            const int ox1 = std::min(ow, floor_div(iw - 1 + p - kx, s) + 1);
                            if (ox1 <= ox0) continue;
                            for (int oy = 0; oy < oh; ++oy) {
                                const int iy = oy * s - p + ky;
                                if (iy < 0 || iy >= ih) continue;
                                double* gxrow = gxplane + std::size_t(iy) * iw;
                                const T* gyrow = gyplane + std::size_t(oy) * ow;
                                if (s == 1) {
                                    double* gxr = gxrow + (kx - p);
                                    for (int ox = ox0; ox < ox1; ++ox) {
                                        gxr[ox] += wgt * double(gyrow[ox]);
                                    }
                                } else {
                                    for (int ox = ox0; ox < ox1; ++ox) {
                                        gxrow[ox * s - p + kx] += wgt * double(gyrow[ox]);
                                    }
                                }
                            }
                        }
                    }
                }
            }
            T* gx = gxb + std::size_t(in) * spec.in_channels * ih * iw;
            for (std::size_t i = 0; i < acc.size(); ++i) gx[i] += T(acc[i]);
        });
    }

    if (kg) {
        kg->ensure_grad();
        T* gkb = kg->grad.data();
        parallel_for(spec.out_channels, [&](int oc) {
            const int g = oc / ocpg;
            for (int icg = 0; icg < icpg; ++icg) {
                const int ic = g * icpg + icg;
                T* gkk = gkb + (std::size_t(oc) * icpg + icg) * kh * kw;
                for (int ky = 0; ky < kh; ++ky) {
                    for (int kx = 0; kx < kw; ++kx) {
                        const int ox0 = std::max(0, ceil_div(p - kx, s));
                        const int ox1 = std::min(ow, floor_div(iw - 1 + p - kx, s) + 1);
                        if (ox1 <= ox0) continue;
                        double acc = 0.0;
                        for (int in = 0; in < x.shape.n; ++in) {
                            const T* gyplane =
                                gyb + (std::size_t(in) * spec.out_channels + oc) * oh * ow;
                            const T* xplane =
                                xb + (std::size_t(in) * spec.in_channels + ic) * ih * iw;
                            for (int oy = 0; oy < oh; ++oy) {
                                const int iy = oy * s - p + ky;
                                if (iy < 0 || iy >= ih) continue;
                                const T* xrow = xplane + std::size_t(iy) * iw;
                                const T* gyrow = gyplane + std::size_t(oy) * ow;
                                if (s == 1) {
                                    const T* xr = xrow + (kx - p);
                                    for (int ox = ox0; ox < ox1; ++ox) {
                                        acc += double(gyrow[ox]) * double(xr[ox]);
                                    }
                                } else {
                                    for (int ox = ox0; ox < ox1; ++ox) {
                                        acc += double(gyrow[ox]) * double(xrow[ox * s - p + kx]);
                                    }
                                }
                            }
                        }
                        gkk[ky * kw + kx] += T(acc);
                    }
                }
            }
        });
    }

    if (bg) {
        bg->ensure_grad();
        for (int oc = 0; oc < spec.out_channels; ++oc) {
            double acc = 0.0;
            for (int in = 0; in < x.shape.n; ++in) {
                const T* gyplane = gyb + (std::size_t(in) * spec.out_channels + oc) * oh * ow;
                for (std::size_t i = 0; i < std::size_t(oh) * ow; ++i) {
                    acc += double(gyplane[i]);
                }
            }
            bg->grad[oc] += T(acc);
        }
    }
}

}  // namespace detail

/// Direct cross-correlation (no kernel flip) with zero padding.
/// kernel is [oc, ic/groups, kh, kw]; bias (optional) is [oc,1,1,1].
template <typename T>
TensorPtrT<T> conv2d(const TensorPtrT<T>& x, const TensorPtrT<T>& kernel,
                     const TensorPtrT<T>& bias, const ConvSpec& spec,
                     TapeT<T>* tape = nullptr) {
    spec.validate();
    const Shape xs = x->shape;
    if (xs.c != spec.in_channels) {
        throw DimensionError("conv2d: input has " + std::to_string(xs.c) +
                             " channels, spec wants " + std::to_string(spec.in_channels));
    }
    const int icpg = spec.in_channels / spec.groups;
    if (kernel->shape != Shape{spec.out_channels, icpg, spec.kernel_h, spec.kernel_w}) {
        throw DimensionError("conv2d: kernel shape " + kernel->shape.str() +
                             " does not match spec");
    }
    if (bias && bias->shape != Shape{spec.out_channels, 1, 1, 1}) {
        throw DimensionError("conv2d: bias shape " + bias->shape.str());
    }
    const int oh = spec.out_size(xs.h, spec.kernel_h);
    const int ow = spec.out_size(xs.w, spec.kernel_w);
    if (oh < 1 || ow < 1) {
        throw DimensionError("conv2d: output would be empty for input " + xs.str());
    }
    detail::check_finite(*x, "conv2d input");
    detail::check_finite(*kernel, "conv2d kernel");
    if (bias) detail::check_finite(*bias, "conv2d bias");

    auto y = make_tensor<T>({xs.n, spec.out_channels, oh, ow});
    detail::conv2d_forward(*y, *x, *kernel, bias.get(), spec);

    const bool need = x->requires_grad || kernel->requires_grad || (bias && bias->requires_grad);
    if (tape && need) {
        y->requires_grad = true;
        tape->record(y, [x, kernel, bias, y, spec] {
            detail::conv2d_backward(*y, *x, *kernel, bias.get(), spec,
                                    x->requires_grad ? x.get() : nullptr,
                                    kernel->requires_grad ? kernel.get() : nullptr,
                                    (bias && bias->requires_grad) ? bias.get() : nullptr);
        });
    }
    return y;
}

namespace detail {

template <typename T>
void conv_transpose2d_forward(TensorT<T>& y, const TensorT<T>& x, const TensorT<T>& k,
                              const TensorT<T>* bias, const ConvSpec& spec) {
    const int ih = x.shape.h, iw = x.shape.w;
    const int oh = y.shape.h, ow = y.shape.w;
    const int kh = spec.kernel_h, kw = spec.kernel_w;
    const int s = spec.stride, p = spec.padding;
    const T* xb = x.data.data();
    const T* kb = k.data.data();
    T* yb = y.data.data();

    parallel_for(x.shape.n, [&](int in) {
        std::vector<double> acc(std::size_t(spec.out_channels) * oh * ow);
        for (int co = 0; co < spec.out_channels; ++co) {
            double* aplane = acc.data() + std::size_t(co) * oh * ow;
            std::fill(aplane, aplane + std::size_t(oh) * ow, bias ? double(bias->data[co]) : 0.0);
        }
        for (int ci = 0; ci < spec.in_channels; ++ci) {
            const T* xplane = xb + (std::size_t(in) * spec.in_channels + ci) * ih * iw;
            for (int co = 0; co < spec.out_channels; ++co) {
                double* aplane = acc.data() + std::size_t(co) * oh * ow;
                const T* kk = kb + (std::size_t(ci) * spec.out_channels + co) * kh * kw;
                for (int ky = 0; ky < kh; ++ky) {
                    for (int kx = 0; kx < kw; ++kx) {
                        const double wgt = double(kk[ky * kw + kx]);
                        for (int iy = 0; iy < ih; ++iy) {
                            const int oy = iy * s - p + ky;
                            if (oy < 0 || oy >= oh) continue;
                            const T* xrow = xplane + std::size_t(iy) * iw;
                            double* arow = aplane + std::size_t(oy) * ow;
                            for (int ix = 0; ix < iw; ++ix) {
                                const int ox = ix * s - p + kx;
                                if (ox < 0 || ox >= ow) continue;
                                arow[ox] += wgt * double(xrow[ix]);
                            }
                        }
                    }
                }
            }
        }
        T* yplane = yb + std::size_t(in) * spec.out_channels * oh * ow;
        for (std::size_t i = 0; i < acc.size(); ++i) yplane[i] = T(acc[i]);
    });
}

template <typename T>
void conv_transpose2d_backward(TensorT<T>& y, const TensorT<T>& x, const TensorT<T>& k,
                               const ConvSpec& spec, TensorT<T>* xg, TensorT<T>* kg,
                               TensorT<T>* bg) {
    const int ih = x.shape.h, iw = x.shape.w;
    const int oh = y.shape.h, ow = y.shape.w;
    const int kh = spec.kernel_h, kw = spec.kernel_w;
    const int s = spec.stride, p = spec.padding;
    const T* gyb = y.grad.data();
    const T* xb = x.data.data();
    const T* kb = k.data.data();

    if (xg) {
        xg->ensure_grad();
        T* gxb = xg->grad.data();
        // gather: gx[n,ci,iy,ix] = sum_{co,ky,kx} gy[n,co,iy*s-p+ky,ix*s-p+kx]*k[ci,co,ky,kx]
        parallel_for(x.shape.n, [&](int in) {
            std::vector<double> acc(std::size_t(spec.in_channels) * ih * iw, 0.0);
            for (int ci = 0; ci < spec.in_channels; ++ci) {
                double* gxplane = acc.data() + std::size_t(ci) * ih * iw;
                for (int co = 0; co < spec.out_channels; ++co) {
                    const T* gyplane =
                        gyb + (std::size_t(in) * spec.out_channels + co) * oh * ow;
                    const T* kk = kb + (std::size_t(ci) * spec.out_channels + co) * kh * kw;
                    for (int ky = 0; ky < kh; ++ky) {
                        for (int kx = 0; kx < kw; ++kx) {
                            const double wgt = double(kk[ky * kw + kx]);
                            for (int iy = 0; iy < ih; ++iy) {
                                const int oy = iy * s - p + ky;
                                if (oy < 0 || oy >= oh) continue;
                                double* gxrow = gxplane + std::size_t(iy) * iw;
                                const T* gyrow = gyplane + std::size_t(oy) * ow;
                                for (int ix = 0; ix < iw; ++ix) {
                                    const int ox = ix * s - p + kx;
                                    if (ox < 0 || ox >= ow) continue;
                                    gxrow[ix] += wgt * double(gyrow[ox]);
                                }
                            }
                        }
                    }
                }
            }
            T* gx = gxb + std::size_t(in) * spec.in_channels * ih * iw;
            for (std::size_t i = 0; i < acc.size(); ++i) gx[i] += T(acc[i]);
        });
    }

    if (kg) {
        kg->ensure_grad();
        T* gkb = kg->grad.data();
        for (int ci = 0; ci < spec.in_channels; ++ci) {
            for (int co = 0; co < spec.out_channels; ++co) {
                T* gkk = gkb + (std::size_t(ci) * spec.out_channels + co) * kh * kw;
                for (int ky = 0; ky < kh; ++ky) {
                    for (int kx = 0; kx < kw; ++kx) {
                        double acc = 0.0;
                        for (int in = 0; in < x.shape.n; ++in) {
                            const T* xplane =
                                xb + (std::size_t(in) * spec.in_channels + ci) * ih * iw;
                            const T* gyplane =
                                gyb + (std::size_t(in) * spec.out_channels + co) * oh * ow;
                            for (int iy = 0; iy < ih; ++iy) {
                                const int oy = iy * s - p + ky;
                                if (oy < 0 || oy >= oh) continue;
                                for (int ix = 0; ix < iw; ++ix) {
                                    const int ox = ix * s - p + kx;
                                    if (ox < 0 || ox >= ow) continue;
                                    acc += double(xplane[iy * iw + ix]) *
                                           double(gyplane[oy * ow + ox]);
                                }
                            }
                        }
                        gkk[ky * kw + kx] += T(acc);
                    }
                }
            }
        }
    }

    if (bg) {
        bg->ensure_grad();
        for (int co = 0; co < spec.out_channels; ++co) {
            double acc = 0.0;
            for (int in = 0; in < x.shape.n; ++in) {
                const T* gyplane = gyb + (std::size_t(in) * spec.out_channels + co) * oh * ow;
                for (std::size_t i = 0; i < std::size_t(oh) * ow; ++i) {
                    acc += double(gyplane[i]);
                }
            }
            bg->grad[co] += T(acc);
        }
    }
}

}  // namespace detail

/// Transposed convolution with gradient-of-conv semantics (scatter form).
/// kernel is [in_channels, out_channels, kh, kw]. With kernel 4, stride 2,
/// padding 1 the output is exactly 2x the input spatially.
template <typename T>
TensorPtrT<T> conv_transpose2d(const TensorPtrT<T>& x, const TensorPtrT<T>& kernel,
                               const TensorPtrT<T>& bias, const ConvSpec& spec,
                               TapeT<T>* tape = nullptr) {
    spec.validate();
    if (spec.groups != 1) throw DimensionError("conv_transpose2d: groups unsupported");
    const Shape xs = x->shape;
    if (xs.c != spec.in_channels) {
        throw DimensionError("conv_transpose2d: input has " + std::to_string(xs.c) +
                             " channels, spec wants " + std::to_string(spec.in_channels));
    }
    if (kernel->shape != Shape{spec.in_channels, spec.out_channels, spec.kernel_h, spec.kernel_w}) {
        throw DimensionError("conv_transpose2d: kernel shape " + kernel->shape.str());
    }
    if (bias && bias->shape != Shape{spec.out_channels, 1, 1, 1}) {
        throw DimensionError("conv_transpose2d: bias shape " + bias->shape.str());
    }
    const int oh = (xs.h - 1) * spec.stride - 2 * spec.padding + spec.kernel_h;
    const int ow = (xs.w - 1) * spec.stride - 2 * spec.padding + spec.kernel_w;
    if (oh < 1 || ow < 1) throw DimensionError("conv_transpose2d: empty output");
    detail::check_finite(*x, "conv_transpose2d input");
    detail::check_finite(*kernel, "conv_transpose2d kernel");

    auto y = make_tensor<T>({xs.n, spec.out_channels, oh, ow});
    detail::conv_transpose2d_forward(*y, *x, *kernel, bias.get(), spec);

    const bool need = x->requires_grad || kernel->requires_grad || (bias && bias->requires_grad);
    if (tape && need) {
        y->requires_grad = true;
        tape->record(y, [x, kernel, bias, y, spec] {
            detail::conv_transpose2d_backward(*y, *x, *kernel, spec,
                                              x->requires_grad ? x.get() : nullptr,
                                              kernel->requires_grad ? kernel.get() : nullptr,
                                              (bias && bias->requires_grad) ? bias.get() : nullptr);
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Elementwise and reduction ops

template <typename T>
TensorPtrT<T> relu(const TensorPtrT<T>& x, TapeT<T>* tape = nullptr) {
    auto y = make_tensor<T>(x->shape);
    for (std::size_t i = 0; i < x->numel(); ++i) {
        y->data[i] = x->data[i] > T(0) ? x->data[i] : T(0);
    }
    if (tape && x->requires_grad) {
        y->requires_grad = true;
        tape->record(y, [x, y] {
            x->ensure_grad();
            for (std::size_t i = 0; i < x->numel(); ++i) {
                if (x->data[i] > T(0)) x->grad[i] += y->grad[i];
            }
        });
    }
    return y;
}

template <typename T>
TensorPtrT<T> sigmoid(const TensorPtrT<T>& x, TapeT<T>* tape = nullptr) {
    auto y = make_tensor<T>(x->shape);
    for (std::size_t i = 0; i < x->numel(); ++i) {
        y->data[i] = T(1) / (T(1) + std::exp(-x->data[i]));
    }
    if (tape && x->requires_grad) {
        y->requires_grad = true;
        tape->record(y, [x, y] {
            x->ensure_grad();
            for (std::size_t i = 0; i < x->numel(); ++i) {
                const T s = y->data[i];
                x->grad[i] += y->grad[i] * s * (T(1) - s);
            }
        });
    }
    return y;
}

/// y = alpha*x + beta, elementwise.
template <typename T>
TensorPtrT<T> scale_add(const TensorPtrT<T>& x, T alpha, T beta, TapeT<T>* tape = nullptr) {
    auto y = make_tensor<T>(x->shape);
    for (std::size_t i = 0; i < x->numel(); ++i) y->data[i] = alpha * x->data[i] + beta;
    if (tape && x->requires_grad) {
        y->requires_grad = true;
        tape->record(y, [x, y, alpha] {
            x->ensure_grad();
            for (std::size_t i = 0; i < x->numel(); ++i) x->grad[i] += alpha * y->grad[i];
        });
    }
    return y;
}

/// Mean over the spatial dims: [n,c,h,w] -> [n,c,1,1].
template <typename T>
TensorPtrT<T> gap_spatial(const TensorPtrT<T>& x, TapeT<T>* tape = nullptr) {
    const Shape s = x->shape;
    if (s.h * s.w < 1) throw DimensionError("gap_spatial: empty spatial axis");
    auto y = make_tensor<T>({s.n, s.c, 1, 1});
    const std::size_t hw = std::size_t(s.h) * s.w;
    for (int in = 0; in < s.n; ++in) {
        for (int ic = 0; ic < s.c; ++ic) {
            const T* plane = x->data.data() + (std::size_t(in) * s.c + ic) * hw;
            T acc = T(0);
            for (std::size_t i = 0; i < hw; ++i) acc += plane[i];
            y->data[std::size_t(in) * s.c + ic] = acc / T(hw);
        }
    }
    if (tape && x->requires_grad) {
        y->requires_grad = true;
        tape->record(y, [x, y, s, hw] {
            x->ensure_grad();
            for (int in = 0; in < s.n; ++in) {
                for (int ic = 0; ic < s.c; ++ic) {
                    const T g = y->grad[std::size_t(in) * s.c + ic] / T(hw);
                    T* gplane = x->grad.data() + (std::size_t(in) * s.c + ic) * hw;
                    for (std::size_t i = 0; i < hw; ++i) gplane[i] += g;
                }
            }
        });
    }
    return y;
}

/// Mean over channels: [n,c,h,w] -> [n,1,h,w].
template <typename T>
TensorPtrT<T> gap_channel(const TensorPtrT<T>& x, TapeT<T>* tape = nullptr) {
    const Shape s = x->shape;
    if (s.c < 1) throw DimensionError("gap_channel: empty channel axis");
    auto y = make_tensor<T>({s.n, 1, s.h, s.w});
    const std::size_t hw = std::size_t(s.h) * s.w;
    for (int in = 0; in < s.n; ++in) {
        for (std::size_t i = 0; i < hw; ++i) {
            T acc = T(0);
            for (int ic = 0; ic < s.c; ++ic) {
                acc += x->data[(std::size_t(in) * s.c + ic) * hw + i];
            }
            y->data[std::size_t(in) * hw + i] = acc / T(s.c);
        }
    }
    if (tape && x->requires_grad) {
        y->requires_grad = true;
        tape->record(y, [x, y, s, hw] {
            x->ensure_grad();
            for (int in = 0; in < s.n; ++in) {
                for (std::size_t i = 0; i < hw; ++i) {
                    const T g = y->grad[std::size_t(in) * hw + i] / T(s.c);
                    for (int ic = 0; ic < s.c; ++ic) {
                        x->grad[(std::size_t(in) * s.c + ic) * hw + i] += g;
                    }
                }
            }
        });
    }
    return y;
}

/// Max over channels: [n,c,h,w] -> [n,1,h,w]. Ties route the gradient to the
/// lowest channel index.
template <typename T>
TensorPtrT<T> gmp_channel(const TensorPtrT<T>& x, TapeT<T>* tape = nullptr) {
    const Shape s = x->shape;
    if (s.c < 1) throw DimensionError("gmp_channel: empty channel axis");
    auto y = make_tensor<T>({s.n, 1, s.h, s.w});
    const std::size_t hw = std::size_t(s.h) * s.w;
    std::vector<int> argmax(std::size_t(s.n) * hw, 0);
    for (int in = 0; in < s.n; ++in) {
        for (std::size_t i = 0; i < hw; ++i) {
            T best = x->data[(std::size_t(in) * s.c + 0) * hw + i];
            int best_c = 0;
            for (int ic = 1; ic < s.c; ++ic) {
                const T v = x->data[(std::size_t(in) * s.c + ic) * hw + i];
                if (v > best) {
                    best = v;
                    best_c = ic;
                }
            }
            y->data[std::size_t(in) * hw + i] = best;
            argmax[std::size_t(in) * hw + i] = best_c;
        }
    }
    if (tape && x->requires_grad) {
        y->requires_grad = true;
        tape->record(y, [x, y, s, hw, argmax = std::move(argmax)] {
            x->ensure_grad();
            for (int in = 0; in < s.n; ++in) {
                for (std::size_t i = 0; i < hw; ++i) {
                    const int ic = argmax[std::size_t(in) * hw + i];
                    x->grad[(std::size_t(in) * s.c + ic) * hw + i] +=
                        y->grad[std::size_t(in) * hw + i];
                }
            }
        });
    }
    return y;
}

/// Stack along channels, a's channels first.
template <typename T>
TensorPtrT<T> concat_channels(const TensorPtrT<T>& a, const TensorPtrT<T>& b,
                              TapeT<T>* tape = nullptr) {
    const Shape sa = a->shape, sb = b->shape;
    if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w) {
        throw DimensionError("concat_channels: non-channel dims differ, " + sa.str() +
                             " vs " + sb.str());
    }
    auto y = make_tensor<T>({sa.n, sa.c + sb.c, sa.h, sa.w});
    const std::size_t hw = std::size_t(sa.h) * sa.w;
    for (int in = 0; in < sa.n; ++in) {
        std::copy_n(a->data.data() + std::size_t(in) * sa.c * hw, std::size_t(sa.c) * hw,
                    y->data.data() + std::size_t(in) * (sa.c + sb.c) * hw);
        std::copy_n(b->data.data() + std::size_t(in) * sb.c * hw, std::size_t(sb.c) * hw,
                    y->data.data() + (std::size_t(in) * (sa.c + sb.c) + sa.c) * hw);
    }
    if (tape && (a->requires_grad || b->requires_grad)) {
        y->requires_grad = true;
        tape->record(y, [a, b, y, sa, sb, hw] {
            for (int in = 0; in < sa.n; ++in) {
                const T* gy = y->grad.data() + std::size_t(in) * (sa.c + sb.c) * hw;
                if (a->requires_grad) {
                    a->ensure_grad();
                    T* ga = a->grad.data() + std::size_t(in) * sa.c * hw;
                    for (std::size_t i = 0; i < std::size_t(sa.c) * hw; ++i) ga[i] += gy[i];
                }
                if (b->requires_grad) {
                    b->ensure_grad();
                    T* gb = b->grad.data() + std::size_t(in) * sb.c * hw;
                    const T* gyb = gy + std::size_t(sa.c) * hw;
                    for (std::size_t i = 0; i < std::size_t(sb.c) * hw; ++i) gb[i] += gyb[i];
                }
            }
        });
    }
    return y;
}

namespace detail {

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    auto pick = [](int x, int y) {
        if (x == y) return x;
        if (x == 1) return y;
        if (y == 1) return x;
        throw DimensionError("broadcast: incompatible dims " + std::to_string(x) + " vs " +
                             std::to_string(y));
    };
    return Shape{pick(a.n, b.n), pick(a.c, b.c), pick(a.h, b.h), pick(a.w, b.w)};
}

template <typename T>
std::size_t broadcast_index(const Shape& s, int n, int c, int h, int w) {
    return ((std::size_t(s.n == 1 ? 0 : n) * s.c + (s.c == 1 ? 0 : c)) * s.h +
            (s.h == 1 ? 0 : h)) * s.w + (s.w == 1 ? 0 : w);
}

}  // namespace detail

/// Elementwise add with NumPy-style broadcasting over any of the four dims.
template <typename T>
TensorPtrT<T> add(const TensorPtrT<T>& a, const TensorPtrT<T>& b, TapeT<T>* tape = nullptr) {
    const Shape os = detail::broadcast_shape(a->shape, b->shape);
    auto y = make_tensor<T>(os);
    std::size_t o = 0;
    for (int n = 0; n < os.n; ++n)
        for (int c = 0; c < os.c; ++c)
            for (int h = 0; h < os.h; ++h)
                for (int w = 0; w < os.w; ++w, ++o) {
                    y->data[o] = a->data[detail::broadcast_index<T>(a->shape, n, c, h, w)] +
                                 b->data[detail::broadcast_index<T>(b->shape, n, c, h, w)];
                }
    if (tape && (a->requires_grad || b->requires_grad)) {
        y->requires_grad = true;
        tape->record(y, [a, b, y, os] {
            if (a->requires_grad) a->ensure_grad();
            if (b->requires_grad) b->ensure_grad();
            std::size_t o = 0;
            for (int n = 0; n < os.n; ++n)
                for (int c = 0; c < os.c; ++c)
                    for (int h = 0; h < os.h; ++h)
                        for (int w = 0; w < os.w; ++w, ++o) {
                            const T g = y->grad[o];
                            if (a->requires_grad)
                                a->grad[detail::broadcast_index<T>(a->shape, n, c, h, w)] += g;
                            if (b->requires_grad)
                                b->grad[detail::broadcast_index<T>(b->shape, n, c, h, w)] += g;
                        }
        });
    }
    return y;
}

/// Elementwise multiply with broadcasting.
template <typename T>
TensorPtrT<T> mul(const TensorPtrT<T>& a, const TensorPtrT<T>& b, TapeT<T>* tape = nullptr) {
    const Shape os = detail::broadcast_shape(a->shape, b->shape);
    auto y = make_tensor<T>(os);
    std::size_t o = 0;
    for (int n = 0; n < os.n; ++n)
        for (int c = 0; c < os.c; ++c)
            for (int h = 0; h < os.h; ++h)
                for (int w = 0; w < os.w; ++w, ++o) {
                    y->data[o] = a->data[detail::broadcast_index<T>(a->shape, n, c, h, w)] *
                                 b->data[detail::broadcast_index<T>(b->shape, n, c, h, w)];
                }
    if (tape && (a->requires_grad || b->requires_grad)) {
        y->requires_grad = true;
        tape->record(y, [a, b, y, os] {
            if (a->requires_grad) a->ensure_grad();
            if (b->requires_grad) b->ensure_grad();
            std::size_t o = 0;
            for (int n = 0; n < os.n; ++n)
                for (int c = 0; c < os.c; ++c)
                    for (int h = 0; h < os.h; ++h)
                        for (int w = 0; w < os.w; ++w, ++o) {
                            const T g = y->grad[o];
                            const std::size_t ia =
                                detail::broadcast_index<T>(a->shape, n, c, h, w);
                            const std::size_t ib =
                                detail::broadcast_index<T>(b->shape, n, c, h, w);
                            if (a->requires_grad) a->grad[ia] += g * b->data[ib];
                            if (b->requires_grad) b->grad[ib] += g * a->data[ia];
                        }
        });
    }
    return y;
}

/// Interleave the two channel halves: [a0..a_{C-1}, b0..b_{C-1}] becomes
/// [a0,b0,a1,b1,...]. Requires an even channel count.
template <typename T>
TensorPtrT<T> channel_shuffle2(const TensorPtrT<T>& x, TapeT<T>* tape = nullptr) {
    const Shape s = x->shape;
    if (s.c % 2 != 0) {
        throw DimensionError("channel_shuffle2: odd channel count " + std::to_string(s.c));
    }
    const int half = s.c / 2;
    const std::size_t hw = std::size_t(s.h) * s.w;
    auto y = make_tensor<T>(s);
    for (int in = 0; in < s.n; ++in) {
        for (int i = 0; i < half; ++i) {
            std::copy_n(x->data.data() + (std::size_t(in) * s.c + i) * hw, hw,
                        y->data.data() + (std::size_t(in) * s.c + 2 * i) * hw);
            std::copy_n(x->data.data() + (std::size_t(in) * s.c + half + i) * hw, hw,
                        y->data.data() + (std::size_t(in) * s.c + 2 * i + 1) * hw);
        }
    }
    if (tape && x->requires_grad) {
        y->requires_grad = true;
        tape->record(y, [x, y, s, half, hw] {
            x->ensure_grad();
            for (int in = 0; in < s.n; ++in) {
                for (int i = 0; i < half; ++i) {
                    const T* g0 = y->grad.data() + (std::size_t(in) * s.c + 2 * i) * hw;
                    const T* g1 = y->grad.data() + (std::size_t(in) * s.c + 2 * i + 1) * hw;
                    T* ga = x->grad.data() + (std::size_t(in) * s.c + i) * hw;
                    T* gb = x->grad.data() + (std::size_t(in) * s.c + half + i) * hw;
                    for (std::size_t j = 0; j < hw; ++j) {
                        ga[j] += g0[j];
                        gb[j] += g1[j];
                    }
                }
            }
        });
    }
    return y;
}

/// Sum of all elements -> 1x1x1x1 scalar.
template <typename T>
TensorPtrT<T> sum(const TensorPtrT<T>& x, TapeT<T>* tape = nullptr) {
    auto y = make_tensor<T>({1, 1, 1, 1});
    double acc = 0.0;
    for (const T v : x->data) acc += double(v);
    y->data[0] = T(acc);
    if (tape && x->requires_grad) {
        y->requires_grad = true;
        tape->record(y, [x, y] {
            x->ensure_grad();
            const T g = y->grad[0];
            for (std::size_t i = 0; i < x->numel(); ++i) x->grad[i] += g;
        });
    }
    return y;
}

}  // namespace deanet
