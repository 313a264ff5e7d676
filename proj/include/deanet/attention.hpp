#pragma once

// Content-guided attention (CGA). A coarse per-channel spatial importance
// map is built from channel attention plus spatial attention, then refined
// per channel by a grouped 7x7 convolution over shuffled (feature, coarse
// map) pairs, ending in a sigmoid.

#include "deanet/tensor.hpp"

namespace deanet {

template <typename T>
struct CGAParamsT {
    TensorPtrT<T> ca_reduce_k, ca_reduce_b;  // 1x1 conv C -> R
    TensorPtrT<T> ca_expand_k, ca_expand_b;  // 1x1 conv R -> C
    TensorPtrT<T> sa_k, sa_b;                // 7x7 conv 2 -> 1, pad 3
    TensorPtrT<T> refine_k, refine_b;        // grouped 7x7 conv 2C -> C, groups=C

    int channels() const { return ca_expand_k->shape.n; }
    int reduced() const { return ca_reduce_k->shape.n; }
};

using CGAParams = CGAParamsT<float>;

/// Channel bottleneck width: fixed at 16, except that widths below 16 keep
/// their own width (no expansion bottleneck).
inline int cga_reduced_width(int channels) { return channels < 16 ? channels : 16; }

template <typename T>
CGAParamsT<T> make_cga_params(int channels) {
    if (channels < 1) throw DimensionError("CGA: channels must be positive");
    const int r = cga_reduced_width(channels);
    CGAParamsT<T> p;
    p.ca_reduce_k = make_leaf<T>({r, channels, 1, 1});
    p.ca_reduce_b = make_leaf<T>({r, 1, 1, 1});
    p.ca_expand_k = make_leaf<T>({channels, r, 1, 1});
    p.ca_expand_b = make_leaf<T>({channels, 1, 1, 1});
    p.sa_k = make_leaf<T>({1, 2, 7, 7});
    p.sa_b = make_leaf<T>({1, 1, 1, 1});
    p.refine_k = make_leaf<T>({channels, 2, 7, 7});
    p.refine_b = make_leaf<T>({channels, 1, 1, 1});
    return p;
}

template <typename T>
void validate_cga_params(const CGAParamsT<T>& p, int channels) {
    const int r = cga_reduced_width(channels);
    if (p.ca_reduce_k->shape != Shape{r, channels, 1, 1} ||
        p.ca_expand_k->shape != Shape{channels, r, 1, 1} ||
        p.sa_k->shape != Shape{1, 2, 7, 7} ||
        p.refine_k->shape != Shape{channels, 2, 7, 7}) {
        throw DimensionError("CGA: parameter shapes do not match channel width " +
                             std::to_string(channels));
    }
}

/// Squeeze-excite style channel weights: GAP -> 1x1 -> ReLU -> 1x1.
/// No nonlinearity on the output.
template <typename T>
TensorPtrT<T> channel_attention(const TensorPtrT<T>& x, const CGAParamsT<T>& p,
                                TapeT<T>* tape = nullptr) {
    const int c = x->shape.c;
    validate_cga_params(p, c);
    const int r = cga_reduced_width(c);
    auto g = gap_spatial(x, tape);
    auto h = conv2d(g, p.ca_reduce_k, p.ca_reduce_b, ConvSpec{c, r, 1, 1, 1, 0, 1}, tape);
    h = relu(h, tape);
    return conv2d(h, p.ca_expand_k, p.ca_expand_b, ConvSpec{r, c, 1, 1, 1, 0, 1}, tape);
}

/// Spatial weights from the channel-mean and channel-max maps (mean first),
/// mixed by a 7x7 convolution.
template <typename T>
TensorPtrT<T> spatial_attention(const TensorPtrT<T>& x, const CGAParamsT<T>& p,
                                TapeT<T>* tape = nullptr) {
    auto mean_map = gap_channel(x, tape);
    auto max_map = gmp_channel(x, tape);
    auto cat = concat_channels(mean_map, max_map, tape);
    return conv2d(cat, p.sa_k, p.sa_b, ConvSpec{2, 1, 7, 7, 1, 3, 1}, tape);
}

/// Refinement stage: interleave x with the coarse maps so group i of the
/// grouped conv sees exactly (x_i, w_coa_i), then squash with a sigmoid.
template <typename T>
TensorPtrT<T> cga_refine(const TensorPtrT<T>& x, const TensorPtrT<T>& w_coa,
                         const CGAParamsT<T>& p, TapeT<T>* tape = nullptr) {
    const int c = x->shape.c;
    if (w_coa->shape != x->shape) {
        throw DimensionError("cga_refine: coarse map shape " + w_coa->shape.str() +
                             " != input shape " + x->shape.str());
    }
    auto cat = concat_channels(x, w_coa, tape);
    auto shuffled = channel_shuffle2(cat, tape);
    auto refined = conv2d(shuffled, p.refine_k, p.refine_b,
                          ConvSpec{2 * c, c, 7, 7, 1, 3, c}, tape);
    return sigmoid(refined, tape);
}

/// Full CGA: one spatial importance map per channel, every value in (0,1).
template <typename T>
TensorPtrT<T> cga(const TensorPtrT<T>& x, const CGAParamsT<T>& p, TapeT<T>* tape = nullptr) {
    auto w_c = channel_attention(x, p, tape);
    auto w_s = spatial_attention(x, p, tape);
    auto w_coa = add(w_c, w_s, tape);  // [n,C,1,1] + [n,1,H,W] -> [n,C,H,W]
    return cga_refine(x, w_coa, p, tape);
}

/// Re-calibrate features by their importance maps.
template <typename T>
TensorPtrT<T> apply_sim(const TensorPtrT<T>& x, const TensorPtrT<T>& w,
                        TapeT<T>* tape = nullptr) {
    if (x->shape != w->shape) {
        throw DimensionError("apply_sim: shape " + x->shape.str() + " != " + w->shape.str());
    }
    return mul(x, w, tape);
}

}  // namespace deanet
