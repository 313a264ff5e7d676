#pragma once

// DEA-Net assembly: detail-enhanced blocks (DEB), detail-enhanced attention
// blocks (DEAB), CGA-based mixup fusion, the three-level encoder/decoder,
// parameter counting, analytic conv-FLOP accounting, and weight
// serialization on top of WeightArchive.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "deanet/archive.hpp"
#include "deanet/attention.hpp"
#include "deanet/deconv.hpp"
#include "deanet/tensor.hpp"

namespace deanet {

struct NetworkConfig {
    int base_channels = 32;
    std::array<int, 5> block_counts = {4, 4, 8, 4, 4};
    int in_channels = 3;
    int out_channels = 3;

    friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;

    void validate() const {
        if (base_channels < 1 || in_channels < 1 || out_channels < 1) {
            throw DimensionError("NetworkConfig: channel counts must be positive");
        }
        for (int n : block_counts) {
            if (n < 1) throw DimensionError("NetworkConfig: block counts must be >= 1");
        }
    }
};

enum class RunMode { unfused, fused };

template <typename T>
struct ConvLayerT {
    TensorPtrT<T> kernel;
    TensorPtrT<T> bias;
};

/// A DEConv slot holds either the trainable five-branch form or the fused
/// single-kernel form (what a re-parameterized archive stores).
template <typename T>
struct DEConvLayerT {
    std::variant<DEConvParamsT<T>, FusedKernelT<T>> params;

    bool is_fused() const { return std::holds_alternative<FusedKernelT<T>>(params); }
    const DEConvParamsT<T>& branches() const { return std::get<DEConvParamsT<T>>(params); }
    const FusedKernelT<T>& fused() const { return std::get<FusedKernelT<T>>(params); }

    int out_channels() const {
        return is_fused() ? fused().kernel->shape.n : branches().out_channels();
    }
    int in_channels() const {
        return is_fused() ? fused().kernel->shape.c : branches().in_channels();
    }
};

template <typename T>
struct DEBParamsT {
    DEConvLayerT<T> deconv;
    ConvLayerT<T> conv;  // 3x3, pad 1
};

template <typename T>
struct DEABParamsT {
    DEConvLayerT<T> deconv;
    ConvLayerT<T> conv;
    CGAParamsT<T> cga;
};

template <typename T>
struct FusionParamsT {
    CGAParamsT<T> cga;
    ConvLayerT<T> proj;  // 1x1, width-preserving
};

template <typename T>
struct NetworkParamsT {
    NetworkConfig config;
    ConvLayerT<T> stem;                  // in -> C, 3x3
    std::vector<DEBParamsT<T>> enc1;     // N1 at C
    ConvLayerT<T> down1;                 // C -> 2C, 3x3 stride 2
    std::vector<DEBParamsT<T>> enc2;     // N2 at 2C
    ConvLayerT<T> down2;                 // 2C -> 4C, 3x3 stride 2
    std::vector<DEABParamsT<T>> mid;     // N3 at 4C
    FusionParamsT<T> fuse3;              // at 4C
    ConvLayerT<T> up1;                   // 4C -> 2C, transpose 4x4 stride 2
    std::vector<DEBParamsT<T>> dec2;     // N4 at 2C
    FusionParamsT<T> fuse2;              // at 2C
    ConvLayerT<T> up2;                   // 2C -> C
    std::vector<DEBParamsT<T>> dec1;     // N5 at C
    ConvLayerT<T> tail;                  // C -> out, 3x3
};

using NetworkParams = NetworkParamsT<float>;

using DEBParams = DEBParamsT<float>;
using DEABParams = DEABParamsT<float>;
using FusionParams = FusionParamsT<float>;

// ---------------------------------------------------------------------------
// Initialization

namespace detail {

template <typename T>
void kaiming_uniform(TensorT<T>& t, int fan_in, std::mt19937& rng) {
    const double bound = std::sqrt(6.0 / double(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : t.data) v = T(dist(rng));
}

template <typename T>
ConvLayerT<T> init_conv(int in_c, int out_c, int k, std::mt19937& rng) {
    ConvLayerT<T> layer;
    layer.kernel = make_leaf<T>({out_c, in_c, k, k});
    layer.bias = make_leaf<T>({out_c, 1, 1, 1});
    kaiming_uniform(*layer.kernel, in_c * k * k, rng);
    return layer;
}

template <typename T>
ConvLayerT<T> init_conv_transpose(int in_c, int out_c, int k, std::mt19937& rng) {
    ConvLayerT<T> layer;
    layer.kernel = make_leaf<T>({in_c, out_c, k, k});
    layer.bias = make_leaf<T>({out_c, 1, 1, 1});
    kaiming_uniform(*layer.kernel, in_c * k * k, rng);
    return layer;
}

// Difference branches start at zero so a fresh DEConv behaves like its
// vanilla branch alone.
template <typename T>
DEConvLayerT<T> init_deconv(int channels, std::mt19937& rng) {
    DEConvParamsT<T> p = make_deconv_params<T>(channels, channels);
    kaiming_uniform(*p.vc, channels * 9, rng);
    return DEConvLayerT<T>{std::move(p)};
}

template <typename T>
CGAParamsT<T> init_cga(int channels, std::mt19937& rng) {
    CGAParamsT<T> p = make_cga_params<T>(channels);
    const int r = cga_reduced_width(channels);
    kaiming_uniform(*p.ca_reduce_k, channels, rng);
    kaiming_uniform(*p.ca_expand_k, r, rng);
    kaiming_uniform(*p.sa_k, 2 * 49, rng);
    kaiming_uniform(*p.refine_k, 2 * 49, rng);
    return p;
}

template <typename T>
DEBParamsT<T> init_deb(int channels, std::mt19937& rng) {
    DEBParamsT<T> p;
    p.deconv = init_deconv<T>(channels, rng);
    p.conv = init_conv<T>(channels, channels, 3, rng);
    return p;
}

template <typename T>
DEABParamsT<T> init_deab(int channels, std::mt19937& rng) {
    DEABParamsT<T> p;
    p.deconv = init_deconv<T>(channels, rng);
    p.conv = init_conv<T>(channels, channels, 3, rng);
    p.cga = init_cga<T>(channels, rng);
    return p;
}

template <typename T>
FusionParamsT<T> init_fusion(int channels, std::mt19937& rng) {
    FusionParamsT<T> p;
    p.cga = init_cga<T>(channels, rng);
    p.proj = init_conv<T>(channels, channels, 1, rng);
    return p;
}

}  // namespace detail

/// Seed-deterministic initialization. Conv kernels use uniform fan-in
/// (Kaiming-style) draws; difference-branch weights and all biases start at
/// zero.
template <typename T>
NetworkParamsT<T> init_network(const NetworkConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937 rng{std::uint32_t(seed)};
    const int c1 = cfg.base_channels, c2 = 2 * c1, c3 = 4 * c1;
    NetworkParamsT<T> p;
    p.config = cfg;
    p.stem = detail::init_conv<T>(cfg.in_channels, c1, 3, rng);
    for (int i = 0; i < cfg.block_counts[0]; ++i) p.enc1.push_back(detail::init_deb<T>(c1, rng));
    p.down1 = detail::init_conv<T>(c1, c2, 3, rng);
    for (int i = 0; i < cfg.block_counts[1]; ++i) p.enc2.push_back(detail::init_deb<T>(c2, rng));
    p.down2 = detail::init_conv<T>(c2, c3, 3, rng);
    for (int i = 0; i < cfg.block_counts[2]; ++i) p.mid.push_back(detail::init_deab<T>(c3, rng));
    p.fuse3 = detail::init_fusion<T>(c3, rng);
    p.up1 = detail::init_conv_transpose<T>(c3, c2, 4, rng);
    for (int i = 0; i < cfg.block_counts[3]; ++i) p.dec2.push_back(detail::init_deb<T>(c2, rng));
    p.fuse2 = detail::init_fusion<T>(c2, rng);
    p.up2 = detail::init_conv_transpose<T>(c2, c1, 4, rng);
    for (int i = 0; i < cfg.block_counts[4]; ++i) p.dec1.push_back(detail::init_deb<T>(c1, rng));
    p.tail = detail::init_conv<T>(c1, cfg.out_channels, 3, rng);
    return p;
}

// ---------------------------------------------------------------------------
// Forward passes

template <typename T>
TensorPtrT<T> deconv_layer_forward(const TensorPtrT<T>& x, const DEConvLayerT<T>& layer,
                                   RunMode mode, TapeT<T>* tape) {
    if (mode == RunMode::unfused) {
        if (layer.is_fused()) {
            throw DimensionError("unfused forward requested on a fused DEConv layer");
        }
        return deconv_forward_unfused(x, layer.branches(), tape);
    }
    if (tape) throw DimensionError("fused forward is inference-only (no tape)");
    if (layer.is_fused()) return deconv_forward_fused(x, layer.fused());
    return deconv_forward_fused(x, reparameterize(layer.branches()));
}

/// Residual detail-enhanced block: y = x + conv3x3(relu(deconv(x))).
template <typename T>
TensorPtrT<T> deb_forward(const TensorPtrT<T>& x, const DEBParamsT<T>& p,
                          RunMode mode = RunMode::unfused, TapeT<T>* tape = nullptr) {
    const int c = p.deconv.in_channels();
    auto b = deconv_layer_forward(x, p.deconv, mode, tape);
    b = relu(b, tape);
    b = conv2d(b, p.conv.kernel, p.conv.bias, ConvSpec{c, c, 3, 3, 1, 1, 1}, tape);
    return add(x, b, tape);
}

/// DEB with CGA gating on the residual branch:
/// b = conv3x3(relu(deconv(x))); y = x + b * cga(b).
template <typename T>
TensorPtrT<T> deab_forward(const TensorPtrT<T>& x, const DEABParamsT<T>& p,
                           RunMode mode = RunMode::unfused, TapeT<T>* tape = nullptr) {
    const int c = p.deconv.in_channels();
    auto b = deconv_layer_forward(x, p.deconv, mode, tape);
    b = relu(b, tape);
    b = conv2d(b, p.conv.kernel, p.conv.bias, ConvSpec{c, c, 3, 3, 1, 1, 1}, tape);
    auto w = cga(b, p.cga, tape);
    return add(x, apply_sim(b, w, tape), tape);
}

/// The mixup combination before projection:
/// f_low*w + f_high*(1-w) + f_low + f_high.
template <typename T>
TensorPtrT<T> mixup_combine(const TensorPtrT<T>& f_low, const TensorPtrT<T>& f_high,
                            const TensorPtrT<T>& w, TapeT<T>* tape = nullptr) {
    if (f_low->shape != f_high->shape) {
        throw DimensionError("mixup_combine: feature shapes differ, " + f_low->shape.str() +
                             " vs " + f_high->shape.str());
    }
    auto blended = add(mul(f_low, w, tape),
                       mul(f_high, scale_add(w, T(-1), T(1), tape), tape), tape);
    return add(blended, add(f_low, f_high, tape), tape);
}

/// CGA-based mixup fusion of an encoder skip (f_low) with decoder features
/// (f_high). The gate is computed from their sum so one CGA covers both.
template <typename T>
TensorPtrT<T> fuse(const TensorPtrT<T>& f_low, const TensorPtrT<T>& f_high,
                   const FusionParamsT<T>& p, TapeT<T>* tape = nullptr) {
    if (f_low->shape != f_high->shape) {
        throw DimensionError("fuse: feature shapes differ, " + f_low->shape.str() + " vs " +
                             f_high->shape.str());
    }
    const int c = f_low->shape.c;
    auto w = cga(add(f_low, f_high, tape), p.cga, tape);
    auto combined = mixup_combine(f_low, f_high, w, tape);
    return conv2d(combined, p.proj.kernel, p.proj.bias, ConvSpec{c, c, 1, 1, 1, 0, 1}, tape);
}

/// Full three-level forward. Input spatial dims must be divisible by 4.
template <typename T>
TensorPtrT<T> dea_net_forward(const TensorPtrT<T>& x, const NetworkParamsT<T>& p,
                              RunMode mode = RunMode::fused, TapeT<T>* tape = nullptr) {
    const NetworkConfig& cfg = p.config;
    if (x->shape.c != cfg.in_channels) {
        throw DimensionError("dea_net_forward: expected " + std::to_string(cfg.in_channels) +
                             " input channels, got " + std::to_string(x->shape.c));
    }
    if (x->shape.h % 4 != 0 || x->shape.w % 4 != 0) {
        throw DimensionError("dea_net_forward: spatial dims " + std::to_string(x->shape.h) +
                             "x" + std::to_string(x->shape.w) + " must be divisible by 4");
    }
    const int c1 = cfg.base_channels, c2 = 2 * c1, c3 = 4 * c1;

    auto t = conv2d(x, p.stem.kernel, p.stem.bias, ConvSpec{cfg.in_channels, c1, 3, 3, 1, 1, 1},
                    tape);
    for (const auto& blk : p.enc1) t = deb_forward(t, blk, mode, tape);
    auto skip2 = conv2d(t, p.down1.kernel, p.down1.bias, ConvSpec{c1, c2, 3, 3, 2, 1, 1}, tape);
    t = skip2;
    for (const auto& blk : p.enc2) t = deb_forward(t, blk, mode, tape);
    auto skip3 = conv2d(t, p.down2.kernel, p.down2.bias, ConvSpec{c2, c3, 3, 3, 2, 1, 1}, tape);
    t = skip3;
    for (const auto& blk : p.mid) t = deab_forward(t, blk, mode, tape);
    t = fuse(skip3, t, p.fuse3, tape);
    t = conv_transpose2d(t, p.up1.kernel, p.up1.bias, ConvSpec{c3, c2, 4, 4, 2, 1, 1}, tape);
    for (const auto& blk : p.dec2) t = deb_forward(t, blk, mode, tape);
    t = fuse(skip2, t, p.fuse2, tape);
    t = conv_transpose2d(t, p.up2.kernel, p.up2.bias, ConvSpec{c2, c1, 4, 4, 2, 1, 1}, tape);
    for (const auto& blk : p.dec1) t = deb_forward(t, blk, mode, tape);
    return conv2d(t, p.tail.kernel, p.tail.bias, ConvSpec{c1, cfg.out_channels, 3, 3, 1, 1, 1},
                  tape);
}

/// Replace every DEConv slot by its fused kernel; all other tensors are
/// shared with the source.
template <typename T>
NetworkParamsT<T> fuse_network(const NetworkParamsT<T>& src) {
    NetworkParamsT<T> out = src;
    auto fuse_layer = [](DEConvLayerT<T>& layer) {
        if (!layer.is_fused()) layer.params = reparameterize(layer.branches());
    };
    for (auto& blk : out.enc1) fuse_layer(blk.deconv);
    for (auto& blk : out.enc2) fuse_layer(blk.deconv);
    for (auto& blk : out.mid) fuse_layer(blk.deconv);
    for (auto& blk : out.dec2) fuse_layer(blk.deconv);
    for (auto& blk : out.dec1) fuse_layer(blk.deconv);
    return out;
}

// ---------------------------------------------------------------------------
// Parameter enumeration and counting

template <typename T>
struct NamedParam {
    std::string name;
    TensorPtrT<T> tensor;
};

namespace detail {

template <typename T>
void push_conv(std::vector<NamedParam<T>>& out, const std::string& prefix,
               const ConvLayerT<T>& layer) {
    out.push_back({prefix + ".kernel", layer.kernel});
    out.push_back({prefix + ".bias", layer.bias});
}

template <typename T>
void push_deconv(std::vector<NamedParam<T>>& out, const std::string& prefix,
                 const DEConvLayerT<T>& layer) {
    if (layer.is_fused()) {
        out.push_back({prefix + ".kernel", layer.fused().kernel});
        out.push_back({prefix + ".bias", layer.fused().bias});
    } else {
        const auto& b = layer.branches();
        out.push_back({prefix + ".vc", b.vc});
        out.push_back({prefix + ".cdc", b.cdc});
        out.push_back({prefix + ".adc", b.adc});
        out.push_back({prefix + ".hdc", b.hdc});
        out.push_back({prefix + ".vdc", b.vdc});
        out.push_back({prefix + ".bias", b.bias});
    }
}

template <typename T>
void push_cga(std::vector<NamedParam<T>>& out, const std::string& prefix,
              const CGAParamsT<T>& p) {
    out.push_back({prefix + ".ca_reduce.kernel", p.ca_reduce_k});
    out.push_back({prefix + ".ca_reduce.bias", p.ca_reduce_b});
    out.push_back({prefix + ".ca_expand.kernel", p.ca_expand_k});
    out.push_back({prefix + ".ca_expand.bias", p.ca_expand_b});
    out.push_back({prefix + ".sa.kernel", p.sa_k});
    out.push_back({prefix + ".sa.bias", p.sa_b});
    out.push_back({prefix + ".refine.kernel", p.refine_k});
    out.push_back({prefix + ".refine.bias", p.refine_b});
}

template <typename T>
void push_deb(std::vector<NamedParam<T>>& out, const std::string& stage, int i,
              const DEBParamsT<T>& p) {
    const std::string prefix = stage + "." + std::to_string(i);
    push_deconv(out, prefix + ".deconv", p.deconv);
    push_conv(out, prefix + ".conv", p.conv);
}

template <typename T>
void push_deab(std::vector<NamedParam<T>>& out, const std::string& stage, int i,
               const DEABParamsT<T>& p) {
    const std::string prefix = stage + "." + std::to_string(i);
    push_deconv(out, prefix + ".deconv", p.deconv);
    push_conv(out, prefix + ".conv", p.conv);
    push_cga(out, prefix + ".cga", p.cga);
}

template <typename T>
void push_fusion(std::vector<NamedParam<T>>& out, const std::string& stage,
                 const FusionParamsT<T>& p) {
    push_cga(out, stage + ".0.cga", p.cga);
    push_conv(out, stage + ".0.proj", p.proj);
}

}  // namespace detail

/// Every stored tensor with its canonical name (stage.index.layer.part).
template <typename T>
std::vector<NamedParam<T>> named_params(const NetworkParamsT<T>& p) {
    std::vector<NamedParam<T>> out;
    detail::push_conv(out, "stem.0.conv", p.stem);
    for (std::size_t i = 0; i < p.enc1.size(); ++i) detail::push_deb(out, "enc1", int(i), p.enc1[i]);
    detail::push_conv(out, "down1.0.conv", p.down1);
    for (std::size_t i = 0; i < p.enc2.size(); ++i) detail::push_deb(out, "enc2", int(i), p.enc2[i]);
    detail::push_conv(out, "down2.0.conv", p.down2);
    for (std::size_t i = 0; i < p.mid.size(); ++i) detail::push_deab(out, "mid", int(i), p.mid[i]);
    detail::push_fusion(out, "fuse3", p.fuse3);
    detail::push_conv(out, "up1.0.conv", p.up1);
    for (std::size_t i = 0; i < p.dec2.size(); ++i) detail::push_deb(out, "dec2", int(i), p.dec2[i]);
    detail::push_fusion(out, "fuse2", p.fuse2);
    detail::push_conv(out, "up2.0.conv", p.up2);
    for (std::size_t i = 0; i < p.dec1.size(); ++i) detail::push_deb(out, "dec1", int(i), p.dec1[i]);
    detail::push_conv(out, "tail.0.conv", p.tail);
    return out;
}

/// Scalar learnables of the fused inference form. A DEConv counts as its
/// fused kernel (oc*ic*9 + oc) no matter which form is stored.
template <typename T>
std::int64_t count_params(const NetworkParamsT<T>& p) {
    std::int64_t total = 0;
    auto conv = [&](const ConvLayerT<T>& l) {
        total += std::int64_t(l.kernel->numel()) + std::int64_t(l.bias->numel());
    };
    auto deconv = [&](const DEConvLayerT<T>& l) {
        total += std::int64_t(l.out_channels()) * l.in_channels() * 9 + l.out_channels();
    };
    auto cga_params = [&](const CGAParamsT<T>& c) {
        for (const auto& t : {c.ca_reduce_k, c.ca_reduce_b, c.ca_expand_k, c.ca_expand_b,
                              c.sa_k, c.sa_b, c.refine_k, c.refine_b}) {
            total += std::int64_t(t->numel());
        }
    };
    conv(p.stem);
    for (const auto& b : p.enc1) { deconv(b.deconv); conv(b.conv); }
    conv(p.down1);
    for (const auto& b : p.enc2) { deconv(b.deconv); conv(b.conv); }
    conv(p.down2);
    for (const auto& b : p.mid) { deconv(b.deconv); conv(b.conv); cga_params(b.cga); }
    cga_params(p.fuse3.cga);
    conv(p.fuse3.proj);
    conv(p.up1);
    for (const auto& b : p.dec2) { deconv(b.deconv); conv(b.conv); }
    cga_params(p.fuse2.cga);
    conv(p.fuse2.proj);
    conv(p.up2);
    for (const auto& b : p.dec1) { deconv(b.deconv); conv(b.conv); }
    conv(p.tail);
    return total;
}

// ---------------------------------------------------------------------------
// Analytic conv-FLOP accounting (kernel multiply-adds only, 2 FLOPs per MAC;
// bias and elementwise work excluded so the unfused/fused DEConv ratio is
// exactly 5).

struct LayerFlops {
    std::string name;
    std::uint64_t unfused = 0;
    std::uint64_t fused = 0;
};

struct FlopsReport {
    std::vector<LayerFlops> layers;
    std::uint64_t unfused_total = 0;
    std::uint64_t fused_total = 0;
};

inline FlopsReport conv_flops_report(const NetworkConfig& cfg, int h, int w) {
    cfg.validate();
    if (h % 4 != 0 || w % 4 != 0) {
        throw DimensionError("conv_flops_report: dims must be divisible by 4");
    }
    FlopsReport report;
    auto conv = [](std::uint64_t oc, std::uint64_t icpg, std::uint64_t k, std::uint64_t oh,
                   std::uint64_t ow) { return 2 * oc * icpg * k * k * oh * ow; };
    auto push = [&](const std::string& name, std::uint64_t unfused, std::uint64_t fused) {
        report.layers.push_back({name, unfused, fused});
        report.unfused_total += unfused;
        report.fused_total += fused;
    };
    auto push_same = [&](const std::string& name, std::uint64_t f) { push(name, f, f); };

    const std::uint64_t c1 = std::uint64_t(cfg.base_channels), c2 = 2 * c1, c3 = 4 * c1;
    const std::uint64_t h1 = h, w1 = w, h2 = h / 2, w2 = w / 2, h3 = h / 4, w3 = w / 4;

    auto push_cga = [&](const std::string& name, std::uint64_t c, std::uint64_t hh,
                        std::uint64_t ww) {
        const std::uint64_t r = std::uint64_t(cga_reduced_width(int(c)));
        push_same(name + ".ca_reduce", conv(r, c, 1, 1, 1));
        push_same(name + ".ca_expand", conv(c, r, 1, 1, 1));
        push_same(name + ".sa", conv(1, 2, 7, hh, ww));
        push_same(name + ".refine", conv(c, 2, 7, hh, ww));
    };
    auto push_deb = [&](const std::string& name, std::uint64_t c, std::uint64_t hh,
                        std::uint64_t ww) {
        const std::uint64_t f = conv(c, c, 3, hh, ww);
        push(name + ".deconv", 5 * f, f);
        push_same(name + ".conv", f);
    };
    auto push_deab = [&](const std::string& name, std::uint64_t c, std::uint64_t hh,
                         std::uint64_t ww) {
        push_deb(name, c, hh, ww);
        push_cga(name + ".cga", c, hh, ww);
    };
    auto push_fusion = [&](const std::string& name, std::uint64_t c, std::uint64_t hh,
                           std::uint64_t ww) {
        push_cga(name + ".0.cga", c, hh, ww);
        push_same(name + ".0.proj", conv(c, c, 1, hh, ww));
    };

    push_same("stem.0", conv(c1, std::uint64_t(cfg.in_channels), 3, h1, w1));
    for (int i = 0; i < cfg.block_counts[0]; ++i) push_deb("enc1." + std::to_string(i), c1, h1, w1);
    push_same("down1.0", conv(c2, c1, 3, h2, w2));
    for (int i = 0; i < cfg.block_counts[1]; ++i) push_deb("enc2." + std::to_string(i), c2, h2, w2);
    push_same("down2.0", conv(c3, c2, 3, h3, w3));
    for (int i = 0; i < cfg.block_counts[2]; ++i) push_deab("mid." + std::to_string(i), c3, h3, w3);
    push_fusion("fuse3", c3, h3, w3);
    push_same("up1.0", 2 * c3 * c2 * 16 * h3 * w3);
    for (int i = 0; i < cfg.block_counts[3]; ++i) push_deb("dec2." + std::to_string(i), c2, h2, w2);
    push_fusion("fuse2", c2, h2, w2);
    push_same("up2.0", 2 * c2 * c1 * 16 * h2 * w2);
    for (int i = 0; i < cfg.block_counts[4]; ++i) push_deb("dec1." + std::to_string(i), c1, h1, w1);
    push_same("tail.0", conv(std::uint64_t(cfg.out_channels), c1, 3, h1, w1));
    return report;
}

// ---------------------------------------------------------------------------
// Serialization

namespace detail {

inline bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() &&
           s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// Logical archive dims for a stored rank-4 tensor: biases flatten to [oc],
// ADC weights to [oc,ic,8]; everything else keeps its four dims.
inline std::vector<std::uint32_t> logical_dims(const std::string& name, const Shape& s) {
    if (ends_with(name, ".bias")) return {std::uint32_t(s.n)};
    if (ends_with(name, ".deconv.adc")) {
        return {std::uint32_t(s.n), std::uint32_t(s.c), std::uint32_t(s.w)};
    }
    return {std::uint32_t(s.n), std::uint32_t(s.c), std::uint32_t(s.h), std::uint32_t(s.w)};
}

}  // namespace detail

template <typename T>
WeightArchive to_archive(const NetworkParamsT<T>& p) {
    WeightArchive ar;
    for (const auto& np : named_params(p)) {
        std::vector<float> data(np.tensor->data.begin(), np.tensor->data.end());
        ar.put(np.name, detail::logical_dims(np.name, np.tensor->shape), std::move(data));
    }
    return ar;
}

template <typename T>
void save_weights(const NetworkParamsT<T>& p, const std::filesystem::path& path) {
    to_archive(p).save(path);
}

enum class ArchiveKind { unfused, fused };

inline ArchiveKind archive_kind(const WeightArchive& ar) {
    for (const auto& name : ar.names()) {
        if (detail::ends_with(name, ".deconv.vc")) return ArchiveKind::unfused;
    }
    for (const auto& name : ar.names()) {
        if (detail::ends_with(name, ".deconv.kernel")) return ArchiveKind::fused;
    }
    throw ArchiveError(ArchiveError::Code::Truncated,
                       "archive: no DEConv tensors found (not a network archive)");
}

namespace detail {

inline int count_stage_blocks(const WeightArchive& ar, const std::string& stage) {
    int n = 0;
    while (ar.contains(stage + "." + std::to_string(n) + ".conv.kernel")) ++n;
    return n;
}

template <typename T>
TensorPtrT<T> fetch(const WeightArchive& ar, const std::string& name, const Shape& expect) {
    const ArchiveEntry& e = ar.get(name);
    const auto want = logical_dims(name, expect);
    if (e.dims != want || e.data.size() != expect.numel()) {
        throw ArchiveError(ArchiveError::Code::DimOverflow,
                           "archive: tensor '" + name + "' has unexpected dims");
    }
    auto t = make_leaf<T>(expect);
    std::copy(e.data.begin(), e.data.end(), t->data.begin());
    return t;
}

template <typename T>
ConvLayerT<T> fetch_conv(const WeightArchive& ar, const std::string& prefix, Shape kshape) {
    ConvLayerT<T> layer;
    layer.kernel = fetch<T>(ar, prefix + ".kernel", kshape);
    const int oc = detail::ends_with(prefix, "up1.0.conv") || detail::ends_with(prefix, "up2.0.conv")
                       ? kshape.c
                       : kshape.n;
    layer.bias = fetch<T>(ar, prefix + ".bias", Shape{oc, 1, 1, 1});
    return layer;
}

template <typename T>
DEConvLayerT<T> fetch_deconv(const WeightArchive& ar, const std::string& prefix, int channels,
                             ArchiveKind kind) {
    if (kind == ArchiveKind::fused) {
        FusedKernelT<T> f;
        f.kernel = fetch<T>(ar, prefix + ".kernel", Shape{channels, channels, 3, 3});
        f.bias = fetch<T>(ar, prefix + ".bias", Shape{channels, 1, 1, 1});
        return DEConvLayerT<T>{std::move(f)};
    }
    DEConvParamsT<T> b;
    b.vc = fetch<T>(ar, prefix + ".vc", Shape{channels, channels, 3, 3});
    b.cdc = fetch<T>(ar, prefix + ".cdc", Shape{channels, channels, 3, 3});
    b.adc = fetch<T>(ar, prefix + ".adc", Shape{channels, channels, 1, 8});
    b.hdc = fetch<T>(ar, prefix + ".hdc", Shape{channels, channels, 3, 2});
    b.vdc = fetch<T>(ar, prefix + ".vdc", Shape{channels, channels, 2, 3});
    b.bias = fetch<T>(ar, prefix + ".bias", Shape{channels, 1, 1, 1});
    return DEConvLayerT<T>{std::move(b)};
}

template <typename T>
CGAParamsT<T> fetch_cga(const WeightArchive& ar, const std::string& prefix, int channels) {
    const int r = cga_reduced_width(channels);
    CGAParamsT<T> p;
    p.ca_reduce_k = fetch<T>(ar, prefix + ".ca_reduce.kernel", Shape{r, channels, 1, 1});
    p.ca_reduce_b = fetch<T>(ar, prefix + ".ca_reduce.bias", Shape{r, 1, 1, 1});
    p.ca_expand_k = fetch<T>(ar, prefix + ".ca_expand.kernel", Shape{channels, r, 1, 1});
    p.ca_expand_b = fetch<T>(ar, prefix + ".ca_expand.bias", Shape{channels, 1, 1, 1});
    p.sa_k = fetch<T>(ar, prefix + ".sa.kernel", Shape{1, 2, 7, 7});
    p.sa_b = fetch<T>(ar, prefix + ".sa.bias", Shape{1, 1, 1, 1});
    p.refine_k = fetch<T>(ar, prefix + ".refine.kernel", Shape{channels, 2, 7, 7});
    p.refine_b = fetch<T>(ar, prefix + ".refine.bias", Shape{channels, 1, 1, 1});
    return p;
}

}  // namespace detail

/// Rebuild a parameter tree from an archive. The architecture is inferred
/// from tensor names and shapes; both fused and unfused archives load.
template <typename T>
NetworkParamsT<T> from_archive(const WeightArchive& ar) {
    const ArchiveKind kind = archive_kind(ar);
    const ArchiveEntry& stem = ar.get("stem.0.conv.kernel");
    const ArchiveEntry& tail = ar.get("tail.0.conv.kernel");
    NetworkConfig cfg;
    cfg.base_channels = int(stem.dims.at(0));
    cfg.in_channels = int(stem.dims.at(1));
    cfg.out_channels = int(tail.dims.at(0));
    cfg.block_counts = {detail::count_stage_blocks(ar, "enc1"),
                        detail::count_stage_blocks(ar, "enc2"),
                        detail::count_stage_blocks(ar, "mid"),
                        detail::count_stage_blocks(ar, "dec2"),
                        detail::count_stage_blocks(ar, "dec1")};
    cfg.validate();

    const int c1 = cfg.base_channels, c2 = 2 * c1, c3 = 4 * c1;
    NetworkParamsT<T> p;
    p.config = cfg;
    p.stem = detail::fetch_conv<T>(ar, "stem.0.conv", Shape{c1, cfg.in_channels, 3, 3});
    for (int i = 0; i < cfg.block_counts[0]; ++i) {
        const std::string pre = "enc1." + std::to_string(i);
        p.enc1.push_back({detail::fetch_deconv<T>(ar, pre + ".deconv", c1, kind),
                          detail::fetch_conv<T>(ar, pre + ".conv", Shape{c1, c1, 3, 3})});
    }
    p.down1 = detail::fetch_conv<T>(ar, "down1.0.conv", Shape{c2, c1, 3, 3});
    for (int i = 0; i < cfg.block_counts[1]; ++i) {
        const std::string pre = "enc2." + std::to_string(i);
        p.enc2.push_back({detail::fetch_deconv<T>(ar, pre + ".deconv", c2, kind),
                          detail::fetch_conv<T>(ar, pre + ".conv", Shape{c2, c2, 3, 3})});
    }
    p.down2 = detail::fetch_conv<T>(ar, "down2.0.conv", Shape{c3, c2, 3, 3});
    for (int i = 0; i < cfg.block_counts[2]; ++i) {
        const std::string pre = "mid." + std::to_string(i);
        p.mid.push_back({detail::fetch_deconv<T>(ar, pre + ".deconv", c3, kind),
                         detail::fetch_conv<T>(ar, pre + ".conv", Shape{c3, c3, 3, 3}),
                         detail::fetch_cga<T>(ar, pre + ".cga", c3)});
    }
    p.fuse3 = {detail::fetch_cga<T>(ar, "fuse3.0.cga", c3),
               detail::fetch_conv<T>(ar, "fuse3.0.proj", Shape{c3, c3, 1, 1})};
    p.up1 = detail::fetch_conv<T>(ar, "up1.0.conv", Shape{c3, c2, 4, 4});
    for (int i = 0; i < cfg.block_counts[3]; ++i) {
        const std::string pre = "dec2." + std::to_string(i);
        p.dec2.push_back({detail::fetch_deconv<T>(ar, pre + ".deconv", c2, kind),
                          detail::fetch_conv<T>(ar, pre + ".conv", Shape{c2, c2, 3, 3})});
    }
    p.fuse2 = {detail::fetch_cga<T>(ar, "fuse2.0.cga", c2),
               detail::fetch_conv<T>(ar, "fuse2.0.proj", Shape{c2, c2, 1, 1})};
    p.up2 = detail::fetch_conv<T>(ar, "up2.0.conv", Shape{c2, c1, 4, 4});
    for (int i = 0; i < cfg.block_counts[4]; ++i) {
        const std::string pre = "dec1." + std::to_string(i);
        p.dec1.push_back({detail::fetch_deconv<T>(ar, pre + ".deconv", c1, kind),
                          detail::fetch_conv<T>(ar, pre + ".conv", Shape{c1, c1, 3, 3})});
    }
    p.tail = detail::fetch_conv<T>(ar, "tail.0.conv", Shape{cfg.out_channels, c1, 3, 3});
    return p;
}

template <typename T = float>
NetworkParamsT<T> load_weights(const std::filesystem::path& path) {
    return from_archive<T>(WeightArchive::load(path));
}

}  // namespace deanet
