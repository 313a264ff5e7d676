#pragma once

// Central finite-difference checks for every differentiable op and both
// block types. Each case builds seeded leaves twice — once in the precision
// under test and once as an f64 twin with bit-identical starting values —
// and compares the analytic gradients against central differences of the
// f64 twin. Differencing the high-precision twin keeps the oracle's own
// rounding far below the tolerances; the gradients being judged are still
// the ones the T-precision backward produced.

#include <functional>
#include <string>
#include <vector>

#include "deanet/attention.hpp"
#include "deanet/deconv.hpp"
#include "deanet/network.hpp"
#include "deanet/tensor.hpp"
#include "deanet/training.hpp"

namespace deanet {

template <typename T>
struct GradCheckOptions {
    double eps;
    double tol;
    std::uint64_t seed = 36;

    static GradCheckOptions defaults() {
        if constexpr (std::is_same_v<T, float>) {
            return {1e-3, 1e-3, 36};
        } else {
            return {1e-5, 1e-6, 36};
        }
    }
};

struct GradCheckResult {
    std::string op;
    double max_rel_err = 0.0;
    bool pass = false;
};

namespace gradcheck_detail {

// All draws are quantized through f32 so the T-precision case and its f64
// twin start from exactly the same values.
template <typename T>
T draw(std::mt19937& rng, double lo, double hi) {
    std::uniform_real_distribution<double> dist{lo, hi};
    return T(float(dist(rng)));
}

template <typename T>
TensorPtrT<T> fill_uniform(Shape s, std::mt19937& rng, double lo = -1.0, double hi = 1.0) {
    auto t = make_tensor<T>(s);
    for (auto& v : t->data) v = draw<T>(rng, lo, hi);
    return t;
}

template <typename T>
TensorPtrT<T> fill_leaf(Shape s, std::mt19937& rng, double lo = -1.0, double hi = 1.0) {
    auto t = fill_uniform<T>(s, rng, lo, hi);
    t->requires_grad = true;
    t->ensure_grad();
    return t;
}

template <typename T>
struct GradCase {
    std::string name;
    std::vector<TensorPtrT<T>> leaves;
    std::function<TensorPtrT<T>(TapeT<T>*)> output;
    TensorPtrT<T> probe;  // same shape as the output; nullptr means plain sum
};

template <typename T>
DEConvParamsT<T> fill_deconv(int channels, std::mt19937& rng) {
    auto p = make_deconv_params<T>(channels, channels);
    for (auto& t : {p.vc, p.cdc, p.adc, p.hdc, p.vdc, p.bias}) {
        for (auto& v : t->data) v = draw<T>(rng, -0.4, 0.4);
    }
    return p;
}

template <typename T>
CGAParamsT<T> fill_cga(int channels, std::mt19937& rng) {
    auto p = make_cga_params<T>(channels);
    for (auto& t : {p.ca_reduce_k, p.ca_reduce_b, p.ca_expand_k, p.ca_expand_b, p.sa_k, p.sa_b,
                    p.refine_k, p.refine_b}) {
        for (auto& v : t->data) v = draw<T>(rng, -0.3, 0.3);
        t->requires_grad = true;
        t->ensure_grad();
    }
    return p;
}

template <typename T>
std::vector<GradCase<T>> build_cases(std::uint64_t seed) {
    std::vector<GradCase<T>> cases;
    std::mt19937 rng{std::uint32_t(seed)};

    {
        auto x = fill_leaf<T>({2, 3, 6, 6}, rng);
        auto k = fill_leaf<T>({4, 3, 3, 3}, rng, -0.5, 0.5);
        auto b = fill_leaf<T>({4, 1, 1, 1}, rng, -0.2, 0.2);
        auto r = fill_uniform<T>({2, 4, 6, 6}, rng);
        cases.push_back({"conv2d",
                         {x, k, b},
                         [=](TapeT<T>* t) {
                             return conv2d(x, k, b, ConvSpec{3, 4, 3, 3, 1, 1, 1}, t);
                         },
                         r});
    }
    {
        auto x = fill_leaf<T>({1, 4, 6, 6}, rng);
        auto k = fill_leaf<T>({4, 2, 3, 3}, rng, -0.5, 0.5);
        auto b = fill_leaf<T>({4, 1, 1, 1}, rng, -0.2, 0.2);
        auto r = fill_uniform<T>({1, 4, 3, 3}, rng);
        cases.push_back({"conv2d_stride2_groups2",
                         {x, k, b},
                         [=](TapeT<T>* t) {
                             return conv2d(x, k, b, ConvSpec{4, 4, 3, 3, 2, 1, 2}, t);
                         },
                         r});
    }
    {
        auto x = fill_leaf<T>({1, 3, 3, 3}, rng);
        auto k = fill_leaf<T>({3, 2, 4, 4}, rng, -0.5, 0.5);
        auto b = fill_leaf<T>({2, 1, 1, 1}, rng, -0.2, 0.2);
        auto r = fill_uniform<T>({1, 2, 6, 6}, rng);
        cases.push_back({"conv_transpose2d",
                         {x, k, b},
                         [=](TapeT<T>* t) {
                             return conv_transpose2d(x, k, b, ConvSpec{3, 2, 4, 4, 2, 1, 1}, t);
                         },
                         r});
    }
    {
        // values pushed away from the kink at zero
        auto x = fill_leaf<T>({2, 3, 5, 5}, rng);
        for (auto& v : x->data) v += v >= T(0) ? T(0.1) : T(-0.1);
        auto r = fill_uniform<T>({2, 3, 5, 5}, rng);
        cases.push_back({"relu", {x}, [=](TapeT<T>* t) { return relu(x, t); }, r});
    }
    {
        auto x = fill_leaf<T>({2, 3, 5, 5}, rng, -2.0, 2.0);
        auto r = fill_uniform<T>({2, 3, 5, 5}, rng);
        cases.push_back({"sigmoid", {x}, [=](TapeT<T>* t) { return sigmoid(x, t); }, r});
    }
    {
        auto x = fill_leaf<T>({2, 4, 5, 5}, rng);
        auto r = fill_uniform<T>({2, 4, 1, 1}, rng);
        cases.push_back({"gap_spatial", {x}, [=](TapeT<T>* t) { return gap_spatial(x, t); }, r});
    }
    {
        auto x = fill_leaf<T>({2, 4, 5, 5}, rng);
        auto r = fill_uniform<T>({2, 1, 5, 5}, rng);
        cases.push_back({"gap_channel", {x}, [=](TapeT<T>* t) { return gap_channel(x, t); }, r});
    }
    {
        // channel offsets keep the per-pixel argmax stable under the step
        auto x = fill_leaf<T>({2, 4, 5, 5}, rng, -0.2, 0.2);
        for (int n = 0; n < 2; ++n)
            for (int c = 0; c < 4; ++c)
                for (int h = 0; h < 5; ++h)
                    for (int w = 0; w < 5; ++w) x->at(n, c, h, w) += T(0.5) * T(c);
        auto r = fill_uniform<T>({2, 1, 5, 5}, rng);
        cases.push_back({"gmp_channel", {x}, [=](TapeT<T>* t) { return gmp_channel(x, t); }, r});
    }
    {
        auto a = fill_leaf<T>({2, 2, 4, 4}, rng);
        auto b = fill_leaf<T>({2, 3, 4, 4}, rng);
        auto r = fill_uniform<T>({2, 5, 4, 4}, rng);
        cases.push_back(
            {"concat_channels", {a, b}, [=](TapeT<T>* t) { return concat_channels(a, b, t); }, r});
    }
    {
        auto a = fill_leaf<T>({2, 3, 1, 1}, rng);
        auto b = fill_leaf<T>({2, 1, 4, 5}, rng);
        auto r = fill_uniform<T>({2, 3, 4, 5}, rng);
        cases.push_back({"add_broadcast", {a, b}, [=](TapeT<T>* t) { return add(a, b, t); }, r});
    }
    {
        auto a = fill_leaf<T>({2, 3, 1, 1}, rng);
        auto b = fill_leaf<T>({2, 1, 4, 5}, rng);
        auto r = fill_uniform<T>({2, 3, 4, 5}, rng);
        cases.push_back({"mul_broadcast", {a, b}, [=](TapeT<T>* t) { return mul(a, b, t); }, r});
    }
    {
        auto x = fill_leaf<T>({1, 2, 4, 4}, rng);
        auto r = fill_uniform<T>({1, 2, 4, 4}, rng);
        cases.push_back(
            {"scale_add", {x},
             [=](TapeT<T>* t) { return scale_add(x, T(1.7), T(-0.3), t); }, r});
    }
    {
        auto x = fill_leaf<T>({1, 4, 3, 3}, rng);
        auto r = fill_uniform<T>({1, 4, 3, 3}, rng);
        cases.push_back(
            {"channel_shuffle2", {x}, [=](TapeT<T>* t) { return channel_shuffle2(x, t); }, r});
    }
    {
        auto x = fill_leaf<T>({2, 3, 4, 4}, rng);
        cases.push_back({"sum", {x}, [=](TapeT<T>* t) { return sum(x, t); }, TensorPtrT<T>{}});
    }
    {
        auto pred = fill_leaf<T>({2, 3, 4, 4}, rng);
        auto target = make_tensor<T>(Shape{2, 3, 4, 4});
        for (std::size_t i = 0; i < target->numel(); ++i) {
            const T off = draw<T>(rng, 0.05, 0.3);
            target->data[i] = pred->data[i] + (rng() % 2 ? off : -off);
        }
        cases.push_back({"l1_loss", {pred}, [=](TapeT<T>* t) { return l1_loss(pred, target, t); },
                         TensorPtrT<T>{}});
    }
    {
        auto w = fill_leaf<T>({2, 3, 3, 3}, rng);
        auto r = fill_uniform<T>({2, 3, 3, 3}, rng);
        cases.push_back({"equivalent_kernel_cdc", {w},
                         [=](TapeT<T>* t) { return equivalent_kernel_cdc(w, t); }, r});
    }
    {
        auto w = fill_leaf<T>({2, 3, 1, 8}, rng);
        auto r = fill_uniform<T>({2, 3, 3, 3}, rng);
        cases.push_back({"equivalent_kernel_adc", {w},
                         [=](TapeT<T>* t) { return equivalent_kernel_adc(w, t); }, r});
    }
    {
        auto w = fill_leaf<T>({2, 3, 3, 2}, rng);
        auto r = fill_uniform<T>({2, 3, 3, 3}, rng);
        cases.push_back({"equivalent_kernel_hdc", {w},
                         [=](TapeT<T>* t) { return equivalent_kernel_hdc(w, t); }, r});
    }
    {
        auto w = fill_leaf<T>({2, 3, 2, 3}, rng);
        auto r = fill_uniform<T>({2, 3, 3, 3}, rng);
        cases.push_back({"equivalent_kernel_vdc", {w},
                         [=](TapeT<T>* t) { return equivalent_kernel_vdc(w, t); }, r});
    }
    {
        auto x = fill_leaf<T>({1, 2, 5, 5}, rng);
        auto p = fill_deconv<T>(2, rng);
        auto r = fill_uniform<T>({1, 2, 5, 5}, rng);
        std::vector<TensorPtrT<T>> leaves = {x, p.vc, p.cdc, p.adc, p.hdc, p.vdc, p.bias};
        cases.push_back({"deconv_forward_unfused", leaves,
                         [=](TapeT<T>* t) { return deconv_forward_unfused(x, p, t); }, r});
    }
    {
        auto p = fill_cga<T>(4, rng);
        auto x = fill_leaf<T>({1, 4, 5, 5}, rng, -0.8, 0.8);
        auto r = fill_uniform<T>({1, 4, 5, 5}, rng);
        std::vector<TensorPtrT<T>> leaves = {x,          p.ca_reduce_k, p.ca_reduce_b,
                                             p.ca_expand_k, p.ca_expand_b, p.sa_k,
                                             p.sa_b,     p.refine_k,    p.refine_b};
        cases.push_back({"cga", leaves, [=](TapeT<T>* t) { return cga(x, p, t); }, r});
    }
    {
        DEBParamsT<T> blk;
        blk.deconv = DEConvLayerT<T>{fill_deconv<T>(3, rng)};
        blk.conv.kernel = fill_leaf<T>({3, 3, 3, 3}, rng, -0.3, 0.3);
        blk.conv.bias = fill_leaf<T>({3, 1, 1, 1}, rng, -0.2, 0.2);
        auto x = fill_leaf<T>({1, 3, 6, 6}, rng, -0.8, 0.8);
        auto r = fill_uniform<T>({1, 3, 6, 6}, rng);
        std::vector<TensorPtrT<T>> leaves = {x};
        const auto& d = blk.deconv.branches();
        for (const auto& t : {d.vc, d.cdc, d.adc, d.hdc, d.vdc, d.bias}) leaves.push_back(t);
        leaves.push_back(blk.conv.kernel);
        leaves.push_back(blk.conv.bias);
        cases.push_back({"deb_forward", leaves,
                         [=](TapeT<T>* t) { return deb_forward(x, blk, RunMode::unfused, t); },
                         r});
    }
    {
        DEABParamsT<T> blk;
        blk.deconv = DEConvLayerT<T>{fill_deconv<T>(4, rng)};
        blk.conv.kernel = fill_leaf<T>({4, 4, 3, 3}, rng, -0.3, 0.3);
        blk.conv.bias = fill_leaf<T>({4, 1, 1, 1}, rng, -0.2, 0.2);
        blk.cga = fill_cga<T>(4, rng);
        auto x = fill_leaf<T>({1, 4, 6, 6}, rng, -0.8, 0.8);
        auto r = fill_uniform<T>({1, 4, 6, 6}, rng);
        std::vector<TensorPtrT<T>> leaves = {x};
        const auto& d = blk.deconv.branches();
        for (const auto& t : {d.vc, d.cdc, d.adc, d.hdc, d.vdc, d.bias}) leaves.push_back(t);
        leaves.push_back(blk.conv.kernel);
        leaves.push_back(blk.conv.bias);
        for (const auto& t : {blk.cga.ca_reduce_k, blk.cga.ca_reduce_b, blk.cga.ca_expand_k,
                              blk.cga.ca_expand_b, blk.cga.sa_k, blk.cga.sa_b,
                              blk.cga.refine_k, blk.cga.refine_b}) {
            leaves.push_back(t);
        }
        cases.push_back({"deab_forward", leaves,
                         [=](TapeT<T>* t) { return deab_forward(x, blk, RunMode::unfused, t); },
                         r});
    }
    return cases;
}

// Analytic gradients from the T-precision tape; numeric derivative from
// central differences of the f64 twin.
template <typename T>
GradCheckResult run_case(const GradCase<T>& c, const GradCase<double>& twin,
                         const GradCheckOptions<T>& opt) {
    TapeT<T> tape;
    auto y = c.output(&tape);
    auto loss = c.probe ? sum(mul(y, c.probe, &tape), &tape) : sum(y, &tape);
    for (auto& leaf : c.leaves) leaf->zero_grad();
    tape.backward(loss);

    auto oracle_eval = [&]() {
        auto out = twin.output(nullptr);
        double acc = 0.0;
        for (std::size_t i = 0; i < out->numel(); ++i) {
            acc += out->data[i] * (twin.probe ? twin.probe->data[i] : 1.0);
        }
        return acc;
    };

    double max_rel = 0.0;
    for (std::size_t li = 0; li < c.leaves.size(); ++li) {
        auto& leaf = *twin.leaves[li];
        const auto& grad = c.leaves[li]->grad;
        for (std::size_t j = 0; j < leaf.numel(); ++j) {
            const double saved = leaf.data[j];
            leaf.data[j] = saved + opt.eps;
            const double lp = oracle_eval();
            leaf.data[j] = saved - opt.eps;
            const double lm = oracle_eval();
            leaf.data[j] = saved;
            const double numeric = (lp - lm) / (2.0 * opt.eps);
            const double a = j < grad.size() ? double(grad[j]) : 0.0;
            const double denom = std::max({std::abs(a), std::abs(numeric), 1e-4});
            max_rel = std::max(max_rel, std::abs(a - numeric) / denom);
        }
    }
    return {c.name, max_rel, max_rel <= opt.tol};
}

}  // namespace gradcheck_detail

template <typename T>
std::vector<GradCheckResult> run_gradcheck(
    const GradCheckOptions<T>& opt = GradCheckOptions<T>::defaults()) {
    auto cases = gradcheck_detail::build_cases<T>(opt.seed);
    auto twins = gradcheck_detail::build_cases<double>(opt.seed);
    std::vector<GradCheckResult> results;
    results.reserve(cases.size());
    for (std::size_t i = 0; i < cases.size(); ++i) {
        results.push_back(gradcheck_detail::run_case(cases[i], twins[i], opt));
    }
    return results;
}

inline bool gradcheck_all_passed(const std::vector<GradCheckResult>& results) {
    for (const auto& r : results) {
        if (!r.pass) return false;
    }
    return true;
}

}  // namespace deanet
