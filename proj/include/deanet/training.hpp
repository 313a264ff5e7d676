#pragma once

// Desk-scale optimization: L1 loss, bias-corrected Adam, cosine annealing,
// paired crop/rotate/flip augmentation, and a seed-deterministic training
// loop with checkpoint hooks.

#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "deanet/network.hpp"
#include "deanet/tensor.hpp"

namespace deanet {

struct TrainConfig {
    double lr_init = 1e-4;
    double lr_final = 1e-6;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    int batch_size = 4;
    int total_iters = 2000;
    int crop_size = 32;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(lr_final > 0.0) || !(lr_final <= lr_init)) {
            throw DimensionError("TrainConfig: need 0 < lr_final <= lr_init");
        }
        if (crop_size < 4 || crop_size % 4 != 0) {
            throw DimensionError("TrainConfig: crop_size must be a positive multiple of 4");
        }
        if (batch_size < 1 || total_iters < 0) {
            throw DimensionError("TrainConfig: bad batch_size/total_iters");
        }
    }
};

/// Mean absolute error over all elements. Subgradient is sign(pred-target),
/// zero at ties.
template <typename T>
TensorPtrT<T> l1_loss(const TensorPtrT<T>& pred, const TensorPtrT<T>& target,
                      TapeT<T>* tape = nullptr) {
    if (pred->shape != target->shape) {
        throw DimensionError("l1_loss: shape " + pred->shape.str() + " != " +
                             target->shape.str());
    }
    const std::size_t n = pred->numel();
    if (n == 0) throw DimensionError("l1_loss: empty tensors");
    auto y = make_tensor<T>({1, 1, 1, 1});
    double acc = 0.0;  // double accumulation keeps the mean exact enough for f32 gradcheck
    for (std::size_t i = 0; i < n; ++i) {
        acc += std::abs(double(pred->data[i]) - double(target->data[i]));
    }
    y->data[0] = T(acc / double(n));
    if (tape && (pred->requires_grad || target->requires_grad)) {
        y->requires_grad = true;
        tape->record(y, [pred, target, y, n] {
            const T g = y->grad[0] / T(n);
            if (pred->requires_grad) pred->ensure_grad();
            if (target->requires_grad) target->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                const T d = pred->data[i] - target->data[i];
                const T s = d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0));
                if (pred->requires_grad) pred->grad[i] += g * s;
                if (target->requires_grad) target->grad[i] -= g * s;
            }
        });
    }
    return y;
}

template <typename T>
struct AdamStateT {
    std::vector<std::vector<T>> m;
    std::vector<std::vector<T>> v;
    long t = 0;
};

using AdamState = AdamStateT<float>;

template <typename T>
AdamStateT<T> make_adam_state(const std::vector<TensorPtrT<T>>& params) {
    AdamStateT<T> st;
    st.m.reserve(params.size());
    st.v.reserve(params.size());
    for (const auto& p : params) {
        st.m.emplace_back(p->numel(), T(0));
        st.v.emplace_back(p->numel(), T(0));
    }
    return st;
}

/// Standard bias-corrected Adam step over params[i].grad. A non-finite
/// gradient aborts before any parameter or state is touched. Params with an
/// empty grad buffer are treated as zero-gradient (moments decay only).
template <typename T>
void adam_step(const std::vector<TensorPtrT<T>>& params, AdamStateT<T>& state,
               const TrainConfig& cfg, double lr) {
    if (state.m.size() != params.size() || state.v.size() != params.size()) {
        throw DimensionError("adam_step: state does not match parameter list");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (state.m[i].size() != params[i]->numel()) {
            throw DimensionError("adam_step: moment shape mismatch");
        }
        for (const T g : params[i]->grad) {
            if (!std::isfinite(double(g))) {
                throw NumericError("adam_step: non-finite gradient");
            }
        }
    }
    state.t += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, double(state.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, double(state.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = *params[i];
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (std::size_t j = 0; j < p.numel(); ++j) {
            const T g = j < p.grad.size() ? p.grad[j] : T(0);
            m[j] = T(cfg.beta1) * m[j] + T(1.0 - cfg.beta1) * g;
            v[j] = T(cfg.beta2) * v[j] + T(1.0 - cfg.beta2) * g * g;
            const double mhat = double(m[j]) / bc1;
            const double vhat = double(v[j]) / bc2;
            p.data[j] -= T(lr * mhat / (std::sqrt(vhat) + cfg.epsilon));
        }
    }
}

/// Cosine annealing from lr_init down to lr_final over total_iters.
inline double cosine_lr(int iter, const TrainConfig& cfg) {
    if (iter < 0 || iter > cfg.total_iters) {
        throw DimensionError("cosine_lr: iter " + std::to_string(iter) + " out of [0," +
                             std::to_string(cfg.total_iters) + "]");
    }
    if (cfg.total_iters == 0) return cfg.lr_init;
    const double phase = M_PI * double(iter) / double(cfg.total_iters);
    return cfg.lr_final + 0.5 * (cfg.lr_init - cfg.lr_final) * (1.0 + std::cos(phase));
}

// ---------------------------------------------------------------------------
// Augmentation (pure tensor transforms, no tape)

template <typename T>
TensorPtrT<T> flip_horizontal(const TensorPtrT<T>& x) {
    auto y = make_tensor<T>(x->shape);
    const Shape s = x->shape;
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c)
            for (int h = 0; h < s.h; ++h)
                for (int w = 0; w < s.w; ++w) y->at(n, c, h, w) = x->at(n, c, h, s.w - 1 - w);
    return y;
}

template <typename T>
TensorPtrT<T> flip_vertical(const TensorPtrT<T>& x) {
    auto y = make_tensor<T>(x->shape);
    const Shape s = x->shape;
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c)
            for (int h = 0; h < s.h; ++h)
                for (int w = 0; w < s.w; ++w) y->at(n, c, h, w) = x->at(n, c, s.h - 1 - h, w);
    return y;
}

/// Quarter-turn counterclockwise, applied `quarters` times. Square input.
template <typename T>
TensorPtrT<T> rotate90(const TensorPtrT<T>& x, int quarters) {
    const Shape s = x->shape;
    quarters = ((quarters % 4) + 4) % 4;
    if (quarters == 0) {
        auto y = make_tensor<T>(s);
        y->data = x->data;
        return y;
    }
    if (s.h != s.w) throw DimensionError("rotate90: patch must be square");
    auto y = make_tensor<T>(s);
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c)
            for (int h = 0; h < s.h; ++h)
                for (int w = 0; w < s.w; ++w) {
                    int sh = h, sw = w;
                    switch (quarters) {
                        case 1: sh = w; sw = s.h - 1 - h; break;
                        case 2: sh = s.h - 1 - h; sw = s.w - 1 - w; break;
                        case 3: sh = s.w - 1 - w; sw = h; break;
                    }
                    y->at(n, c, h, w) = x->at(n, c, sh, sw);
                }
    return y;
}

template <typename T>
struct PatchPairT {
    TensorPtrT<T> hazy;
    TensorPtrT<T> clean;
};

using PatchPair = PatchPairT<float>;

/// Identical random transform on both patches: a rotation from
/// {0,90,180,270} crossed with {none, h-flip, v-flip}.
template <typename T>
PatchPairT<T> augment(const PatchPairT<T>& pair, std::mt19937& rng) {
    if (pair.hazy->shape != pair.clean->shape) {
        throw DimensionError("augment: patch shapes differ");
    }
    if (pair.hazy->shape.h != pair.hazy->shape.w) {
        throw DimensionError("augment: rotation needs square patches");
    }
    const int rot = int(rng() % 4);
    const int flip = int(rng() % 3);
    auto apply = [&](const TensorPtrT<T>& t) {
        auto out = rotate90(t, rot);
        if (flip == 1) out = flip_horizontal(out);
        if (flip == 2) out = flip_vertical(out);
        return out;
    };
    return {apply(pair.hazy), apply(pair.clean)};
}

// ---------------------------------------------------------------------------
// Training loop

struct LossRecord {
    int iter = 0;
    double lr = 0.0;
    double loss = 0.0;
};

struct TrainingReport {
    std::vector<LossRecord> records;
    double initial_loss = 0.0;
    double final_loss = 0.0;
};

/// Optional sinks for the loop; both may be empty.
template <typename T>
struct TrainHooksT {
    std::function<void(const LossRecord&)> on_step;
    std::function<void(int iter, const NetworkParamsT<T>&)> on_checkpoint;
};

using TrainHooks = TrainHooksT<float>;

template <typename T>
std::vector<TensorPtrT<T>> trainable_params(const NetworkParamsT<T>& net) {
    std::vector<TensorPtrT<T>> out;
    for (const auto& np : named_params(net)) out.push_back(np.tensor);
    return out;
}

/// Crop -> augment -> forward (unfused) -> L1 -> backward -> Adam, for
/// total_iters steps. Batches are sampled with replacement; everything is
/// deterministic for a fixed seed. Throws NumericError on a non-finite
/// loss or gradient (checkpoints already emitted stay on disk).
template <typename T>
TrainingReport train_loop(const std::vector<PatchPairT<T>>& dataset, NetworkParamsT<T>& net,
                          const TrainConfig& cfg, const TrainHooksT<T>& hooks = {}) {
    cfg.validate();
    if (dataset.empty()) throw DimensionError("train_loop: empty dataset");
    for (const auto& pair : dataset) {
        if (pair.hazy->shape != pair.clean->shape) {
            throw DimensionError("train_loop: hazy/clean shape mismatch");
        }
        if (pair.hazy->shape.h < cfg.crop_size || pair.hazy->shape.w < cfg.crop_size) {
            throw DimensionError("train_loop: image smaller than crop size");
        }
    }

    std::mt19937 rng{std::uint32_t(cfg.seed)};
    auto params = trainable_params(net);
    auto adam = make_adam_state(params);
    const int ckpt_every = std::max(1, cfg.total_iters / 10);
    const int cs = cfg.crop_size;

    TrainingReport report;
    for (int iter = 0; iter < cfg.total_iters; ++iter) {
        auto batch_hazy = make_tensor<T>({cfg.batch_size, 3, cs, cs});
        auto batch_clean = make_tensor<T>({cfg.batch_size, 3, cs, cs});
        for (int b = 0; b < cfg.batch_size; ++b) {
            const auto& pair = dataset[rng() % dataset.size()];
            const Shape s = pair.hazy->shape;
            const int oy = s.h == cs ? 0 : int(rng() % std::uint32_t(s.h - cs + 1));
            const int ox = s.w == cs ? 0 : int(rng() % std::uint32_t(s.w - cs + 1));
            PatchPairT<T> patch{make_tensor<T>({1, 3, cs, cs}), make_tensor<T>({1, 3, cs, cs})};
            for (int c = 0; c < 3; ++c)
                for (int y = 0; y < cs; ++y)
                    for (int x = 0; x < cs; ++x) {
                        patch.hazy->at(0, c, y, x) = pair.hazy->at(0, c, oy + y, ox + x);
                        patch.clean->at(0, c, y, x) = pair.clean->at(0, c, oy + y, ox + x);
                    }
            patch = augment(patch, rng);
            std::copy(patch.hazy->data.begin(), patch.hazy->data.end(),
                      batch_hazy->data.begin() + std::size_t(b) * 3 * cs * cs);
            std::copy(patch.clean->data.begin(), patch.clean->data.end(),
                      batch_clean->data.begin() + std::size_t(b) * 3 * cs * cs);
        }

        TapeT<T> tape;
        auto pred = dea_net_forward(batch_hazy, net, RunMode::unfused, &tape);
        auto loss = l1_loss(pred, batch_clean, &tape);
        const double loss_val = double(loss->data[0]);
        if (!std::isfinite(loss_val)) {
            throw NumericError("train_loop: non-finite loss at iter " + std::to_string(iter));
        }

        for (auto& p : params) p->zero_grad();
        tape.backward(loss);
        const double lr = cosine_lr(iter, cfg);
        adam_step(params, adam, cfg, lr);

        const LossRecord rec{iter, lr, loss_val};
        report.records.push_back(rec);
        if (hooks.on_step) hooks.on_step(rec);
        if (hooks.on_checkpoint && (iter + 1) % ckpt_every == 0) {
            hooks.on_checkpoint(iter, net);
        }
    }
    if (!report.records.empty()) {
        report.initial_loss = report.records.front().loss;
        report.final_loss = report.records.back().loss;
    }
    return report;
}

}  // namespace deanet
