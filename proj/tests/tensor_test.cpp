#include <gtest/gtest.h>

#include <random>

#include "deanet/tensor.hpp"
#include "deanet/training.hpp"

namespace deanet {
namespace {

// Independent nested-loop cross-correlation oracle. Deliberately written as
// the naive O(n*oc*ic*kh*kw*oh*ow) summation, separate from the library's
// loop structure.
TensorPtr conv_oracle(const TensorPtr& x, const TensorPtr& k, const TensorPtr& bias,
                      const ConvSpec& spec) {
    const Shape xs = x->shape;
    const int icpg = spec.in_channels / spec.groups;
    const int ocpg = spec.out_channels / spec.groups;
    const int oh = spec.out_size(xs.h, spec.kernel_h);
    const int ow = spec.out_size(xs.w, spec.kernel_w);
    auto y = make_tensor<float>({xs.n, spec.out_channels, oh, ow});
    for (int n = 0; n < xs.n; ++n)
        for (int oc = 0; oc < spec.out_channels; ++oc)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    const int g = oc / ocpg;
                    float acc = bias ? bias->data[oc] : 0.0f;
                    for (int icg = 0; icg < icpg; ++icg)
                        for (int ky = 0; ky < spec.kernel_h; ++ky)
                            for (int kx = 0; kx < spec.kernel_w; ++kx) {
                                const int iy = oy * spec.stride - spec.padding + ky;
                                const int ix = ox * spec.stride - spec.padding + kx;
                                if (iy < 0 || iy >= xs.h || ix < 0 || ix >= xs.w) continue;
                                acc += x->at(n, g * icpg + icg, iy, ix) *
                                       k->at(oc, icg, ky, kx);
                            }
                    y->at(n, oc, oy, ox) = acc;
                }
    return y;
}

float max_abs_diff(const Tensor& a, const Tensor& b) {
    EXPECT_EQ(a.shape, b.shape);
    float m = 0.0f;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        m = std::max(m, std::abs(a.data[i] - b.data[i]));
    }
    return m;
}

TEST(Conv2d, AllOnesCountsOverlappingTaps) {
    auto x = make_tensor<float>({1, 1, 3, 3}, 1.0f);
    auto k = make_tensor<float>({1, 1, 3, 3}, 1.0f);
    auto y = conv2d(x, k, TensorPtr{}, ConvSpec{1, 1, 3, 3, 1, 1, 1});
    EXPECT_FLOAT_EQ(y->at(0, 0, 1, 1), 9.0f);
    EXPECT_FLOAT_EQ(y->at(0, 0, 0, 1), 6.0f);
    EXPECT_FLOAT_EQ(y->at(0, 0, 1, 0), 6.0f);
    EXPECT_FLOAT_EQ(y->at(0, 0, 0, 0), 4.0f);
    EXPECT_FLOAT_EQ(y->at(0, 0, 2, 2), 4.0f);
}

TEST(Conv2d, CenteredDeltaKernelIsIdentity) {
    std::mt19937 rng(3);
    auto x = make_uniform<float>({2, 3, 5, 5}, rng);
    auto k = make_tensor<float>({3, 3, 3, 3});
    for (int c = 0; c < 3; ++c) k->at(c, c, 1, 1) = 1.0f;
    auto y = conv2d(x, k, TensorPtr{}, ConvSpec{3, 3, 3, 3, 1, 1, 1});
    EXPECT_EQ(max_abs_diff(*y, *x), 0.0f);
}

TEST(Conv2d, MatchesDirectSummationOracle) {
    std::mt19937 rng(17);
    auto x = make_uniform<float>({2, 4, 8, 8}, rng);
    auto k = make_uniform<float>({8, 4, 3, 3}, rng);
    auto b = make_uniform<float>({8, 1, 1, 1}, rng);
    const ConvSpec spec{4, 8, 3, 3, 1, 1, 1};
    EXPECT_LE(max_abs_diff(*conv2d(x, k, b, spec), *conv_oracle(x, k, b, spec)), 1e-5f);
}

TEST(Conv2d, MatchesOracleWithGroupsAndStride) {
    std::mt19937 rng(23);
    auto x = make_uniform<float>({2, 6, 9, 7}, rng);
    auto k = make_uniform<float>({4, 3, 3, 3}, rng);
    auto b = make_uniform<float>({4, 1, 1, 1}, rng);
    const ConvSpec spec{6, 4, 3, 3, 2, 1, 2};
    EXPECT_LE(max_abs_diff(*conv2d(x, k, b, spec), *conv_oracle(x, k, b, spec)), 1e-5f);

    // 7x7 grouped conv as used by the attention refinement stage
    auto x2 = make_uniform<float>({1, 8, 10, 10}, rng);
    auto k2 = make_uniform<float>({4, 2, 7, 7}, rng);
    const ConvSpec spec2{8, 4, 7, 7, 1, 3, 4};
    EXPECT_LE(max_abs_diff(*conv2d(x2, k2, TensorPtr{}, spec2),
                           *conv_oracle(x2, k2, TensorPtr{}, spec2)),
              1e-5f);
}

TEST(Conv2d, IsLinearWithBiasDisabled) {
    std::mt19937 rng(29);
    auto x = make_uniform<float>({1, 4, 6, 6}, rng);
    auto y = make_uniform<float>({1, 4, 6, 6}, rng);
    auto k = make_uniform<float>({4, 4, 3, 3}, rng);
    const ConvSpec spec{4, 4, 3, 3, 1, 1, 1};
    const float alpha = 0.7f, beta = -1.3f;
    auto combo = make_tensor<float>(x->shape);
    for (std::size_t i = 0; i < combo->numel(); ++i) {
        combo->data[i] = alpha * x->data[i] + beta * y->data[i];
    }
    auto lhs = conv2d(combo, k, TensorPtr{}, spec);
    auto cx = conv2d(x, k, TensorPtr{}, spec);
    auto cy = conv2d(y, k, TensorPtr{}, spec);
    float m = 0.0f;
    for (std::size_t i = 0; i < lhs->numel(); ++i) {
        m = std::max(m, std::abs(lhs->data[i] - (alpha * cx->data[i] + beta * cy->data[i])));
    }
    EXPECT_LE(m, 1e-5f);
}

TEST(Conv2d, RejectsShapeMismatchAndNonFinite) {
    auto x = make_tensor<float>({1, 2, 4, 4}, 1.0f);
    auto k = make_tensor<float>({1, 3, 3, 3}, 1.0f);
    EXPECT_THROW(conv2d(x, k, TensorPtr{}, ConvSpec{3, 1, 3, 3, 1, 1, 1}), DimensionError);
    EXPECT_THROW(conv2d(x, k, TensorPtr{}, ConvSpec{2, 1, 3, 3, 1, 1, 1}), DimensionError);

    auto bad = make_tensor<float>({1, 2, 4, 4}, 1.0f);
    bad->data[5] = std::numeric_limits<float>::quiet_NaN();
    auto k2 = make_tensor<float>({1, 2, 3, 3}, 1.0f);
    EXPECT_THROW(conv2d(bad, k2, TensorPtr{}, ConvSpec{2, 1, 3, 3, 1, 1, 1}), NumericError);
}

TEST(ConvTranspose2d, ScattersSingleInputPixel) {
    auto x = make_tensor<float>({1, 1, 2, 2});
    x->at(0, 0, 0, 0) = 1.0f;
    auto k = make_tensor<float>({1, 1, 4, 4}, 1.0f);
    auto y = conv_transpose2d(x, k, TensorPtr{}, ConvSpec{1, 1, 4, 4, 2, 1, 1});
    ASSERT_EQ(y->shape, (Shape{1, 1, 4, 4}));
    for (int iy = 0; iy < 4; ++iy) {
        for (int ix = 0; ix < 4; ++ix) {
            const float expect = (iy < 3 && ix < 3) ? 1.0f : 0.0f;
            EXPECT_FLOAT_EQ(y->at(0, 0, iy, ix), expect) << iy << "," << ix;
        }
    }
}

TEST(ConvTranspose2d, ZeroInputGivesBroadcastBias) {
    auto x = make_tensor<float>({1, 2, 3, 3});
    auto k = make_tensor<float>({2, 3, 4, 4}, 0.5f);
    auto b = make_tensor<float>({3, 1, 1, 1});
    b->data = {0.25f, -1.0f, 2.0f};
    auto y = conv_transpose2d(x, k, b, ConvSpec{2, 3, 4, 4, 2, 1, 1});
    ASSERT_EQ(y->shape, (Shape{1, 3, 6, 6}));
    for (int c = 0; c < 3; ++c) {
        for (int i = 0; i < 36; ++i) {
            EXPECT_FLOAT_EQ(y->data[std::size_t(c) * 36 + i], b->data[c]);
        }
    }
}

// conv_transpose2d must equal the gradient-by-input of conv2d with the same
// kernel buffer: run conv2d on a leaf, seed the cotangent, and compare.
TEST(ConvTranspose2d, MatchesConvBackwardByInput) {
    std::mt19937 rng(31);
    auto x = make_uniform<float>({2, 3, 4, 4}, rng);
    auto k = make_uniform<float>({3, 5, 4, 4}, rng);
    auto y = conv_transpose2d(x, k, TensorPtr{}, ConvSpec{3, 5, 4, 4, 2, 1, 1});
    ASSERT_EQ(y->shape, (Shape{2, 5, 8, 8}));

    auto z = make_leaf<float>({2, 5, 8, 8});
    Tape tape;
    auto fwd = conv2d(z, k, TensorPtr{}, ConvSpec{5, 3, 4, 4, 2, 1, 1}, &tape);
    ASSERT_EQ(fwd->shape, x->shape);
    auto loss = sum(mul(fwd, x, &tape), &tape);
    tape.backward(loss);
    auto zg = make_tensor<float>(z->shape);
    zg->data = z->grad;
    EXPECT_LE(max_abs_diff(*y, *zg), 1e-4f);
}

TEST(Elementwise, ReluAndSigmoidValues) {
    auto x = make_tensor<float>({1, 1, 1, 3});
    x->data = {-1.5f, 0.0f, 2.0f};
    auto r = relu(x);
    EXPECT_FLOAT_EQ(r->data[0], 0.0f);
    EXPECT_FLOAT_EQ(r->data[1], 0.0f);
    EXPECT_FLOAT_EQ(r->data[2], 2.0f);
    auto s = sigmoid(x);
    EXPECT_FLOAT_EQ(s->data[1], 0.5f);
}

TEST(Elementwise, SigmoidGradientAtZeroIsQuarter) {
    const float eps = 1e-3f;
    auto hi = make_tensor<float>({1, 1, 1, 1}, eps);
    auto lo = make_tensor<float>({1, 1, 1, 1}, -eps);
    const float numeric = (sigmoid(hi)->data[0] - sigmoid(lo)->data[0]) / (2 * eps);
    EXPECT_NEAR(numeric, 0.25f, 1e-4f);

    auto x = make_leaf<float>({1, 1, 1, 1}, 0.0f);
    Tape tape;
    auto loss = sum(sigmoid(x, &tape), &tape);
    tape.backward(loss);
    EXPECT_NEAR(x->grad[0], 0.25f, 1e-6f);
}

TEST(Pooling, SpatialMeanOfConstant) {
    auto x = make_tensor<float>({2, 3, 4, 5}, 2.75f);
    auto y = gap_spatial(x);
    ASSERT_EQ(y->shape, (Shape{2, 3, 1, 1}));
    for (const float v : y->data) EXPECT_FLOAT_EQ(v, 2.75f);
}

TEST(Pooling, ChannelMaxPicksLargest) {
    auto x = make_tensor<float>({1, 3, 1, 1});
    x->data = {1.0f, 3.0f, 2.0f};
    auto y = gmp_channel(x);
    EXPECT_FLOAT_EQ(y->data[0], 3.0f);
}

TEST(Pooling, MeanMatchesSumOverCountOracle) {
    std::mt19937 rng(37);
    auto x = make_uniform<float>({2, 3, 6, 7}, rng);
    auto gs = gap_spatial(x);
    auto gc = gap_channel(x);
    for (int n = 0; n < 2; ++n) {
        for (int c = 0; c < 3; ++c) {
            double acc = 0.0;
            for (int h = 0; h < 6; ++h)
                for (int w = 0; w < 7; ++w) acc += x->at(n, c, h, w);
            EXPECT_NEAR(gs->at(n, c, 0, 0), acc / 42.0, 1e-6);
        }
        for (int h = 0; h < 6; ++h)
            for (int w = 0; w < 7; ++w) {
                double acc = 0.0;
                for (int c = 0; c < 3; ++c) acc += x->at(n, c, h, w);
                EXPECT_NEAR(gc->at(n, 0, h, w), acc / 3.0, 1e-6);
            }
    }
}

TEST(Pooling, GapTimesAreaEqualsSpatialSum) {
    std::mt19937 rng(41);
    auto x = make_uniform<float>({1, 2, 5, 9}, rng);
    auto g = gap_spatial(x);
    for (int c = 0; c < 2; ++c) {
        float direct = 0.0f;
        for (int h = 0; h < 5; ++h)
            for (int w = 0; w < 9; ++w) direct += x->at(0, c, h, w);
        const float scaled = g->at(0, c, 0, 0) * 45.0f;
        EXPECT_LE(std::abs(scaled - direct), 1e-5f * std::max(1.0f, std::abs(direct)));
    }
}

TEST(Combine, ConcatOrderAndBroadcastAdd) {
    auto a = make_tensor<float>({1, 2, 2, 2}, 1.0f);
    auto b = make_tensor<float>({1, 3, 2, 2}, 2.0f);
    auto y = concat_channels(a, b);
    ASSERT_EQ(y->shape.c, 5);
    EXPECT_FLOAT_EQ(y->at(0, 0, 0, 0), 1.0f);
    EXPECT_FLOAT_EQ(y->at(0, 1, 1, 1), 1.0f);
    EXPECT_FLOAT_EQ(y->at(0, 2, 0, 0), 2.0f);
    EXPECT_FLOAT_EQ(y->at(0, 4, 1, 1), 2.0f);

    std::mt19937 rng(43);
    auto wc = make_uniform<float>({2, 4, 1, 1}, rng);
    auto ws = make_uniform<float>({2, 1, 3, 5}, rng);
    auto sum_map = add(wc, ws);
    ASSERT_EQ(sum_map->shape, (Shape{2, 4, 3, 5}));
    for (int n = 0; n < 2; ++n)
        for (int c = 0; c < 4; ++c)
            for (int h = 0; h < 3; ++h)
                for (int w = 0; w < 5; ++w) {
                    EXPECT_FLOAT_EQ(sum_map->at(n, c, h, w),
                                    wc->at(n, c, 0, 0) + ws->at(n, 0, h, w));
                }

    EXPECT_THROW(add(make_tensor<float>({1, 2, 3, 3}), make_tensor<float>({1, 3, 3, 3})),
                 DimensionError);
}

TEST(Combine, MulByOnesIsIdentity) {
    std::mt19937 rng(47);
    auto x = make_uniform<float>({2, 3, 4, 4}, rng);
    auto ones = make_tensor<float>(x->shape, 1.0f);
    EXPECT_EQ(max_abs_diff(*mul(x, ones), *x), 0.0f);
}

TEST(ChannelShuffle, InterleavesHalves) {
    auto x = make_tensor<float>({1, 4, 1, 1});
    x->data = {10.0f, 11.0f, 20.0f, 21.0f};  // [X0, X1, W0, W1]
    auto y = channel_shuffle2(x);
    EXPECT_FLOAT_EQ(y->data[0], 10.0f);  // X0
    EXPECT_FLOAT_EQ(y->data[1], 20.0f);  // W0
    EXPECT_FLOAT_EQ(y->data[2], 11.0f);  // X1
    EXPECT_FLOAT_EQ(y->data[3], 21.0f);  // W1

    EXPECT_THROW(channel_shuffle2(make_tensor<float>({1, 3, 1, 1})), DimensionError);
}

TEST(ChannelShuffle, InversePermutationRestoresInput) {
    std::mt19937 rng(53);
    auto x = make_uniform<float>({2, 6, 3, 3}, rng);
    auto y = channel_shuffle2(x);

    // inverse: channel 2i -> i, channel 2i+1 -> half+i
    auto z = make_tensor<float>(x->shape);
    const int half = 3;
    for (int n = 0; n < 2; ++n)
        for (int i = 0; i < half; ++i)
            for (int h = 0; h < 3; ++h)
                for (int w = 0; w < 3; ++w) {
                    z->at(n, i, h, w) = y->at(n, 2 * i, h, w);
                    z->at(n, half + i, h, w) = y->at(n, 2 * i + 1, h, w);
                }
    EXPECT_EQ(max_abs_diff(*z, *x), 0.0f);
}

TEST(ChannelShuffle, PreservesValueMultiset) {
    std::mt19937 rng(59);
    auto x = make_uniform<float>({1, 8, 4, 4}, rng);
    auto y = channel_shuffle2(x);
    auto xs = x->data;
    auto ys = y->data;
    std::sort(xs.begin(), xs.end());
    std::sort(ys.begin(), ys.end());
    EXPECT_EQ(xs, ys);
}

TEST(ChannelShuffle, GradientIsInverseShuffle) {
    std::mt19937 rng(61);
    auto x = make_leaf<float>({1, 4, 2, 2});
    auto r = make_uniform<float>({1, 4, 2, 2}, rng);
    Tape tape;
    auto loss = sum(mul(channel_shuffle2(x, &tape), r, &tape), &tape);
    tape.backward(loss);
    // d loss / dx = unshuffle(r)
    const int half = 2;
    for (int i = 0; i < half; ++i)
        for (int h = 0; h < 2; ++h)
            for (int w = 0; w < 2; ++w) {
                EXPECT_FLOAT_EQ(x->grad[x->index(0, i, h, w)], r->at(0, 2 * i, h, w));
                EXPECT_FLOAT_EQ(x->grad[x->index(0, half + i, h, w)],
                                r->at(0, 2 * i + 1, h, w));
            }
}

TEST(Backward, SumGivesAllOnes) {
    auto x = make_leaf<float>({2, 2, 2, 2}, 0.3f);
    Tape tape;
    auto loss = sum(x, &tape);
    tape.backward(loss);
    for (const float g : x->grad) EXPECT_FLOAT_EQ(g, 1.0f);
}

TEST(Backward, DisconnectedLeafStaysZero) {
    auto x = make_leaf<float>({1, 1, 2, 2}, 1.0f);
    auto other = make_leaf<float>({1, 1, 2, 2}, 2.0f);
    Tape tape;
    auto loss = sum(x, &tape);
    tape.backward(loss);
    for (const float g : other->grad) EXPECT_FLOAT_EQ(g, 0.0f);
}

TEST(Backward, RepeatedCallsAccumulate) {
    auto x = make_leaf<float>({1, 1, 1, 2}, 1.0f);
    Tape tape;
    auto loss = sum(x, &tape);
    tape.backward(loss);
    tape.backward(loss);
    for (const float g : x->grad) EXPECT_FLOAT_EQ(g, 2.0f);
}

TEST(Backward, RejectsNonScalarLoss) {
    auto x = make_leaf<float>({1, 1, 2, 2}, 1.0f);
    Tape tape;
    auto y = relu(x, &tape);
    EXPECT_THROW(tape.backward(y), DimensionError);

    auto unrecorded = make_tensor<float>({1, 1, 1, 1});
    EXPECT_THROW(tape.backward(unrecorded), DimensionError);
}

// The spec's canonical tensor-core gradient example: d L1(conv(x,k), target)
// matches central finite differences at f32.
TEST(Backward, ConvL1MatchesFiniteDifferences) {
    std::mt19937 rng(67);
    auto x = make_uniform<float>({1, 2, 5, 5}, rng);
    x->requires_grad = true;
    x->ensure_grad();
    auto k = make_uniform<float>({3, 2, 3, 3}, rng, -0.5f, 0.5f);
    k->requires_grad = true;
    k->ensure_grad();
    const ConvSpec spec{2, 3, 3, 3, 1, 1, 1};

    // offsets keep |pred - target| away from the L1 kink across the FD step
    auto base = conv2d(x, k, TensorPtr{}, spec);
    auto target = make_tensor<float>(base->shape);
    std::uniform_real_distribution<double> off{0.02, 0.06};
    for (std::size_t i = 0; i < target->numel(); ++i) {
        const double delta = off(rng) * (rng() % 2 ? 1.0 : -1.0);
        target->data[i] = base->data[i] + float(delta);
    }

    Tape tape;
    auto loss = l1_loss(conv2d(x, k, TensorPtr{}, spec, &tape), target, &tape);
    tape.backward(loss);

    // oracle: f32 forward, f64 reduction of the mean absolute error
    const float eps = 1e-3f;
    auto eval = [&] {
        auto pred = conv2d(x, k, TensorPtr{}, spec);
        double acc = 0.0;
        for (std::size_t i = 0; i < pred->numel(); ++i) {
            acc += std::abs(double(pred->data[i]) - double(target->data[i]));
        }
        return acc / double(pred->numel());
    };
    auto check_leaf = [&](TensorPtr leaf) {
        for (std::size_t i = 0; i < leaf->numel(); ++i) {
            const float saved = leaf->data[i];
            leaf->data[i] = saved + eps;
            const double lp = eval();
            leaf->data[i] = saved - eps;
            const double lm = eval();
            leaf->data[i] = saved;
            const double numeric = (lp - lm) / (2.0 * eps);
            const double a = leaf->grad[i];
            const double denom = std::max({std::abs(a), std::abs(numeric), 1e-4});
            EXPECT_LE(std::abs(a - numeric) / denom, 1e-3);
        }
    };
    check_leaf(x);
    check_leaf(k);
}

}  // namespace
}  // namespace deanet
