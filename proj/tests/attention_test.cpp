#include <gtest/gtest.h>

#include <random>

#include "deanet/attention.hpp"
#include "deanet/gradcheck.hpp"

namespace deanet {
namespace {

CGAParams random_cga(int channels, std::mt19937& rng, float scale = 0.3f) {
    auto p = make_cga_params<float>(channels);
    std::uniform_real_distribution<double> dist{-double(scale), double(scale)};
    for (auto& t : {p.ca_reduce_k, p.ca_reduce_b, p.ca_expand_k, p.ca_expand_b, p.sa_k, p.sa_b,
                    p.refine_k, p.refine_b}) {
        for (auto& v : t->data) v = float(dist(rng));
    }
    return p;
}

float max_abs_diff(const Tensor& a, const Tensor& b) {
    EXPECT_EQ(a.shape, b.shape);
    float m = 0.0f;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

TEST(ChannelAttention, ZeroWeightsLeaveExpandBias) {
    auto p = make_cga_params<float>(8);
    p.ca_expand_b->data.assign(8, 0.0f);
    for (int c = 0; c < 8; ++c) p.ca_expand_b->data[c] = 0.1f * float(c);
    std::mt19937 rng{211};
    auto x = make_uniform<float>({2, 8, 4, 4}, rng);
    auto wc = channel_attention(x, p);
    ASSERT_EQ(wc->shape, (Shape{2, 8, 1, 1}));
    for (int n = 0; n < 2; ++n)
        for (int c = 0; c < 8; ++c) EXPECT_FLOAT_EQ(wc->at(n, c, 0, 0), 0.1f * float(c));
}

TEST(ChannelAttention, SpatiallyConstantInputEqualsDirectChannelPath) {
    std::mt19937 rng{223};
    auto p = random_cga(4, rng);
    // constant over space: GAP is the identity on the channel vector
    auto x = make_tensor<float>({1, 4, 5, 5});
    const float chan[4] = {0.2f, -0.4f, 0.8f, 0.1f};
    for (int c = 0; c < 4; ++c)
        for (int i = 0; i < 25; ++i) x->data[c * 25 + i] = chan[c];
    auto direct = make_tensor<float>({1, 4, 1, 1});
    for (int c = 0; c < 4; ++c) direct->data[c] = chan[c];

    auto via_gap = channel_attention(x, p);
    auto r = cga_reduced_width(4);
    auto h = conv2d(direct, p.ca_reduce_k, p.ca_reduce_b, ConvSpec{4, r, 1, 1, 1, 0, 1});
    h = relu(h);
    auto expect = conv2d(h, p.ca_expand_k, p.ca_expand_b, ConvSpec{r, 4, 1, 1, 1, 0, 1});
    EXPECT_LE(max_abs_diff(*via_gap, *expect), 1e-6f);
}

TEST(ChannelAttention, MatchesOpCompositionOracle) {
    std::mt19937 rng{227};
    auto p = random_cga(16, rng);
    auto x = make_uniform<float>({2, 16, 6, 6}, rng);
    auto oracle = conv2d(relu(conv2d(gap_spatial(x), p.ca_reduce_k, p.ca_reduce_b,
                                     ConvSpec{16, 16, 1, 1, 1, 0, 1})),
                         p.ca_expand_k, p.ca_expand_b, ConvSpec{16, 16, 1, 1, 1, 0, 1});
    EXPECT_LE(max_abs_diff(*channel_attention(x, p), *oracle), 1e-6f);
}

TEST(SpatialAttention, SingleChannelMakesMeanEqualMax) {
    std::mt19937 rng{229};
    auto p = random_cga(1, rng);
    auto x = make_uniform<float>({1, 1, 6, 6}, rng);
    auto mean_map = gap_channel(x);
    auto max_map = gmp_channel(x);
    EXPECT_EQ(max_abs_diff(*mean_map, *x), 0.0f);
    EXPECT_EQ(max_abs_diff(*max_map, *x), 0.0f);
}

TEST(SpatialAttention, DeltaKernelSelectsMeanMap) {
    auto p = make_cga_params<float>(3);
    p.sa_k->at(0, 0, 3, 3) = 1.0f;  // center tap on the mean channel
    std::mt19937 rng{233};
    auto x = make_uniform<float>({1, 3, 8, 8}, rng);
    auto ws = spatial_attention(x, p);
    EXPECT_LE(max_abs_diff(*ws, *gap_channel(x)), 1e-6f);
}

TEST(SpatialAttention, MatchesOpCompositionOracle) {
    std::mt19937 rng{239};
    auto p = random_cga(5, rng);
    auto x = make_uniform<float>({2, 5, 9, 7}, rng);
    auto cat = concat_channels(gap_channel(x), gmp_channel(x));
    auto oracle = conv2d(cat, p.sa_k, p.sa_b, ConvSpec{2, 1, 7, 7, 1, 3, 1});
    EXPECT_LE(max_abs_diff(*spatial_attention(x, p), *oracle), 1e-6f);
}

TEST(Cga, ZeroRefineWeightsGiveHalfEverywhere) {
    std::mt19937 rng{241};
    auto p = random_cga(4, rng);
    p.refine_k = make_tensor<float>({4, 2, 7, 7});
    p.refine_b = make_tensor<float>({4, 1, 1, 1});
    auto x = make_uniform<float>({1, 4, 6, 6}, rng);
    auto w = cga(x, p);
    for (const float v : w->data) EXPECT_FLOAT_EQ(v, 0.5f);
}

TEST(Cga, OutputShapeMatchesInputAndStaysInOpenUnitInterval) {
    std::mt19937 rng{251};
    auto p = random_cga(32, rng);
    auto x = make_uniform<float>({2, 32, 16, 16}, rng);
    auto w = cga(x, p);
    ASSERT_EQ(w->shape, (Shape{2, 32, 16, 16}));
    for (const float v : w->data) {
        EXPECT_GT(v, 0.0f);
        EXPECT_LT(v, 1.0f);
    }
}

TEST(Cga, AssignsChannelSpecificMaps) {
    std::mt19937 rng{257};
    auto p = random_cga(8, rng);
    auto x = make_uniform<float>({1, 8, 8, 8}, rng);
    auto w = cga(x, p);
    float inter_channel = 0.0f;
    for (int c = 1; c < 8; ++c)
        for (int i = 0; i < 64; ++i) {
            inter_channel = std::max(inter_channel,
                                     std::abs(w->data[std::size_t(c) * 64 + i] - w->data[i]));
        }
    EXPECT_GT(inter_channel, 0.0f);
}

TEST(Cga, ReducedWidthIsSixteenOrChannelCount) {
    EXPECT_EQ(cga_reduced_width(64), 16);
    EXPECT_EQ(cga_reduced_width(16), 16);
    EXPECT_EQ(cga_reduced_width(8), 8);
    auto p = make_cga_params<float>(64);
    EXPECT_EQ(p.ca_reduce_k->shape.n, 16);
    auto q = make_cga_params<float>(8);
    EXPECT_EQ(q.ca_reduce_k->shape.n, 8);
}

// Perturbing feature channel j with the coarse map held fixed may only move
// refine-stage outputs in channel j: group j is the only consumer.
TEST(Cga, RefineStageIsChannelLocal) {
    std::mt19937 rng{263};
    auto p = random_cga(6, rng);
    auto x = make_uniform<float>({1, 6, 7, 7}, rng);
    auto w_coa = make_uniform<float>({1, 6, 7, 7}, rng);
    auto base = cga_refine(x, w_coa, p);

    for (int j = 0; j < 6; ++j) {
        auto xp = make_tensor<float>(x->shape);
        xp->data = x->data;
        for (int i = 0; i < 49; ++i) xp->data[std::size_t(j) * 49 + i] += 0.5f;
        auto wp = cga_refine(xp, w_coa, p);
        for (int c = 0; c < 6; ++c) {
            float diff = 0.0f;
            for (int i = 0; i < 49; ++i) {
                diff = std::max(diff, std::abs(wp->data[std::size_t(c) * 49 + i] -
                                               base->data[std::size_t(c) * 49 + i]));
            }
            if (c == j) {
                EXPECT_GT(diff, 0.0f) << "channel " << j << " should respond";
            } else {
                EXPECT_EQ(diff, 0.0f) << "channel " << c << " must not respond to " << j;
            }
        }
    }
}

TEST(ApplySim, GatesFeatures) {
    std::mt19937 rng{269};
    auto x = make_uniform<float>({1, 3, 4, 4}, rng);
    auto ones = make_tensor<float>(x->shape, 1.0f);
    auto zeros = make_tensor<float>(x->shape, 0.0f);
    EXPECT_EQ(max_abs_diff(*apply_sim(x, ones), *x), 0.0f);
    auto gated = apply_sim(x, zeros);
    for (const float v : gated->data) EXPECT_FLOAT_EQ(v, 0.0f);

    auto w = make_uniform<float>({1, 3, 4, 4}, rng);
    auto y = apply_sim(x, w);
    for (std::size_t i = 0; i < y->numel(); ++i) {
        EXPECT_FLOAT_EQ(y->data[i], x->data[i] * w->data[i]);
    }
    EXPECT_THROW(apply_sim(x, make_tensor<float>({1, 3, 4, 5})), DimensionError);
}

TEST(Cga, GradcheckCasePasses) {
    for (const auto& r : run_gradcheck<float>()) {
        if (r.op == "cga") EXPECT_TRUE(r.pass) << "rel err " << r.max_rel_err;
    }
}

}  // namespace
}  // namespace deanet
