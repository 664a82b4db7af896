#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <random>

#include "occmesh/gradcheck.hpp"
#include "occmesh/ops.hpp"
#include "occmesh/sd_block.hpp"
#include "support/oracles.hpp"

using namespace occmesh;

namespace {

sd::GateParams random_gate(Index cg, std::mt19937_64& gen) {
    sd::GateParams p;
    p.w1x1 = oracle::random_tensor({cg, cg, 1, 1}, gen);
    p.w3x3 = oracle::random_tensor({cg, cg, 3, 3}, gen, -0.4, 0.4);
    p.gn_gamma = oracle::random_tensor({cg}, gen, 0.5, 1.5);
    p.gn_beta = oracle::random_tensor({cg}, gen, -0.5, 0.5);
    p.set_requires_grad(true);
    return p;
}

// Applies a channel permutation (new channel j reads old channel perm[j]) to
// every per-channel axis of a gate's parameters.
sd::GateParams permute_gate(const sd::GateParams& p, const std::vector<Index>& perm) {
    const Index c = p.channels();
    auto conv = [&](const Tensor& w, Index k) {
        std::vector<double> out(w.values().size());
        for (Index o = 0; o < c; ++o)
            for (Index i = 0; i < c; ++i)
                for (Index t = 0; t < k * k; ++t)
                    out[static_cast<std::size_t>((o * c + i) * k * k + t)] =
                        w.values()[static_cast<std::size_t>((perm[static_cast<std::size_t>(o)] * c +
                                                             perm[static_cast<std::size_t>(i)]) * k * k + t)];
        return Tensor(w.shape(), out);
    };
    auto vec = [&](const Tensor& v) {
        std::vector<double> out(static_cast<std::size_t>(c));
        for (Index j = 0; j < c; ++j) out[static_cast<std::size_t>(j)] = v.values()[static_cast<std::size_t>(perm[static_cast<std::size_t>(j)])];
        return Tensor(v.shape(), out);
    };
    return {conv(p.w1x1, 1), conv(p.w3x3, 3), vec(p.gn_gamma), vec(p.gn_beta)};
}

std::vector<double> vals(const Tensor& t) { return t.values(); }

}  // namespace

TEST(SdConfig, Validation) {
    EXPECT_NO_THROW((sd::SdConfig{32, 4, 0, true}.validate()));
    EXPECT_THROW((sd::SdConfig{30, 4, 0, true}.validate()), std::invalid_argument);
    EXPECT_THROW((sd::SdConfig{32, 4, 3, true}.validate()), std::invalid_argument);
    EXPECT_NO_THROW((sd::SdConfig{32, 4, 2, true}.validate()));
}

TEST(SplitGroups, ChannelAssignment) {
    std::mt19937_64 gen(1);
    Tensor x = oracle::random_tensor({4, 3, 3}, gen);
    Tensor g = sd::split_groups(x, 2);
    ASSERT_EQ(g.shape(), (Shape{2, 2, 3, 3}));
    for (Index grp = 0; grp < 2; ++grp)
        for (Index j = 0; j < 2; ++j)
            for (Index h = 0; h < 3; ++h)
                for (Index w = 0; w < 3; ++w) EXPECT_EQ(g.at({grp, j, h, w}), x.at({grp * 2 + j, h, w}));
}

TEST(SplitGroups, SingleGroupAndRoundTrip) {
    std::mt19937_64 gen(2);
    Tensor x = oracle::random_tensor({8, 5, 4}, gen);
    EXPECT_EQ(sd::split_groups(x, 1).values(), x.values());
    EXPECT_EQ(sd::merge_groups(sd::split_groups(x, 4), 4).values(), x.values());
    Tensor xb = oracle::random_tensor({3, 8, 5, 4}, gen);
    Tensor back = sd::merge_groups(sd::split_groups(xb, 4), 4, 3);
    EXPECT_EQ(back.shape(), xb.shape());
    EXPECT_EQ(back.values(), xb.values());
    EXPECT_THROW(sd::split_groups(x, 3), ShapeError);
}

TEST(PoolDescriptors, ConstantAndHandCases) {
    Tensor c = Tensor::full({2, 3, 4}, 2.0);
    for (double v : vals(sd::pool_height_descriptor(c))) EXPECT_EQ(v, 2.0);
    for (double v : vals(sd::pool_width_descriptor(c))) EXPECT_EQ(v, 2.0);
    Tensor x({1, 2, 2}, {1, 2, 3, 4});
    EXPECT_EQ(sd::pool_height_descriptor(x).values(), (std::vector<double>{1.5, 3.5}));
    EXPECT_EQ(sd::pool_width_descriptor(x).values(), (std::vector<double>{2.0, 3.0}));
}

TEST(PoolDescriptors, MatchNestedLoopOracle) {
    std::mt19937_64 gen(3);
    const auto v = oracle::random_values(4 * 8 * 8, gen);
    Tensor x({4, 8, 8}, v);
    EXPECT_LE(oracle::max_abs_diff(sd::pool_height_descriptor(x).data(), oracle::pool_height(v, 4, 8, 8)), 1e-12);
    EXPECT_LE(oracle::max_abs_diff(sd::pool_width_descriptor(x).data(), oracle::pool_width(v, 4, 8, 8)), 1e-12);
    const auto r = oracle::random_values(3 * 5 * 7, gen);
    Tensor y({3, 5, 7}, r);
    EXPECT_LE(oracle::max_abs_diff(sd::pool_height_descriptor(y).data(), oracle::pool_height(r, 3, 5, 7)), 1e-12);
    EXPECT_LE(oracle::max_abs_diff(sd::pool_width_descriptor(y).data(), oracle::pool_width(r, 3, 5, 7)), 1e-12);
}

TEST(DirectionalInteraction, ZeroWeightsGiveHalfGates) {
    std::mt19937_64 gen(4);
    Tensor xg = oracle::random_tensor({2, 3, 4, 5}, gen);
    sd::GateParams p = sd::GateParams::init(3, 1, "t");
    p.w1x1 = Tensor::zeros({3, 3, 1, 1});
    auto d = sd::directional_interaction(xg, sd::pool_height_descriptor(xg), sd::pool_width_descriptor(xg), p, 3);
    EXPECT_EQ(d.gate_h.shape(), (Shape{2, 3, 4}));
    EXPECT_EQ(d.gate_w.shape(), (Shape{2, 3, 5}));
    EXPECT_EQ(d.branch1.shape(), xg.shape());
    for (double v : d.gate_h.values()) EXPECT_EQ(v, 0.5);
    for (double v : d.gate_w.values()) EXPECT_EQ(v, 0.5);
}

TEST(DirectionalInteraction, GradCheckOnOneByOneWeights) {
    std::mt19937_64 gen(5);
    Tensor xg = oracle::random_tensor({2, 4, 4, 4}, gen);
    sd::GateParams p = random_gate(4, gen);
    auto f = [&] {
        auto d = sd::directional_interaction(xg, sd::pool_height_descriptor(xg), sd::pool_width_descriptor(xg), p, 2);
        std::mt19937_64 wg(9);
        return ops::sum(ops::mul(d.branch1, oracle::random_tensor(d.branch1.shape(), wg)));
    };
    const auto r = grad_check(f, {{"w1x1", p.w1x1}});
    EXPECT_TRUE(r.pass) << r.max_rel_error;
}

TEST(LocalInteraction, ZeroIdentityAndOracle) {
    std::mt19937_64 gen(6);
    Tensor xg = oracle::random_tensor({1, 3, 5, 5}, gen);
    sd::GateParams p = sd::GateParams::zeros(3);
    for (double v : vals(sd::local_interaction(xg, p))) EXPECT_EQ(v, 0.0);
    std::vector<double> id(81, 0.0);
    for (Index c = 0; c < 3; ++c) id[static_cast<std::size_t>((c * 3 + c) * 9 + 4)] = 1.0;
    p.w3x3 = Tensor({3, 3, 3, 3}, id);
    EXPECT_EQ(sd::local_interaction(xg, p).values(), xg.values());
    const auto wv = oracle::random_values(81, gen);
    p.w3x3 = Tensor({3, 3, 3, 3}, wv);
    const auto ref = oracle::conv2d(xg.values(), 3, 5, 5, wv, 3, 3);
    EXPECT_LE(oracle::max_abs_diff(sd::local_interaction(xg, p).data(), ref), 1e-12);
}

TEST(SpatialAlignment, ZeroAndConstantBranches) {
    Tensor z = Tensor::zeros({1, 3, 4, 4});
    for (double v : vals(sd::spatial_alignment(z, z))) EXPECT_EQ(v, 0.0);
    std::vector<double> b1(48), b2(48);
    for (Index c = 0; c < 3; ++c)
        for (Index i = 0; i < 16; ++i) {
            b1[static_cast<std::size_t>(c * 16 + i)] = 0.3 * static_cast<double>(c) - 0.2;
            b2[static_cast<std::size_t>(c * 16 + i)] = 1.0 - 0.5 * static_cast<double>(c);
        }
    const auto a = sd::spatial_alignment(Tensor({1, 3, 4, 4}, b1), Tensor({1, 3, 4, 4}, b2)).values();
    for (double v : a) EXPECT_EQ(v, a[0]);
}

TEST(SpatialAlignment, MatchesTwoLoopOracle) {
    std::mt19937_64 gen(7);
    const Index M = 3, Cg = 4, H = 3, W = 5;
    const auto b1 = oracle::random_values(static_cast<std::size_t>(M * Cg * H * W), gen, -2.0, 2.0);
    const auto b2 = oracle::random_values(b1.size(), gen, -2.0, 2.0);
    const auto attn = sd::spatial_alignment(Tensor({M, Cg, H, W}, b1), Tensor({M, Cg, H, W}, b2));
    ASSERT_EQ(attn.shape(), (Shape{M, 1, H, W}));
    const auto len = static_cast<std::ptrdiff_t>(Cg * H * W);
    for (Index m = 0; m < M; ++m) {
        const oracle::Vec s1(b1.begin() + m * len, b1.begin() + (m + 1) * len);
        const oracle::Vec s2(b2.begin() + m * len, b2.begin() + (m + 1) * len);
        const auto ref = oracle::spatial_alignment(s1, s2, Cg, H * W);
        const std::span<const double> got(attn.data().data() + m * H * W, static_cast<std::size_t>(H * W));
        EXPECT_LE(oracle::max_abs_diff(got, ref), 1e-12);
    }
}

TEST(SdForward, ZeroParametersHalveInput) {
    std::mt19937_64 gen(8);
    for (bool shared : {true, false}) {
        sd::SdConfig cfg{8, 2, 0, shared};
        Tensor x = oracle::random_tensor({8, 6, 6}, gen, -3.0, 3.0);
        Tensor y = sd::sd_forward(x, sd::SdParams::zeros(cfg), cfg);
        ASSERT_EQ(y.shape(), x.shape());
        for (std::size_t i = 0; i < y.values().size(); ++i) EXPECT_EQ(y.values()[i], 0.5 * x.values()[i]);
    }
}

TEST(SdForward, ShapePreservedAndGatesBounded) {
    std::mt19937_64 gen(9);
    for (auto [C, H, W, G] : std::vector<std::array<Index, 4>>{{4, 3, 5, 1}, {8, 4, 4, 2}, {12, 2, 7, 3}, {16, 5, 5, 4}}) {
        sd::SdConfig cfg{C, G, 0, true};
        auto p = sd::SdParams::init(cfg, 3);
        Tensor x = oracle::random_tensor({2, C, H, W}, gen, -2.0, 2.0);
        Tensor y = sd::sd_forward(x, p, cfg);
        ASSERT_EQ(y.shape(), x.shape());
        for (std::size_t i = 0; i < y.values().size(); ++i) EXPECT_LE(std::abs(y.values()[i]), std::abs(x.values()[i]));
    }
}

TEST(SdForward, BatchedEqualsPerSample) {
    std::mt19937_64 gen(10);
    sd::SdConfig cfg{8, 2, 0, true};
    auto p = sd::SdParams::init(cfg, 4);
    Tensor x = oracle::random_tensor({3, 8, 4, 4}, gen);
    Tensor y = sd::sd_forward(x, p, cfg);
    for (Index n = 0; n < 3; ++n) {
        Tensor yn = sd::sd_forward(ops::reshape(ops::slice(x, 0, n, 1), {8, 4, 4}), p, cfg);
        EXPECT_LE(oracle::max_abs_diff(ops::slice(y, 0, n, 1).data(), yn.data()), 1e-13);
    }
}

TEST(SdForward, ChannelPermutationEquivarianceWithinGroup) {
    std::mt19937_64 gen(11);
    sd::SdConfig cfg{8, 2, 0, false};
    sd::SdParams p;
    p.sets = {random_gate(4, gen), random_gate(4, gen)};
    Tensor x = oracle::random_tensor({8, 5, 5}, gen);
    const std::vector<Index> perm{2, 0, 3, 1};  // inside group 1
    std::vector<double> xp(x.values());
    for (Index j = 0; j < 4; ++j)
        for (Index i = 0; i < 25; ++i)
            xp[static_cast<std::size_t>((4 + j) * 25 + i)] = x.values()[static_cast<std::size_t>((4 + perm[static_cast<std::size_t>(j)]) * 25 + i)];
    sd::SdParams pp = p;
    pp.sets[1] = permute_gate(p.sets[1], perm);
    Tensor y = sd::sd_forward(x, p, cfg);
    Tensor yp = sd::sd_forward(Tensor({8, 5, 5}, xp), pp, cfg);
    for (Index c = 0; c < 8; ++c) {
        const Index src = c < 4 ? c : 4 + perm[static_cast<std::size_t>(c - 4)];
        for (Index i = 0; i < 25; ++i)
            EXPECT_NEAR(yp.values()[static_cast<std::size_t>(c * 25 + i)], y.values()[static_cast<std::size_t>(src * 25 + i)], 1e-13);
    }
}

TEST(SdForward, RejectsMismatchedInput) {
    sd::SdConfig cfg{8, 2, 0, true};
    auto p = sd::SdParams::init(cfg, 1);
    EXPECT_THROW(sd::sd_forward(Tensor::zeros({6, 4, 4}), p, cfg), ShapeError);
    sd::SdConfig unshared{8, 2, 0, false};
    EXPECT_THROW(sd::sd_forward(Tensor::zeros({8, 4, 4}), p, unshared), std::invalid_argument);
}

TEST(SdForward, GradCheckSingleSampleSum) {
    std::mt19937_64 gen(12);
    sd::SdConfig cfg{8, 2, 0, true};
    sd::SdParams p;
    p.sets = {random_gate(4, gen)};
    Tensor x = oracle::random_tensor({1, 8, 4, 4}, gen);
    x.set_requires_grad(true);
    auto named = p.named();
    named.push_back({"x", x});
    const auto r = grad_check([&] { return ops::sum(sd::sd_forward(x, p, cfg)); }, named);
    EXPECT_TRUE(r.pass) << r.max_rel_error;
}

TEST(SdForward, GradCheckFullBlock) {
    std::mt19937_64 gen(13);
    for (bool shared : {true, false}) {
        sd::SdConfig cfg{8, 2, 2, shared};
        sd::SdParams p;
        p.sets = shared ? std::vector<sd::GateParams>{random_gate(4, gen)}
                        : std::vector<sd::GateParams>{random_gate(4, gen), random_gate(4, gen)};
        Tensor x = oracle::random_tensor({8, 6, 6}, gen);
        x.set_requires_grad(true);
        auto named = p.named();
        named.push_back({"x", x});
        auto f = [&] {
            std::mt19937_64 wg(3);
            return ops::sum(ops::mul(sd::sd_forward(x, p, cfg), oracle::random_tensor({8, 6, 6}, wg)));
        };
        const auto r = grad_check(f, named);
        EXPECT_TRUE(r.pass) << "shared=" << shared << " " << r.max_rel_error;
    }
}

TEST(SdParams, NamesAndInitialization) {
    sd::SdConfig cfg{32, 4, 0, true};
    auto p = sd::SdParams::init(cfg, 5);
    const auto named = p.named();
    ASSERT_EQ(named.size(), 4u);
    EXPECT_EQ(named[0].name, "sd.w1x1");
    EXPECT_EQ(named[0].tensor.shape(), (Shape{8, 8, 1, 1}));
    const double a = 1.0 / std::sqrt(8.0);
    for (double v : named[0].tensor.values()) EXPECT_LE(std::abs(v), a);
    for (double v : p.sets[0].gn_gamma.values()) EXPECT_EQ(v, 1.0);
    for (double v : p.sets[0].gn_beta.values()) EXPECT_EQ(v, 0.0);
    sd::SdConfig unshared{32, 4, 0, false};
    EXPECT_EQ(sd::SdParams::init(unshared, 5).named().size(), 16u);
    EXPECT_EQ(sd::SdParams::init(cfg, 5).sets[0].w1x1.values(), p.sets[0].w1x1.values());
}
