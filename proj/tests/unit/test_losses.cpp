#include <gtest/gtest.h>

#include <random>

#include "occmesh/gradcheck.hpp"
#include "occmesh/losses.hpp"
#include "occmesh/ops.hpp"
#include "support/oracles.hpp"

using namespace occmesh;
using losses::SpeedNormalization;

namespace {

// K joints moving along x by step[k] per frame from the origin.
std::vector<double> linear_track(Index T, Index K, const std::vector<double>& step) {
    std::vector<double> v(static_cast<std::size_t>(T * K * 3), 0.0);
    for (Index t = 0; t < T; ++t)
        for (Index k = 0; k < K; ++k) v[static_cast<std::size_t>((t * K + k) * 3)] = step[static_cast<std::size_t>(k)] * static_cast<double>(t);
    return v;
}

}  // namespace

TEST(L1, EqualAndUniformOffset) {
    std::mt19937_64 gen(1);
    Tensor a = oracle::random_tensor({4, 3, 3}, gen);
    EXPECT_EQ(losses::l1_joints3d(a, a).item(), 0.0);
    EXPECT_DOUBLE_EQ(losses::l1_joints3d(ops::add_scalar(a, 1.0), a).item(), 1.0);
    Tensor b = oracle::random_tensor({4, 3, 2}, gen);
    EXPECT_EQ(losses::l1_joints2d(b, b).item(), 0.0);
    EXPECT_DOUBLE_EQ(losses::l1_joints2d(ops::add_scalar(b, 1.0), b).item(), 1.0);
    Tensor v = oracle::random_tensor({4, 7, 3}, gen);
    EXPECT_EQ(losses::l1_vertices(v, v).item(), 0.0);
    EXPECT_DOUBLE_EQ(losses::l1_vertices(ops::add_scalar(v, 1.0), v).item(), 1.0);
}

TEST(L1, MatchesOracleAndIsSymmetric) {
    std::mt19937_64 gen(2);
    const auto p = oracle::random_values(5 * 4 * 3, gen), g = oracle::random_values(5 * 4 * 3, gen);
    Tensor tp({5, 4, 3}, p), tg({5, 4, 3}, g);
    EXPECT_NEAR(losses::l1_joints3d(tp, tg).item(), oracle::mean_abs_diff(p, g), 1e-12);
    EXPECT_EQ(losses::l1_joints3d(tp, tg).item(), losses::l1_joints3d(tg, tp).item());
    EXPECT_THROW(losses::l1_joints3d(tp, Tensor::zeros({5, 4, 2})), ShapeError);
}

TEST(L1, SubgradientAtZeroDifferenceIsZero) {
    Tensor p({1, 1, 3}, {1.0, 2.0, 3.0});
    p.set_requires_grad(true);
    backward(losses::l1_joints3d(p, Tensor({1, 1, 3}, {1.0, 0.0, 3.0})));
    EXPECT_EQ(p.grad(), (std::vector<double>{0.0, 1.0 / 3.0, 0.0}));
}

TEST(MeanSpeed, StaticPointsGiveZero) {
    EXPECT_EQ(losses::mean_speed(Tensor::full({5, 3, 3}, 2.0)).item(), 0.0);
}

TEST(MeanSpeed, HandFixtures) {
    // K=1, T=8, one unit per frame: 7 gaps over K*T = 8.
    Tensor a({8, 1, 3}, linear_track(8, 1, {1.0}));
    EXPECT_EQ(losses::mean_speed(a).item(), 0.875);
    // One static joint, one moving 2.0 per frame, T=4: 3 * 2.0 / (2 * 4).
    Tensor b({4, 2, 3}, linear_track(4, 2, {0.0, 2.0}));
    EXPECT_EQ(losses::mean_speed(b).item(), 0.75);
    EXPECT_EQ(losses::mean_speed(a, SpeedNormalization::JointsTimesGaps).item(), 1.0);
}

TEST(MeanSpeed, MatchesOracleAndRejectsSingleFrame) {
    std::mt19937_64 gen(3);
    const auto v = oracle::random_values(6 * 5 * 3, gen);
    EXPECT_NEAR(losses::mean_speed(Tensor({6, 5, 3}, v)).item(), oracle::mean_speed(v, 6, 5), 1e-12);
    EXPECT_NEAR(losses::mean_speed(Tensor({6, 5, 3}, v), SpeedNormalization::JointsTimesGaps).item(),
                oracle::mean_speed(v, 6, 5, true), 1e-12);
    EXPECT_THROW(losses::mean_speed(Tensor::zeros({1, 5, 3})), std::invalid_argument);
}

TEST(VelocityLoss, EqualSequencesGiveZero) {
    std::mt19937_64 gen(4);
    Tensor p = oracle::random_tensor({16, 3, 3}, gen);
    EXPECT_EQ(losses::sequence_velocity_loss(p, p, 8).item(), 0.0);
}

TEST(VelocityLoss, HandComposition) {
    Tensor pred({8, 1, 3}, linear_track(8, 1, {1.0}));
    Tensor gt = Tensor::zeros({8, 1, 3});
    EXPECT_EQ(losses::sequence_velocity_loss(pred, gt, 8).item(), 0.875);
}

TEST(VelocityLoss, MeanOverSequences) {
    // Sequence 0: |dV| = 0.2, sequence 1: |dV| = 0.4, T=2 and K=1 so V = |step| / 2.
    std::vector<double> p(12, 0.0), g(12, 0.0);
    p[3] = 0.4;   // seq 0 frame 1, V = 0.2
    p[9] = 1.0;   // seq 1 frame 1, V = 0.5
    g[9] = 0.2;   // seq 1 gt, V = 0.1
    const double lv = losses::sequence_velocity_loss(Tensor({4, 1, 3}, p), Tensor({4, 1, 3}, g), 2).item();
    EXPECT_NEAR(lv, 0.3, 1e-15);
}

TEST(VelocityLoss, SpeedOnlyConstraint) {
    // Same speed, different positions and directions.
    Tensor pred({4, 1, 3}, {0, 0, 0, 1, 0, 0, 2, 0, 0, 3, 0, 0});
    Tensor gt({4, 1, 3}, {5, 5, 5, 5, 6, 5, 5, 7, 5, 5, 8, 5});
    EXPECT_EQ(losses::sequence_velocity_loss(pred, gt, 4).item(), 0.0);
}

TEST(VelocityLoss, SegmentIsolation) {
    std::mt19937_64 gen(5);
    const auto a = oracle::random_values(4 * 3 * 3, gen), b = oracle::random_values(4 * 3 * 3, gen, 10.0, 20.0);
    const auto ga = oracle::random_values(4 * 3 * 3, gen), gb = oracle::random_values(4 * 3 * 3, gen);
    std::vector<double> p(a), g(ga);
    p.insert(p.end(), b.begin(), b.end());
    g.insert(g.end(), gb.begin(), gb.end());
    const double joint = losses::sequence_velocity_loss(Tensor({8, 3, 3}, p), Tensor({8, 3, 3}, g), 4).item();
    const double la = losses::sequence_velocity_loss(Tensor({4, 3, 3}, a), Tensor({4, 3, 3}, ga), 4).item();
    const double lb = losses::sequence_velocity_loss(Tensor({4, 3, 3}, b), Tensor({4, 3, 3}, gb), 4).item();
    EXPECT_NEAR(joint, 0.5 * (la + lb), 1e-14);
    EXPECT_NEAR(joint, oracle::velocity_loss(p, g, 2, 4, 3), 1e-12);
    EXPECT_THROW(losses::sequence_velocity_loss(Tensor({8, 3, 3}, p), Tensor({8, 3, 3}, g), 3), ShapeError);
}

TEST(Combine, WeightedSumAndValidation) {
    auto t = losses::combine(Tensor::scalar(2.0), Tensor::scalar(3.0), Tensor::scalar(0.5), Tensor::scalar(7.0),
                             {1.0, 1.0, 1.0, 0.0});
    EXPECT_EQ(t.values().total, 5.5);
    auto w = losses::combine(Tensor::scalar(2.0), Tensor::scalar(3.0), Tensor::scalar(100.0), Tensor::scalar(7.0),
                             {1.0, 1.0, 0.0, 0.0});
    EXPECT_EQ(w.values().total, 5.0);
    EXPECT_THROW(losses::combine(Tensor::scalar(1), Tensor::scalar(1), Tensor::scalar(1), Tensor::scalar(1),
                                 {1.0, -1.0, 1.0, 0.0}),
                 std::invalid_argument);
}

TEST(TotalLoss, BreakdownIdentityAndOracle) {
    std::mt19937_64 gen(6);
    const Index N = 2, T = 4, K = 3, V = 5;
    const auto j3p = oracle::random_values(static_cast<std::size_t>(N * T * K * 3), gen);
    const auto j3g = oracle::random_values(j3p.size(), gen);
    const auto j2p = oracle::random_values(static_cast<std::size_t>(N * T * K * 2), gen);
    const auto j2g = oracle::random_values(j2p.size(), gen);
    const auto vp = oracle::random_values(static_cast<std::size_t>(N * T * V * 3), gen);
    const auto vg = oracle::random_values(vp.size(), gen);
    const losses::LossWeights w{0.7, 1.3, 2.0, 0.4};
    auto terms = losses::total_loss({Tensor({N * T, K, 3}, j3p), Tensor({N * T, V, 3}, vp), Tensor({N * T, K, 2}, j2p)},
                                    {Tensor({N * T, K, 3}, j3g), Tensor({N * T, V, 3}, vg), Tensor({N * T, K, 2}, j2g)},
                                    T, w);
    const auto b = terms.values();
    EXPECT_EQ(b.total, ((w.joints3d * b.l3d + w.joints2d * b.l2d) + w.velocity * b.lv) + w.vertices * b.lvert);
    EXPECT_NEAR(b.total, oracle::total_loss(j3p, j3g, j2p, j2g, vp, vg, N, T, K, {0.7, 1.3, 2.0, 0.4}), 1e-12);
}

TEST(TotalLoss, VelocityWeightZeroIgnoresVelocity) {
    std::mt19937_64 gen(7);
    losses::Predictions p{oracle::random_tensor({8, 2, 3}, gen), oracle::random_tensor({8, 3, 3}, gen),
                          oracle::random_tensor({8, 2, 2}, gen)};
    losses::Targets g{oracle::random_tensor({8, 2, 3}, gen), oracle::random_tensor({8, 3, 3}, gen),
                      oracle::random_tensor({8, 2, 2}, gen)};
    const auto b = losses::total_loss(p, g, 4, {1.0, 1.0, 0.0, 1.0}).values();
    EXPECT_GT(b.lv, 0.0);
    EXPECT_EQ(b.total, (b.l3d + b.l2d) + b.lvert);
}

TEST(TotalLoss, GradCheckAgainstPredictions) {
    std::mt19937_64 gen(9);
    const Index N = 2, T = 4, K = 3, V = 5;
    Tensor j3 = oracle::random_tensor({N * T, K, 3}, gen);
    Tensor v3 = oracle::random_tensor({N * T, V, 3}, gen);
    Tensor j2 = oracle::random_tensor({N * T, K, 2}, gen);
    for (Tensor* t : {&j3, &v3, &j2}) t->set_requires_grad(true);
    losses::Targets gt{oracle::random_tensor({N * T, K, 3}, gen), oracle::random_tensor({N * T, V, 3}, gen),
                       oracle::random_tensor({N * T, K, 2}, gen)};
    for (auto src : {losses::VelocitySource::Joints, losses::VelocitySource::Vertices}) {
        for (auto norm : {SpeedNormalization::JointsTimesFrames, SpeedNormalization::JointsTimesGaps}) {
            auto f = [&] { return losses::total_loss({j3, v3, j2}, gt, T, {1.0, 0.5, 2.0, 0.75}, {norm, src}).total; };
            const auto r = grad_check(f, {{"j3", j3}, {"v3", v3}, {"j2", j2}});
            EXPECT_TRUE(r.pass) << r.max_rel_error;
        }
    }
}
