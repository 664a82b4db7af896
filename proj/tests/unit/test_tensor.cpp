#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "occmesh/gradcheck.hpp"
#include "occmesh/ops.hpp"
#include "occmesh/tensor.hpp"
#include "support/oracles.hpp"

using namespace occmesh;

namespace {

Tensor leaf(const Shape& shape, std::mt19937_64& gen) {
    Tensor t = oracle::random_tensor(shape, gen);
    t.set_requires_grad(true);
    return t;
}

Tensor weighted_sum(const Tensor& y, std::uint64_t seed) {
    std::mt19937_64 gen(seed);
    return ops::sum(ops::mul(y, oracle::random_tensor(y.shape(), gen)));
}

void expect_grad_ok(const std::function<Tensor()>& f, const std::vector<NamedTensor>& params) {
    const auto report = grad_check(f, params);
    EXPECT_TRUE(report.pass) << "max rel err " << report.max_rel_error << " " << report.failure;
}

}  // namespace

TEST(Tensor, ShapeAndDataAgree) {
    Tensor t({2, 3, 4}, std::vector<double>(24, 1.5));
    EXPECT_EQ(t.numel(), 24);
    EXPECT_EQ(numel(t.shape()), static_cast<Index>(t.data().size()));
    EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5, 0.0)), ShapeError);
}

TEST(Tensor, AtIndexesRowMajor) {
    std::vector<double> v(24);
    std::iota(v.begin(), v.end(), 0.0);
    Tensor t({2, 3, 4}, v);
    EXPECT_EQ(t.at({1, 2, 3}), 23.0);
    EXPECT_EQ(t.at({0, 1, 2}), 6.0);
}

TEST(Conv2d, IdentityOneByOneKernel) {
    std::mt19937_64 gen(1);
    Tensor x = oracle::random_tensor({3, 5, 5}, gen);
    std::vector<double> w(9, 0.0);
    for (int c = 0; c < 3; ++c) w[static_cast<std::size_t>(c * 3 + c)] = 1.0;
    Tensor y = ops::conv2d(x, Tensor({3, 3, 1, 1}, w));
    EXPECT_EQ(y.values(), x.values());
}

TEST(Conv2d, AllOnesKernelOnConstantInput) {
    Tensor x = Tensor::full({1, 5, 5}, 2.5);
    Tensor y = ops::conv2d(x, Tensor::full({1, 1, 3, 3}, 1.0));
    EXPECT_DOUBLE_EQ(y.at({0, 2, 2}), 9 * 2.5);
    EXPECT_DOUBLE_EQ(y.at({0, 0, 0}), 4 * 2.5);
}

TEST(Conv2d, MatchesNestedLoopOracle) {
    std::mt19937_64 gen(2);
    for (Index k : {1, 3}) {
        for (int stride : {1, 2}) {
            const auto xv = oracle::random_values(2 * 4 * 4, gen);
            const auto wv = oracle::random_values(static_cast<std::size_t>(3 * 2 * k * k), gen);
            Tensor y = ops::conv2d(Tensor({2, 4, 4}, xv), Tensor({3, 2, k, k}, wv), stride);
            const auto ref = oracle::conv2d(xv, 2, 4, 4, wv, 3, k, stride);
            EXPECT_LE(oracle::max_abs_diff(y.data(), ref), 1e-12) << "k=" << k << " stride=" << stride;
        }
    }
}

TEST(Conv2d, BatchedMatchesPerSample) {
    std::mt19937_64 gen(3);
    Tensor x = oracle::random_tensor({2, 2, 4, 4}, gen);
    Tensor w = oracle::random_tensor({3, 2, 3, 3}, gen);
    Tensor y = ops::conv2d(x, w);
    for (Index n = 0; n < 2; ++n) {
        Tensor yn = ops::conv2d(ops::reshape(ops::slice(x, 0, n, 1), {2, 4, 4}), w);
        EXPECT_LE(oracle::max_abs_diff(ops::reshape(ops::slice(y, 0, n, 1), {3, 4, 4}).data(), yn.data()), 1e-12);
    }
}

TEST(Conv2d, RejectsBadShapes) {
    EXPECT_THROW(ops::conv2d(Tensor::zeros({2, 4, 4}), Tensor::zeros({3, 3, 3, 3})), ShapeError);
    EXPECT_THROW(ops::conv2d(Tensor::zeros({2, 4, 4}), Tensor::zeros({3, 2, 5, 5})), ShapeError);
    try {
        ops::conv2d(Tensor::zeros({2, 4, 4}), Tensor::zeros({3, 3, 3, 3}));
    } catch (const ShapeError& e) {
        EXPECT_NE(std::string(e.what()).find("conv2d"), std::string::npos);
    }
}

TEST(Pooling, ConstantInputKeepsValue) {
    Tensor x = Tensor::full({3, 4, 5}, 2.0);
    for (int axis = 0; axis < 3; ++axis) {
        const Tensor y = ops::avg_pool_axis(x, axis);
        for (double v : y.data()) EXPECT_EQ(v, 2.0);
    }
}

TEST(Pooling, TwoByTwoColumnsAndRows) {
    Tensor x({2, 2}, {1, 2, 3, 4});
    EXPECT_EQ(ops::avg_pool_axis(x, 1).values(), (std::vector<double>{1.5, 3.5}));
    EXPECT_EQ(ops::avg_pool_axis(x, 0).values(), (std::vector<double>{2.0, 3.0}));
}

TEST(Pooling, MatchesMeanOracle) {
    std::mt19937_64 gen(4);
    const auto v = oracle::random_values(64, gen);
    Tensor x({1, 8, 8}, v);
    EXPECT_LE(oracle::max_abs_diff(ops::avg_pool_axis(x, 2).data(), oracle::pool_height(v, 1, 8, 8)), 1e-12);
    EXPECT_LE(oracle::max_abs_diff(ops::avg_pool_axis(x, 1).data(), oracle::pool_width(v, 1, 8, 8)), 1e-12);
}

TEST(Pooling, EmptyAxisThrows) { EXPECT_THROW(ops::mean_axis(Tensor::zeros({2, 0, 3}), 1), std::invalid_argument); }

TEST(Pooling, GlobalAverage) {
    EXPECT_EQ(ops::global_avg_pool_2d(Tensor::full({3, 2, 2}, 1.25)).values(), std::vector<double>(3, 1.25));
    EXPECT_EQ(ops::global_avg_pool_2d(Tensor({1, 2, 2}, {0, 1, 2, 3})).item(), 1.5);
    std::mt19937_64 gen(5);
    const auto v = oracle::random_values(2 * 3 * 5, gen);
    Tensor g = ops::global_avg_pool_2d(Tensor({2, 3, 5}, v));
    for (Index c = 0; c < 2; ++c) {
        double s = 0.0;
        for (Index i = 0; i < 15; ++i) s += v[static_cast<std::size_t>(c * 15 + i)];
        EXPECT_NEAR(g.at({c}), s / 15.0, 1e-12);
    }
}

TEST(Elementwise, Basics) {
    EXPECT_EQ(ops::sigmoid(Tensor::scalar(0.0)).item(), 0.5);
    std::mt19937_64 gen(6);
    Tensor x = oracle::random_tensor({3, 4}, gen);
    EXPECT_EQ(ops::mul(x, Tensor::full({3, 4}, 1.0)).values(), x.values());
    const Tensor s = ops::sigmoid(oracle::random_tensor({50}, gen, -30.0, 30.0));
    for (double v : s.data()) {
        EXPECT_GT(v, 0.0);
        EXPECT_LT(v, 1.0);
    }
}

TEST(Elementwise, AbsSubgradient) {
    Tensor x({3}, {2.0, -2.0, 0.0});
    x.set_requires_grad(true);
    backward(ops::sum(ops::abs(x)));
    EXPECT_EQ(x.grad(), (std::vector<double>{1.0, -1.0, 0.0}));
}

TEST(Elementwise, SingletonBroadcastOnly) {
    Tensor a = Tensor::full({2, 3}, 1.0);
    EXPECT_EQ(ops::add(a, Tensor({1, 3}, {1, 2, 3})).values(), (std::vector<double>{2, 3, 4, 2, 3, 4}));
    EXPECT_EQ(ops::mul(a, Tensor({2, 1}, {2, 3})).values(), (std::vector<double>{2, 2, 2, 3, 3, 3}));
    EXPECT_THROW(ops::add(a, Tensor::zeros({3, 2})), ShapeError);
    EXPECT_THROW(ops::add(a, Tensor::zeros({3})), ShapeError);
}

TEST(Softmax, UniformAndNormalized) {
    EXPECT_EQ(ops::softmax(Tensor::zeros({4}), 0).values(), std::vector<double>(4, 0.25));
    std::mt19937_64 gen(7);
    Tensor x = oracle::random_tensor({5, 7}, gen, -5.0, 5.0);
    Tensor y = ops::softmax(x, 1);
    for (Index r = 0; r < 5; ++r) {
        double s = 0.0;
        for (Index c = 0; c < 7; ++c) s += y.at({r, c});
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(Softmax, LargeInputsAndShift) {
    Tensor big({3}, {1000.0, 1001.0, 1002.0});
    Tensor small({3}, {0.0, 1.0, 2.0});
    const auto a = ops::softmax(big, 0).values();
    const auto b = ops::softmax(small, 0).values();
    for (int i = 0; i < 3; ++i) {
        EXPECT_TRUE(std::isfinite(a[static_cast<std::size_t>(i)]));
        EXPECT_NEAR(a[static_cast<std::size_t>(i)], b[static_cast<std::size_t>(i)], 1e-15);
    }
    Tensor logs({3}, {std::log(1.0), std::log(2.0), std::log(3.0)});
    const auto p = ops::softmax(logs, 0).values();
    EXPECT_NEAR(p[0], 1.0 / 6.0, 1e-15);
    EXPECT_NEAR(p[2], 0.5, 1e-15);
}

TEST(Softmax, MatchesDirectFormula) {
    std::mt19937_64 gen(8);
    const auto v = oracle::random_values(9, gen, -3.0, 3.0);
    double z = 0.0;
    for (double x : v) z += std::exp(x);
    const auto y = ops::softmax(Tensor({9}, v), 0).values();
    for (std::size_t i = 0; i < 9; ++i) EXPECT_NEAR(y[i], std::exp(v[i]) / z, 1e-12);
}

TEST(Matmul, IdentityAndTransposed) {
    std::mt19937_64 gen(9);
    Tensor a = oracle::random_tensor({3, 4}, gen);
    std::vector<double> eye(16, 0.0);
    for (int i = 0; i < 4; ++i) eye[static_cast<std::size_t>(i * 5)] = 1.0;
    EXPECT_EQ(ops::matmul(a, Tensor({4, 4}, eye)).values(), a.values());
    Tensor b = oracle::random_tensor({4, 2}, gen);
    Tensor bt = ops::permute(b, {1, 0});
    EXPECT_LE(oracle::max_abs_diff(ops::matmul(a, b).data(), ops::matmul(a, bt, true).data()), 1e-15);
    EXPECT_THROW(ops::matmul(a, Tensor::zeros({3, 3})), ShapeError);
}

TEST(Matmul, BatchedMatchesLoops) {
    std::mt19937_64 gen(10);
    Tensor a = oracle::random_tensor({2, 3, 4}, gen);
    Tensor b = oracle::random_tensor({2, 4, 5}, gen);
    Tensor c = ops::matmul(a, b);
    for (Index n = 0; n < 2; ++n)
        for (Index i = 0; i < 3; ++i)
            for (Index j = 0; j < 5; ++j) {
                double s = 0.0;
                for (Index k = 0; k < 4; ++k) s += a.at({n, i, k}) * b.at({n, k, j});
                EXPECT_NEAR(c.at({n, i, j}), s, 1e-12);
            }
}

TEST(GroupNorm, MomentsPerGroup) {
    std::mt19937_64 gen(11);
    Tensor x = oracle::random_tensor({2, 6, 3, 3}, gen, -4.0, 4.0);
    Tensor y = ops::group_norm(x, 3, Tensor::full({6}, 1.0), Tensor::zeros({6}));
    for (Index n = 0; n < 2; ++n) {
        for (Index g = 0; g < 3; ++g) {
            double mean = 0.0, var = 0.0, xmean = 0.0, xvar = 0.0;
            std::vector<double> ys, xs;
            for (Index c = 2 * g; c < 2 * g + 2; ++c)
                for (Index i = 0; i < 3; ++i)
                    for (Index j = 0; j < 3; ++j) {
                        ys.push_back(y.at({n, c, i, j}));
                        xs.push_back(x.at({n, c, i, j}));
                    }
            for (std::size_t i = 0; i < ys.size(); ++i) {
                mean += ys[i];
                xmean += xs[i];
            }
            mean /= 18.0;
            xmean /= 18.0;
            for (std::size_t i = 0; i < ys.size(); ++i) {
                var += (ys[i] - mean) * (ys[i] - mean);
                xvar += (xs[i] - xmean) * (xs[i] - xmean);
            }
            var /= 18.0;
            xvar /= 18.0;
            EXPECT_NEAR(mean, 0.0, 1e-9);
            EXPECT_NEAR(var, xvar / (xvar + 1e-5), 1e-9);
        }
    }
    EXPECT_THROW(ops::group_norm(x, 4, Tensor::full({6}, 1.0), Tensor::zeros({6})), std::invalid_argument);
}

TEST(ReshapePermute, RoundTripsBitExact) {
    std::mt19937_64 gen(12);
    for (int trial = 0; trial < 20; ++trial) {
        std::uniform_int_distribution<Index> ext(1, 5);
        Shape s{ext(gen), ext(gen), ext(gen), ext(gen)};
        Tensor x = oracle::random_tensor(s, gen);
        std::vector<int> perm{0, 1, 2, 3};
        std::shuffle(perm.begin(), perm.end(), gen);
        std::vector<int> inv(4);
        for (int i = 0; i < 4; ++i) inv[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])] = i;
        EXPECT_EQ(ops::permute(ops::permute(x, perm), inv).values(), x.values());
        EXPECT_EQ(ops::reshape(ops::reshape(x, {numel(s)}), s).values(), x.values());
    }
    EXPECT_THROW(ops::reshape(Tensor::zeros({2, 3}), {4}), ShapeError);
}

TEST(Backward, SquareAtThree) {
    Tensor w = Tensor::scalar(3.0);
    w.set_requires_grad(true);
    backward(ops::mul(w, w));
    EXPECT_EQ(w.grad()[0], 6.0);
}

TEST(Backward, SigmoidSumMatchesFiniteDifferences) {
    std::mt19937_64 gen(13);
    Tensor w = leaf({6}, gen);
    Tensor x = oracle::random_tensor({6}, gen);
    auto f = [&] { return ops::sum(ops::sigmoid(ops::mul(w, x))); };
    backward(f());
    const auto g = w.grad();
    auto wv = w.mutable_data();
    for (std::size_t i = 0; i < 6; ++i) {
        const double keep = wv[i];
        wv[i] = keep + 1e-5;
        const double fp = f().item();
        wv[i] = keep - 1e-5;
        const double fm = f().item();
        wv[i] = keep;
        const double n = (fp - fm) / 2e-5;
        EXPECT_LT(relative_error(g[i], n), 1e-6);
    }
}

TEST(Backward, ConstantLossAndUnusedLeaves) {
    Tensor used = Tensor::full({2}, 1.0);
    used.set_requires_grad(true);
    Tensor unused = Tensor::full({2}, 1.0);
    unused.set_requires_grad(true);
    backward(ops::sum(ops::scale(used, 0.0)));
    EXPECT_EQ(used.grad(), std::vector<double>(2, 0.0));
    EXPECT_EQ(unused.grad(), std::vector<double>(2, 0.0));
}

TEST(Backward, NonScalarLossThrows) {
    Tensor w = Tensor::full({2}, 1.0);
    w.set_requires_grad(true);
    EXPECT_THROW(backward(ops::scale(w, 2.0)), ShapeError);
}

TEST(Backward, VisitsEachReachableNodeOnce) {
    Tensor w = Tensor::full({2}, 1.0);
    w.set_requires_grad(true);
    Tensor a = ops::scale(w, 2.0);
    Tensor b = ops::add(a, a);  // a reached along two paths
    Tensor loss = ops::sum(ops::mul(b, a));
    backward(loss);
    EXPECT_EQ(detail::last_backward_visits(), 5u);  // sum, mul, add, scale, w
    // d/dw sum(4w * 2w) = 16 w
    EXPECT_EQ(w.grad(), std::vector<double>(2, 16.0));
}

TEST(Backward, NoGradGuardRecordsNothing) {
    Tensor w = Tensor::full({2}, 1.0);
    w.set_requires_grad(true);
    {
        NoGradGuard guard;
        EXPECT_FALSE(grad_enabled());
        EXPECT_TRUE(ops::scale(w, 2.0).is_leaf());
    }
    EXPECT_TRUE(grad_enabled());
    EXPECT_FALSE(ops::scale(w, 2.0).is_leaf());
}

TEST(GradCheck, RelativeErrorDefinition) {
    EXPECT_EQ(relative_error(1.0, 1.0), 0.0);
    EXPECT_DOUBLE_EQ(relative_error(1.0, 3.0), 0.5);
    EXPECT_DOUBLE_EQ(relative_error(0.0, 1e-9), 1e-9 / 1e-8);
}

TEST(GradCheck, LinearFunctionPassesAtRoundoff) {
    std::mt19937_64 gen(14);
    Tensor w = leaf({5}, gen);
    Tensor c = oracle::random_tensor({5}, gen);
    const auto r = grad_check([&] { return ops::sum(ops::mul(w, c)); }, {{"w", w}});
    EXPECT_TRUE(r.pass);
    EXPECT_LT(r.max_rel_error, 1e-8);
    EXPECT_EQ(r.checked, 5);
}

TEST(GradCheck, CorruptedGradientFails) {
    std::mt19937_64 gen(15);
    Tensor w = leaf({5}, gen);
    GradCheckOptions opts;
    opts.analytic_scale = 1.01;
    const auto r = grad_check([&] { return ops::sum(ops::sigmoid(w)); }, {{"w", w}}, opts);
    EXPECT_FALSE(r.pass);
}

TEST(GradCheck, NanProbeReportsLocation) {
    Tensor w = Tensor::full({2}, 1.0);
    w.set_requires_grad(true);
    const auto r = grad_check(
        [&] {
            const double v = w.data()[1] > 1.0 ? NAN : 1.0;
            return ops::sum(ops::scale(w, v));
        },
        {{"w", w}});
    EXPECT_FALSE(r.pass);
    EXPECT_NE(r.failure.find("w"), std::string::npos);
}

TEST(GradCheck, RestoresParameters) {
    std::mt19937_64 gen(16);
    Tensor w = leaf({4}, gen);
    const auto before = w.values();
    grad_check([&] { return ops::sum(ops::gelu(w)); }, {{"w", w}});
    EXPECT_EQ(w.values(), before);
}

TEST(GradCheck, EveryDifferentiableOpPasses) {
    std::mt19937_64 gen(17);
    Tensor a = leaf({2, 3, 4}, gen);
    Tensor b = leaf({2, 3, 4}, gen);
    Tensor row = leaf({1, 3, 1}, gen);
    Tensor m = leaf({4, 5}, gen);
    Tensor bm = leaf({2, 4, 3}, gen);
    Tensor img = leaf({2, 3, 5, 5}, gen);
    Tensor w1 = leaf({2, 3, 1, 1}, gen);
    Tensor w3 = leaf({2, 3, 3, 3}, gen);
    Tensor gamma = leaf({4}, gen);
    Tensor beta = leaf({4}, gen);
    Tensor g6 = leaf({3}, gen);
    Tensor b6 = leaf({3}, gen);

    expect_grad_ok([&] { return weighted_sum(ops::add(a, row), 1); }, {{"a", a}, {"row", row}});
    expect_grad_ok([&] { return weighted_sum(ops::sub(a, b), 2); }, {{"a", a}, {"b", b}});
    expect_grad_ok([&] { return weighted_sum(ops::mul(a, row), 3); }, {{"a", a}, {"row", row}});
    expect_grad_ok([&] { return weighted_sum(ops::scale(ops::add_scalar(a, 0.3), -1.7), 4); }, {{"a", a}});
    expect_grad_ok([&] { return weighted_sum(ops::sigmoid(a), 5); }, {{"a", a}});
    expect_grad_ok([&] { return weighted_sum(ops::gelu(a), 6); }, {{"a", a}});
    expect_grad_ok([&] { return weighted_sum(ops::abs(a), 7); }, {{"a", a}});
    expect_grad_ok([&] { return ops::mean(ops::mul(a, b)); }, {{"a", a}, {"b", b}});
    for (int axis = 0; axis < 3; ++axis) {
        expect_grad_ok([&] { return weighted_sum(ops::mean_axis(a, axis), 8); }, {{"a", a}});
        expect_grad_ok([&] { return weighted_sum(ops::sum_axis(a, axis), 9); }, {{"a", a}});
        expect_grad_ok([&] { return weighted_sum(ops::softmax(a, axis), 10); }, {{"a", a}});
    }
    expect_grad_ok([&] { return weighted_sum(ops::global_avg_pool_2d(a), 11); }, {{"a", a}});
    expect_grad_ok([&] { return weighted_sum(ops::matmul(a, m), 12); }, {{"a", a}, {"m", m}});
    expect_grad_ok([&] { return weighted_sum(ops::matmul(a, bm), 13); }, {{"a", a}, {"bm", bm}});
    expect_grad_ok([&] { return weighted_sum(ops::matmul(a, b, true), 14); }, {{"a", a}, {"b", b}});
    expect_grad_ok([&] { return weighted_sum(ops::conv2d(img, w1), 15); }, {{"img", img}, {"w1", w1}});
    expect_grad_ok([&] { return weighted_sum(ops::conv2d(img, w3), 16); }, {{"img", img}, {"w3", w3}});
    expect_grad_ok([&] { return weighted_sum(ops::conv2d(img, w3, 2), 17); }, {{"img", img}, {"w3", w3}});
    expect_grad_ok([&] { return weighted_sum(ops::layer_norm(a, gamma, beta), 18); },
                   {{"a", a}, {"gamma", gamma}, {"beta", beta}});
    expect_grad_ok([&] { return weighted_sum(ops::group_norm(img, 3, g6, b6), 19); },
                   {{"img", img}, {"g", g6}, {"b", b6}});
    expect_grad_ok([&] { return weighted_sum(ops::permute(a, {2, 0, 1}), 20); }, {{"a", a}});
    expect_grad_ok([&] { return weighted_sum(ops::reshape(a, {6, 4}), 21); }, {{"a", a}});
    expect_grad_ok([&] { return weighted_sum(ops::concat({a, b}, 1), 22); }, {{"a", a}, {"b", b}});
    expect_grad_ok([&] { return weighted_sum(ops::slice(a, 2, 1, 2), 23); }, {{"a", a}});
    expect_grad_ok([&] { return weighted_sum(ops::norm_last(a), 24); }, {{"a", a}});
    const std::vector<std::vector<int>> perms{{2, 0, 1}, {1, 2, 0}};
    expect_grad_ok([&] { return weighted_sum(ops::gather_axis1(a, perms), 25); }, {{"a", a}});
}

TEST(GradCheck, NormLastZeroVectorHasZeroGradient) {
    Tensor x = Tensor::zeros({1, 3});
    x.set_requires_grad(true);
    backward(ops::sum(ops::norm_last(x)));
    EXPECT_EQ(x.grad(), std::vector<double>(3, 0.0));
}

TEST(Determinism, IdenticalInputsGiveIdenticalOutputs) {
    auto run = [] {
        std::mt19937_64 gen(99);
        Tensor x = oracle::random_tensor({2, 3, 6, 6}, gen);
        Tensor w = oracle::random_tensor({4, 3, 3, 3}, gen);
        return ops::softmax(ops::gelu(ops::conv2d(x, w)), 1).values();
    };
    EXPECT_EQ(run(), run());
}
