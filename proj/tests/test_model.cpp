#include "popmap/model.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace popmap;

namespace {

// Plain-loop single-pixel forward pass, infer mode.
double scalar_forward(const ModelParams& p, const std::vector<double>& x) {
    std::vector<double> a = x;
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        const auto& L = p.layers[l];
        std::vector<double> z(static_cast<std::size_t>(L.weight.rows()));
        for (Eigen::Index r = 0; r < L.weight.rows(); ++r) {
            double s = L.bias[r];
            for (Eigen::Index c = 0; c < L.weight.cols(); ++c) s += L.weight(r, c) * a[static_cast<std::size_t>(c)];
            z[static_cast<std::size_t>(r)] = s;
        }
        if (l + 1 == p.layers.size()) return std::log1p(std::exp(-std::abs(z[0]))) + std::max(z[0], 0.0);
        for (auto& v : z) v = std::max(v, 0.0);
        a = std::move(z);
    }
    return 0.0;
}

ModelParams random_params(std::size_t d, const std::vector<std::size_t>& hidden, std::uint64_t seed) {
    ModelParams p = init_params(d, hidden, seed, 0.0);
    std::mt19937_64 rng(seed ^ 77);
    std::uniform_real_distribution<double> u(-0.5, 0.5);
    for (auto& l : p.layers)
        for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias[i] = u(rng);
    for (std::size_t k = 0; k < d; ++k) {
        p.norm.names.push_back("c" + std::to_string(k));
        p.norm.mean.push_back(0.0);
        p.norm.stddev.push_back(1.0);
    }
    return p;
}

Matrix random_features(std::size_t d, std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    Matrix x(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(n));
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = g(rng);
    return x;
}

} // namespace

TEST(Softplus, StableAndExact) {
    EXPECT_NEAR(softplus(0.0), std::log(2.0), 1e-15);
    EXPECT_NEAR(softplus(20.0), 20.0000000020611537, 1e-12);
    EXPECT_DOUBLE_EQ(softplus(1000.0), 1000.0);
    EXPECT_GT(softplus(-800.0), -1.0);
    EXPECT_NEAR(inverse_softplus(softplus(1.7)), 1.7, 1e-12);
}

TEST(Features, ZScoreNaNAndConstant) {
    CovariateStack s(2, 1);
    s.add_layer("a", {0.0f, 2.0f});
    s.add_layer("b", {std::nanf(""), 4.0f});
    s.add_layer("c", {3.0f, 3.0f});
    auto stats = compute_norm_stats(s, {}, {0, 1});
    EXPECT_DOUBLE_EQ(stats.mean[0], 1.0);
    EXPECT_DOUBLE_EQ(stats.stddev[0], 1.0);
    EXPECT_DOUBLE_EQ(stats.stddev[2], 1.0);
    Matrix x = normalize_features(s, stats, {0, 1});
    EXPECT_DOUBLE_EQ(x(0, 0), -1.0);
    EXPECT_DOUBLE_EQ(x(0, 1), 1.0);
    EXPECT_DOUBLE_EQ(x(1, 0), 0.0);
    EXPECT_DOUBLE_EQ(x(2, 0), 0.0);
    EXPECT_DOUBLE_EQ(x(2, 1), 0.0);
}

TEST(Features, NoneRoleKeepsRawValues) {
    CovariateStack s(2, 1);
    s.add_layer("a", {5.0f, 7.0f});
    auto stats = compute_norm_stats(s, {Normalization::none}, {0, 1});
    Matrix x = normalize_features(s, stats, {0, 1});
    EXPECT_DOUBLE_EQ(x(0, 1), 7.0);
}

TEST(Features, NameMismatchIsCovariateMismatch) {
    CovariateStack s(1, 1);
    s.add_layer("a", {1.0f});
    NormStats stats{{"b"}, {0.0}, {1.0}};
    try {
        normalize_features(s, stats, {0});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::covariate_mismatch);
    }
}

TEST(Forward, ZeroNetworkGivesLn2) {
    ModelParams p = init_params(3, {4, 4}, 1, 0.0);
    for (auto& l : p.layers) {
        l.weight.setZero();
        l.bias.setZero();
    }
    Vector out = forward_occupancy(p, random_features(3, 10, 2), Mode::infer);
    for (Eigen::Index i = 0; i < out.size(); ++i) EXPECT_NEAR(out[i], std::log(2.0), 1e-15);
}

TEST(Forward, LargePreActivation) {
    ModelParams p = init_params(1, {1}, 1, 0.0);
    p.layers[0].weight(0, 0) = 1.0;
    p.layers[0].bias[0] = 0.0;
    p.layers[1].weight(0, 0) = 1.0;
    p.layers[1].bias[0] = 0.0;
    Matrix x(1, 1);
    x(0, 0) = 20.0;
    EXPECT_NEAR(forward_occupancy(p, x, Mode::infer)[0], 20.0000000021, 1e-9);
}

TEST(Forward, TrainModeDeterministicPerSeed) {
    ModelParams p = random_params(4, {16, 16}, 3);
    p.dropout = 0.4;
    Matrix x = random_features(4, 600, 4);
    Vector a = forward_occupancy(p, x, Mode::train, 9);
    Vector b = forward_occupancy(p, x, Mode::train, 9);
    Vector c = forward_occupancy(p, x, Mode::train, 10);
    EXPECT_EQ(a, b);
    EXPECT_NE(a, c);
}

TEST(Forward, ThreadCountDoesNotChangeResults) {
    ModelParams p = random_params(4, {32, 32}, 5);
    p.dropout = 0.4;
    Matrix x = random_features(4, 2000, 6);
    Vector up = Vector::Ones(2000);
    set_thread_count(1);
    Vector a = forward_occupancy(p, x, Mode::train, 1);
    Gradients ga = backward(p, x, up, Mode::train, 1);
    set_thread_count(7);
    Vector b = forward_occupancy(p, x, Mode::train, 1);
    Gradients gb = backward(p, x, up, Mode::train, 1);
    set_thread_count(0);
    EXPECT_EQ(a, b);
    for (std::size_t l = 0; l < ga.layers.size(); ++l) {
        EXPECT_EQ(ga.layers[l].weight, gb.layers[l].weight);
        EXPECT_EQ(ga.layers[l].bias, gb.layers[l].bias);
    }
}

TEST(Forward, PositiveAndPermutationEquivariant) {
    ModelParams p = random_params(3, {8, 8, 8}, 8);
    Matrix x = random_features(3, 50, 9) * 5.0;
    Vector out = forward_occupancy(p, x, Mode::infer);
    EXPECT_GT(out.minCoeff(), 0.0);
    std::vector<Eigen::Index> perm(50);
    std::iota(perm.begin(), perm.end(), 0);
    std::mt19937_64 rng(1);
    std::shuffle(perm.begin(), perm.end(), rng);
    Matrix xp(3, 50);
    for (Eigen::Index j = 0; j < 50; ++j) xp.col(j) = x.col(perm[static_cast<std::size_t>(j)]);
    Vector op = forward_occupancy(p, xp, Mode::infer);
    for (Eigen::Index j = 0; j < 50; ++j) EXPECT_EQ(op[j], out[perm[static_cast<std::size_t>(j)]]);
}

TEST(Forward, NonFiniteParameterIsNumericFailure) {
    ModelParams p = random_params(2, {4}, 1);
    p.layers[0].weight(0, 0) = std::nan("");
    try {
        forward_occupancy(p, random_features(2, 3, 1), Mode::infer);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::numeric_failure);
    }
}

TEST(Dropout, TrainModeMeanLogitMatchesInfer) {
    // One hidden layer: the logit is linear in the dropout mask, so inverted
    // dropout is exactly unbiased there.
    ModelParams p = random_params(3, {12}, 21);
    p.layers[1].weight = p.layers[1].weight.cwiseAbs();
    p.dropout = 0.4;
    Matrix x = random_features(3, 1, 22);
    const double target = ForwardPass(p, x, Mode::infer, 0).logits()[0];
    const int n = 10000;
    double sum = 0.0, sq = 0.0;
    for (int s = 0; s < n; ++s) {
        double v = ForwardPass(p, x, Mode::train, static_cast<std::uint64_t>(s)).logits()[0];
        sum += v;
        sq += v * v;
    }
    const double mean = sum / n;
    const double se = std::sqrt((sq / n - mean * mean) / n);
    EXPECT_LT(std::abs(mean - target), 3.0 * se) << "mean " << mean << " target " << target << " se " << se;
}

TEST(Dropout, KeepRateNearSixtyPercent) {
    std::size_t kept = 0, total = 0;
    for (std::size_t c = 0; c < 200; ++c)
        for (std::size_t u = 0; u < 128; ++u, ++total) kept += dropout_keep(dropout_seed_key(5), 1, c, u, 0.6);
    EXPECT_NEAR(static_cast<double>(kept) / static_cast<double>(total), 0.6, 0.01);
}

TEST(Backward, ZeroUpstreamZeroGradient) {
    ModelParams p = random_params(3, {8, 8}, 2);
    Gradients g = backward(p, random_features(3, 5, 3), Vector::Zero(5), Mode::infer, 0);
    EXPECT_EQ(g.max_abs(), 0.0);
}

TEST(Backward, DuplicateRowsDoubleGradient) {
    ModelParams p = random_params(3, {8, 8}, 4);
    Matrix one = random_features(3, 1, 5);
    Matrix two(3, 2);
    two << one, one;
    Gradients g1 = backward(p, one, Vector::Ones(1), Mode::infer, 0);
    Gradients g2 = backward(p, two, Vector::Ones(2), Mode::infer, 0);
    for (std::size_t l = 0; l < g1.layers.size(); ++l) {
        EXPECT_TRUE(g2.layers[l].weight.isApprox(2.0 * g1.layers[l].weight, 1e-14));
        EXPECT_TRUE(g2.layers[l].bias.isApprox(2.0 * g1.layers[l].bias, 1e-14));
    }
}

TEST(Backward, MatchesCentralDifferences) {
    // Objective sum_i u_i f(x_i) through the scalar oracle.
    for (std::uint64_t trial = 0; trial < 10; ++trial) {
        ModelParams p = random_params(3, {6, 5, 4}, 100 + trial);
        Matrix x = random_features(3, 5, 200 + trial);
        Vector up = random_features(1, 5, 300 + trial).transpose();
        auto objective = [&](const ModelParams& q) {
            double s = 0.0;
            for (Eigen::Index j = 0; j < x.cols(); ++j) {
                std::vector<double> xi(3);
                for (int k = 0; k < 3; ++k) xi[static_cast<std::size_t>(k)] = x(k, j);
                s += up[j] * scalar_forward(q, xi);
            }
            return s;
        };
        Gradients g = backward(p, x, up, Mode::infer, 0);
        const double h = 1e-5;
        double worst = 0.0;
        for (std::size_t l = 0; l < p.layers.size(); ++l) {
            auto check = [&](double& param, double analytic) {
                const double orig = param;
                param = orig + h;
                const double fp = objective(p);
                param = orig - h;
                const double fm = objective(p);
                param = orig;
                const double fd = (fp - fm) / (2 * h);
                const double rel = std::abs(fd - analytic) / std::max(1e-6, std::abs(fd) + std::abs(analytic));
                worst = std::max(worst, rel);
            };
            for (Eigen::Index i = 0; i < p.layers[l].weight.size(); ++i)
                check(p.layers[l].weight.data()[i], g.layers[l].weight.data()[i]);
            for (Eigen::Index i = 0; i < p.layers[l].bias.size(); ++i) check(p.layers[l].bias[i], g.layers[l].bias[i]);
        }
        EXPECT_LT(worst, 1e-5) << "trial " << trial;
    }
}

TEST(Predict, OccupancyTimesBuildings) {
    ModelParams p = random_params(1, {2}, 1);
    for (auto& l : p.layers) {
        l.weight.setZero();
        l.bias.setZero();
    }
    p.layers.back().bias[0] = inverse_softplus(2.5);
    CovariateStack s(2, 1);
    s.add_layer("c0", {1.0f, 2.0f});
    BuildingGrid b(2, 1);
    b.values = {4.0f, 0.0f};
    auto g = predict_population(p, s, b);
    EXPECT_NEAR(g.values[0], 10.0, 1e-12);
    EXPECT_EQ(g.values[1], 0.0);
}

TEST(Predict, MatchesScalarOracleOnToy) {
    ModelParams p = random_params(2, {8, 8, 8}, 13);
    p.norm.mean = {0.5, -1.0};
    p.norm.stddev = {2.0, 0.5};
    std::mt19937_64 rng(14);
    std::uniform_real_distribution<float> u(-2.0f, 2.0f);
    CovariateStack s(8, 8);
    std::vector<float> a(64), c(64);
    for (auto& v : a) v = u(rng);
    for (auto& v : c) v = u(rng);
    a[5] = std::nanf("");
    s.add_layer("c0", a);
    s.add_layer("c1", c);
    BuildingGrid b(8, 8);
    for (auto& v : b.values) v = static_cast<float>(rng() % 3);
    auto g = predict_population(p, s, b);
    for (std::size_t i = 0; i < 64; ++i) {
        double want = 0.0;
        if (b.values[i] > 0) {
            std::vector<double> x{std::isnan(a[i]) ? 0.0 : (a[i] - 0.5) / 2.0, (c[i] + 1.0) / 0.5};
            want = scalar_forward(p, x) * b.values[i];
        }
        EXPECT_NEAR(g.values[i], want, 1e-9);
    }
}

TEST(Predict, RowStreamingMatchesWholeGrid) {
    ModelParams p = random_params(2, {8, 8}, 31);
    std::mt19937_64 rng(32);
    std::uniform_real_distribution<float> u(-2.0f, 2.0f);
    CovariateStack s(13, 11);
    for (int k = 0; k < 2; ++k) {
        std::vector<float> v(13 * 11);
        for (auto& x : v) x = u(rng);
        s.add_layer("c" + std::to_string(k), v);
    }
    BuildingGrid b(13, 11);
    for (auto& v : b.values) v = static_cast<float>(rng() % 2);
    auto whole = predict_population(p, s, b);
    PopulationGrid streamed(13, 11, -1.0);
    predict_rows(
        p, 13, 11,
        [&](std::size_t k, std::size_t r, std::vector<float>& row) {
            row.assign(s.layer(k).values.begin() + static_cast<std::ptrdiff_t>(r * 13),
                       s.layer(k).values.begin() + static_cast<std::ptrdiff_t>((r + 1) * 13));
        },
        [&](std::size_t r, std::vector<float>& row) {
            row.assign(b.values.begin() + static_cast<std::ptrdiff_t>(r * 13), b.values.begin() + static_cast<std::ptrdiff_t>((r + 1) * 13));
        },
        [&](std::size_t r, const std::vector<double>& row) {
            std::copy(row.begin(), row.end(), streamed.values.begin() + static_cast<std::ptrdiff_t>(r * 13));
        },
        4);
    for (std::size_t i = 0; i < whole.size(); ++i) EXPECT_NEAR(streamed.values[i], whole.values[i], 1e-12);
}

TEST(Checkpoint, RoundTripBitIdentical) {
    ModelParams p = random_params(3, {16, 8}, 41);
    p.occupancy_output = false;
    p.norm.mean = {1.0, 2.0, 3.0};
    const std::string bytes = encode_checkpoint(p);
    ModelParams back = decode_checkpoint(bytes, "mem");
    EXPECT_EQ(back, p);
    EXPECT_EQ(encode_checkpoint(back), bytes);
    EXPECT_EQ(bytes.substr(0, 4), "PCKP");
}

TEST(Checkpoint, CorruptionIsFormatError) {
    std::string bytes = encode_checkpoint(random_params(2, {4}, 1));
    for (std::string bad : {bytes.substr(0, bytes.size() - 3), bytes + "x", "XCKP" + bytes.substr(4)}) {
        try {
            decode_checkpoint(bad, "mem");
            FAIL();
        } catch (const Error& e) {
            EXPECT_EQ(e.code(), ErrorCode::format);
        }
    }
}
