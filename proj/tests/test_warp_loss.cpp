#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "nvel/warp_loss.hpp"
#include "oracles.hpp"

namespace nvel {
namespace {

Image affine_image(int w, int h, double a, double b, double c) {
    Image img(w, h);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) img(x, y) = static_cast<float>(a + b * x + c * y);
    }
    return img;
}

TEST(SamplerTest, IntegerCoordinatesExact) {
    const Image img = oracle::random_image(9, 7, 1);
    for (int y = 0; y < 7; ++y) {
        for (int x = 0; x < 9; ++x) {
            EXPECT_EQ(bilinear_sample<double>(img, x, y), static_cast<double>(img(x, y)));
            EXPECT_EQ(bilinear_sample<float>(img, static_cast<float>(x), static_cast<float>(y)), img(x, y));
        }
    }
}

TEST(SamplerTest, AffineImageInteriorExact) {
    const Image img = affine_image(12, 10, 0.1, 0.03, 0.05);
    Rng rng(3);
    for (int i = 0; i < 200; ++i) {
        const double x = rng.uniform(0.0, 11.0), y = rng.uniform(0.0, 9.0);
        EXPECT_NEAR(bilinear_sample(img, x, y), 0.1 + 0.03 * x + 0.05 * y, 1e-6);
        const auto g = sample_gradient(img, x, y);
        EXPECT_NEAR(g[0], 0.03, 1e-6);
        EXPECT_NEAR(g[1], 0.05, 1e-6);
    }
}

TEST(SamplerTest, MatchesTextbookFormula) {
    const Image img = oracle::random_image(6, 6, 5);
    Rng rng(9);
    for (int i = 0; i < 500; ++i) {
        const double x = rng.uniform(-2.0, 7.0), y = rng.uniform(-2.0, 7.0);
        EXPECT_NEAR(bilinear_sample(img, x, y), oracle::bilinear(img, x, y), 1e-12);
    }
}

TEST(SamplerTest, RampMidpoint) {
    Image img(2, 1);
    img(1, 0) = 1.0f;
    EXPECT_DOUBLE_EQ(bilinear_sample(img, 0.5, 0.0), 0.5);
    EXPECT_DOUBLE_EQ(bilinear_sample(img, 0.25, 0.0), 0.25);
}

TEST(SamplerTest, ZeroPaddingOutside) {
    const Image img(4, 4, 1.0f);
    EXPECT_EQ(bilinear_sample(img, -1.0, 1.0), 0.0);
    EXPECT_EQ(bilinear_sample(img, 1.0, 4.0), 0.0);
    EXPECT_EQ(bilinear_sample(img, 50.0, -30.0), 0.0);
    EXPECT_DOUBLE_EQ(bilinear_sample(img, -0.5, 1.0), 0.5);
    EXPECT_DOUBLE_EQ(bilinear_sample(img, 3.25, 3.0), 0.75);
    EXPECT_EQ(bilinear_sample(img, std::nan(""), 1.0), 0.0);
}

TEST(SamplerTest, GradientMatchesDifferencesInsideCell) {
    const Image img = oracle::random_image(8, 8, 2);
    Rng rng(4);
    const double h = 1e-6;
    for (int i = 0; i < 100; ++i) {
        const double x = std::floor(rng.uniform(0, 7)) + rng.uniform(0.1, 0.9);
        const double y = std::floor(rng.uniform(0, 7)) + rng.uniform(0.1, 0.9);
        const auto g = sample_gradient(img, x, y);
        EXPECT_NEAR(g[0], (oracle::bilinear(img, x + h, y) - oracle::bilinear(img, x - h, y)) / (2 * h), 1e-6);
        EXPECT_NEAR(g[1], (oracle::bilinear(img, x, y + h) - oracle::bilinear(img, x, y - h)) / (2 * h), 1e-6);
    }
}

TEST(SamplerTest, GradientOnLatticeUsesFloorCell) {
    Image img(3, 1);
    img(1, 0) = 1.0f;
    // at x = 1 the floor cell is [1, 2], slope -1
    EXPECT_DOUBLE_EQ(sample_gradient(img, 1.0, 0.0)[0], -1.0);
    EXPECT_DOUBLE_EQ(sample_gradient(img, 0.5, 0.0)[0], 1.0);
}

TEST(DeformedIntensityTest, MatchesOracle) {
    const auto m = init_model<double>(ModelConfig{1.0, 4, 1, 5}, 3);
    const Image second = oracle::random_image(8, 8, 7);
    for (int y = 0; y < 8; ++y) {
        for (int x = 0; x < 8; ++x) {
            const auto d = oracle::forward(m, x, y);
            EXPECT_NEAR(deformed_intensity(m, second, {double(x), double(y)}),
                        oracle::bilinear(second, x + d[0], y + d[1]), 1e-12);
        }
    }
}

TEST(LossTest, ZeroModelIdenticalImages) {
    auto m = init_model<double>(ModelConfig{1.0, 4, 1, 5}, 1);
    for (auto& v : m.params.values()) v = 0.0;
    const Image img = oracle::random_image(8, 8, 1);
    const auto r = loss_and_grad(m, img, full_pixel_batch<double>(img));
    EXPECT_EQ(r.loss, 0.0);
    for (double g : r.grads.values()) EXPECT_EQ(g, 0.0);
    EXPECT_EQ(photometric_loss(m, img, img), 0.0);
}

TEST(LossTest, MatchesOracleLoss) {
    const auto m = init_model<double>(ModelConfig{1.5, 4, 2, 5}, 12);
    const Image a = oracle::random_image(8, 8, 1), b = oracle::random_image(8, 8, 2);
    const double ref = oracle::loss(m, a, b, oracle::all_pixels(a));
    EXPECT_NEAR(loss_and_grad(m, b, full_pixel_batch<double>(a)).loss, ref, 1e-14);
    EXPECT_NEAR(photometric_loss(m, a, b), ref, 1e-14);
}

class GradientCheck : public ::testing::TestWithParam<std::tuple<int, int>> {};

TEST_P(GradientCheck, MatchesCentralDifferences) {
    const auto [layers, seed] = GetParam();
    const auto m = init_model<double>(ModelConfig{1.0, 4, layers, 5}, static_cast<std::uint64_t>(seed));
    const Image a = oracle::random_image(8, 8, 100 + seed), b = oracle::random_image(8, 8, 200 + seed);
    const auto analytic = loss_and_grad(m, b, full_pixel_batch<double>(a));
    ASSERT_TRUE(analytic.finite);
    const auto fd = oracle::fd_gradient(m, a, b, oracle::all_pixels(a), 1e-4);
    const auto g = analytic.grads.values();
    ASSERT_EQ(g.size(), fd.grad.size());
    for (std::size_t k = 0; k < g.size(); ++k) {
        EXPECT_TRUE(oracle::grad_close(g[k], fd.grad[k], 1e-4, 1e-8))
            << "param " << k << " analytic " << g[k] << " fd " << fd.grad[k];
    }
}

INSTANTIATE_TEST_SUITE_P(TinyModels, GradientCheck,
                         ::testing::Combine(::testing::Values(1, 2), ::testing::Values(1, 2, 3, 4, 5)));

TEST(LossTest, SubsetBatchMatchesOracle) {
    const auto m = init_model<double>(ModelConfig{1.0, 4, 1, 5}, 6);
    const Image a = oracle::random_image(8, 8, 31), b = oracle::random_image(8, 8, 32);
    const std::vector<std::uint32_t> idx{3, 9, 17, 40, 63};
    oracle::PixelSet px;
    for (auto k : idx) {
        px.xs.push_back(static_cast<int>(k % 8));
        px.ys.push_back(static_cast<int>(k / 8));
    }
    const auto r = loss_and_grad(m, b, make_pixel_batch<double>(a, idx));
    EXPECT_NEAR(r.loss, oracle::loss(m, a, b, px), 1e-14);
    const auto fd = oracle::fd_gradient(m, a, b, px, 1e-4);
    for (std::size_t k = 0; k < fd.grad.size(); ++k) {
        EXPECT_TRUE(oracle::grad_close(r.grads.values()[k], fd.grad[k], 1e-4, 1e-8));
    }
}

TEST(LossTest, PartitionWeightedMean) {
    const auto m = init_model<double>(ModelConfig{1.0, 4, 1, 5}, 8);
    const Image a = oracle::random_image(8, 8, 41), b = oracle::random_image(8, 8, 42);
    std::vector<std::uint32_t> all(64);
    std::iota(all.begin(), all.end(), 0u);
    const std::span<const std::uint32_t> s(all);
    const auto full = loss_and_grad(m, b, make_pixel_batch<double>(a, s));
    const auto p1 = loss_and_grad(m, b, make_pixel_batch<double>(a, s.first(24)));
    const auto p2 = loss_and_grad(m, b, make_pixel_batch<double>(a, s.last(40)));
    EXPECT_NEAR(full.loss, (24 * p1.loss + 40 * p2.loss) / 64, 1e-14);
    for (std::size_t k = 0; k < full.grads.size(); ++k) {
        EXPECT_NEAR(full.grads.values()[k], (24 * p1.grads.values()[k] + 40 * p2.grads.values()[k]) / 64, 1e-13);
    }
}

TEST(LossTest, ChunkingAndThreadsAgree) {
    const auto m = init_model<double>(ModelConfig{1.0, 4, 2, 5}, 2);
    const Image a = oracle::random_image(16, 16, 1), b = oracle::random_image(16, 16, 2);
    const auto batch = full_pixel_batch<double>(a);
    const auto ref = loss_and_grad(m, b, batch);
    for (bool det : {true, false}) {
        const auto r = loss_and_grad(m, b, batch, LossOptions{4, det, 37});
        EXPECT_NEAR(r.loss, ref.loss, 1e-14);
        for (std::size_t k = 0; k < ref.grads.size(); ++k) {
            EXPECT_NEAR(r.grads.values()[k], ref.grads.values()[k], 1e-13);
        }
    }
    const auto d1 = loss_and_grad(m, b, batch, LossOptions{4, true, 37});
    const auto d2 = loss_and_grad(m, b, batch, LossOptions{3, true, 37});
    EXPECT_EQ(d1.grads, d2.grads);
    EXPECT_EQ(d1.loss, d2.loss);
}

TEST(LossTest, CoordinateOverload) {
    const auto m = init_model<double>(ModelConfig{1.0, 4, 1, 5}, 2);
    const Image a = oracle::random_image(8, 8, 1), b = oracle::random_image(8, 8, 2);
    PointList<double> pts(3, 2);
    pts << 1, 2, 7, 7, 0, 5;
    const auto r = loss_and_grad(m, a, b, pts);
    const std::vector<std::uint32_t> idx{17, 63, 40};
    EXPECT_EQ(r.loss, loss_and_grad(m, b, make_pixel_batch<double>(a, idx)).loss);
    pts(0, 0) = 1.5;
    EXPECT_THROW(loss_and_grad(m, a, b, pts), InputError);
    pts(0, 0) = 8;
    EXPECT_THROW(loss_and_grad(m, a, b, pts), InputError);
    EXPECT_THROW(loss_and_grad(m, b, PixelBatch<double>{}), InputError);
}

TEST(LossTest, NonFiniteReported) {
    auto m = init_model<double>(ModelConfig{1.0, 4, 1, 5}, 2);
    m.params.bias(1)(0) = NAN;
    const Image a = oracle::random_image(8, 8, 1);
    const auto r = loss_and_grad(m, a, full_pixel_batch<double>(a));
    EXPECT_FALSE(r.finite);
}

}  // namespace
}  // namespace nvel
