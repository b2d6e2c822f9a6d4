#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "nvel/synth.hpp"
#include "nvel/trainer.hpp"
#include "oracles.hpp"

namespace nvel {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

ModelConfig small_model() { return {20.0, 16, 1, 16}; }

TrainConfig quick(int epochs = 5) {
    TrainConfig c;
    c.epochs = epochs;
    c.batch_size = 256;
    c.lr = 1e-2;
    return c;
}

SyntheticPair small_pair(std::uint64_t seed = 1) {
    SeedingOptions so;
    so.margin = 4;
    so.density = 0.05;
    return generate_pair(flow::Uniform{1.3, -0.7}, random_particles(32, 32, seed, so), 32, 32);
}

TEST(AdamTest, ZeroGradientLeavesParameters) {
    std::vector<double> p{1.0, -2.0, 3.5}, g(3, 0.0), m(3, 0.0), v(3, 0.0);
    const auto before = p;
    for (long t = 1; t <= 5; ++t) ASSERT_TRUE(adam_step<double>(p, g, m, v, AdamHyper{}, t));
    EXPECT_EQ(p, before);
}

TEST(AdamTest, FirstStepIsLearningRateTimesSign) {
    std::vector<double> p{0.0, 0.0, 0.0}, g{3.0, -0.25, 1e-3}, m(3, 0.0), v(3, 0.0);
    ASSERT_TRUE(adam_step<double>(p, g, m, v, AdamHyper{0.01}, 1));
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_NEAR(p[i], -0.01 * g[i] / (std::abs(g[i]) + 1e-8), 1e-15);
    }
}

TEST(AdamTest, QuadraticMatchesScalarRecursion) {
    const auto path = oracle::adam_quadratic(1.0, 0.1, 200);
    std::vector<double> p{1.0}, m{0.0}, v{0.0};
    for (long t = 1; t <= 200; ++t) {
        std::vector<double> g{2 * p[0]};
        ASSERT_TRUE(adam_step<double>(p, g, m, v, AdamHyper{0.1}, t));
        ASSERT_NEAR(p[0], path[static_cast<std::size_t>(t)], 1e-12) << "step " << t;
    }
    EXPECT_LT(std::abs(p[0]), 0.05);
}

TEST(AdamTest, StepIndexAndShapeChecked) {
    std::vector<double> p{1.0}, g{1.0}, m{0.0}, v{0.0}, bad(2, 0.0);
    EXPECT_THROW(adam_step<double>(p, g, m, v, AdamHyper{}, 0), InputError);
    EXPECT_THROW(adam_step<double>(p, g, bad, v, AdamHyper{}, 1), InputError);
}

TEST(AdamTest, NonFiniteUpdateRejectedAndStateKept) {
    auto params = init_model<double>(ModelConfig{1.0, 2, 1, 2}, 0).params;
    auto grads = params.zeros_like();
    grads.values()[0] = std::numeric_limits<double>::infinity();
    AdamState<double> st(params.size());
    const auto before = params;
    EXPECT_FALSE(adam_step(params, grads, st, AdamHyper{}));
    EXPECT_EQ(params, before);
    EXPECT_EQ(st.step, 0);
    EXPECT_TRUE(std::ranges::all_of(st.m, [](double x) { return x == 0.0; }));
}

TEST(ShuffleTest, ProducesPermutation) {
    std::vector<std::uint32_t> idx(1000);
    std::iota(idx.begin(), idx.end(), 0u);
    Rng rng(5);
    detail::shuffle_indices(idx, rng);
    auto sorted = idx;
    std::ranges::sort(sorted);
    for (std::uint32_t i = 0; i < 1000; ++i) EXPECT_EQ(sorted[i], i);
    EXPECT_NE(idx[0] + idx[1] * 1000, 0u + 1000u);
}

TEST(TrainPairTest, ReducesLossAndReportsEpochs) {
    const auto pair = small_pair();
    auto model = init_model<float>(small_model(), 3);
    const double before = photometric_loss(model, pair.first, pair.second);
    std::vector<int> seen;
    const auto rep = train_pair(model, pair.first, pair.second, quick(8), [&](int e, double) { seen.push_back(e); });
    EXPECT_EQ(rep.epochs_run(), 8);
    EXPECT_EQ(seen, (std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7}));
    EXPECT_FALSE(rep.diverged);
    EXPECT_EQ(rep.final_loss, rep.loss_per_epoch.back());
    EXPECT_LT(photometric_loss(model, pair.first, pair.second), before);
    EXPECT_GT(rep.wall_time, 0.0);
}

TEST(TrainPairTest, EmbeddingNeverTrained) {
    const auto pair = small_pair();
    auto model = init_model<float>(small_model(), 3);
    const PointList<float> b = model.embedding;
    train_pair(model, pair.first, pair.second, quick(2));
    EXPECT_EQ(model.embedding, b);
}

TEST(TrainPairTest, SameSeedSameResult) {
    const auto pair = small_pair();
    auto a = init_model<float>(small_model(), 3), b = a;
    const auto ra = train_pair(a, pair.first, pair.second, quick(3));
    const auto rb = train_pair(b, pair.first, pair.second, quick(3));
    EXPECT_EQ(a, b);
    EXPECT_EQ(ra.loss_per_epoch, rb.loss_per_epoch);

    auto c = init_model<float>(small_model(), 3);
    TrainConfig other = quick(3);
    other.seed = 99;
    train_pair(c, pair.first, pair.second, other);
    EXPECT_FALSE(a == c);
}

TEST(TrainPairTest, DeterministicAcrossThreadCounts) {
    const auto pair = small_pair();
    TrainConfig cfg = quick(2);
    cfg.deterministic = true;
    cfg.batch_size = 1024;
    auto a = init_model<float>(small_model(), 4), b = a;
    cfg.threads = 2;
    train_pair(a, pair.first, pair.second, cfg);
    cfg.threads = 4;
    train_pair(b, pair.first, pair.second, cfg);
    EXPECT_EQ(a, b);
}

TEST(TrainPairTest, IdenticalImagesStayNearZeroDisplacement) {
    const auto pair = small_pair();
    auto model = init_model<double>(small_model(), 2);
    for (auto& w : model.params.values()) w = 0.0;
    const auto rep = train_pair(model, pair.first, pair.first, quick(3));
    EXPECT_EQ(rep.final_loss, 0.0);
    for (double w : model.params.values()) EXPECT_EQ(w, 0.0);
}

TEST(TrainPairTest, LastBatchMayBeShort) {
    // 32*32 = 1024 pixels in batches of 1000: one full and one 24-pixel batch
    const auto pair = small_pair();
    auto model = init_model<float>(small_model(), 2);
    TrainConfig cfg = quick(1);
    cfg.batch_size = 1000;
    EXPECT_EQ(train_pair(model, pair.first, pair.second, cfg).epochs_run(), 1);
}

TEST(TrainPairTest, DivergenceRollsBack) {
    const auto pair = small_pair();
    auto model = init_model<float>(small_model(), 2);
    model.params.bias(1)(0) = std::numeric_limits<float>::quiet_NaN();
    const auto before = encode_model(model);
    const auto rep = train_pair(model, pair.first, pair.second, quick(3));
    EXPECT_TRUE(rep.diverged);
    EXPECT_EQ(rep.epochs_run(), 0);
    EXPECT_EQ(encode_model(model), before);
}

TEST(TrainPairTest, InvalidInputs) {
    const auto pair = small_pair();
    auto model = init_model<float>(small_model(), 2);
    EXPECT_THROW(train_pair(model, pair.first, Image(8, 8), quick()), InputError);
    TrainConfig bad = quick();
    bad.batch_size = 0;
    EXPECT_THROW(train_pair(model, pair.first, pair.second, bad), InputError);
    bad = quick();
    bad.lr = -1;
    EXPECT_THROW(train_pair(model, pair.first, pair.second, bad), InputError);
}

TEST(SequenceTest, WarmStartKeepsEmbeddingAndChainsWeights) {
    SeedingOptions so;
    so.margin = 4;
    const auto seq = generate_sequence(flow::Uniform{0.8, 0.4}, random_particles(32, 32, 3, so), 32, 32, 4, 0);
    const auto init = init_model<float>(small_model(), 7);
    const auto out = train_sequence<float>(seq.frames, quick(2), quick(1), init);
    ASSERT_EQ(out.size(), 3u);
    for (const auto& r : out) EXPECT_EQ(r.model.embedding, init.embedding);
    EXPECT_EQ(out[0].report.epochs_run(), 2);
    EXPECT_EQ(out[1].report.epochs_run(), 1);

    // pair 1 starts from pair 0's weights
    auto replay = out[0].model;
    TrainConfig c = quick(1);
    c.seed += 1;
    train_pair(replay, seq.frames[1], seq.frames[2], c);
    EXPECT_EQ(replay, out[1].model);

    const std::vector<Image> one{seq.frames[0]};
    EXPECT_THROW(train_sequence<float>(one, quick(), quick(), init), InputError);
}

TEST(ConvergenceTest, InflatedMemberExcluded) {
    const std::vector<double> losses{1.0, 1.1, 0.9, 1.05, 20.0 * 1.025};
    const auto mask = convergence_mask(losses, 10.0);
    EXPECT_EQ(mask, (std::vector<bool>{true, true, true, true, false}));
}

TEST(ConvergenceTest, NonFiniteExcludedAndMedianOverFinite) {
    const std::vector<double> losses{2.0, kInf, std::nan(""), 3.0, 25.0};
    // finite median = 3; 25 <= 30 stays
    EXPECT_EQ(convergence_mask(losses, 10.0), (std::vector<bool>{true, false, false, true, true}));
    const std::vector<double> all_bad{kInf, kInf};
    EXPECT_EQ(convergence_mask(all_bad, 10.0), (std::vector<bool>{false, false}));
}

TEST(EnsembleTest, SummaryIsPopulationStatistics) {
    const GridSpec grid = pixel_grid(4, 3);
    std::vector<EnsembleMember<float>> members;
    for (std::uint64_t s = 0; s < 3; ++s) {
        TrainReport rep;
        rep.final_loss = 1.0;
        members.push_back({s, init_model<float>(ModelConfig{1.0, 4, 1, 5}, s), rep});
    }
    members[2].report.final_loss = 50.0;
    const auto r = summarize_ensemble(members, grid, 10.0);
    EXPECT_EQ(r.converged, (std::vector<bool>{true, true, false}));
    const auto f0 = sample_grid(members[0].model, grid), f1 = sample_grid(members[1].model, grid);
    for (std::size_t k = 0; k < grid.size(); ++k) {
        EXPECT_NEAR(r.mean.u[k], 0.5 * (f0.u[k] + f1.u[k]), 1e-6);
        EXPECT_NEAR(r.stddev.u[k], 0.5 * std::abs(f0.u[k] - f1.u[k]), 1e-6);
        EXPECT_NEAR(r.stddev.v[k], 0.5 * std::abs(f0.v[k] - f1.v[k]), 1e-6);
    }
}

TEST(EnsembleTest, IdenticalSeedsGiveZeroSpread) {
    const auto pair = small_pair();
    EnsembleOptions opt;
    opt.members = 2;
    opt.vary_seed = false;
    const auto r = ensemble_train(pair.first, pair.second, small_model(), quick(1), opt, pixel_grid(32, 32));
    EXPECT_EQ(r.seeds, (std::vector<std::uint64_t>{0, 0}));
    for (float s : r.stddev.u) EXPECT_EQ(s, 0.0f);
    for (float s : r.stddev.v) EXPECT_EQ(s, 0.0f);
}

TEST(EnsembleTest, SeedsAdvancePerMember) {
    const auto pair = small_pair();
    EnsembleOptions opt;
    opt.members = 3;
    opt.jobs = 3;
    TrainConfig cfg = quick(1);
    cfg.seed = 10;
    const auto members = train_members<float>(pair.first, pair.second, small_model(), cfg, opt);
    EXPECT_EQ(members[2].seed, 12u);
    auto solo = init_model<float>(small_model(), 12);
    cfg.seed = 12;
    train_pair(solo, pair.first, pair.second, cfg);
    EXPECT_EQ(solo, members[2].model);
}

TEST(EnsembleTest, NeedsTwoMembersAndOneConverged) {
    const auto pair = small_pair();
    EnsembleOptions opt;
    opt.members = 1;
    EXPECT_THROW(ensemble_train(pair.first, pair.second, small_model(), quick(1), opt, pixel_grid(32, 32)),
                 InputError);
    std::vector<EnsembleMember<float>> members(2);
    for (auto& m : members) {
        m.model = init_model<float>(ModelConfig{1.0, 2, 1, 2}, 0);
        m.report.diverged = true;
    }
    EXPECT_THROW(summarize_ensemble(members, pixel_grid(2, 2), 10.0), DivergenceError);
}

}  // namespace
}  // namespace nvel
