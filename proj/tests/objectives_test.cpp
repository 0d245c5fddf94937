#include <gtest/gtest.h>

#include <cmath>

#include "trust/objectives.hpp"

using trust::DownstreamConfig;
using trust::DownstreamModel;
using trust::FeatureExtractor;
using trust::LossWeights;
using trust::Shape;
using trust::Tensor;
using D = Tensor<double>;

namespace {

D rand_image(std::size_t res, trust::Rng& rng) {
    D t({res, res, 3});
    for (auto& v : t.values()) v = rng.uniform(0.0, 1.0);
    return t;
}

FeatureExtractor<double> small_extractor(std::size_t res = 16, std::uint64_t seed = 900) {
    return FeatureExtractor<double>(res, {4, 6, 8}, seed);
}

DownstreamModel<double> frozen_downstream(std::size_t res = 16) {
    DownstreamConfig cfg;
    cfg.resolution = res;
    cfg.patch = 4;
    cfg.embed_dim = 8;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.classes = 2;
    DownstreamModel<double> m(cfg, 31337);
    m.freeze();
    return m;
}

}  // namespace

// ---------------------------------------------------------------------------
// feature extractor
// ---------------------------------------------------------------------------

TEST(Extractor, DeterministicAcrossCallsAndConstruction) {
    trust::Rng rng(1);
    D img = rand_image(16, rng);
    auto fe1 = small_extractor();
    auto fe2 = small_extractor();
    auto a = fe1.extract(img);
    auto b = fe1.extract(img);
    auto c = fe2.extract(img);
    ASSERT_EQ(a.size(), 3u);
    for (std::size_t s = 0; s < a.size(); ++s)
        for (std::size_t i = 0; i < a[s].numel(); ++i) {
            EXPECT_DOUBLE_EQ(a[s][i], b[s][i]);
            EXPECT_DOUBLE_EQ(a[s][i], c[s][i]);
        }
}

TEST(Extractor, StageResolutionsHalve) {
    FeatureExtractor<double> fe(64, {4, 8, 16}, 7);
    trust::Rng rng(2);
    D img = rand_image(64, rng);
    auto maps = fe.extract(img);
    ASSERT_EQ(maps.size(), 3u);
    EXPECT_EQ(maps[0].shape(), (Shape{32, 32, 4}));
    EXPECT_EQ(maps[1].shape(), (Shape{16, 16, 8}));
    EXPECT_EQ(maps[2].shape(), (Shape{8, 8, 16}));
}

TEST(Extractor, ResolutionMismatchIsDimensionError) {
    auto fe = small_extractor();
    D img({8, 8, 3}, 0.5);
    EXPECT_THROW(fe.extract(img), trust::DimensionError);
}

TEST(Extractor, PixelPerturbationMovesColocatedStageOneActivations) {
    auto fe = small_extractor();
    trust::Rng rng(3);
    D img = rand_image(16, rng);
    auto before = fe.extract(img);
    D img2 = img.clone();
    img2(8, 8, 0) = std::min(1.0, img2(8, 8, 0) + 0.5);
    auto after = fe.extract(img2);
    // stage 1 is stride 2: pixel (8,8) lands near map cell (4,4)
    double delta = 0;
    for (std::size_t c = 0; c < before[0].dim(2); ++c)
        delta += std::abs(after[0](4, 4, c) - before[0](4, 4, c));
    EXPECT_GT(delta, 0.0);
}

TEST(Extractor, WeightsUntouchedByBackwardPass) {
    auto fe = small_extractor();
    const auto bytes_before = fe.parameter_bytes();
    trust::Rng rng(4);
    D img = rand_image(16, rng);
    img.set_requires_grad(true);
    trust::Tape<double> tape;
    tape.backward(trust::mean_all(fe.extract(img).back()));
    EXPECT_EQ(bytes_before, fe.parameter_bytes());
    double gsum = 0;
    for (double g : img.grad()) gsum += std::abs(g);
    EXPECT_GT(gsum, 0.0);  // gradient flows to the image
}

// ---------------------------------------------------------------------------
// content loss
// ---------------------------------------------------------------------------

TEST(ContentLoss, ZeroOnSelfPair) {
    auto fe = small_extractor();
    trust::Rng rng(5);
    D img = rand_image(16, rng);
    EXPECT_DOUBLE_EQ(trust::content_loss(fe, img, img).item(), 0.0);
}

TEST(ContentLoss, Symmetric) {
    auto fe = small_extractor();
    trust::Rng rng(6);
    D a = rand_image(16, rng);
    D b = rand_image(16, rng);
    EXPECT_NEAR(trust::content_loss(fe, a, b).item(), trust::content_loss(fe, b, a).item(),
                1e-12);
}

TEST(ContentLoss, MatchesBruteForceRecomputation) {
    auto fe = small_extractor();
    trust::Rng rng(7);
    D a = rand_image(16, rng);
    D b = rand_image(16, rng);
    const double loss = trust::content_loss(fe, a, b).item();
    auto fa = fe.extract(a).back();
    auto fb = fe.extract(b).back();
    double acc = 0;
    for (std::size_t i = 0; i < fa.numel(); ++i) {
        const double d = fa[i] - fb[i];
        acc += d * d;
    }
    acc /= static_cast<double>(fa.numel());
    EXPECT_NEAR(loss, acc, 1e-12);
}

// ---------------------------------------------------------------------------
// style loss
// ---------------------------------------------------------------------------

TEST(StyleLoss, ZeroWhenBatchIsTheImageItself) {
    auto fe = small_extractor();
    trust::Rng rng(8);
    D img = rand_image(16, rng);
    EXPECT_NEAR(trust::style_loss(fe, img, {img}).item(), 0.0, 1e-20);
}

TEST(StyleLoss, StatsInvariantToSpatialShuffle) {
    // channel statistics do not care where activations sit
    trust::Rng rng(9);
    D map({6, 6, 4});
    for (auto& v : map.values()) v = rng.uniform(0.0, 2.0);
    D shuffled = map.clone();
    std::vector<std::size_t> perm(36);
    for (std::size_t i = 0; i < 36; ++i) perm[i] = i;
    rng.shuffle(perm);
    for (std::size_t p = 0; p < 36; ++p)
        for (std::size_t c = 0; c < 4; ++c) shuffled[p * 4 + c] = map[perm[p] * 4 + c];
    D sa = trust::channel_stats(map);
    D sb = trust::channel_stats(shuffled);
    for (std::size_t i = 0; i < sa.numel(); ++i) EXPECT_NEAR(sa[i], sb[i], 1e-12);
}

TEST(StyleLoss, SingleChannelMeanGapContribution) {
    // mu_hat = 0.5 vs mu_t = 0.3 with equal sigma contributes exactly 0.04
    D a({4, 4, 1}, 0.5);
    D b({4, 4, 1}, 0.3);
    D sa = trust::channel_stats(a);
    D sb = trust::channel_stats(b);
    D d = trust::sub(sa, sb);
    EXPECT_NEAR(trust::sum_all(trust::mul(d, d)).item(), 0.04, 1e-12);
}

TEST(StyleLoss, NonNegativeOnRandomPairs) {
    auto fe = small_extractor();
    trust::Rng rng(10);
    for (int t = 0; t < 5; ++t) {
        D img = rand_image(16, rng);
        std::vector<D> batch{rand_image(16, rng), rand_image(16, rng)};
        EXPECT_GE(trust::style_loss(fe, img, batch).item(), 0.0);
    }
}

// ---------------------------------------------------------------------------
// behavior mirror loss
// ---------------------------------------------------------------------------

TEST(BehaviorMirror, OneHotDistributionGivesZeroLoss) {
    D probs({1, 2}, {1.0, 0.0});
    EXPECT_LE(trust::cross_entropy_probs(probs, 0).item(), 1e-6);
}

TEST(BehaviorMirror, UniformDistributionGivesLogK) {
    const std::size_t k = 4;
    D probs({1, k}, 1.0 / static_cast<double>(k));
    EXPECT_NEAR(trust::cross_entropy_probs(probs, 2).item(), std::log(static_cast<double>(k)),
                1e-9);
}

TEST(BehaviorMirror, FrozenDownstreamGetsNoGradient) {
    auto ds = frozen_downstream();
    trust::Rng rng(11);
    D img = rand_image(16, rng);
    img.set_requires_grad(true);
    trust::Tape<double> tape;
    tape.backward(trust::behavior_mirror_loss(img, 1, ds));
    for (auto& p : ds.named_params()) {
        for (double g : p.tensor.grad()) EXPECT_DOUBLE_EQ(g, 0.0);
    }
    double gsum = 0;
    for (double g : img.grad()) gsum += std::abs(g);
    EXPECT_GT(gsum, 0.0);
}

TEST(BehaviorMirror, UnfrozenDownstreamIsContractError) {
    DownstreamConfig cfg;
    cfg.resolution = 16;
    cfg.patch = 4;
    cfg.embed_dim = 8;
    cfg.layers = 1;
    cfg.heads = 2;
    DownstreamModel<double> ds(cfg, 1);  // not frozen
    D img({16, 16, 3}, 0.5);
    EXPECT_THROW(trust::behavior_mirror_loss(img, 0, ds), trust::ContractError);
}

// ---------------------------------------------------------------------------
// total loss
// ---------------------------------------------------------------------------

TEST(TotalLoss, BreakdownSumsToTotal) {
    auto fe = small_extractor();
    auto ds = frozen_downstream();
    trust::Rng rng(12);
    D xhat = rand_image(16, rng);
    D src = rand_image(16, rng);
    std::vector<D> batch{rand_image(16, rng), rand_image(16, rng)};
    auto lb = trust::total_loss(fe, xhat, src, batch, 1, ds, LossWeights{});
    EXPECT_TRUE(lb.behavior_active);
    EXPECT_NEAR(lb.total_value(), lb.content + lb.style + lb.behavior, 1e-6);
}

TEST(TotalLoss, ZeroBehaviorWeightLeavesContentPlusStyle) {
    auto fe = small_extractor();
    auto ds = frozen_downstream();
    trust::Rng rng(13);
    D xhat = rand_image(16, rng);
    D src = rand_image(16, rng);
    std::vector<D> batch{rand_image(16, rng)};
    LossWeights w;
    w.behavior = 0.0;
    auto lb = trust::total_loss(fe, xhat, src, batch, 1, ds, w);
    EXPECT_NEAR(lb.total_value(), lb.content + lb.style, 1e-9);
}

TEST(TotalLoss, UnlabeledSampleSkipsBehaviorTerm) {
    auto fe = small_extractor();
    auto ds = frozen_downstream();
    trust::Rng rng(14);
    D xhat = rand_image(16, rng);
    D src = rand_image(16, rng);
    std::vector<D> batch{rand_image(16, rng)};
    auto lb = trust::total_loss(fe, xhat, src, batch, std::nullopt, ds, LossWeights{});
    EXPECT_FALSE(lb.behavior_active);
    EXPECT_DOUBLE_EQ(lb.behavior, 0.0);
    EXPECT_NEAR(lb.total_value(), lb.content + lb.style, 1e-9);
}

TEST(TotalLoss, NegativeWeightsAreConfigError) {
    auto fe = small_extractor();
    auto ds = frozen_downstream();
    D xhat({16, 16, 3}, 0.5);
    D src({16, 16, 3}, 0.5);
    LossWeights w;
    w.style = -1.0;
    EXPECT_THROW(trust::total_loss(fe, xhat, src, {src}, 0, ds, w), trust::ConfigError);
}

// ---------------------------------------------------------------------------
// gradients
// ---------------------------------------------------------------------------

TEST(LossGradients, FiniteDifferenceAtSixteenPixels) {
    auto fe = small_extractor();
    auto ds = frozen_downstream();
    trust::Rng rng(15);
    D src = rand_image(16, rng);
    std::vector<D> batch{rand_image(16, rng), rand_image(16, rng)};
    D point = rand_image(16, rng);

    auto content = [&](const D& x) { return trust::content_loss(fe, x, src); };
    auto style = [&](const D& x) { return trust::style_loss(fe, x, batch); };
    auto behavior = [&](const D& x) { return trust::behavior_mirror_loss(x, 1, ds); };
    EXPECT_LE(trust::finite_diff_check<double>(content, point, 1e-5), 1e-4);
    EXPECT_LE(trust::finite_diff_check<double>(style, point, 1e-5), 1e-4);
    EXPECT_LE(trust::finite_diff_check<double>(behavior, point, 1e-5), 1e-4);
}
