#include <gtest/gtest.h>

#include <cmath>

#include "rustseg/refine.hpp"
#include "rustseg/synth.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace rustseg;
using rustseg::testing::random_image;
using rustseg::testing::random_mask;
using namespace rustseg::testing;

namespace {

Heatmap heatmap2x2(float a, float b, float c, float d) {
    Heatmap h(2);
    h.values = {a, b, c, d};
    return h;
}

FloatMap as_float_map(const Heatmap& h) { return FloatMap{h.side, h.side, h.values}; }

MaskU8 argmax_mask(const MaskU8& m) {
    MaskU8 out(m.height(), m.width());
    for (std::size_t i = 0; i < m.pixel_count(); ++i) out.pixels()[i] = m.pixels()[i] >= 128 ? 255 : 0;
    return out;
}

double max_abs_diff(const Marginals& a, const Marginals& b) {
    double d = 0;
    for (std::size_t i = 0; i < a.q.size(); ++i) d = std::max(d, std::abs(a.q[i] - b.q[i]));
    return d;
}

std::size_t ones(const BinaryMask& m) { return std::count(m.begin(), m.end(), std::uint8_t{1}); }

}  // namespace

// --- threshold filter -----------------------------------------------------

TEST(DynamicThreshold, Examples) {
    const auto h = heatmap2x2(0.2f, 0.4f, 0.6f, 0.8f);
    const double t = dynamic_threshold(h);
    EXPECT_NEAR(t, 0.7, 1e-6);
    const auto m = apply_threshold(as_float_map(h), t);
    EXPECT_EQ(std::vector<std::uint8_t>(m.pixels().begin(), m.pixels().end()),
              (std::vector<std::uint8_t>{0, 0, 0, 204}));

    EXPECT_NEAR(dynamic_threshold(heatmap2x2(1.f, 0.f, 0.f, 0.f)), 0.25, 1e-12);
}

TEST(DynamicThreshold, ConstantHeatmap) {
    const auto c = heatmap2x2(0.6f, 0.6f, 0.6f, 0.6f);
    EXPECT_DOUBLE_EQ(dynamic_threshold(c), 1.0);
    EXPECT_EQ(count_nonzero(apply_threshold(as_float_map(c), dynamic_threshold(c))), 0u);

    const auto one = heatmap2x2(1.f, 1.f, 1.f, 1.f);
    EXPECT_EQ(count_nonzero(apply_threshold(as_float_map(one), dynamic_threshold(one))), 4u);
}

TEST(ApplyThreshold, HalfRoundsUp) {
    const FloatMap m{1, 1, {0.5f}};
    EXPECT_EQ(apply_threshold(m, 0.5).at(0, 0), 128);
}

TEST(ApplyThreshold, AboveMaxAndZero) {
    Rng rng(5);
    FloatMap m{9, 7, {}};
    for (int i = 0; i < 63; ++i) m.values.push_back(static_cast<float>(rng.uniform()));
    const float mx = *std::max_element(m.values.begin(), m.values.end());
    EXPECT_EQ(count_nonzero(apply_threshold(m, mx + 1e-3)), 0u);

    const auto all = apply_threshold(m, 0.0);
    for (int i = 0; i < 63; ++i) {
        EXPECT_EQ(all.pixels()[i], static_cast<std::uint8_t>(std::floor(255.0 * m.values[i] + 0.5)));
    }
}

TEST(ApplyThreshold, Invariants) {
    Rng rng(8);
    for (int trial = 0; trial < 50; ++trial) {
        FloatMap m{6, 11, {}};
        for (int i = 0; i < 66; ++i) m.values.push_back(static_cast<float>(rng.uniform()));
        const double t = rng.uniform();
        const auto out = apply_threshold(m, t);
        for (int i = 0; i < 66; ++i) {
            const double v = m.values[i];
            EXPECT_LE(out.pixels()[i], std::floor(255.0 * v + 0.5));
            if (out.pixels()[i] != 0) {
                EXPECT_GE(v, t);
            }
            if (v < t) {
                EXPECT_EQ(out.pixels()[i], 0);
            }
        }
    }
}

// --- unary ----------------------------------------------------------------

TEST(MaskToUnary, Probabilities) {
    MaskU8 m(1, 3);
    m.at(0, 0) = 255;
    m.at(0, 1) = 0;
    m.at(0, 2) = 51;
    const auto u = mask_to_unary(m, 0.05);
    EXPECT_NEAR(std::exp(-u.energy[1]), 0.95, 1e-12);
    EXPECT_NEAR(std::exp(-u.energy[0]), 0.05, 1e-12);
    EXPECT_NEAR(std::exp(-u.energy[3]), 0.05, 1e-12);
    EXPECT_NEAR(std::exp(-u.energy[5]), 0.05 + 0.9 * 0.2, 1e-12);
    EXPECT_NEAR(std::exp(-u.energy[4]) + std::exp(-u.energy[5]), 1.0, 1e-12);
}

TEST(MaskToUnary, RejectsBadEps) {
    MaskU8 m(2, 2);
    EXPECT_THROW(mask_to_unary(m, 0.5), ConfigError);
    EXPECT_THROW(mask_to_unary(m, 0.0), ConfigError);
}

// --- CRF ------------------------------------------------------------------

TEST(Crf, ZeroCompatIsArgmax) {
    const auto img = random_image(20, 13, 1);
    const auto mask = random_mask(20, 13, 2);
    CrfParams p;
    p.appearance_compat = 0;
    p.smooth_compat = 0;
    for (int epochs : {0, 1, 7, 25}) {
        p.epochs = epochs;
        EXPECT_EQ(crf_refine(img, mask, p), argmax_mask(mask)) << epochs;
    }
}

TEST(Crf, ZeroEpochsIsArgmax) {
    const auto img = random_image(12, 12, 3);
    const auto mask = random_mask(12, 12, 4);
    CrfParams p;
    p.epochs = 0;
    EXPECT_EQ(crf_refine(img, mask, p), argmax_mask(mask));
}

TEST(Crf, LabelSymmetry) {
    const auto img = random_image(24, 18, 5);
    const auto mask = random_mask(24, 18, 6);
    for (auto backend : {CrfBackend::exact, CrfBackend::window, CrfBackend::lattice}) {
        for (double compat : {0.02, 1.0, 10.0}) {
            CrfParams p;
            p.appearance_compat = compat;
            p.smooth_compat = compat / 3;
            p.epochs = 6;
            CrfOptions opt;
            opt.backend = backend;
            const auto u = mask_to_unary(mask, p.unary_eps);
            const auto a = crf_marginals(img, u, p, opt);
            const auto b = crf_marginals(img, u.swapped(), p, opt);
            const auto ma = a.to_mask(), mb = b.to_mask();
            for (std::size_t i = 0; i < ma.pixel_count(); ++i) {
                ASSERT_EQ(a.q[2 * i], b.q[2 * i + 1]);
                ASSERT_EQ(a.q[2 * i + 1], b.q[2 * i]);
                if (a.q[2 * i] != a.q[2 * i + 1]) {
                    ASSERT_EQ(ma.pixels()[i], 255 - mb.pixels()[i]);
                }
            }
        }
    }
}

TEST(Crf, TwoColorSeedGrowsToRedHalf) {
    const auto img = two_color(16, 16, {255, 0, 0}, {0, 0, 255});
    MaskU8 seed(16, 16);
    int covered = 0;
    for (int y = 0; y < 16 && covered < 77; ++y)
        for (int x = 0; x < 8 && covered < 77; ++x, ++covered) seed.at(y, x) = 255;  // 77 of 128 red pixels

    const CrfParams p;
    CrfOptions exact;
    exact.backend = CrfBackend::exact;
    const auto out = crf_refine(img, seed, p, exact);

    MaskU8 red_half(16, 16);
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 8; ++x) red_half.at(y, x) = 255;
    EXPECT_EQ(out, red_half);
    EXPECT_EQ(oracle_mask(img, seed, p), red_half);

    const auto q = crf_marginals(img, mask_to_unary(seed, p.unary_eps), p, exact);
    const auto ref = oracle_marginals(img, seed, p);
    for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_NEAR(q.q[2 * i + 1], ref[i], 1e-9);
}

TEST(Crf, UniformColorMatchesOracle) {
    const RgbImage img(16, 16, 90);
    MaskU8 seed(16, 16);
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 8; ++x) seed.at(y, x) = 255;
    CrfOptions exact;
    exact.backend = CrfBackend::exact;
    for (double eps : {0.05, 0.2, 0.4}) {
        CrfParams p;
        p.smooth_compat = 20;
        p.smooth_sigma_xy = 6;
        p.unary_eps = eps;
        p.epochs = 10;
        EXPECT_EQ(crf_refine(img, seed, p, exact), oracle_mask(img, seed, p)) << eps;
    }
}

TEST(Crf, OracleMatchesExactOnRandomImages) {
    const auto img = random_image(11, 13, 7);
    const auto mask = random_mask(11, 13, 8);
    CrfParams p;
    p.appearance_compat = 0.05;
    p.smooth_compat = 0.1;
    p.appearance_sigma_rgb = 60;
    p.epochs = 5;
    CrfOptions exact;
    exact.backend = CrfBackend::exact;
    const auto q = crf_marginals(img, mask_to_unary(mask, p.unary_eps), p, exact);
    const auto ref = oracle_marginals(img, mask, p);
    for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_NEAR(q.q[2 * i + 1], ref[i], 1e-9);
}

namespace {

struct RegressionCase {
    RgbImage image;
    MaskU8 mask;
};

std::vector<RegressionCase> regression_images() {
    std::vector<RegressionCase> out;
    for (const auto& s : synth_dataset(SynthSpec::for_side(64, 4, 21))) {
        MaskU8 m = s.truth;
        if (count_nonzero(m) == 0) {
            for (int y = 20; y < 44; ++y)
                for (int x = 8; x < 30; ++x) m.at(y, x) = 180;
        }
        out.push_back({s.sample.image, m});
    }
    out.push_back({random_image(64, 64, 31), random_mask(64, 64, 32)});
    out.push_back({random_image(17, 23, 33), random_mask(17, 23, 34)});
    out.push_back({two_color(32, 40, {200, 120, 40}, {30, 60, 90}), random_mask(32, 40, 35)});
    return out;
}

}  // namespace

TEST(Crf, WindowBackendMatchesExact) {
    CrfParams defaults;
    CrfParams weak;
    weak.appearance_compat = 0.001;
    weak.smooth_compat = 0.05;
    weak.epochs = 5;
    CrfParams mid;
    mid.appearance_compat = 0.01;
    mid.smooth_compat = 0.3;
    mid.epochs = 8;
    CrfOptions exact, window;
    exact.backend = CrfBackend::exact;
    window.backend = CrfBackend::window;
    for (const auto& c : regression_images()) {
        for (const auto& p : {defaults, weak, mid}) {
            const auto u = mask_to_unary(c.mask, p.unary_eps);
            EXPECT_LT(max_abs_diff(crf_marginals(c.image, u, p, exact), crf_marginals(c.image, u, p, window)), 1e-3);
        }
    }
}

TEST(Crf, LatticeBackendMatchesExactAtDefaults) {
    const CrfParams p;
    CrfOptions exact, lattice;
    exact.backend = CrfBackend::exact;
    lattice.backend = CrfBackend::lattice;
    for (const auto& c : regression_images()) {
        const auto u = mask_to_unary(c.mask, p.unary_eps);
        EXPECT_LT(max_abs_diff(crf_marginals(c.image, u, p, exact), crf_marginals(c.image, u, p, lattice)), 1e-3);
    }
}

TEST(Crf, AutoUsesExactOnSmallFrames) {
    EXPECT_EQ(resolve_backend(CrfBackend::automatic, 64 * 64), CrfBackend::exact);
    EXPECT_EQ(resolve_backend(CrfBackend::automatic, 64 * 64 + 1), CrfBackend::lattice);
    EXPECT_EQ(resolve_backend(CrfBackend::window, 10), CrfBackend::window);
}

TEST(Crf, EpochCallback) {
    const auto img = random_image(8, 8, 9);
    const auto mask = random_mask(8, 8, 10);
    CrfParams p;
    p.epochs = 4;
    std::vector<int> seen;
    CrfOptions opt;
    opt.on_epoch = [&](int e, const std::vector<double>& q) {
        seen.push_back(e);
        EXPECT_EQ(q.size(), 128u);
    };
    crf_refine(img, mask, p, opt);
    EXPECT_EQ(seen, (std::vector<int>{1, 2, 3, 4}));
}

TEST(Crf, Errors) {
    const CrfParams p;
    EXPECT_THROW(crf_refine(RgbImage(4, 4), MaskU8(4, 5), p), DimensionError);
    CrfParams bad;
    bad.smooth_sigma_xy = 0;
    EXPECT_THROW(crf_refine(RgbImage(4, 4), MaskU8(4, 4), bad), ConfigError);
    bad = CrfParams{};
    bad.epochs = -1;
    EXPECT_THROW(crf_refine(RgbImage(4, 4), MaskU8(4, 4), bad), ConfigError);
}

// --- K-means --------------------------------------------------------------

TEST(KMeans, BlackAndWhiteSeparateExactly) {
    RgbImage img(10, 10);
    Rng rng(3);
    BinaryMask white(100);
    for (std::size_t i = 0; i < 100; ++i) {
        white[i] = rng.below(2);
        for (int c = 0; c < 3; ++c) img.pixels()[3 * i + c] = white[i] ? 255 : 0;
    }
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto r = kmeans2(img, seed);
        EXPECT_FALSE(r.degenerate);
        const int w = r.clusters[0][0] == white[0] ? 0 : 1;
        EXPECT_EQ(r.clusters[w], white);
    }
}

TEST(KMeans, Partition) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto img = random_image(15, 9, 100 + seed);
        const auto r = kmeans2(img, seed);
        for (std::size_t i = 0; i < img.pixel_count(); ++i) EXPECT_EQ(r.clusters[0][i] + r.clusters[1][i], 1);
    }
}

TEST(KMeans, ThreeColorsMatchBestMerge) {
    const std::array<std::array<double, 3>, 3> colors{{{255, 0, 0}, {0, 255, 0}, {0, 0, 255}}};
    RgbImage img(6, 9);
    for (int y = 0; y < 6; ++y)
        for (int x = 0; x < 9; ++x)
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = static_cast<std::uint8_t>(colors[x / 3][c]);
    // SSE of merging two equally sized colour groups of n pixels each
    const double n = 18;
    double best = 1e300;
    for (int a = 0; a < 3; ++a)
        for (int b = a + 1; b < 3; ++b) {
            double d2 = 0;
            for (int c = 0; c < 3; ++c) d2 += (colors[a][c] - colors[b][c]) * (colors[a][c] - colors[b][c]);
            best = std::min(best, 2 * n * d2 / 4);
        }
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto r = kmeans2(img, seed);
        EXPECT_NEAR(r.sse_history.back(), best, 1e-6 * best);
    }
}

TEST(KMeans, MonotoneDescent) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto img = random_image(24, 24, 500 + seed);
        const auto r = kmeans2(img, seed);
        ASSERT_FALSE(r.sse_history.empty());
        for (std::size_t i = 1; i < r.sse_history.size(); ++i) {
            EXPECT_LE(r.sse_history[i], r.sse_history[i - 1] * (1 + 1e-12)) << "seed " << seed << " iter " << i;
        }
        EXPECT_LE(r.iterations, kKMeansMaxIterations);
    }
}

TEST(KMeans, SingleColorIsDegenerate) {
    const RgbImage img(5, 7, 77);
    const auto r = kmeans2(img, 1);
    EXPECT_TRUE(r.degenerate);
    EXPECT_TRUE(ones(r.clusters[0]) == 35 || ones(r.clusters[1]) == 35);
}

TEST(KMeans, Deterministic) {
    const auto img = random_image(16, 16, 42);
    EXPECT_EQ(kmeans2(img, 9).clusters, kmeans2(img, 9).clusters);
}

TEST(SelectCluster, Rules) {
    std::array<BinaryMask, 2> cl{BinaryMask(100, 0), BinaryMask(100, 0)};
    for (int i = 0; i < 100; ++i) (i < 40 ? cl[0] : cl[1])[i] = 1;

    MaskU8 inside(10, 10);
    for (int i = 0; i < 10; ++i) inside.pixels()[i] = 200;
    EXPECT_EQ(select_cluster(cl, inside), 0);

    MaskU8 split(10, 10);
    for (int i = 30; i < 40; ++i) split.pixels()[i] = 1;   // 10 in cluster 0
    for (int i = 40; i < 50; ++i) split.pixels()[i] = 9;   // 10 in cluster 1
    EXPECT_EQ(select_cluster(cl, split), 0);               // tie -> smaller (40 vs 60)

    MaskU8 major(10, 10);
    for (int i = 33; i < 43; ++i) major.pixels()[i] = 50;  // 7 in cluster 0, 3 in cluster 1
    EXPECT_EQ(select_cluster(cl, major), 0);
    MaskU8 minor(10, 10);
    for (int i = 37; i < 47; ++i) minor.pixels()[i] = 50;  // 3 / 7
    EXPECT_EQ(select_cluster(cl, minor), 1);

    EXPECT_THROW(select_cluster(cl, MaskU8(10, 10)), ConfigError);
    EXPECT_THROW(select_cluster(cl, MaskU8(5, 5)), DimensionError);
}

// --- erosion --------------------------------------------------------------

TEST(Erode, SquareToCenter) {
    BinaryMask m(81, 0);
    for (int y = 2; y < 7; ++y)
        for (int x = 2; x < 7; ++x) m[y * 9 + x] = 1;
    const auto e = erode_diamond5(m, 9, 9);
    EXPECT_EQ(ones(e), 1u);
    EXPECT_EQ(e[4 * 9 + 4], 1);
}

TEST(Erode, FullFrameLosesBorderBand) {
    const int h = 10, w = 12;
    const BinaryMask full(h * w, 1);
    const auto e = erode_diamond5(full, h, w);
    EXPECT_EQ(e, brute_erode(full, h, w));
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const bool inner = y >= 2 && y < h - 2 && x >= 2 && x < w - 2;
            EXPECT_EQ(e[y * w + x], inner) << y << "," << x;
        }
}

TEST(Erode, EmptyStaysEmpty) { EXPECT_EQ(ones(erode_diamond5(BinaryMask(30, 0), 5, 6)), 0u); }

TEST(Erode, AntiExtensiveAndMatchesOracle) {
    Rng rng(77);
    for (int trial = 0; trial < 1000; ++trial) {
        const int h = 1 + static_cast<int>(rng.below(20)), w = 1 + static_cast<int>(rng.below(20));
        const double density = rng.uniform(0.3, 1.0);
        BinaryMask m(static_cast<std::size_t>(h) * w);
        for (auto& v : m) v = rng.uniform() < density;
        const auto e = erode_diamond5(m, h, w);
        for (std::size_t i = 0; i < m.size(); ++i) ASSERT_LE(e[i], m[i]);
        ASSERT_EQ(e, brute_erode(m, h, w));
    }
}

TEST(Erode, SizeMismatch) { EXPECT_THROW(erode_diamond5(BinaryMask(10), 3, 3), DimensionError); }

// --- advanced path --------------------------------------------------------

TEST(Advanced, WholeFrameClusterEqualsShortCrf) {
    const RgbImage img(20, 20, 140);
    MaskU8 seed(20, 20);
    Rng rng(4);
    for (auto& v : seed.pixels()) v = static_cast<std::uint8_t>(1 + rng.below(255));
    const CrfParams p;
    const auto r = advanced_refine(img, seed, p, 1);
    EXPECT_TRUE(r.kmeans_degenerate);
    EXPECT_FALSE(r.empty);

    CrfParams ten = p;
    ten.epochs = 10;
    EXPECT_EQ(r.mask, crf_refine(img, seed, ten));

    BinaryMask support(400, 1);
    const auto eroded = erode_diamond5(support, 20, 20);
    for (std::size_t i = 0; i < 400; ++i) EXPECT_EQ(r.trimmed.pixels()[i], eroded[i] ? seed.pixels()[i] : 0);
}

TEST(Advanced, ThinSeedOnWrongColorIsEmpty) {
    const auto img = two_color(20, 20, {220, 40, 20}, {20, 40, 220});
    MaskU8 seed(20, 20);
    for (int y = 2; y < 18; ++y)
        for (int x = 13; x < 16; ++x) seed.at(y, x) = 255;  // 3-pixel band inside the blue half
    const auto r = advanced_refine(img, seed, CrfParams{}, 3);
    EXPECT_TRUE(r.empty);
    EXPECT_EQ(count_nonzero(r.mask), 0u);
}

TEST(Advanced, SpecklesRemovedBeforeCrf) {
    const auto img = two_color(24, 24, {200, 30, 30}, {30, 30, 200});
    MaskU8 seed(24, 24);
    for (int y = 4; y < 20; ++y)
        for (int x = 1; x < 11; ++x) seed.at(y, x) = 230;
    const std::vector<std::pair<int, int>> speckles{{3, 15}, {10, 18}, {20, 21}, {7, 13}};
    for (auto [y, x] : speckles) seed.at(y, x) = 255;

    const auto r = advanced_refine(img, seed, CrfParams{}, 5);
    EXPECT_FALSE(r.empty);
    for (auto [y, x] : speckles) EXPECT_EQ(r.trimmed.at(y, x), 0);
    for (int y = 0; y < 24; ++y)
        for (int x = 12; x < 24; ++x) EXPECT_EQ(r.mask.at(y, x), 0);

    // trimmed support is exactly the eroded red-side seed
    BinaryMask red_seed(576, 0);
    for (int y = 4; y < 20; ++y)
        for (int x = 1; x < 11; ++x) red_seed[y * 24 + x] = 1;
    const auto eroded = brute_erode(red_seed, 24, 24);
    for (std::size_t i = 0; i < 576; ++i) EXPECT_EQ(r.trimmed.pixels()[i] != 0, eroded[i] != 0);
}
