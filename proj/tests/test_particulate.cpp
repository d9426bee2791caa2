#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace nimbus;
using namespace nimbus::testing;

TEST(Residual, PerfectStaticExplanationIsZero) {
    const ImageBuffer a = random_image(6, 7, 3, 1);
    const ParticulateLayer l = extract_residual(a, a);
    for (double v : l.residual.values()) EXPECT_EQ(v, 0.0);
}

TEST(Residual, DarkerInputClipsToZero) {
    const ImageBuffer con = random_image(6, 7, 3, 2, 0.5, 1.0);
    const ImageBuffer in = random_image(6, 7, 3, 3, 0.0, 0.49);
    const ParticulateLayer l = extract_residual(in, con);
    for (double v : l.residual.values()) EXPECT_EQ(v, 0.0);
}

TEST(Residual, BrightStreakIsIsolated) {
    const ImageBuffer con(8, 8, 3, 0.3);
    ImageBuffer in = con;
    for (int y = 0; y < 8; ++y)
        for (int c = 0; c < 3; ++c) in.at(y, 4, c) += 0.4;
    const ParticulateLayer l = extract_residual(in, con);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x)
            for (int c = 0; c < 3; ++c) {
                if (x == 4) EXPECT_NEAR(l.residual.at(y, x, c), 0.4, 1e-15);
                else EXPECT_EQ(l.residual.at(y, x, c), 0.0);
            }
}

TEST(Residual, ShapeMismatchThrows) {
    EXPECT_THROW(extract_residual(ImageBuffer(4, 4, 3), ImageBuffer(4, 5, 3)), InvalidInput);
    EXPECT_THROW(compose_degraded(ImageBuffer(4, 4, 3), ParticulateLayer{0, ImageBuffer(4, 4, 1), 0}), InvalidInput);
}

TEST(Compose, ZeroResidualIsIdentity) {
    const ImageBuffer con = random_image(5, 5, 3, 4);
    EXPECT_EQ(compose_degraded(con, ParticulateLayer{0, ImageBuffer(5, 5, 3), 0}), con);
}

// con + (in - con) rounds twice, so the round trip is exact when the
// subtraction is exact (con >= in / 2) and within one ulp of in otherwise.
TEST(Compose, RoundTripIsElementwiseMax) {
    for (std::uint64_t s = 0; s < 20; ++s) {
        const ImageBuffer in = random_image(9, 8, 3, 100 + s), con = random_image(9, 8, 3, 200 + s);
        const ImageBuffer deg = compose_degraded(con, extract_residual(in, con));
        for (std::size_t i = 0; i < in.size(); ++i) {
            const double m = std::max(in[i], con[i]);
            if (in[i] <= con[i] || con[i] >= 0.5 * in[i]) {
                EXPECT_EQ(deg[i], m);
            } else {
                EXPECT_LE(std::abs(deg[i] - m), std::nextafter(m, 2.0) - m);
            }
            EXPECT_GE(deg[i], std::min(in[i], con[i]));
        }
    }
}

TEST(Compose, MatchesDirectSum) {
    const ImageBuffer con = random_image(5, 6, 3, 5);
    const ParticulateLayer l{0, random_image(5, 6, 3, 6), 0};
    const ImageBuffer deg = compose_degraded(con, l);
    for (std::size_t i = 0; i < deg.size(); ++i) EXPECT_EQ(deg[i], con[i] + l.residual[i]);
}

TEST(Refresh, OffScheduleLeavesLayersUnchanged) {
    std::vector<ImageBuffer> inputs = {random_image(4, 4, 3, 7), random_image(4, 4, 3, 8)};
    std::vector<ParticulateLayer> layers = {extract_residual(inputs[0], ImageBuffer(4, 4, 3), 0),
                                            extract_residual(inputs[1], ImageBuffer(4, 4, 3), 1)};
    const auto before = layers;
    int calls = 0;
    auto render = [&](std::size_t) {
        ++calls;
        return ImageBuffer(4, 4, 3, 0.5);
    };
    EXPECT_FALSE(refresh_all(layers, inputs, render, 150, 100));
    EXPECT_EQ(layers, before);
    EXPECT_EQ(calls, 0);
}

TEST(Refresh, OnScheduleRecomputesFromCurrentModel) {
    std::vector<ImageBuffer> inputs = {random_image(4, 4, 3, 9), random_image(4, 4, 3, 10)};
    std::vector<ParticulateLayer> layers(2);
    std::vector<ImageBuffer> current = {random_image(4, 4, 3, 11), random_image(4, 4, 3, 12)};
    auto render = [&](std::size_t v) { return current[v]; };
    EXPECT_TRUE(refresh_all(layers, inputs, render, 200, 100));
    for (std::size_t v = 0; v < 2; ++v) {
        EXPECT_EQ(layers[v].residual, extract_residual(inputs[v], current[v]).residual);
        EXPECT_EQ(layers[v].last_refresh, 200);
        EXPECT_EQ(layers[v].view, v);
    }
    const auto once = layers;
    refresh_all(layers, inputs, render, 200, 100);
    EXPECT_EQ(layers, once);
}
