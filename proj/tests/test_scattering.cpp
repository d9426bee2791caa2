#include "test_util.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace nimbus;
using namespace nimbus::testing;

namespace {

ExtinctionGrid random_grid(std::array<int, 3> res, std::uint64_t seed, double lo = -2.0, double hi = 1.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> raw(static_cast<std::size_t>(res[0]) * res[1] * res[2]);
    for (auto& v : raw) v = u(rng);
    return ExtinctionGrid(Aabb{Vec3(-1, -1, 1), Vec3(1, 1, 4)}, res, raw);
}

ExtinctionGrid constant_grid(double raw, std::array<int, 3> res = {4, 4, 4}) {
    return ExtinctionGrid(Aabb{Vec3(-1, -1, 1), Vec3(1, 1, 4)}, res,
                          std::vector<double>(static_cast<std::size_t>(res[0]) * res[1] * res[2], raw));
}

// Fine Riemann sum of beta along the ray, independent of the sampler.
double fine_transmittance(const ExtinctionGrid& g, const Vec3& o, const Vec3& d, double t0, double t1, int n) {
    double od = 0.0;
    const double h = (t1 - t0) / n;
    for (int i = 0; i < n; ++i) od += g.beta(o + (t0 + (i + 0.5) * h) * d) * h;
    return std::exp(-od);
}

}  // namespace

TEST(Aabb, SlabIntersection) {
    const Aabb box{Vec3(-1, -1, -1), Vec3(1, 1, 1)};
    const auto hit = box.intersect(Vec3(0, 0, -5), Vec3(0, 0, 1));
    ASSERT_TRUE(hit.has_value());
    EXPECT_DOUBLE_EQ(hit->first, 4.0);
    EXPECT_DOUBLE_EQ(hit->second, 6.0);
    EXPECT_FALSE(box.intersect(Vec3(3, 0, -5), Vec3(0, 0, 1)).has_value());
    const auto inside = box.intersect(Vec3(0, 0, 0), Vec3(1, 0, 0));
    ASSERT_TRUE(inside.has_value());
    EXPECT_DOUBLE_EQ(inside->first, 0.0);
}

TEST(Grid, BetaIsNonNegativeAndZeroOutside) {
    const ExtinctionGrid g = random_grid({5, 4, 6}, 1, -10, 10);
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(-3, 6);
    for (int i = 0; i < 500; ++i) {
        const Vec3 x(u(rng), u(rng), u(rng));
        const double b = g.beta(x);
        EXPECT_GE(b, 0.0);
        if (!g.aabb().contains(x)) EXPECT_EQ(b, 0.0);
    }
}

TEST(Grid, StencilWeightsPartitionUnity) {
    const ExtinctionGrid g = random_grid({4, 5, 3}, 3);
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(0, 1);
    for (int i = 0; i < 200; ++i) {
        const Vec3 x(-1 + 2 * u(rng), -1 + 2 * u(rng), 1 + 3 * u(rng));
        const GridStencil st = g.stencil(x);
        double s = 0.0;
        for (double w : st.weight) {
            EXPECT_GE(w, 0.0);
            s += w;
        }
        EXPECT_NEAR(s, 1.0, 1e-14);
    }
}

TEST(Grid, NodeCentersReproduceNodeValues) {
    const ExtinctionGrid g = random_grid({4, 4, 4}, 5);
    const Vec3 cell = g.cell_size();
    const Vec3 x = g.aabb().lo + Vec3(2.5 * cell[0], 1.5 * cell[1], 3.5 * cell[2]);
    EXPECT_NEAR(g.beta(x), g.node_beta(g.index(2, 1, 3)), 1e-14);
}

TEST(BuildGrid, ExpandsBoundsAboutCenter) {
    GaussianScene scene(2);
    scene[0].mu = Vec3(-1, -1, -1);
    scene[1].mu = Vec3(1, 1, 1);
    const ExtinctionGrid g = build_grid(scene, {8, 8, 8}, 2.0, 7);
    EXPECT_TRUE(g.aabb().lo.isApprox(Vec3::Constant(-2.0)));
    EXPECT_TRUE(g.aabb().hi.isApprox(Vec3::Constant(2.0)));
    const ExtinctionGrid h = build_grid(scene, {8, 8, 8}, 2.0, 7);
    EXPECT_EQ(g.raw(), h.raw());
    double mean = 0.0, var = 0.0;
    for (double v : g.raw()) mean += v;
    mean /= g.raw().size();
    for (double v : g.raw()) var += (v - mean) * (v - mean);
    EXPECT_NEAR(std::sqrt(var / g.raw().size()), 0.01, 0.002);
}

TEST(BuildGrid, PadsDegenerateBounds) {
    GaussianScene scene(3);
    const ExtinctionGrid g = build_grid(scene, {4, 4, 4}, 2.0, 1);
    EXPECT_TRUE(g.aabb().valid());
    EXPECT_NEAR(g.aabb().hi[0] - g.aabb().lo[0], 2.0, 1e-12);
    EXPECT_THROW(build_grid(GaussianScene{}, {4, 4, 4}, 2.0, 1), InvalidInput);
}

TEST(Sampling, SingleMidpoint) {
    const RaySamples rs = sample_interval(Vec3::Zero(), Vec3::UnitZ(), 0.0, 1.0, 1);
    ASSERT_EQ(rs.count(), 1u);
    EXPECT_DOUBLE_EQ(rs.s[0], 0.5);
    EXPECT_DOUBLE_EQ(rs.ds[0], 1.0);
}

TEST(Sampling, StepsPartitionInterval) {
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> u(0, 5);
    for (int i = 0; i < 50; ++i) {
        const double a = u(rng), b = a + 0.1 + u(rng);
        const RaySamples rs = sample_interval(Vec3::Zero(), Vec3::UnitX(), a, b, 1 + static_cast<int>(rng() % 64));
        double s = 0.0;
        for (double d : rs.ds) s += d;
        EXPECT_NEAR(s, b - a, 1e-12);
        for (std::size_t j = 1; j < rs.count(); ++j) EXPECT_GT(rs.s[j] - rs.s[j - 1], 0.0);
    }
}

TEST(Sampling, RayMissingGridIsEmpty) {
    Camera cam = test_camera();
    const Aabb box{Vec3(10, 10, 10), Vec3(11, 11, 11)};
    const RaySamples rs = sample_ray(cam, {8, 8}, 100.0, 64, box);
    EXPECT_EQ(rs.count(), 0u);
    const ExtinctionGrid g = constant_grid(3.0);
    const RayTransmittance tr = transmittance(g, rs);
    EXPECT_EQ(tr.total, 1.0);
    EXPECT_EQ(scattering_weight(tr, rs), 0.0);
}

TEST(Sampling, DirectionIsUnit) {
    const Camera cam = Camera::look_at(Vec3(2, 1, 1), Vec3(0, 0, 0), Vec3(0, 0, 1), 30, 16, 16);
    for (PixelCoord p : {PixelCoord{0, 0}, PixelCoord{7.5, 3.2}, PixelCoord{16, 16}}) {
        EXPECT_NEAR(cam.ray_direction(p).norm(), 1.0, 1e-12);
    }
}

TEST(Transmittance, EmptyMediumIsTransparent) {
    const ExtinctionGrid g = constant_grid(-800.0);
    const RaySamples rs = sample_interval(Vec3(0, 0, 0), Vec3::UnitZ(), 1.0, 4.0, 16);
    const RayTransmittance tr = transmittance(g, rs);
    EXPECT_EQ(tr.total, 1.0);
    for (double t : tr.cumulative) EXPECT_EQ(t, 1.0);
}

TEST(Transmittance, UniformMediumBeerLambert) {
    const ExtinctionGrid g = constant_grid(inverse_softplus(0.7));
    const RaySamples rs = sample_interval(Vec3(0, 0, 0), Vec3::UnitZ(), 1.5, 3.5, 64);
    EXPECT_NEAR(transmittance(g, rs).total, std::exp(-0.7 * 2.0), 1e-12);
}

TEST(Transmittance, ConservationIdentity) {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> u(-1, 1);
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
        const ExtinctionGrid g = random_grid({4, 4, 4}, 100 + i, -3, 3);
        const Vec3 o(u(rng), u(rng), 0.0);
        const Vec3 d = Vec3(0.3 * u(rng), 0.3 * u(rng), 1.0).normalized();
        const RaySamples rs = sample_interval(o, d, 0.5, 4.5 + u(rng), 1 + static_cast<int>(rng() % 64));
        const RayTransmittance tr = transmittance(g, rs);
        worst = std::max(worst, std::abs(tr.total + scattering_weight(tr, rs) - 1.0));
    }
    EXPECT_LE(worst, 1e-12);
}

TEST(Transmittance, CumulativeIsNonIncreasing) {
    const ExtinctionGrid g = random_grid({4, 4, 4}, 10);
    const RaySamples rs = sample_interval(Vec3(0.1, 0.2, 0), Vec3::UnitZ(), 0.5, 4.0, 32);
    const RayTransmittance tr = transmittance(g, rs);
    EXPECT_EQ(tr.cumulative.front(), 1.0);
    for (std::size_t j = 1; j < tr.cumulative.size(); ++j) EXPECT_LE(tr.cumulative[j], tr.cumulative[j - 1]);
    EXPECT_GE(tr.cumulative.back(), tr.total);
}

TEST(Transmittance, AddingExtinctionNeverIncreasesT) {
    ExtinctionGrid g = random_grid({4, 4, 4}, 11);
    const RaySamples rs = sample_interval(Vec3(0.1, 0.2, 0), Vec3::UnitZ(), 0.5, 4.0, 32);
    const double before = transmittance(g, rs).total;
    for (auto& v : g.raw()) v += 0.3;
    EXPECT_LE(transmittance(g, rs).total, before);
}

TEST(Transmittance, ConvergesToFineQuadrature) {
    for (std::uint64_t seed : {12u, 13u, 14u}) {
        const ExtinctionGrid g = random_grid({4, 4, 4}, seed, -1.0, 0.5);
        const Vec3 o(0.05, -0.1, 0.0), d = Vec3(0.1, 0.05, 1.0).normalized();
        const auto hit = g.aabb().intersect(o, d);
        ASSERT_TRUE(hit.has_value());
        const double oracle = fine_transmittance(g, o, d, hit->first, hit->second, 64 * 256);
        auto rel = [&](int k) {
            return std::abs(transmittance(g, sample_interval(o, d, hit->first, hit->second, k)).total - oracle) / oracle;
        };
        EXPECT_LT(rel(64), 0.02);
        EXPECT_LE(rel(256), rel(16));
    }
}

TEST(Transmittance, FiniteForExtremeRawValues) {
    const ExtinctionGrid g = random_grid({4, 4, 4}, 15, -10, 10);
    const RaySamples rs = sample_interval(Vec3(0, 0, 0), Vec3::UnitZ(), 0.5, 4.0, 64);
    const RayTransmittance tr = transmittance(g, rs);
    EXPECT_TRUE(std::isfinite(tr.total));
    EXPECT_TRUE(std::isfinite(scattering_weight(tr, rs)));
}

TEST(Airlight, TwoSampleHandCase) {
    RaySamples rs;
    rs.s = {0.5, 1.5};
    rs.ds = {1.0, 1.0};
    RayTransmittance tr;
    tr.beta = {0.5, 0.5};
    tr.cumulative = {1.0, std::exp(-0.5)};
    const Vec3 p = airlight(tr, rs, Vec3::Ones());
    const double expect = (1 - std::exp(-0.5)) + std::exp(-0.5) * (1 - std::exp(-0.5));
    for (int c = 0; c < 3; ++c) EXPECT_NEAR(p[c], expect, 1e-15);
}

TEST(Airlight, OpaqueLimitReachesColor) {
    const ExtinctionGrid g = constant_grid(60.0);
    const RaySamples rs = sample_interval(Vec3(0, 0, 0), Vec3::UnitZ(), 1.0, 4.0, 64);
    const RayTransmittance tr = transmittance(g, rs);
    const Vec3 a(0.2, 0.6, 0.9);
    EXPECT_LT((airlight(tr, rs, a) - a).norm(), 1e-12);
}

TEST(AirlightNetwork, ZeroHeadGivesHalf) {
    const AirlightNetwork net = AirlightNetwork::create(1);
    const Vec3 a = predict_airlight(net, Vec3(0.2, 0.7, 0.4), 0.3);
    for (int c = 0; c < 3; ++c) EXPECT_EQ(a[c], 0.5);
    EXPECT_EQ(predict_airlight(net, Vec3(0.2, 0.7, 0.4), 0.3), a);
}

TEST(AirlightNetwork, GradientsMatchFiniteDifferences) {
    AirlightNetwork net = AirlightNetwork::create(2);
    std::mt19937_64 rng(3);
    std::normal_distribution<double> n(0, 0.3);
    for (auto& p : net.params()) p += n(rng);
    const std::array<double, 4> in = {0.3, 0.8, 0.1, 0.55};
    const Vec3 w(0.7, -1.3, 0.4);
    AirlightNetwork::Cache cache;
    net.forward(in, &cache);
    std::vector<double> gp(AirlightNetwork::param_count(), 0.0);
    std::array<double, 4> gi{};
    net.backward(cache, w, gp, &gi);
    auto loss = [&] { return w.dot(net.forward(in)); };
    double worst = 0.0;
    for (std::size_t i = 0; i < gp.size(); ++i) {
        worst = std::max(worst, relative_error(gp[i], central_difference(loss, net.params()[i])));
    }
    std::array<double, 4> in2 = in;
    for (int k = 0; k < 4; ++k) {
        const double num = central_difference([&] { return w.dot(net.forward(in2)); }, in2[static_cast<std::size_t>(k)]);
        worst = std::max(worst, relative_error(gi[static_cast<std::size_t>(k)], num));
    }
    EXPECT_LT(worst, kFdTolerance);
}

TEST(AirlightNetwork, OutputInUnitInterval) {
    AirlightNetwork net = AirlightNetwork::create(4);
    for (auto& p : net.params()) p *= 5.0;
    net.set_output_bias(Vec3(3, -3, 0));
    const Vec3 a = predict_airlight(net, Vec3(1, 0, 0.5), 0.9);
    for (int c = 0; c < 3; ++c) {
        EXPECT_GT(a[c], 0.0);
        EXPECT_LT(a[c], 1.0);
    }
}

TEST(MediumRenderer, GradientsMatchFiniteDifferences) {
    ExtinctionGrid grid = random_grid({5, 4, 6}, 16, -1.5, 0.5);
    AirlightNetwork net = AirlightNetwork::create(17);
    std::mt19937_64 rng(18);
    std::normal_distribution<double> n(0, 0.2);
    for (auto& p : net.params()) p += n(rng);
    const Camera cam = test_camera(12, 10);
    ImageBuffer depth = random_image(10, 12, 1, 19, 2.0, 3.8);
    const ImageBuffer deg = random_image(10, 12, 3, 20);
    const ImageBuffer wt = random_image(10, 12, 1, 21, -1, 1);
    const ImageBuffer wp = random_image(10, 12, 3, 22, -1, 1);
    auto loss = [&] {
        MediumRenderer m(16);
        const MediumOutput o = m.render(grid, net, cam, depth, deg);
        double s = 0.0;
        for (std::size_t i = 0; i < wt.size(); ++i) s += wt[i] * o.transmittance[i];
        for (std::size_t i = 0; i < wp.size(); ++i) s += wp[i] * o.airlight[i];
        return s;
    };
    MediumRenderer m(16);
    m.render(grid, net, cam, depth, deg);
    const MediumGradients g = m.backward(wt, wp);
    double worst = 0.0;
    for (std::size_t i = 0; i < grid.raw().size(); ++i) {
        worst = std::max(worst, relative_error(g.grid[i], central_difference(loss, grid.raw()[i])));
    }
    for (std::size_t i = 0; i < net.params().size(); i += 7) {
        worst = std::max(worst, relative_error(g.network[i], central_difference(loss, net.params()[i])));
    }
    EXPECT_LT(worst, kFdTolerance);
}

TEST(MediumRenderer, BackwardWithoutForwardThrows) {
    MediumRenderer m(8);
    EXPECT_THROW(m.backward(ImageBuffer(4, 4, 1), ImageBuffer(4, 4, 3)), InvalidState);
}

TEST(ComposeContinuous, Cases) {
    const ImageBuffer clean = random_image(6, 5, 3, 23);
    EXPECT_EQ(compose_continuous(clean, ImageBuffer(6, 5, 1, 1.0), ImageBuffer(6, 5, 3, 0.0)), clean);
    const ImageBuffer p = random_image(6, 5, 3, 24);
    EXPECT_EQ(compose_continuous(clean, ImageBuffer(6, 5, 1, 0.0), p), p);
    const ImageBuffer t = random_image(6, 5, 1, 25);
    const ImageBuffer out = compose_continuous(clean, t, p);
    for (int y = 0; y < 6; ++y)
        for (int x = 0; x < 5; ++x)
            for (int c = 0; c < 3; ++c) EXPECT_EQ(out.at(y, x, c), clean.at(y, x, c) * t.at(y, x) + p.at(y, x, c));
    EXPECT_THROW(compose_continuous(clean, ImageBuffer(6, 4, 1), p), InvalidInput);
}

TEST(TotalVariation, ConstantFieldIsZero) { EXPECT_EQ(tv_loss(constant_grid(0.3)).value, 0.0); }

TEST(TotalVariation, LinearFieldInX) {
    // Post-softplus values linear in x with slope g per node step.
    const double g = 0.05, base = 0.4;
    std::vector<double> raw(64);
    ExtinctionGrid grid(Aabb{Vec3::Zero(), Vec3::Ones()}, {4, 4, 4}, raw);
    for (int z = 0; z < 4; ++z)
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 4; ++x) grid.raw()[grid.index(x, y, z)] = inverse_softplus(base + g * x);
    EXPECT_NEAR(tv_loss(grid, false).value, g, 1e-12);
}

TEST(TotalVariation, GradientMatchesFiniteDifferences) {
    ExtinctionGrid grid = random_grid({4, 5, 3}, 26);
    const TvResult r = tv_loss(grid, true);
    double worst = 0.0;
    for (std::size_t i = 0; i < grid.raw().size(); ++i) {
        const double num = central_difference([&] { return tv_loss(grid, false).value; }, grid.raw()[i]);
        worst = std::max(worst, relative_error(r.grad[i], num));
    }
    EXPECT_LT(worst, kFdTolerance);
}

TEST(TotalVariation, NeedsTwoNodesPerAxis) {
    EXPECT_THROW(tv_loss(constant_grid(0.0, {1, 4, 4})), InvalidInput);
}

TEST(GridIo, RoundTrip) {
    const ExtinctionGrid g = random_grid({3, 4, 5}, 27);
    std::stringstream ss;
    write_grid(ss, g);
    EXPECT_EQ(ss.str().substr(0, 4), "NIMB");
    const ExtinctionGrid h = read_grid(ss);
    EXPECT_EQ(h.raw(), g.raw());
    EXPECT_EQ(h.resolution(), g.resolution());
    EXPECT_EQ(h.aabb().lo, g.aabb().lo);
}

TEST(NetworkIo, RoundTrip) {
    const AirlightNetwork net = AirlightNetwork::create(28);
    std::stringstream ss;
    write_network(ss, net);
    EXPECT_EQ(ss.str().substr(0, 4), "NIMA");
    EXPECT_EQ(read_network(ss).params(), net.params());
}
