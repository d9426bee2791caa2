#include "test_util.hpp"

#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>
#include <sstream>

using namespace nimbus;
using namespace nimbus::testing;

namespace {

// Straight per-pixel loop over all Gaussians sorted by depth, no tiling.
RenderOutput brute_force_render(const GaussianScene& scene, const Camera& cam, double far_depth = 1000.0) {
    std::vector<SplatFragment> frs;
    for (std::size_t i = 0; i < scene.size(); ++i) {
        if (auto f = project(scene[i], cam, i)) frs.push_back(*f);
    }
    std::stable_sort(frs.begin(), frs.end(), [](const auto& a, const auto& b) { return a.depth < b.depth; });
    RenderOutput out{ImageBuffer(cam.height, cam.width, 3), ImageBuffer(cam.height, cam.width, 1),
                     ImageBuffer(cam.height, cam.width, 1)};
    for (int y = 0; y < cam.height; ++y) {
        for (int x = 0; x < cam.width; ++x) {
            double t = 1.0, a = 0.0, d = 0.0, c[3] = {0, 0, 0};
            for (const auto& fr : frs) {
                const double dx = x + 0.5 - fr.center.u, dy = y + 0.5 - fr.center.v;
                if (std::abs(dx) > fr.radius || std::abs(dy) > fr.radius) continue;
                const double power = 0.5 * (fr.conic_a * dx * dx + fr.conic_c * dy * dy) + fr.conic_b * dx * dy;
                const double alpha = std::min(0.99, fr.opacity * std::exp(-power));
                for (int k = 0; k < 3; ++k) c[k] += alpha * t * scene[fr.index].color[k];
                a += alpha * t;
                d += alpha * t * fr.depth;
                t *= 1.0 - alpha;
                if (t < 1e-4) break;
            }
            for (int k = 0; k < 3; ++k) out.color.at(y, x, k) = c[k];
            out.alpha.at(y, x) = a;
            out.depth.at(y, x) = a >= 1e-3 ? d / a : far_depth;
        }
    }
    return out;
}

double max_abs_diff(const ImageBuffer& a, const ImageBuffer& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace

TEST(Primitive, CovarianceIsSymmetricPositiveDefinite) {
    for (const auto& g : random_scene(10, 1)) {
        const Mat3 s = g.covariance();
        EXPECT_LT((s - s.transpose()).norm(), 1e-15);
        Eigen::SelfAdjointEigenSolver<Mat3> es(s);
        EXPECT_GT(es.eigenvalues().minCoeff(), 0.0);
        EXPECT_GT(g.opacity(), 0.0);
        EXPECT_LT(g.opacity(), 1.0);
    }
}

TEST(Primitive, ParamRoundTrip) {
    const GaussianPrimitive g = random_scene(1, 2)[0];
    const GaussianPrimitive h = GaussianPrimitive::from_params(g.to_params());
    EXPECT_EQ(g.to_params(), h.to_params());
}

TEST(Camera, LookAtIsProperRotation) {
    const Camera c = Camera::look_at(Vec3(2, 1, 1), Vec3(0, 0, 0.3), Vec3(0, 0, 1), 50, 64, 48);
    EXPECT_NO_THROW(c.validate());
    const Vec3 pc = c.to_camera(Vec3(0, 0, 0.3));
    EXPECT_NEAR(pc.x(), 0.0, 1e-12);
    EXPECT_NEAR(pc.y(), 0.0, 1e-12);
    EXPECT_GT(pc.z(), 0.0);
}

TEST(Camera, TextRoundTrip) {
    const Camera c = Camera::look_at(Vec3(2, -1, 0.5), Vec3(0, 0, 0.3), Vec3(0, 0, 1), 56, 64, 64);
    std::stringstream ss;
    ss << "# comment line\n";
    write_cameras(ss, {c, c});
    const auto back = read_cameras(ss);
    ASSERT_EQ(back.size(), 2u);
    EXPECT_LT((back[0].position - c.position).norm(), 1e-15);
    EXPECT_LT((back[0].orientation - c.orientation).norm(), 1e-15);
    EXPECT_EQ(back[1].width, 64);
}

TEST(Camera, MalformedLineIsRejected) {
    EXPECT_THROW(parse_camera("1 2 3"), DataError);
}

TEST(Project, CullsBehindNearPlane) {
    GaussianPrimitive g;
    g.mu = Vec3(0, 0, 0.005);
    EXPECT_FALSE(project(g, test_camera()).has_value());
    g.mu = Vec3(0, 0, -2);
    EXPECT_FALSE(project(g, test_camera()).has_value());
}

TEST(Project, CenterAndPositiveRadius) {
    GaussianPrimitive g;
    g.mu = Vec3(0.5, -0.25, 2.0);
    g.log_scale = Vec3::Constant(std::log(0.1));
    const Camera cam = test_camera();
    const auto fr = project(g, cam);
    ASSERT_TRUE(fr.has_value());
    EXPECT_NEAR(fr->center.u, 8.0 + 14.0 * 0.25, 1e-12);
    EXPECT_NEAR(fr->center.v, 8.0 - 14.0 * 0.125, 1e-12);
    EXPECT_GT(fr->radius, 0.0);
    EXPECT_DOUBLE_EQ(fr->depth, 2.0);
}

TEST(Project, NonFiniteParametersThrow) {
    GaussianPrimitive g;
    g.mu = Vec3(0, 0, std::nan(""));
    EXPECT_THROW(project(g, test_camera()), InvalidState);
}

TEST(Rasterizer, MatchesBruteForceBlender) {
    const GaussianScene scene = random_scene(10, 3);
    const Camera cam = test_camera(16, 16);
    Rasterizer r;
    const RenderOutput a = r.render(scene, cam);
    const RenderOutput b = brute_force_render(scene, cam);
    EXPECT_LT(max_abs_diff(a.color, b.color), 1e-12);
    EXPECT_LT(max_abs_diff(a.alpha, b.alpha), 1e-12);
    EXPECT_LT(max_abs_diff(a.depth, b.depth), 1e-9);
}

TEST(Rasterizer, MatchesBruteForceAcrossTiles) {
    const GaussianScene scene = random_scene(40, 4, 1.2);
    const Camera cam = test_camera(40, 36);
    Rasterizer r;
    const RenderOutput a = r.render(scene, cam);
    const RenderOutput b = brute_force_render(scene, cam);
    EXPECT_LT(max_abs_diff(a.color, b.color), 1e-12);
}

TEST(Rasterizer, EmptyPixelsReportFarDepth) {
    GaussianScene scene(1);
    scene[0].mu = Vec3(0, 0, 3);
    scene[0].log_scale = Vec3::Constant(std::log(0.02));
    Rasterizer r;
    const RenderOutput out = r.render(scene, test_camera());
    EXPECT_EQ(out.depth.at(0, 0), 1000.0);
    EXPECT_EQ(out.alpha.at(0, 0), 0.0);
}

TEST(Rasterizer, BackwardWithoutForwardThrows) {
    Rasterizer r;
    EXPECT_THROW(r.backward(ImageBuffer(16, 16, 3)), InvalidState);
}

namespace {

GaussianPrimitive backdrop_gaussian() {
    GaussianPrimitive backdrop;
    backdrop.mu = Vec3(0.1, -0.1, 6.0);
    backdrop.log_scale = Vec3(std::log(3.0), std::log(2.6), std::log(0.5));
    backdrop.rotation = Vec4(0.95, 0.1, -0.2, 0.15).normalized();
    backdrop.opacity_logit = 1.0;
    return backdrop;
}

// Worst relative error over every parameter of every Gaussian for a random
// linear functional of color, alpha and depth.
double worst_gradient_error(GaussianScene scene) {
    const Camera cam = test_camera(16, 16);
    const ImageBuffer wc = random_image(16, 16, 3, 6, -1, 1);
    const ImageBuffer wa = random_image(16, 16, 1, 7, -1, 1);
    const ImageBuffer wd = random_image(16, 16, 1, 8, -0.1, 0.1);
    auto loss = [&] {
        Rasterizer r;
        const RenderOutput o = r.render(scene, cam);
        double s = 0.0;
        for (std::size_t i = 0; i < wc.size(); ++i) s += wc[i] * o.color[i];
        for (std::size_t i = 0; i < wa.size(); ++i) s += wa[i] * o.alpha[i] + wd[i] * o.depth[i];
        return s;
    };
    Rasterizer r;
    const RenderOutput o = r.render(scene, cam);
    // Depth is only differentiable where coverage is above the floor everywhere.
    for (std::size_t i = 0; i < o.alpha.size(); ++i) EXPECT_GE(o.alpha[i], 1e-3);
    const GaussianGradients g = r.backward(wc, &wa, &wd);
    double worst = 0.0;
    for (std::size_t i = 0; i < scene.size(); ++i) {
        for (int k = 0; k < kGaussianParams; ++k) {
            ParamVec p = scene[i].to_params();
            auto f = [&] {
                scene[i] = GaussianPrimitive::from_params(p);
                return loss();
            };
            const double num = central_difference(f, p[k]);
            scene[i] = GaussianPrimitive::from_params(p);
            const double err = relative_error(g.params[i][k], num);
            worst = std::max(worst, err);
            EXPECT_LT(err, kFdTolerance) << "gaussian " << i << " slot " << k << " analytic " << g.params[i][k]
                                         << " numeric " << num;
        }
    }
    return worst;
}

}  // namespace

TEST(Rasterizer, GradientsMatchFiniteDifferences) {
    GaussianScene scene = random_scene(8, 5);
    scene.push_back(backdrop_gaussian());
    RecordProperty("worst_relative_error", std::to_string(worst_gradient_error(scene)));
}

// Centers outside 1.3x the field of view use a clamped footprint Jacobian.
TEST(Rasterizer, GradientsMatchFiniteDifferencesOffAxis) {
    GaussianScene scene = random_scene(3, 9);
    GaussianPrimitive side;
    side.mu = Vec3(2.4, 0.3, 3.0);
    side.log_scale = Vec3(std::log(0.5), std::log(0.3), std::log(0.4));
    side.rotation = Vec4(0.9, -0.2, 0.1, 0.3).normalized();
    side.color = Vec3(0.9, 0.2, 0.4);
    GaussianPrimitive top = side;
    top.mu = Vec3(-0.2, -2.5, 3.1);
    scene.push_back(side);
    scene.push_back(top);
    scene.push_back(backdrop_gaussian());
    const auto fs = project(side, test_camera(16, 16));
    const auto ft = project(top, test_camera(16, 16));
    ASSERT_TRUE(fs && ft);
    EXPECT_TRUE(fs->ratio_clamped[0]);
    EXPECT_TRUE(ft->ratio_clamped[1]);
    worst_gradient_error(scene);
}

TEST(Project, NearSplatsAreCulled) {
    GaussianPrimitive g;
    g.mu = Vec3(0, 0, 0.15);
    EXPECT_FALSE(project(g, test_camera()).has_value());
    g.mu = Vec3(0, 0, 0.25);
    EXPECT_TRUE(project(g, test_camera()).has_value());
}

TEST(Rasterizer, ThreadCountDoesNotChangeResults) {
    const GaussianScene scene = random_scene(30, 9, 1.0);
    const Camera cam = test_camera(48, 40);
    const ImageBuffer wc = random_image(40, 48, 3, 10, -1, 1);
    setenv("NIMBUS_THREADS", "1", 1);
    Rasterizer r1;
    const RenderOutput a = r1.render(scene, cam);
    const GaussianGradients ga = r1.backward(wc);
    setenv("NIMBUS_THREADS", "3", 1);
    Rasterizer r3;
    const RenderOutput b = r3.render(scene, cam);
    const GaussianGradients gb = r3.backward(wc);
    unsetenv("NIMBUS_THREADS");
    EXPECT_EQ(a.color, b.color);
    EXPECT_EQ(ga.params, gb.params);
    EXPECT_EQ(ga.screen_grad, gb.screen_grad);
}

TEST(Rasterizer, VisibilityMarksSurvivingFragments) {
    GaussianScene scene = random_scene(3, 11);
    scene[1].mu = Vec3(0, 0, -3);
    Rasterizer r;
    r.render(scene, test_camera());
    const GaussianGradients g = r.backward(ImageBuffer(16, 16, 3, 1.0));
    EXPECT_EQ(g.visible[0], 1);
    EXPECT_EQ(g.visible[1], 0);
    EXPECT_EQ(g.screen_grad[1], 0.0);
    for (double v : g.params[1]) EXPECT_EQ(v, 0.0);
}

TEST(DensifyConfig, Validation) {
    DensifyConfig c;
    EXPECT_NO_THROW(c.validate(100));
    c.max_gaussians = 10;
    EXPECT_THROW(c.validate(100), InvalidInput);
    c = DensifyConfig{};
    c.grad_threshold = 0.0;
    EXPECT_THROW(c.validate(1), InvalidInput);
}

TEST(Densify, ClonesSmallAndSplitsLarge) {
    GaussianScene scene(2);
    scene[0].log_scale = Vec3::Constant(std::log(0.01));
    scene[1].log_scale = Vec3::Constant(std::log(0.2));
    scene[1].mu = Vec3(1, 0, 0);
    DensifyAccumulator acc;
    acc.reset(2);
    acc.grad_sum = {1.0, 1.0};
    acc.count = {1.0, 1.0};
    DensifyConfig cfg;
    std::mt19937_64 rng(1);
    const DensifyResult r = densify_and_prune(scene, acc, cfg, rng);
    EXPECT_EQ(r.clones, 1u);
    EXPECT_EQ(r.splits, 1u);
    ASSERT_EQ(r.scene.size(), 4u);
    EXPECT_EQ(r.origin[0], Origin::Kept);
    EXPECT_EQ(r.origin[1], Origin::Split);
    EXPECT_EQ(r.parent[2], 0u);
    EXPECT_EQ(r.origin[2], Origin::Clone);
    EXPECT_EQ(r.parent[3], 1u);
    EXPECT_NEAR(r.scene[3].max_scale(), 0.2 / 1.6, 1e-12);
    EXPECT_EQ(r.scene[2].to_params(), scene[0].to_params());
}

TEST(Densify, PrunesTransparentAndRespectsCap) {
    GaussianScene scene(3);
    scene[2].opacity_logit = logit(0.001);
    DensifyAccumulator acc;
    acc.reset(3);
    acc.grad_sum = {1.0, 1.0, 0.0};
    acc.count = {1.0, 1.0, 1.0};
    DensifyConfig cfg;
    cfg.max_gaussians = 4;
    std::mt19937_64 rng(2);
    const DensifyResult r = densify_and_prune(scene, acc, cfg, rng);
    EXPECT_EQ(r.pruned, 1u);
    EXPECT_EQ(r.densified.size(), 1u);
    EXPECT_EQ(r.scene.size(), 3u);
    EXPECT_LE(r.scene.size(), cfg.max_gaussians);
}

TEST(Densify, BelowThresholdIsUntouched) {
    const GaussianScene scene = random_scene(5, 12);
    DensifyAccumulator acc;
    acc.reset(5);
    std::mt19937_64 rng(3);
    const DensifyResult r = densify_and_prune(scene, acc, DensifyConfig{}, rng);
    ASSERT_EQ(r.scene.size(), scene.size());
    for (std::size_t i = 0; i < scene.size(); ++i) EXPECT_EQ(r.scene[i].to_params(), scene[i].to_params());
}

TEST(SceneIo, RoundTrip) {
    const GaussianScene scene = random_scene(7, 13);
    std::stringstream ss;
    write_scene(ss, scene);
    const GaussianScene back = read_scene(ss);
    ASSERT_EQ(back.size(), scene.size());
    for (std::size_t i = 0; i < scene.size(); ++i) EXPECT_EQ(back[i].to_params(), scene[i].to_params());
}
