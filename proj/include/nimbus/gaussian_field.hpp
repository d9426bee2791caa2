#pragma once

#include "nimbus/core.hpp"
#include "nimbus/imaging.hpp"

#include <iomanip>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>

namespace nimbus {

// Flat parameter layout shared by gradients, the optimizer and checkpoints:
// 3 position, 3 log-scale, 4 quaternion (w x y z), 1 opacity logit, 3 color.
inline constexpr int kGaussianParams = 14;
using ParamVec = std::array<double, kGaussianParams>;

namespace slot {
inline constexpr int kPosition = 0;
inline constexpr int kScale = 3;
inline constexpr int kRotation = 6;
inline constexpr int kOpacity = 10;
inline constexpr int kColor = 11;
}  // namespace slot

/// Rotation matrix of a unit quaternion stored as (w, x, y, z).
inline Mat3 quaternion_to_matrix(const Vec4& q) {
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    Mat3 r;
    r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return r;
}

inline Vec4 matrix_to_quaternion(const Mat3& r) {
    const Eigen::Quaterniond q(r);
    Vec4 out(q.w(), q.x(), q.y(), q.z());
    if (out[0] < 0) {
        out = -out;
    }
    return out.normalized();
}

struct GaussianPrimitive {
    Vec3 mu = Vec3::Zero();
    Vec3 log_scale = Vec3::Zero();
    Vec4 rotation = Vec4(1.0, 0.0, 0.0, 0.0);
    double opacity_logit = 0.0;
    Vec3 color = Vec3::Constant(0.5);

    double opacity() const { return sigmoid(opacity_logit); }
    Mat3 rotation_matrix() const { return quaternion_to_matrix(rotation.normalized()); }
    double max_scale() const { return std::exp(log_scale.maxCoeff()); }

    Mat3 covariance() const {
        const Mat3 r = rotation_matrix();
        const Vec3 s2 = (2.0 * log_scale).array().exp();
        return r * s2.asDiagonal() * r.transpose();
    }

    ParamVec to_params() const {
        ParamVec p{};
        for (int k = 0; k < 3; ++k) {
            p[slot::kPosition + k] = mu[k];
            p[slot::kScale + k] = log_scale[k];
            p[slot::kColor + k] = color[k];
        }
        for (int k = 0; k < 4; ++k) {
            p[slot::kRotation + k] = rotation[k];
        }
        p[slot::kOpacity] = opacity_logit;
        return p;
    }

    static GaussianPrimitive from_params(const ParamVec& p) {
        GaussianPrimitive g;
        for (int k = 0; k < 3; ++k) {
            g.mu[k] = p[slot::kPosition + k];
            g.log_scale[k] = p[slot::kScale + k];
            g.color[k] = p[slot::kColor + k];
        }
        for (int k = 0; k < 4; ++k) {
            g.rotation[k] = p[slot::kRotation + k];
        }
        g.opacity_logit = p[slot::kOpacity];
        return g;
    }

    bool finite() const {
        const auto p = to_params();
        return std::all_of(p.begin(), p.end(), [](double v) { return std::isfinite(v); });
    }
};

using GaussianScene = std::vector<GaussianPrimitive>;

// ---------------------------------------------------------------------------
// Pinhole camera. Camera frame: x right, y down, z forward.

inline constexpr double kNearPlane = 0.01;
// Splats closer than this are culled; their affine footprint would flood the view.
inline constexpr double kSplatNear = 0.2;

struct Camera {
    Vec3 position = Vec3::Zero();
    Vec4 orientation = Vec4(1.0, 0.0, 0.0, 0.0);  // world -> camera, (w, x, y, z)
    double focal = 100.0;
    PixelCoord principal{32.0, 32.0};
    int width = 64;
    int height = 64;

    Mat3 rotation() const { return quaternion_to_matrix(orientation); }
    Vec3 to_camera(const Vec3& x) const { return rotation() * (x - position); }

    /// Unit world-space direction through continuous pixel position p.
    Vec3 ray_direction(PixelCoord p) const {
        const Vec3 d_cam((p.u - principal.u) / focal, (p.v - principal.v) / focal, 1.0);
        return rotation().transpose() * d_cam.normalized();
    }

    /// Ratio of camera-space z to distance along the ray through p.
    double z_per_distance(PixelCoord p) const {
        const Vec3 d_cam((p.u - principal.u) / focal, (p.v - principal.v) / focal, 1.0);
        return 1.0 / d_cam.norm();
    }

    void validate() const {
        if (!position.allFinite() || !orientation.allFinite() || !std::isfinite(focal) || focal <= 0.0 ||
            width < 1 || height < 1) {
            throw InvalidInput("camera has invalid intrinsics or pose");
        }
        if (std::abs(rotation().determinant() - 1.0) > 1e-9) {
            throw InvalidInput("camera orientation is not a proper rotation");
        }
    }

    static Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double focal, int width,
                          int height) {
        const Vec3 forward = (target - eye).normalized();
        const Vec3 right = forward.cross(up).normalized();
        const Vec3 down = forward.cross(right);
        Mat3 r;
        r.row(0) = right.transpose();
        r.row(1) = down.transpose();
        r.row(2) = forward.transpose();
        Camera cam;
        cam.position = eye;
        cam.orientation = matrix_to_quaternion(r);
        cam.focal = focal;
        cam.principal = {width / 2.0, height / 2.0};
        cam.width = width;
        cam.height = height;
        return cam;
    }
};

/// One camera per line: px py pz qw qx qy qz focal cx cy W H.
inline std::string format_camera(const Camera& c) {
    std::ostringstream os;
    os << std::setprecision(17) << c.position[0] << ' ' << c.position[1] << ' ' << c.position[2] << ' '
       << c.orientation[0] << ' ' << c.orientation[1] << ' ' << c.orientation[2] << ' ' << c.orientation[3] << ' '
       << c.focal << ' ' << c.principal.u << ' ' << c.principal.v << ' ' << c.width << ' ' << c.height;
    return os.str();
}

inline Camera parse_camera(const std::string& line) {
    std::istringstream is(line);
    Camera c;
    is >> c.position[0] >> c.position[1] >> c.position[2] >> c.orientation[0] >> c.orientation[1] >>
        c.orientation[2] >> c.orientation[3] >> c.focal >> c.principal.u >> c.principal.v >> c.width >> c.height;
    if (!is) {
        throw DataError("malformed camera line: " + line);
    }
    std::string extra;
    if (is >> extra) {
        throw DataError("trailing tokens in camera line: " + line);
    }
    const double n = c.orientation.norm();
    if (!(n > 0.0)) {
        throw DataError("camera quaternion has zero length");
    }
    c.orientation /= n;
    c.validate();
    return c;
}

inline std::vector<Camera> read_cameras(std::istream& is) {
    std::vector<Camera> cams;
    std::string line;
    while (std::getline(is, line)) {
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos || line[first] == '#') {
            continue;
        }
        cams.push_back(parse_camera(line));
    }
    return cams;
}

inline void write_cameras(std::ostream& os, const std::vector<Camera>& cams) {
    for (const auto& c : cams) {
        os << format_camera(c) << '\n';
    }
}

// ---------------------------------------------------------------------------
// Projection

inline constexpr double kLowPassFloor = 0.3;

struct SplatFragment {
    std::size_t index = 0;
    double depth = 0.0;  // camera-space z of the center
    PixelCoord center;
    double radius = 0.0;  // 3 sigma of the major axis, pixels
    double conic_a = 0.0, conic_b = 0.0, conic_c = 0.0;
    double opacity = 0.0;
    Vec3 p_cam = Vec3::Zero();
    Mat3 view_cov = Mat3::Zero();
    Eigen::Matrix<double, 2, 3> jacobian = Eigen::Matrix<double, 2, 3>::Zero();
    std::array<double, 2> ratio{};  // x/z and y/z as used by the Jacobian
    std::array<bool, 2> ratio_clamped{};
};

/// Perspective projection with the local affine approximation; nullopt when culled.
inline std::optional<SplatFragment> project(const GaussianPrimitive& g, const Camera& cam, std::size_t index = 0) {
    if (!g.finite()) {
        throw InvalidState("project: non-finite Gaussian parameters");
    }
    const Mat3 w = cam.rotation();
    const Vec3 p = w * (g.mu - cam.position);
    if (!(p.z() > kSplatNear)) {
        return std::nullopt;
    }
    const double f = cam.focal;
    const double iz = 1.0 / p.z();
    SplatFragment fr;
    fr.index = index;
    fr.depth = p.z();
    fr.p_cam = p;
    fr.center = {f * p.x() * iz + cam.principal.u, f * p.y() * iz + cam.principal.v};
    // The affine footprint is evaluated with x/z, y/z held inside 1.3x the field of view.
    const double lim_x = 1.3 * 0.5 * cam.width / f, lim_y = 1.3 * 0.5 * cam.height / f;
    fr.ratio = {std::clamp(p.x() * iz, -lim_x, lim_x), std::clamp(p.y() * iz, -lim_y, lim_y)};
    fr.ratio_clamped = {std::abs(p.x() * iz) > lim_x, std::abs(p.y() * iz) > lim_y};
    fr.jacobian << f * iz, 0.0, -f * fr.ratio[0] * iz, 0.0, f * iz, -f * fr.ratio[1] * iz;
    fr.view_cov = w * g.covariance() * w.transpose();
    Mat2 cov2 = fr.jacobian * fr.view_cov * fr.jacobian.transpose();
    cov2(0, 0) += kLowPassFloor;
    cov2(1, 1) += kLowPassFloor;
    const double a = cov2(0, 0), b = 0.5 * (cov2(0, 1) + cov2(1, 0)), c = cov2(1, 1);
    const double det = a * c - b * b;
    if (!(det > 0.0)) {
        return std::nullopt;
    }
    fr.conic_a = c / det;
    fr.conic_b = -b / det;
    fr.conic_c = a / det;
    const double mid = 0.5 * (a + c);
    const double lambda_max = mid + std::sqrt(std::max(mid * mid - det, 0.0));
    fr.radius = 3.0 * std::sqrt(lambda_max);
    fr.opacity = g.opacity();
    if (fr.center.u + fr.radius < 0.0 || fr.center.u - fr.radius > cam.width || fr.center.v + fr.radius < 0.0 ||
        fr.center.v - fr.radius > cam.height) {
        return std::nullopt;
    }
    return fr;
}

// ---------------------------------------------------------------------------
// Rasterization

inline constexpr double kAlphaMax = 0.99;
inline constexpr double kTransmittanceStop = 1e-4;
inline constexpr double kDepthAlphaFloor = 1e-3;

struct RenderOptions {
    double far_depth = 1000.0;  // depth reported where accumulated alpha < 1e-3
    int tile = 16;
};

struct RenderOutput {
    ImageBuffer color;  // 3 channels
    ImageBuffer alpha;  // 1 channel
    ImageBuffer depth;  // 1 channel, camera-space z
};

/// Per-Gaussian gradients for one view.
struct GaussianGradients {
    std::vector<ParamVec> params;
    std::vector<double> screen_grad;  // |dL/d(center)| in NDC units, feeds densification
    std::vector<std::uint8_t> visible;
    bool rescaled = false;

    void reset(std::size_t n) {
        params.assign(n, ParamVec{});
        screen_grad.assign(n, 0.0);
        visible.assign(n, 0);
        rescaled = false;
    }
    std::size_t size() const noexcept { return params.size(); }
};

/// Opacity of fragment `fr` at pixel center (px, py) before the 0.99 clamp.
inline double fragment_falloff(const SplatFragment& fr, double dx, double dy) {
    const double power = 0.5 * (fr.conic_a * dx * dx + fr.conic_c * dy * dy) + fr.conic_b * dx * dy;
    return std::exp(-power);
}

inline bool fragment_covers(const SplatFragment& fr, double dx, double dy) {
    return std::abs(dx) <= fr.radius && std::abs(dy) <= fr.radius;
}

/// Front-to-back alpha-blending rasterizer. Caches the forward pass so that
/// backward() can produce analytic gradients.
class Rasterizer {
public:
    explicit Rasterizer(RenderOptions opts = {}) : opts_(opts) {}

    RenderOutput render(const GaussianScene& scene, const Camera& cam) {
        if (scene.empty()) {
            throw InvalidInput("render: empty scene");
        }
        cam.validate();
        scene_ = scene;
        cam_ = cam;
        fragments_.clear();
        for (std::size_t i = 0; i < scene.size(); ++i) {
            if (auto fr = project(scene[i], cam, i)) {
                fragments_.push_back(*fr);
            }
        }
        std::stable_sort(fragments_.begin(), fragments_.end(),
                         [](const SplatFragment& a, const SplatFragment& b) { return a.depth < b.depth; });
        build_tiles();

        RenderOutput out{ImageBuffer(cam.height, cam.width, 3), ImageBuffer(cam.height, cam.width, 1),
                         ImageBuffer(cam.height, cam.width, 1)};
        parallel_for_chunks(static_cast<std::size_t>(tiles_y_), [&](std::size_t band) {
            const int y0 = static_cast<int>(band) * opts_.tile;
            const int y1 = std::min(cam.height, y0 + opts_.tile);
            for (int y = y0; y < y1; ++y) {
                for (int x = 0; x < cam.width; ++x) {
                    double t = 1.0, acc_a = 0.0, acc_d = 0.0;
                    double acc_c[3] = {0.0, 0.0, 0.0};
                    const double px = x + 0.5, py = y + 0.5;
                    for (const std::uint32_t fi : tile_list(x, y)) {
                        const SplatFragment& fr = fragments_[fi];
                        const double dx = px - fr.center.u, dy = py - fr.center.v;
                        if (!fragment_covers(fr, dx, dy)) {
                            continue;
                        }
                        const double alpha = std::min(kAlphaMax, fr.opacity * fragment_falloff(fr, dx, dy));
                        const double w = alpha * t;
                        const Vec3& c = scene_[fr.index].color;
                        acc_c[0] += w * c[0];
                        acc_c[1] += w * c[1];
                        acc_c[2] += w * c[2];
                        acc_a += w;
                        acc_d += w * fr.depth;
                        t *= 1.0 - alpha;
                        if (t < kTransmittanceStop) {
                            break;
                        }
                    }
                    for (int ch = 0; ch < 3; ++ch) {
                        out.color.at(y, x, ch) = acc_c[ch];
                    }
                    out.alpha.at(y, x) = acc_a;
                    out.depth.at(y, x) = acc_a >= kDepthAlphaFloor ? acc_d / acc_a : opts_.far_depth;
                }
            }
        });
        has_forward_ = true;
        last_ = out;
        return out;
    }

    bool has_forward() const noexcept { return has_forward_; }
    const std::vector<SplatFragment>& fragments() const noexcept { return fragments_; }
    const RenderOptions& options() const noexcept { return opts_; }

    /// Reverse-mode gradients. d_alpha and d_depth may be null (zero adjoint).
    GaussianGradients backward(const ImageBuffer& d_color, const ImageBuffer* d_alpha = nullptr,
                               const ImageBuffer* d_depth = nullptr) const {
        if (!has_forward_) {
            throw InvalidState("render_backward called without a cached forward pass");
        }
        if (d_color.height() != cam_.height || d_color.width() != cam_.width || d_color.channels() != 3) {
            throw InvalidInput("render_backward: color adjoint has the wrong shape");
        }
        const std::size_t nf = fragments_.size();
        const auto n_chunks = static_cast<std::size_t>(tiles_y_);
        std::vector<std::vector<FragmentAdjoint>> partial(n_chunks);

        parallel_for_chunks(n_chunks, [&](std::size_t band) {
            auto& acc = partial[band];
            acc.assign(nf, FragmentAdjoint{});
            std::vector<Contribution> contrib;
            const int y0 = static_cast<int>(band) * opts_.tile;
            const int y1 = std::min(cam_.height, y0 + opts_.tile);
            for (int y = y0; y < y1; ++y) {
                for (int x = 0; x < cam_.width; ++x) {
                    backward_pixel(x, y, d_color, d_alpha, d_depth, contrib, acc);
                }
            }
        });

        GaussianGradients grads;
        grads.reset(scene_.size());
        for (std::size_t k = 0; k < nf; ++k) {
            FragmentAdjoint total{};
            for (const auto& part : partial) {
                total += part[k];
            }
            chain_to_params(fragments_[k], total, grads);
        }
        return grads;
    }

private:
    struct FragmentAdjoint {
        double color[3] = {0, 0, 0};
        double opacity = 0, u = 0, v = 0, ca = 0, cb = 0, cc = 0, depth = 0;

        FragmentAdjoint& operator+=(const FragmentAdjoint& o) {
            for (int i = 0; i < 3; ++i) {
                color[i] += o.color[i];
            }
            opacity += o.opacity;
            u += o.u;
            v += o.v;
            ca += o.ca;
            cb += o.cb;
            cc += o.cc;
            depth += o.depth;
            return *this;
        }
    };

    struct Contribution {
        std::uint32_t fragment;
        double alpha, t_before, falloff, dx, dy;
        bool clamped;
    };

    void build_tiles() {
        const int ts = opts_.tile;
        tiles_x_ = (cam_.width + ts - 1) / ts;
        tiles_y_ = (cam_.height + ts - 1) / ts;
        tiles_.assign(static_cast<std::size_t>(tiles_x_) * tiles_y_, {});
        for (std::size_t k = 0; k < fragments_.size(); ++k) {
            const SplatFragment& fr = fragments_[k];
            // pixel centers j + 0.5 within [u - r, u + r]
            const int x_lo = std::max(0, static_cast<int>(std::ceil(fr.center.u - fr.radius - 0.5)));
            const int x_hi = std::min(cam_.width - 1, static_cast<int>(std::floor(fr.center.u + fr.radius - 0.5)));
            const int y_lo = std::max(0, static_cast<int>(std::ceil(fr.center.v - fr.radius - 0.5)));
            const int y_hi = std::min(cam_.height - 1, static_cast<int>(std::floor(fr.center.v + fr.radius - 0.5)));
            if (x_lo > x_hi || y_lo > y_hi) {
                continue;
            }
            for (int ty = y_lo / ts; ty <= y_hi / ts; ++ty) {
                for (int tx = x_lo / ts; tx <= x_hi / ts; ++tx) {
                    tiles_[static_cast<std::size_t>(ty) * tiles_x_ + tx].push_back(static_cast<std::uint32_t>(k));
                }
            }
        }
    }

    const std::vector<std::uint32_t>& tile_list(int x, int y) const {
        return tiles_[static_cast<std::size_t>(y / opts_.tile) * tiles_x_ + x / opts_.tile];
    }

    void backward_pixel(int x, int y, const ImageBuffer& d_color, const ImageBuffer* d_alpha,
                        const ImageBuffer* d_depth, std::vector<Contribution>& contrib,
                        std::vector<FragmentAdjoint>& acc) const {
        contrib.clear();
        const double px = x + 0.5, py = y + 0.5;
        double t = 1.0;
        for (const std::uint32_t fi : tile_list(x, y)) {
            const SplatFragment& fr = fragments_[fi];
            const double dx = px - fr.center.u, dy = py - fr.center.v;
            if (!fragment_covers(fr, dx, dy)) {
                continue;
            }
            const double falloff = fragment_falloff(fr, dx, dy);
            const double raw = fr.opacity * falloff;
            const double alpha = std::min(kAlphaMax, raw);
            contrib.push_back({fi, alpha, t, falloff, dx, dy, raw > kAlphaMax});
            t *= 1.0 - alpha;
            if (t < kTransmittanceStop) {
                break;
            }
        }
        if (contrib.empty()) {
            return;
        }
        // Adjoints of the five blended features: r, g, b, alpha, depth numerator.
        double g[5] = {d_color.at(y, x, 0), d_color.at(y, x, 1), d_color.at(y, x, 2), 0.0, 0.0};
        if (d_alpha) {
            g[3] += d_alpha->at(y, x);
        }
        if (d_depth) {
            const double acc_a = last_.alpha.at(y, x);
            if (acc_a >= kDepthAlphaFloor) {
                const double depth = last_.depth.at(y, x);
                const double gd = d_depth->at(y, x);
                g[4] += gd / acc_a;
                g[3] -= gd * depth / acc_a;
            }
        }
        double suffix[5] = {0, 0, 0, 0, 0};
        for (auto it = contrib.rbegin(); it != contrib.rend(); ++it) {
            const SplatFragment& fr = fragments_[it->fragment];
            const Vec3& c = scene_[fr.index].color;
            const double f[5] = {c[0], c[1], c[2], 1.0, fr.depth};
            const double w = it->alpha * it->t_before;
            FragmentAdjoint& a = acc[it->fragment];
            a.color[0] += w * g[0];
            a.color[1] += w * g[1];
            a.color[2] += w * g[2];
            a.depth += w * g[4];
            double dot_f = 0.0, dot_s = 0.0;
            for (int k = 0; k < 5; ++k) {
                dot_f += g[k] * f[k];
                dot_s += g[k] * suffix[k];
            }
            const double g_alpha = it->t_before * dot_f - dot_s / (1.0 - it->alpha);
            for (int k = 0; k < 5; ++k) {
                suffix[k] += w * f[k];
            }
            if (it->clamped) {
                continue;
            }
            a.opacity += g_alpha * it->falloff;
            const double g_power = -g_alpha * it->alpha;
            a.u -= g_power * (fr.conic_a * it->dx + fr.conic_b * it->dy);
            a.v -= g_power * (fr.conic_b * it->dx + fr.conic_c * it->dy);
            a.ca += g_power * 0.5 * it->dx * it->dx;
            a.cb += g_power * it->dx * it->dy;
            a.cc += g_power * 0.5 * it->dy * it->dy;
        }
    }

    void chain_to_params(const SplatFragment& fr, const FragmentAdjoint& adj, GaussianGradients& out) const {
        const GaussianPrimitive& g = scene_[fr.index];
        ParamVec& grad = out.params[fr.index];
        out.visible[fr.index] = 1;
        for (int k = 0; k < 3; ++k) {
            grad[slot::kColor + k] = adj.color[k];
        }
        grad[slot::kOpacity] = adj.opacity * fr.opacity * (1.0 - fr.opacity);

        // conic -> 2D covariance
        Mat2 conic;
        conic << fr.conic_a, fr.conic_b, fr.conic_b, fr.conic_c;
        Mat2 g_conic;
        g_conic << adj.ca, 0.5 * adj.cb, 0.5 * adj.cb, adj.cc;
        const Mat2 g_cov2 = -conic * g_conic * conic;

        // 2D covariance = J V J^T + floor
        const auto& jac = fr.jacobian;
        const Mat3 g_view_cov = jac.transpose() * g_cov2 * jac;
        const Eigen::Matrix<double, 2, 3> g_jac = 2.0 * g_cov2 * jac * fr.view_cov;

        const double f = cam_.focal;
        const double x = fr.p_cam.x(), y = fr.p_cam.y(), z = fr.p_cam.z();
        const double iz = 1.0 / z, iz2 = iz * iz, iz3 = iz2 * iz;
        Vec3 g_p = Vec3::Zero();
        g_p.x() += adj.u * f * iz;
        g_p.y() += adj.v * f * iz;
        g_p.z() += -adj.u * f * x * iz2 - adj.v * f * y * iz2;
        g_p.z() += (g_jac(0, 0) + g_jac(1, 1)) * (-f * iz2) + g_jac(0, 2) * f * fr.ratio[0] * iz2 +
                   g_jac(1, 2) * f * fr.ratio[1] * iz2;
        if (!fr.ratio_clamped[0]) {
            g_p.x() += g_jac(0, 2) * (-f * iz2);
            g_p.z() += g_jac(0, 2) * f * x * iz3;
        }
        if (!fr.ratio_clamped[1]) {
            g_p.y() += g_jac(1, 2) * (-f * iz2);
            g_p.z() += g_jac(1, 2) * f * y * iz3;
        }
        g_p.z() += adj.depth;

        const Mat3 w = cam_.rotation();
        const Vec3 g_mu = w.transpose() * g_p;
        const Mat3 g_sigma = w.transpose() * g_view_cov * w;
        for (int k = 0; k < 3; ++k) {
            grad[slot::kPosition + k] = g_mu[k];
        }

        // Sigma = R diag(exp(2 s)) R^T
        const double qn = g.rotation.norm();
        const Vec4 n = g.rotation / qn;
        const Mat3 r = quaternion_to_matrix(n);
        const Vec3 s2 = (2.0 * g.log_scale).array().exp();
        for (int k = 0; k < 3; ++k) {
            grad[slot::kScale + k] = 2.0 * s2[k] * r.col(k).dot(g_sigma * r.col(k));
        }
        const Mat3 g_r = 2.0 * g_sigma * r * s2.asDiagonal();
        const double qw = n[0], qx = n[1], qy = n[2], qz = n[3];
        Mat3 dw, dx, dy, dz;
        dw << 0, -qz, qy, qz, 0, -qx, -qy, qx, 0;
        dx << 0, qy, qz, qy, -2 * qx, -qw, qz, qw, -2 * qx;
        dy << -2 * qy, qx, qw, qx, 0, qz, -qw, qz, -2 * qy;
        dz << -2 * qz, -qw, qx, qw, -2 * qz, qy, qx, qy, 0;
        const Vec4 g_n(2.0 * (g_r.cwiseProduct(dw)).sum(), 2.0 * (g_r.cwiseProduct(dx)).sum(),
                       2.0 * (g_r.cwiseProduct(dy)).sum(), 2.0 * (g_r.cwiseProduct(dz)).sum());
        const Vec4 g_q = (g_n - n * n.dot(g_n)) / qn;
        for (int k = 0; k < 4; ++k) {
            grad[slot::kRotation + k] = g_q[k];
        }

        const double su = adj.u * 0.5 * cam_.width;
        const double sv = adj.v * 0.5 * cam_.height;
        out.screen_grad[fr.index] = std::sqrt(su * su + sv * sv);
    }

    RenderOptions opts_;
    GaussianScene scene_;
    Camera cam_;
    std::vector<SplatFragment> fragments_;
    std::vector<std::vector<std::uint32_t>> tiles_;
    int tiles_x_ = 0, tiles_y_ = 0;
    bool has_forward_ = false;
    RenderOutput last_;
};

// ---------------------------------------------------------------------------
// Adaptive density control

struct DensifyConfig {
    double grad_threshold = 2e-4;
    double scale_split_threshold = 0.04;
    double opacity_prune_threshold = 0.005;
    int interval = 100;
    std::size_t max_gaussians = 20000;

    void validate(std::size_t initial_count) const {
        if (!(grad_threshold > 0) || !(scale_split_threshold > 0) || !(opacity_prune_threshold > 0) ||
            !(opacity_prune_threshold < 1) || interval < 1) {
            throw InvalidInput("densify thresholds must be strictly positive");
        }
        if (max_gaussians < initial_count) {
            throw InvalidInput("max_gaussians is below the initial Gaussian count");
        }
    }
};

/// Running sum of per-view screen-space gradient norms.
struct DensifyAccumulator {
    std::vector<double> grad_sum;
    std::vector<double> count;

    void reset(std::size_t n) {
        grad_sum.assign(n, 0.0);
        count.assign(n, 0.0);
    }
    std::size_t size() const noexcept { return grad_sum.size(); }

    void add(const GaussianGradients& g) {
        if (g.size() != grad_sum.size()) {
            throw InvalidState("densify accumulator size does not match the scene");
        }
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (g.visible[i]) {
                grad_sum[i] += g.screen_grad[i];
                count[i] += 1.0;
            }
        }
    }

    double mean(std::size_t i) const { return count[i] > 0 ? grad_sum[i] / count[i] : 0.0; }
};

enum class Origin : std::uint8_t { Kept, Clone, Split };

struct DensifyResult {
    GaussianScene scene;
    std::vector<std::size_t> parent;  // source index in the old scene, per new Gaussian
    std::vector<Origin> origin;
    std::vector<std::size_t> densified;  // old indices that were cloned or split
    std::size_t clones = 0, splits = 0, pruned = 0;
};

inline constexpr double kSplitScaleDivisor = 1.6;

inline DensifyResult densify_and_prune(const GaussianScene& scene, const DensifyAccumulator& acc,
                                       const DensifyConfig& cfg, std::mt19937_64& rng) {
    if (acc.size() != scene.size()) {
        throw InvalidState("densify accumulator size does not match the scene");
    }
    const std::size_t n = scene.size();
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < n; ++i) {
        if (acc.count[i] > 0 && acc.mean(i) >= cfg.grad_threshold) {
            candidates.push_back(i);
        }
    }
    std::stable_sort(candidates.begin(), candidates.end(),
                     [&](std::size_t a, std::size_t b) { return acc.mean(a) > acc.mean(b); });
    const std::size_t budget = cfg.max_gaussians > n ? cfg.max_gaussians - n : 0;
    if (candidates.size() > budget) {
        candidates.resize(budget);
    }

    DensifyResult staged;
    staged.scene = scene;
    staged.parent.resize(n);
    std::iota(staged.parent.begin(), staged.parent.end(), std::size_t{0});
    staged.origin.assign(n, Origin::Kept);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (const std::size_t i : candidates) {
        const GaussianPrimitive& g = scene[i];
        staged.densified.push_back(i);
        if (g.max_scale() < cfg.scale_split_threshold) {
            staged.scene.push_back(g);
            staged.parent.push_back(i);
            staged.origin.push_back(Origin::Clone);
            ++staged.clones;
            continue;
        }
        const Mat3 r = g.rotation_matrix();
        const Vec3 s = g.log_scale.array().exp();
        GaussianPrimitive children[2] = {g, g};
        for (auto& child : children) {
            const Vec3 z(normal(rng), normal(rng), normal(rng));
            child.mu = g.mu + r * s.cwiseProduct(z);
            child.log_scale = g.log_scale.array() - std::log(kSplitScaleDivisor);
        }
        staged.scene[i] = children[0];
        staged.origin[i] = Origin::Split;
        staged.scene.push_back(children[1]);
        staged.parent.push_back(i);
        staged.origin.push_back(Origin::Split);
        ++staged.splits;
    }

    DensifyResult out;
    out.densified = std::move(staged.densified);
    out.clones = staged.clones;
    out.splits = staged.splits;
    for (std::size_t k = 0; k < staged.scene.size(); ++k) {
        if (staged.scene[k].opacity() < cfg.opacity_prune_threshold) {
            ++out.pruned;
            continue;
        }
        out.scene.push_back(staged.scene[k]);
        out.parent.push_back(staged.parent[k]);
        out.origin.push_back(staged.origin[k]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Scene checkpoint: "NIMG", u32 version, u64 count, 14 f64 per Gaussian.

inline constexpr std::uint32_t kSceneFormatVersion = 1;

inline void write_scene(std::ostream& os, const GaussianScene& scene) {
    io::write_magic(os, "NIMG");
    io::write_pod<std::uint32_t>(os, kSceneFormatVersion);
    io::write_pod<std::uint64_t>(os, scene.size());
    for (const auto& g : scene) {
        for (const double v : g.to_params()) {
            io::write_pod(os, v);
        }
    }
}

inline GaussianScene read_scene(std::istream& is) {
    io::expect_magic(is, "NIMG");
    const auto version = io::read_pod<std::uint32_t>(is);
    if (version != kSceneFormatVersion) {
        throw DataError("unsupported scene format version " + std::to_string(version));
    }
    const auto count = io::read_pod<std::uint64_t>(is);
    if (count > (1ULL << 28)) {
        throw DataError("scene checkpoint count is implausible");
    }
    GaussianScene scene;
    scene.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        ParamVec p{};
        for (auto& v : p) {
            v = io::read_pod<double>(is);
        }
        scene.push_back(GaussianPrimitive::from_params(p));
    }
    return scene;
}

}  // namespace nimbus
