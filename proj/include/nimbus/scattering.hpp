#pragma once

#include "nimbus/core.hpp"
#include "nimbus/gaussian_field.hpp"
#include "nimbus/imaging.hpp"

#include <optional>
#include <random>
#include <utility>

namespace nimbus {

struct Aabb {
    Vec3 lo = Vec3::Zero();
    Vec3 hi = Vec3::Ones();

    bool valid() const { return (lo.array() < hi.array()).all(); }
    bool contains(const Vec3& x) const { return (x.array() >= lo.array()).all() && (x.array() <= hi.array()).all(); }

    /// Slab test; returns [t_enter, t_exit] for t >= 0 or nullopt on a miss.
    std::optional<std::pair<double, double>> intersect(const Vec3& origin, const Vec3& dir) const {
        double t0 = 0.0;
        double t1 = std::numeric_limits<double>::infinity();
        for (int k = 0; k < 3; ++k) {
            if (std::abs(dir[k]) < 1e-300) {
                if (origin[k] < lo[k] || origin[k] > hi[k]) {
                    return std::nullopt;
                }
                continue;
            }
            double ta = (lo[k] - origin[k]) / dir[k];
            double tb = (hi[k] - origin[k]) / dir[k];
            if (ta > tb) {
                std::swap(ta, tb);
            }
            t0 = std::max(t0, ta);
            t1 = std::min(t1, tb);
        }
        if (t0 > t1) {
            return std::nullopt;
        }
        return std::make_pair(t0, t1);
    }
};

/// Trilinear corner weights of one query point. `inside` is false outside the box.
struct GridStencil {
    std::array<std::size_t, 8> index{};
    std::array<double, 8> weight{};
    bool inside = false;
};

/// Voxel grid of pre-softplus values; nodes sit at cell centers.
/// beta(x) = softplus(trilinear(raw, x)) inside the box and 0 outside.
class ExtinctionGrid {
public:
    ExtinctionGrid() = default;
    ExtinctionGrid(Aabb box, std::array<int, 3> resolution, std::vector<double> raw)
        : box_(box), res_(resolution), raw_(std::move(raw)) {
        if (!box_.valid()) {
            throw InvalidInput("extinction grid box must have min < max on every axis");
        }
        if (res_[0] < 1 || res_[1] < 1 || res_[2] < 1) {
            throw InvalidInput("extinction grid resolution must be positive");
        }
        if (raw_.size() != voxel_count()) {
            throw InvalidInput("extinction grid value count does not match resolution");
        }
    }

    const Aabb& aabb() const noexcept { return box_; }
    const std::array<int, 3>& resolution() const noexcept { return res_; }
    std::vector<double>& raw() noexcept { return raw_; }
    const std::vector<double>& raw() const noexcept { return raw_; }
    std::size_t voxel_count() const noexcept {
        return static_cast<std::size_t>(res_[0]) * res_[1] * res_[2];
    }
    std::size_t index(int ix, int iy, int iz) const noexcept {
        return (static_cast<std::size_t>(iz) * res_[1] + iy) * res_[0] + ix;
    }
    Vec3 cell_size() const { return (box_.hi - box_.lo).cwiseQuotient(Vec3(res_[0], res_[1], res_[2])); }

    GridStencil stencil(const Vec3& x) const {
        GridStencil st;
        if (!box_.contains(x)) {
            return st;
        }
        st.inside = true;
        int i0[3], i1[3];
        double fr[3];
        const Vec3 cell = cell_size();
        for (int k = 0; k < 3; ++k) {
            const double g = std::clamp((x[k] - box_.lo[k]) / cell[k] - 0.5, 0.0, static_cast<double>(res_[k] - 1));
            i0[k] = std::min(static_cast<int>(std::floor(g)), std::max(res_[k] - 2, 0));
            i1[k] = std::min(i0[k] + 1, res_[k] - 1);
            fr[k] = g - i0[k];
        }
        int n = 0;
        for (int dz = 0; dz < 2; ++dz) {
            for (int dy = 0; dy < 2; ++dy) {
                for (int dx = 0; dx < 2; ++dx) {
                    st.index[n] = index(dx ? i1[0] : i0[0], dy ? i1[1] : i0[1], dz ? i1[2] : i0[2]);
                    st.weight[n] = (dx ? fr[0] : 1.0 - fr[0]) * (dy ? fr[1] : 1.0 - fr[1]) * (dz ? fr[2] : 1.0 - fr[2]);
                    ++n;
                }
            }
        }
        return st;
    }

    double interpolate_raw(const GridStencil& st) const {
        double v = 0.0;
        for (int k = 0; k < 8; ++k) {
            v += st.weight[k] * raw_[st.index[k]];
        }
        return v;
    }

    double beta(const Vec3& x) const {
        const GridStencil st = stencil(x);
        return st.inside ? softplus(interpolate_raw(st)) : 0.0;
    }

    double node_beta(std::size_t i) const { return softplus(raw_[i]); }

private:
    Aabb box_;
    std::array<int, 3> res_{1, 1, 1};
    std::vector<double> raw_ = {0.0};
};

inline constexpr double kGridInitStd = 0.01;

/// Box around the Gaussian centers, scaled about its center by `expansion`,
/// with raw values drawn from N(0, 0.01).
inline ExtinctionGrid build_grid(const GaussianScene& scene, std::array<int, 3> resolution, double expansion,
                                 std::uint64_t seed) {
    if (scene.empty()) {
        throw InvalidInput("build_grid: empty scene");
    }
    if (!(expansion > 0.0)) {
        throw InvalidInput("build_grid: expansion must be positive");
    }
    Vec3 lo = scene.front().mu, hi = scene.front().mu;
    for (const auto& g : scene) {
        lo = lo.cwiseMin(g.mu);
        hi = hi.cwiseMax(g.mu);
    }
    for (int k = 0; k < 3; ++k) {
        if (hi[k] - lo[k] <= 0.0) {
            lo[k] -= 0.5;
            hi[k] += 0.5;
        }
    }
    const Vec3 center = 0.5 * (lo + hi);
    const Vec3 half = 0.5 * (hi - lo) * expansion;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, kGridInitStd);
    std::vector<double> raw(static_cast<std::size_t>(resolution[0]) * resolution[1] * resolution[2]);
    for (auto& v : raw) {
        v = normal(rng);
    }
    return ExtinctionGrid(Aabb{center - half, center + half}, resolution, std::move(raw));
}

// ---------------------------------------------------------------------------
// Ray sampling and transmittance

struct RaySamples {
    Vec3 origin = Vec3::Zero();
    Vec3 direction = Vec3::UnitZ();
    double t_near = 0.0;
    double t_far = 0.0;
    std::vector<double> s;   // midpoint positions
    std::vector<double> ds;  // step lengths

    std::size_t count() const noexcept { return s.size(); }
    Vec3 point(std::size_t j) const { return origin + s[j] * direction; }
};

/// K midpoint samples over [t_near, t_far].
inline RaySamples sample_interval(const Vec3& origin, const Vec3& direction, double t_near, double t_far, int k) {
    if (k < 1) {
        throw InvalidInput("sample_interval: K must be at least 1");
    }
    if (!(t_far > t_near)) {
        throw InvalidInput("sample_interval: requires t_near < t_far");
    }
    RaySamples rs;
    rs.origin = origin;
    rs.direction = direction;
    rs.t_near = t_near;
    rs.t_far = t_far;
    const double step = (t_far - t_near) / k;
    rs.s.resize(static_cast<std::size_t>(k));
    rs.ds.assign(static_cast<std::size_t>(k), step);
    for (int j = 0; j < k; ++j) {
        rs.s[static_cast<std::size_t>(j)] = t_near + (j + 0.5) * step;
    }
    return rs;
}

/// Samples along the camera ray through `pixel` from max(near plane, box entry)
/// to min(t_surface, box exit). Empty when that interval is empty.
inline RaySamples sample_ray(const Camera& cam, PixelCoord pixel, double t_surface, int k, const Aabb& box) {
    if (k < 1) {
        throw InvalidInput("sample_ray: K must be at least 1");
    }
    const Vec3 dir = cam.ray_direction(pixel);
    RaySamples empty;
    empty.origin = cam.position;
    empty.direction = dir;
    const auto hit = box.intersect(cam.position, dir);
    if (!hit) {
        return empty;
    }
    const double t_near = std::max(kNearPlane, hit->first);
    const double t_far = std::min(t_surface, hit->second);
    if (!(t_far > t_near)) {
        return empty;
    }
    return sample_interval(cam.position, dir, t_near, t_far, k);
}

struct RayTransmittance {
    double total = 1.0;              // T
    std::vector<double> cumulative;  // T_i, T_1 = 1
    std::vector<double> beta;        // beta at each sample
};

inline RayTransmittance transmittance(const ExtinctionGrid& grid, const RaySamples& rs) {
    RayTransmittance out;
    const std::size_t k = rs.count();
    out.cumulative.resize(k);
    out.beta.resize(k);
    double optical_depth = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
        out.cumulative[j] = std::exp(-optical_depth);
        out.beta[j] = grid.beta(rs.point(j));
        optical_depth += out.beta[j] * rs.ds[j];
    }
    out.total = std::exp(-optical_depth);
    return out;
}

/// sum_i T_i (1 - exp(-beta_i ds_i)); the airlight term is this times A.
inline double scattering_weight(const RayTransmittance& tr, const RaySamples& rs) {
    double s = 0.0;
    for (std::size_t i = 0; i < rs.count(); ++i) {
        s += tr.cumulative[i] * (1.0 - std::exp(-tr.beta[i] * rs.ds[i]));
    }
    return s;
}

inline Vec3 airlight(const RayTransmittance& tr, const RaySamples& rs, const Vec3& color) {
    return scattering_weight(tr, rs) * color;
}

// ---------------------------------------------------------------------------
// Airlight network: (r, g, b, T) -> tanh(32) -> tanh(32) -> sigmoid(3).

class AirlightNetwork {
public:
    static constexpr int kIn = 4;
    static constexpr int kHidden = 32;
    static constexpr int kOut = 3;

    struct Cache {
        std::array<double, kIn> in{};
        std::array<double, kHidden> h1{};
        std::array<double, kHidden> h2{};
        std::array<double, kOut> out{};
    };

    AirlightNetwork() : params_(param_count(), 0.0) {}

    /// Xavier-uniform hidden layers; the output layer starts at zero so A = 0.5.
    static AirlightNetwork create(std::uint64_t seed) {
        AirlightNetwork net;
        std::mt19937_64 rng(seed);
        auto init = [&](std::size_t offset, int fan_in, int fan_out) {
            const double bound = std::sqrt(6.0 / (fan_in + fan_out));
            std::uniform_real_distribution<double> u(-bound, bound);
            for (int i = 0; i < fan_in * fan_out; ++i) {
                net.params_[offset + static_cast<std::size_t>(i)] = u(rng);
            }
        };
        init(kW1, kIn, kHidden);
        init(kW2, kHidden, kHidden);
        return net;
    }

    static constexpr std::size_t param_count() { return kB3 + kOut; }
    std::vector<double>& params() noexcept { return params_; }
    const std::vector<double>& params() const noexcept { return params_; }

    void set_output_bias(const Vec3& b) {
        for (int k = 0; k < kOut; ++k) {
            params_[kB3 + static_cast<std::size_t>(k)] = b[k];
        }
    }

    Vec3 forward(const std::array<double, kIn>& in, Cache* cache = nullptr) const {
        Cache local;
        Cache& c = cache ? *cache : local;
        c.in = in;
        for (int o = 0; o < kHidden; ++o) {
            double a = params_[kB1 + o];
            for (int i = 0; i < kIn; ++i) {
                a += params_[kW1 + static_cast<std::size_t>(o) * kIn + i] * in[static_cast<std::size_t>(i)];
            }
            c.h1[static_cast<std::size_t>(o)] = std::tanh(a);
        }
        for (int o = 0; o < kHidden; ++o) {
            double a = params_[kB2 + o];
            for (int i = 0; i < kHidden; ++i) {
                a += params_[kW2 + static_cast<std::size_t>(o) * kHidden + i] * c.h1[static_cast<std::size_t>(i)];
            }
            c.h2[static_cast<std::size_t>(o)] = std::tanh(a);
        }
        Vec3 out;
        for (int o = 0; o < kOut; ++o) {
            double a = params_[kB3 + o];
            for (int i = 0; i < kHidden; ++i) {
                a += params_[kW3 + static_cast<std::size_t>(o) * kHidden + i] * c.h2[static_cast<std::size_t>(i)];
            }
            out[o] = sigmoid(a);
            c.out[static_cast<std::size_t>(o)] = out[o];
        }
        return out;
    }

    /// Accumulates dL/dparams into g_params; optionally writes dL/dinput.
    void backward(const Cache& c, const Vec3& g_out, std::vector<double>& g_params,
                  std::array<double, kIn>* g_in = nullptr) const {
        std::array<double, kHidden> g_h2{}, g_h1{};
        for (int o = 0; o < kOut; ++o) {
            const double y = c.out[static_cast<std::size_t>(o)];
            const double ga = g_out[o] * y * (1.0 - y);
            g_params[kB3 + o] += ga;
            for (int i = 0; i < kHidden; ++i) {
                const std::size_t wi = kW3 + static_cast<std::size_t>(o) * kHidden + i;
                g_params[wi] += ga * c.h2[static_cast<std::size_t>(i)];
                g_h2[static_cast<std::size_t>(i)] += ga * params_[wi];
            }
        }
        for (int o = 0; o < kHidden; ++o) {
            const double h = c.h2[static_cast<std::size_t>(o)];
            const double ga = g_h2[static_cast<std::size_t>(o)] * (1.0 - h * h);
            g_params[kB2 + o] += ga;
            for (int i = 0; i < kHidden; ++i) {
                const std::size_t wi = kW2 + static_cast<std::size_t>(o) * kHidden + i;
                g_params[wi] += ga * c.h1[static_cast<std::size_t>(i)];
                g_h1[static_cast<std::size_t>(i)] += ga * params_[wi];
            }
        }
        std::array<double, kIn> gi{};
        for (int o = 0; o < kHidden; ++o) {
            const double h = c.h1[static_cast<std::size_t>(o)];
            const double ga = g_h1[static_cast<std::size_t>(o)] * (1.0 - h * h);
            g_params[kB1 + o] += ga;
            for (int i = 0; i < kIn; ++i) {
                const std::size_t wi = kW1 + static_cast<std::size_t>(o) * kIn + i;
                g_params[wi] += ga * c.in[static_cast<std::size_t>(i)];
                gi[static_cast<std::size_t>(i)] += ga * params_[wi];
            }
        }
        if (g_in) {
            *g_in = gi;
        }
    }

    static const std::vector<std::uint32_t>& layer_dims() {
        static const std::vector<std::uint32_t> dims = {kIn, kHidden, kHidden, kOut};
        return dims;
    }

private:
    static constexpr std::size_t kW1 = 0;
    static constexpr std::size_t kB1 = kW1 + kIn * kHidden;
    static constexpr std::size_t kW2 = kB1 + kHidden;
    static constexpr std::size_t kB2 = kW2 + kHidden * kHidden;
    static constexpr std::size_t kW3 = kB2 + kHidden;
    static constexpr std::size_t kB3 = kW3 + kHidden * kOut;

    std::vector<double> params_;
};

inline Vec3 predict_airlight(const AirlightNetwork& net, const Vec3& degraded_rgb, double t,
                             AirlightNetwork::Cache* cache = nullptr) {
    return net.forward({degraded_rgb[0], degraded_rgb[1], degraded_rgb[2], t}, cache);
}

// ---------------------------------------------------------------------------
// Per-view medium rendering: transmittance map T and airlight map P.

struct MediumOutput {
    ImageBuffer transmittance;  // 1 channel
    ImageBuffer airlight;       // P, 3 channels
    ImageBuffer color;          // predicted A per ray, 3 channels
};

struct MediumGradients {
    std::vector<double> grid;
    std::vector<double> network;
};

class MediumRenderer {
public:
    explicit MediumRenderer(int samples = 64) : samples_(samples) {
        if (samples < 1) {
            throw InvalidInput("MediumRenderer: K must be at least 1");
        }
    }

    int samples() const noexcept { return samples_; }

    /// `depth` holds camera-space z from the Gaussian render; it bounds each ray
    /// and is treated as a constant.
    MediumOutput render(const ExtinctionGrid& grid, const AirlightNetwork& net, const Camera& cam,
                        const ImageBuffer& depth, const ImageBuffer& degraded) {
        if (depth.height() != cam.height || depth.width() != cam.width || !degraded.same_shape(ImageBuffer(cam.height, cam.width, 3))) {
            throw InvalidInput("MediumRenderer: map sizes do not match the camera");
        }
        grid_ = &grid;
        net_ = &net;
        cam_ = cam;
        const int h = cam.height, w = cam.width;
        rays_.assign(static_cast<std::size_t>(h) * w, RayState{});
        MediumOutput out{ImageBuffer(h, w, 1), ImageBuffer(h, w, 3), ImageBuffer(h, w, 3)};
        parallel_for_chunks(band_count(), [&](std::size_t band) {
            const auto [y0, y1] = band_rows(band);
            for (int y = y0; y < y1; ++y) {
                for (int x = 0; x < w; ++x) {
                    RayState& ray = rays_[static_cast<std::size_t>(y) * w + x];
                    const PixelCoord p{x + 0.5, y + 0.5};
                    ray.t_surface = depth.at(y, x) / cam.z_per_distance(p);
                    const RaySamples rs = sample_ray(cam, p, ray.t_surface, samples_, grid.aabb());
                    const RayTransmittance tr = transmittance(grid, rs);
                    ray.total = tr.total;
                    ray.weight = scattering_weight(tr, rs);
                    const Vec3 in(degraded.at(y, x, 0), degraded.at(y, x, 1), degraded.at(y, x, 2));
                    const Vec3 a = predict_airlight(net, in, tr.total, &ray.net);
                    out.transmittance.at(y, x) = tr.total;
                    for (int c = 0; c < 3; ++c) {
                        out.airlight.at(y, x, c) = ray.weight * a[c];
                        out.color.at(y, x, c) = a[c];
                    }
                }
            }
        });
        has_forward_ = true;
        return out;
    }

    MediumGradients backward(const ImageBuffer& g_transmittance, const ImageBuffer& g_airlight) const {
        if (!has_forward_) {
            throw InvalidState("medium backward called without a cached forward pass");
        }
        const int h = cam_.height, w = cam_.width;
        const std::size_t nv = grid_->voxel_count();
        const std::size_t np = AirlightNetwork::param_count();
        std::vector<MediumGradients> partial(band_count());
        parallel_for_chunks(band_count(), [&](std::size_t band) {
            MediumGradients& g = partial[band];
            g.grid.assign(nv, 0.0);
            g.network.assign(np, 0.0);
            std::vector<double> tcum, beta, pre;
            std::vector<GridStencil> st;
            const auto [y0, y1] = band_rows(band);
            for (int y = y0; y < y1; ++y) {
                for (int x = 0; x < w; ++x) {
                    const RayState& ray = rays_[static_cast<std::size_t>(y) * w + x];
                    const Vec3 a(ray.net.out[0], ray.net.out[1], ray.net.out[2]);
                    const Vec3 gp(g_airlight.at(y, x, 0), g_airlight.at(y, x, 1), g_airlight.at(y, x, 2));
                    double g_total = g_transmittance.at(y, x);
                    const double g_weight = gp.dot(a);
                    std::array<double, AirlightNetwork::kIn> g_in{};
                    net_->backward(ray.net, gp * ray.weight, g.network, &g_in);
                    g_total += g_in[3];

                    const PixelCoord p{x + 0.5, y + 0.5};
                    const RaySamples rs = sample_ray(cam_, p, ray.t_surface, samples_, grid_->aabb());
                    const std::size_t k = rs.count();
                    if (k == 0) {
                        continue;
                    }
                    tcum.resize(k + 1);
                    beta.resize(k);
                    pre.resize(k);
                    st.resize(k);
                    double od = 0.0;
                    for (std::size_t j = 0; j < k; ++j) {
                        tcum[j] = std::exp(-od);
                        st[j] = grid_->stencil(rs.point(j));
                        pre[j] = st[j].inside ? grid_->interpolate_raw(st[j]) : 0.0;
                        beta[j] = st[j].inside ? softplus(pre[j]) : 0.0;
                        od += beta[j] * rs.ds[j];
                    }
                    const double total = std::exp(-od);
                    // suffix = sum_{i > j} T_i (1 - exp(-tau_i))
                    double suffix = 0.0;
                    for (std::size_t jj = k; jj-- > 0;) {
                        const double next = tcum[jj] * std::exp(-beta[jj] * rs.ds[jj]);
                        const double g_tau = -g_total * total + g_weight * (next - suffix);
                        suffix += tcum[jj] - next;
                        if (!st[jj].inside) {
                            continue;
                        }
                        const double g_pre = g_tau * rs.ds[jj] * sigmoid(pre[jj]);
                        for (int c = 0; c < 8; ++c) {
                            g.grid[st[jj].index[c]] += g_pre * st[jj].weight[c];
                        }
                    }
                }
            }
        });
        MediumGradients total{std::vector<double>(nv, 0.0), std::vector<double>(np, 0.0)};
        for (const auto& part : partial) {
            for (std::size_t i = 0; i < nv; ++i) {
                total.grid[i] += part.grid[i];
            }
            for (std::size_t i = 0; i < np; ++i) {
                total.network[i] += part.network[i];
            }
        }
        return total;
    }

private:
    static constexpr int kBandRows = 16;

    struct RayState {
        double t_surface = 0.0;
        double total = 1.0;
        double weight = 0.0;
        AirlightNetwork::Cache net;
    };

    std::size_t band_count() const { return static_cast<std::size_t>((cam_.height + kBandRows - 1) / kBandRows); }
    std::pair<int, int> band_rows(std::size_t band) const {
        const int y0 = static_cast<int>(band) * kBandRows;
        return {y0, std::min(cam_.height, y0 + kBandRows)};
    }

    int samples_;
    const ExtinctionGrid* grid_ = nullptr;
    const AirlightNetwork* net_ = nullptr;
    Camera cam_;
    std::vector<RayState> rays_;
    bool has_forward_ = false;
};

/// I_con = I_hat * T + P. T may have 1 channel (broadcast) or 3.
inline ImageBuffer compose_continuous(const ImageBuffer& clean, const ImageBuffer& trans, const ImageBuffer& air) {
    require_same_shape(clean, air, "compose_continuous");
    if (trans.height() != clean.height() || trans.width() != clean.width() ||
        (trans.channels() != 1 && trans.channels() != clean.channels())) {
        throw InvalidInput("compose_continuous: transmittance map dimension mismatch");
    }
    ImageBuffer out(clean.height(), clean.width(), clean.channels());
    for (int y = 0; y < clean.height(); ++y) {
        for (int x = 0; x < clean.width(); ++x) {
            for (int c = 0; c < clean.channels(); ++c) {
                const double t = trans.at(y, x, trans.channels() == 1 ? 0 : c);
                out.at(y, x, c) = clean.at(y, x, c) * t + air.at(y, x, c);
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Anisotropic L1 total variation on node betas: sum over axes of the mean
// absolute forward difference along that axis.

struct TvResult {
    double value = 0.0;
    std::vector<double> grad;  // d value / d raw
};

inline TvResult tv_loss(const ExtinctionGrid& grid, bool want_grad = true) {
    const auto& res = grid.resolution();
    if (res[0] < 2 || res[1] < 2 || res[2] < 2) {
        throw InvalidInput("tv_loss: resolution must be at least 2 per axis");
    }
    TvResult out;
    if (want_grad) {
        out.grad.assign(grid.voxel_count(), 0.0);
    }
    std::vector<double> beta(grid.voxel_count()), dbeta(grid.voxel_count());
    for (std::size_t i = 0; i < beta.size(); ++i) {
        beta[i] = softplus(grid.raw()[i]);
        dbeta[i] = sigmoid(grid.raw()[i]);
    }
    for (int axis = 0; axis < 3; ++axis) {
        const int nx = res[0] - (axis == 0), ny = res[1] - (axis == 1), nz = res[2] - (axis == 2);
        const double inv_n = 1.0 / (static_cast<double>(nx) * ny * nz);
        double sum = 0.0;
        for (int z = 0; z < nz; ++z) {
            for (int y = 0; y < ny; ++y) {
                for (int x = 0; x < nx; ++x) {
                    const std::size_t a = grid.index(x, y, z);
                    const std::size_t b = grid.index(x + (axis == 0), y + (axis == 1), z + (axis == 2));
                    const double d = beta[b] - beta[a];
                    sum += std::abs(d);
                    if (want_grad && d != 0.0) {
                        const double s = (d > 0 ? 1.0 : -1.0) * inv_n;
                        out.grad[b] += s * dbeta[b];
                        out.grad[a] -= s * dbeta[a];
                    }
                }
            }
        }
        out.value += sum * inv_n;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoint formats.
// Grid: "NIMB", 6 f64 box (lo then hi), 3 u32 resolution, raw f64 array.
// Network: "NIMA", u32 layer-dim count, u32 dims, row-major weights then bias per layer (f64).

inline void write_grid(std::ostream& os, const ExtinctionGrid& grid) {
    io::write_magic(os, "NIMB");
    for (int k = 0; k < 3; ++k) {
        io::write_pod(os, grid.aabb().lo[k]);
    }
    for (int k = 0; k < 3; ++k) {
        io::write_pod(os, grid.aabb().hi[k]);
    }
    for (int k = 0; k < 3; ++k) {
        io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(grid.resolution()[static_cast<std::size_t>(k)]));
    }
    io::write_f64_array(os, grid.raw());
}

inline ExtinctionGrid read_grid(std::istream& is) {
    io::expect_magic(is, "NIMB");
    Aabb box;
    for (int k = 0; k < 3; ++k) {
        box.lo[k] = io::read_pod<double>(is);
    }
    for (int k = 0; k < 3; ++k) {
        box.hi[k] = io::read_pod<double>(is);
    }
    std::array<int, 3> res{};
    for (auto& r : res) {
        const auto v = io::read_pod<std::uint32_t>(is);
        if (v == 0 || v > 4096) {
            throw DataError("NIMB: invalid resolution");
        }
        r = static_cast<int>(v);
    }
    auto raw = io::read_f64_array(is, static_cast<std::size_t>(res[0]) * res[1] * res[2]);
    try {
        return ExtinctionGrid(box, res, std::move(raw));
    } catch (const InvalidInput& e) {
        throw DataError(std::string("NIMB: ") + e.what());
    }
}

inline void write_network(std::ostream& os, const AirlightNetwork& net) {
    io::write_magic(os, "NIMA");
    const auto& dims = AirlightNetwork::layer_dims();
    io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(dims.size()));
    for (const auto d : dims) {
        io::write_pod<std::uint32_t>(os, d);
    }
    io::write_f64_array(os, net.params());
}

inline AirlightNetwork read_network(std::istream& is) {
    io::expect_magic(is, "NIMA");
    const auto n = io::read_pod<std::uint32_t>(is);
    const auto& dims = AirlightNetwork::layer_dims();
    if (n != dims.size()) {
        throw DataError("NIMA: unexpected layer count");
    }
    for (const auto d : dims) {
        if (io::read_pod<std::uint32_t>(is) != d) {
            throw DataError("NIMA: unexpected layer width");
        }
    }
    AirlightNetwork net;
    net.params() = io::read_f64_array(is, AirlightNetwork::param_count());
    return net;
}

}  // namespace nimbus
