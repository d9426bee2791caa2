#pragma once

#include "nimbus/ggs.hpp"
#include "nimbus/losses.hpp"
#include "nimbus/optim.hpp"
#include "nimbus/particulate.hpp"
#include "nimbus/scattering.hpp"

#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>

namespace nimbus {

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
    int m_init = 200;
    int m_joint = 800;
    int z_ref = 100;
    int samples = 64;
    double r0 = 3.0;
    LossWeights loss;
    int dcp_patch = 7;
    bool dcp_stage2 = false;

    GaussianLr lr;  // position is a fraction of the scene extent
    double lr_position_final = 1.6e-6;
    double lr_scale_stage1 = 2e-3;
    double lr_grid = 5e-3;
    double lr_airlight = 5e-4;

    int densify_interval = 100;
    double densify_grad_threshold = 2e-4;
    double densify_split_fraction = 0.01;  // of the scene extent
    double densify_prune_opacity = 0.005;
    int densify_max = 20000;
    double densify_until = 0.5;  // fraction of stage 2
    bool densify_stage1 = false;

    std::uint64_t seed = 1;
    std::array<int, 3> grid_resolution{32, 32, 32};
    double grid_expansion = 2.0;
    double grid_init_mean = 0.0;
    bool airlight_from_data = true;
    double init_random_fraction = 0.1;
    double init_opacity = 0.1;

    bool ggs = true;
    bool csm = true;
    bool plm = true;
    GgsFactor ggs_drop = GgsFactor::None;

    int checkpoint_interval = 0;

    long total() const { return static_cast<long>(m_init) + m_joint; }

    void validate() const {
        if (m_init < 1 || m_joint < 0 || z_ref < 1) {
            throw InvalidInput("config: need m_init >= 1, m_joint >= 0, z_ref >= 1");
        }
        for (const double v : {lr.position, lr.scale, lr.rotation, lr.opacity, lr.color, lr_position_final,
                               lr_scale_stage1, lr_grid, lr_airlight}) {
            if (!(v > 0.0) || !std::isfinite(v)) {
                throw InvalidInput("config: every learning rate must be > 0");
            }
        }
        loss.validate();
        if (samples < 1 || dcp_patch < 1 || dcp_patch % 2 == 0 || !(r0 > 0)) {
            throw InvalidInput("config: k >= 1, odd dcp_patch and r0 > 0 required");
        }
        if (densify_interval < 1 || !(densify_grad_threshold > 0) || !(densify_split_fraction > 0) ||
            !(densify_prune_opacity > 0 && densify_prune_opacity < 1) || densify_max < 1 ||
            !(densify_until >= 0 && densify_until <= 1)) {
            throw InvalidInput("config: densify settings out of range");
        }
        if (grid_resolution[0] < 2 || grid_resolution[1] < 2 || grid_resolution[2] < 2 || !(grid_expansion > 0)) {
            throw InvalidInput("config: grid resolution >= 2 per axis and expansion > 0 required");
        }
        if (!(init_random_fraction >= 0) || !(init_opacity > 0 && init_opacity < 1) || checkpoint_interval < 0) {
            throw InvalidInput("config: initialization settings out of range");
        }
    }
};

namespace detail {

inline std::string trim(std::string_view s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string_view::npos) {
        return {};
    }
    const auto b = s.find_last_not_of(" \t\r");
    return std::string(s.substr(a, b - a + 1));
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
    T out{};
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size()) {
        throw InvalidInput("config key '" + key + "': cannot parse '" + v + "'");
    }
    return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "on") return true;
    if (v == "false" || v == "0" || v == "off") return false;
    throw InvalidInput("config key '" + key + "': expected true or false, got '" + v + "'");
}

inline std::string format_double(double v) {
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

struct ConfigField {
    std::string key;
    std::function<void(TrainConfig&, const std::string&)> set;
    std::function<std::string(const TrainConfig&)> get;
};

template <class T, class Access>
ConfigField field(std::string key, Access access) {
    ConfigField f;
    f.key = key;
    f.set = [key, access](TrainConfig& c, const std::string& v) {
        T& ref = access(c);
        if constexpr (std::is_same_v<T, bool>) {
            ref = parse_bool(key, v);
        } else {
            ref = parse_number<T>(key, v);
        }
    };
    f.get = [access](const TrainConfig& c) {
        const T& ref = access(const_cast<TrainConfig&>(c));
        if constexpr (std::is_same_v<T, bool>) {
            return std::string(ref ? "true" : "false");
        } else if constexpr (std::is_floating_point_v<T>) {
            return format_double(ref);
        } else {
            return std::to_string(ref);
        }
    };
    return f;
}

#define NIMBUS_FIELD(type, key, member) field<type>(key, [](TrainConfig& c) -> type& { return c.member; })

inline const std::vector<ConfigField>& config_fields() {
    static const std::vector<ConfigField> fields = [] {
        std::vector<ConfigField> f = {
            NIMBUS_FIELD(int, "m_init", m_init),
            NIMBUS_FIELD(int, "m_joint", m_joint),
            NIMBUS_FIELD(int, "z_ref", z_ref),
            NIMBUS_FIELD(int, "k", samples),
            NIMBUS_FIELD(double, "r0", r0),
            NIMBUS_FIELD(double, "lambda_r", loss.lambda_r),
            NIMBUS_FIELD(double, "lambda_dcp", loss.lambda_dcp),
            NIMBUS_FIELD(double, "lambda_tv", loss.lambda_tv),
            NIMBUS_FIELD(int, "dcp_patch", dcp_patch),
            NIMBUS_FIELD(bool, "dcp_stage2", dcp_stage2),
            NIMBUS_FIELD(double, "lr.position", lr.position),
            NIMBUS_FIELD(double, "lr.position_final", lr_position_final),
            NIMBUS_FIELD(double, "lr.scale", lr.scale),
            NIMBUS_FIELD(double, "lr.scale_stage1", lr_scale_stage1),
            NIMBUS_FIELD(double, "lr.rotation", lr.rotation),
            NIMBUS_FIELD(double, "lr.opacity", lr.opacity),
            NIMBUS_FIELD(double, "lr.color", lr.color),
            NIMBUS_FIELD(double, "lr.grid", lr_grid),
            NIMBUS_FIELD(double, "lr.airlight", lr_airlight),
            NIMBUS_FIELD(int, "densify.interval", densify_interval),
            NIMBUS_FIELD(double, "densify.grad_threshold", densify_grad_threshold),
            NIMBUS_FIELD(double, "densify.split_fraction", densify_split_fraction),
            NIMBUS_FIELD(double, "densify.prune_opacity", densify_prune_opacity),
            NIMBUS_FIELD(int, "densify.max_gaussians", densify_max),
            NIMBUS_FIELD(double, "densify.until", densify_until),
            NIMBUS_FIELD(bool, "densify.stage1", densify_stage1),
            NIMBUS_FIELD(std::uint64_t, "seed", seed),
            NIMBUS_FIELD(double, "grid.expansion", grid_expansion),
            NIMBUS_FIELD(double, "grid.init_mean", grid_init_mean),
            NIMBUS_FIELD(bool, "airlight.from_data", airlight_from_data),
            NIMBUS_FIELD(double, "init.random_fraction", init_random_fraction),
            NIMBUS_FIELD(double, "init.opacity", init_opacity),
            NIMBUS_FIELD(bool, "ggs.enable", ggs),
            NIMBUS_FIELD(bool, "csm.enable", csm),
            NIMBUS_FIELD(bool, "plm.enable", plm),
            NIMBUS_FIELD(int, "checkpoint.interval", checkpoint_interval),
        };
        ConfigField res;
        res.key = "grid.resolution";
        res.set = [](TrainConfig& c, const std::string& v) {
            std::istringstream is(v);
            std::vector<std::string> parts;
            for (std::string p; is >> p;) {
                parts.push_back(p);
            }
            if (parts.size() == 1) {
                c.grid_resolution.fill(parse_number<int>("grid.resolution", parts[0]));
            } else if (parts.size() == 3) {
                for (std::size_t k = 0; k < 3; ++k) {
                    c.grid_resolution[k] = parse_number<int>("grid.resolution", parts[k]);
                }
            } else {
                throw InvalidInput("config key 'grid.resolution': expected 1 or 3 integers");
            }
        };
        res.get = [](const TrainConfig& c) {
            return std::to_string(c.grid_resolution[0]) + ' ' + std::to_string(c.grid_resolution[1]) + ' ' +
                   std::to_string(c.grid_resolution[2]);
        };
        f.push_back(res);
        ConfigField drop;
        drop.key = "ggs.drop";
        drop.set = [](TrainConfig& c, const std::string& v) { c.ggs_drop = parse_ggs_factor(v); };
        drop.get = [](const TrainConfig& c) { return to_string(c.ggs_drop); };
        f.push_back(drop);
        return f;
    }();
    return fields;
}

#undef NIMBUS_FIELD

}  // namespace detail

/// Sets one key; unknown keys throw InvalidInput naming the key.
inline void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value) {
    for (const auto& f : detail::config_fields()) {
        if (f.key == key) {
            f.set(cfg, value);
            return;
        }
    }
    throw InvalidInput("unknown config key '" + key + "'");
}

/// Applies "key = value" lines on top of `cfg`. '#' starts a comment.
inline TrainConfig parse_config(std::istream& is, TrainConfig cfg = {}) {
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) {
            line.erase(hash);
        }
        if (detail::trim(line).empty()) {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw InvalidInput("config line " + std::to_string(lineno) + ": expected key = value");
        }
        set_config_value(cfg, detail::trim(std::string_view(line).substr(0, eq)),
                         detail::trim(std::string_view(line).substr(eq + 1)));
    }
    cfg.validate();
    return cfg;
}

inline TrainConfig parse_config(const std::string& text, TrainConfig cfg = {}) {
    std::istringstream is(text);
    return parse_config(is, cfg);
}

/// "key=value" override as given on the command line.
inline void apply_override(TrainConfig& cfg, const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
        throw InvalidInput("override '" + kv + "' is not key=value");
    }
    set_config_value(cfg, detail::trim(std::string_view(kv).substr(0, eq)),
                     detail::trim(std::string_view(kv).substr(eq + 1)));
}

/// Canonical text form, one line per key in a fixed order.
inline std::string config_to_text(const TrainConfig& cfg) {
    std::string out;
    for (const auto& f : detail::config_fields()) {
        out += f.key + " = " + f.get(cfg) + '\n';
    }
    return out;
}

inline std::uint64_t config_hash(const TrainConfig& cfg) { return fnv1a(config_to_text(cfg)); }

// ---------------------------------------------------------------------------
// Schedule

struct StageInfo {
    int stage = 1;
    bool ggs = false;
    bool densify = false;
    bool residual = false;
    bool scale_override = true;
    long joint_iteration = 0;  // 1-based count within stage 2, 0 in stage 1
};

inline StageInfo stage_schedule(long iteration, const TrainConfig& cfg) {
    if (iteration < 0 || iteration >= cfg.total()) {
        throw InvalidInput("stage_schedule: iteration outside the training budget");
    }
    StageInfo s;
    if (iteration < cfg.m_init) {
        s.densify = cfg.densify_stage1 && (iteration + 1) % cfg.densify_interval == 0;
        return s;
    }
    s.stage = 2;
    s.scale_override = false;
    s.joint_iteration = iteration - cfg.m_init + 1;
    s.ggs = cfg.ggs;
    s.residual = cfg.plm;
    s.densify = s.joint_iteration % cfg.densify_interval == 0 &&
                static_cast<double>(s.joint_iteration) <= cfg.densify_until * cfg.m_joint;
    return s;
}

/// Radius of the camera centers around their mean, times 1.1.
inline double scene_extent(const std::vector<Camera>& cams) {
    Vec3 c = Vec3::Zero();
    for (const auto& cam : cams) {
        c += cam.position;
    }
    c /= static_cast<double>(cams.size());
    double r = 0.0;
    for (const auto& cam : cams) {
        r = std::max(r, (cam.position - c).norm());
    }
    return r > 0.0 ? 1.1 * r : 1.0;
}

/// Position learning rate: constant in stage 1, log-linear decay over stage 2.
inline double position_lr(long iteration, const TrainConfig& cfg, double extent) {
    const double a = cfg.lr.position * extent;
    if (iteration < cfg.m_init || cfg.m_joint == 0) {
        return a;
    }
    const double b = cfg.lr_position_final * extent;
    const double t = std::clamp(static_cast<double>(iteration - cfg.m_init) / cfg.m_joint, 0.0, 1.0);
    return std::exp((1.0 - t) * std::log(a) + t * std::log(b));
}

inline GaussianLr gaussian_lr(long iteration, const TrainConfig& cfg, double extent) {
    GaussianLr lr = cfg.lr;
    lr.position = position_lr(iteration, cfg, extent);
    if (iteration < cfg.m_init) {
        lr.scale = cfg.lr_scale_stage1;
    }
    return lr;
}

/// View for `iteration`: a seeded shuffle of all views per epoch.
inline std::size_t view_for_iteration(long iteration, std::size_t views, std::uint64_t seed) {
    const auto epoch = static_cast<std::uint64_t>(iteration) / views;
    std::vector<std::size_t> order(views);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(mix_seed(mix_seed(seed, 2), epoch));
    std::shuffle(order.begin(), order.end(), rng);
    return order[static_cast<std::size_t>(iteration) % views];
}

// ---------------------------------------------------------------------------
// Initialization

/// Points plus a fraction of uniform-random points in their box; isotropic
/// scales from the mean squared distance to the three nearest neighbours.
inline GaussianScene initial_scene(const std::vector<Vec3>& points, const TrainConfig& cfg) {
    if (points.size() < 4) {
        throw InvalidInput("initial_scene: need at least 4 points");
    }
    Vec3 lo = points.front(), hi = points.front();
    for (const auto& p : points) {
        lo = lo.cwiseMin(p);
        hi = hi.cwiseMax(p);
    }
    std::vector<Vec3> all = points;
    std::mt19937_64 rng(mix_seed(cfg.seed, 1));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const auto extra = static_cast<std::size_t>(std::lround(cfg.init_random_fraction * points.size()));
    for (std::size_t i = 0; i < extra; ++i) {
        all.push_back(lo + Vec3(u(rng), u(rng), u(rng)).cwiseProduct(hi - lo));
    }
    GaussianScene scene(all.size());
    for (std::size_t i = 0; i < all.size(); ++i) {
        std::array<double, 3> best{1e300, 1e300, 1e300};
        for (std::size_t j = 0; j < all.size(); ++j) {
            if (j == i) {
                continue;
            }
            const double d = (all[i] - all[j]).squaredNorm();
            if (d < best[2]) {
                best[2] = d;
                std::sort(best.begin(), best.end());
            }
        }
        const double mean_sq = (best[0] + best[1] + best[2]) / 3.0;
        GaussianPrimitive& g = scene[i];
        g.mu = all[i];
        g.log_scale = Vec3::Constant(std::log(std::max(std::sqrt(mean_sq), 1e-7)));
        g.opacity_logit = logit(cfg.init_opacity);
        g.color = Vec3::Constant(0.5);
    }
    return scene;
}

/// Mean input color over the brightest 0.1% of dark-channel pixels.
inline Vec3 estimate_airlight(const std::vector<ImageBuffer>& inputs, int patch) {
    std::vector<std::pair<double, Vec3>> samples;
    for (const auto& img : inputs) {
        const DarkChannel dc = dark_channel(img, patch);
        for (int y = 0; y < img.height(); ++y) {
            for (int x = 0; x < img.width(); ++x) {
                samples.emplace_back(dc.value.at(y, x), Vec3(img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2)));
            }
        }
    }
    const std::size_t n = std::max<std::size_t>(1, samples.size() / 1000);
    std::partial_sort(samples.begin(), samples.begin() + static_cast<long>(n), samples.end(),
                      [](const auto& a, const auto& b) { return a.first > b.first; });
    Vec3 sum = Vec3::Zero();
    for (std::size_t i = 0; i < n; ++i) {
        sum += samples[i].second;
    }
    return sum / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Model and training state

struct Model {
    GaussianScene scene;
    bool medium = false;
    ExtinctionGrid grid;
    AirlightNetwork net;
};

struct TrainState {
    long iteration = 0;  // iterations completed
    long step = 0;       // optimizer steps taken
    double extent = 1.0;
    Model model;
    std::vector<ParticulateLayer> layers;
    GaussianAdam gaussian_opt;
    AdamMoments grid_opt, net_opt;
    DensifyAccumulator densify;
};

struct TrainingData {
    std::vector<Camera> cameras;
    std::vector<ImageBuffer> inputs;
    std::vector<Vec3> points;
};

inline TrainState initial_state(const TrainingData& data, const TrainConfig& cfg) {
    TrainState st;
    st.extent = scene_extent(data.cameras);
    st.model.scene = initial_scene(data.points, cfg);
    st.model.medium = cfg.csm;
    if (cfg.csm) {
        st.model.grid = build_grid(st.model.scene, cfg.grid_resolution, cfg.grid_expansion, mix_seed(cfg.seed, 4));
        for (auto& v : st.model.grid.raw()) {
            v += cfg.grid_init_mean;
        }
        st.model.net = AirlightNetwork::create(mix_seed(cfg.seed, 5));
        if (cfg.airlight_from_data) {
            const Vec3 a = estimate_airlight(data.inputs, cfg.dcp_patch).cwiseMax(0.05).cwiseMin(0.95);
            st.model.net.set_output_bias(Vec3(logit(a[0]), logit(a[1]), logit(a[2])));
        }
        st.grid_opt.resize(st.model.grid.voxel_count());
        st.net_opt.resize(AirlightNetwork::param_count());
    }
    st.gaussian_opt.resize(st.model.scene.size());
    st.densify.reset(st.model.scene.size());
    return st;
}

inline ImageBuffer render_clean(const Model& model, const Camera& cam) {
    Rasterizer r;
    return r.render(model.scene, cam).color;
}

/// Mean extinction along camera rays through pixels with alpha above
/// `min_alpha`, each ray averaged over its samples up to the rendered surface.
/// NaN when no ray qualifies.
inline double mean_ray_extinction(const ExtinctionGrid& grid, const Camera& cam, const ImageBuffer& depth,
                                  const ImageBuffer& alpha, int samples = 64, double min_alpha = 0.5) {
    double sum = 0.0;
    long rays = 0;
    for (int y = 0; y < cam.height; ++y) {
        for (int x = 0; x < cam.width; ++x) {
            if (!(alpha.at(y, x) > min_alpha)) {
                continue;
            }
            const PixelCoord p{x + 0.5, y + 0.5};
            const RaySamples rs = sample_ray(cam, p, depth.at(y, x) / cam.z_per_distance(p), samples, grid.aabb());
            if (rs.s.empty()) {
                continue;
            }
            double b = 0.0, len = 0.0;
            for (std::size_t i = 0; i < rs.s.size(); ++i) {
                b += grid.beta(rs.origin + rs.s[i] * rs.direction) * rs.ds[i];
                len += rs.ds[i];
            }
            sum += b / len;
            ++rays;
        }
    }
    return rays > 0 ? sum / static_cast<double>(rays) : std::numeric_limits<double>::quiet_NaN();
}

/// Every intermediate of one view's forward pass.
struct ViewForward {
    ImageBuffer clean, alpha, depth;  // Gaussian render
    ImageBuffer transmittance;        // T, 1 channel
    ImageBuffer airlight;             // P
    ImageBuffer airlight_color;       // A per ray
    ImageBuffer continuous;           // I_con = clean * T + P
    ImageBuffer residual;             // R (zeros without a layer)
    ImageBuffer degraded;             // I_deg = I_con + R
};

/// Forward pass used by the optimizer. A null layer means no residual is attached.
inline ViewForward forward_view(const Model& model, const Camera& cam, const ImageBuffer& input,
                                const ParticulateLayer* layer, int samples, Rasterizer& raster,
                                MediumRenderer* medium = nullptr) {
    ViewForward f;
    RenderOutput ro = raster.render(model.scene, cam);
    f.clean = std::move(ro.color);
    f.alpha = std::move(ro.alpha);
    f.depth = std::move(ro.depth);
    const int h = cam.height, w = cam.width;
    if (model.medium) {
        MediumRenderer local(samples);
        MediumRenderer& mr = medium ? *medium : local;
        MediumOutput mo = mr.render(model.grid, model.net, cam, f.depth, input);
        f.transmittance = std::move(mo.transmittance);
        f.airlight = std::move(mo.airlight);
        f.airlight_color = std::move(mo.color);
        f.continuous = compose_continuous(f.clean, f.transmittance, f.airlight);
    } else {
        f.transmittance = ImageBuffer(h, w, 1, 1.0);
        f.airlight = ImageBuffer(h, w, 3);
        f.airlight_color = ImageBuffer(h, w, 3);
        f.continuous = f.clean;
    }
    if (layer) {
        f.residual = layer->residual;
        f.degraded = compose_degraded(f.continuous, *layer);
    } else {
        f.residual = ImageBuffer(h, w, 3);
        f.degraded = f.continuous;
    }
    return f;
}

inline ViewForward forward_view(const Model& model, const Camera& cam, const ImageBuffer& input,
                                const ParticulateLayer* layer, int samples) {
    Rasterizer r;
    return forward_view(model, cam, input, layer, samples, r);
}

// ---------------------------------------------------------------------------
// One optimization step's gradients, exposed for whole-graph gradient checks.

struct StepGradients {
    StageLoss loss;
    GaussianGradients gaussians;
    std::vector<double> grid;
    std::vector<double> network;
    ViewForward forward;
};

/// Loss and gradients of one view under the given stage, before GGS. No state
/// is modified; `raster` keeps the fragments of this render.
inline StepGradients compute_step_unscaled(const Model& model, const Camera& cam, const ImageBuffer& input,
                                           const ParticulateLayer* layer, int stage, const TrainConfig& cfg,
                                           Rasterizer& raster) {
    MediumRenderer medium(cfg.samples);
    StepGradients out;
    out.forward = forward_view(model, cam, input, stage == 2 ? layer : nullptr, cfg.samples, raster, &medium);
    const ViewForward& f = out.forward;
    const ExtinctionGrid* grid = model.medium ? &model.grid : nullptr;
    if (stage == 1 && model.medium) {
        out.loss = stage1_loss(input, f.continuous, f.clean, grid, cfg.loss, cfg.dcp_patch);
    } else if (stage == 1) {
        out.loss = stage2_loss(input, f.continuous, nullptr, cfg.loss, nullptr, cfg.dcp_patch);
    } else {
        out.loss = stage2_loss(input, f.degraded, grid, cfg.loss, cfg.dcp_stage2 ? &f.clean : nullptr, cfg.dcp_patch);
    }
    if (!std::isfinite(out.loss.report.total)) {
        return out;
    }
    const ImageBuffer& gp = out.loss.grad_prediction;
    const int h = cam.height, w = cam.width;
    ImageBuffer g_clean(h, w, 3);
    if (model.medium) {
        ImageBuffer g_t(h, w, 1);
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                const double t = f.transmittance.at(y, x);
                double s = 0.0;
                for (int c = 0; c < 3; ++c) {
                    g_clean.at(y, x, c) = gp.at(y, x, c) * t;
                    s += gp.at(y, x, c) * f.clean.at(y, x, c);
                }
                g_t.at(y, x) = s;
            }
        }
        MediumGradients mg = medium.backward(g_t, gp);
        out.grid = std::move(mg.grid);
        out.network = std::move(mg.network);
        for (std::size_t i = 0; i < out.grid.size(); ++i) {
            out.grid[i] += out.loss.grad_grid[i];
        }
    } else {
        g_clean = gp;
    }
    if (out.loss.grad_clean.size() == g_clean.size()) {
        for (std::size_t i = 0; i < g_clean.size(); ++i) {
            g_clean[i] += out.loss.grad_clean[i];
        }
    }
    out.gaussians = raster.backward(g_clean);
    return out;
}

/// As above with GGS applied in stage 2 when enabled.
inline StepGradients compute_step(const Model& model, const Camera& cam, const ImageBuffer& input,
                                  const ParticulateLayer* layer, int stage, const TrainConfig& cfg) {
    Rasterizer raster;
    StepGradients out = compute_step_unscaled(model, cam, input, layer, stage, cfg, raster);
    if (stage == 2 && cfg.ggs && std::isfinite(out.loss.report.total)) {
        const GgsState st =
            compute_ggs(raster.fragments(), l1_error_map(out.forward.degraded, input), GgsConfig{cfg.r0, cfg.ggs_drop});
        rescale_gradients(out.gaussians, scene_factors(st, model.scene.size()));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoint: "NIMC", u32 version, u32 section count, then a table of
// contents (16-byte zero-padded name, u64 offset, u64 size) and the payloads.

struct Checkpoint {
    TrainState state;
    std::string config_text;
    std::vector<Camera> cameras;
    std::string data_root;

    std::uint64_t config_hash() const { return fnv1a(config_text); }
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void write_moments(std::ostream& os, const AdamMoments& m) {
    io::write_pod<std::uint64_t>(os, m.size());
    io::write_f64_array(os, m.m);
    io::write_f64_array(os, m.v);
}

inline AdamMoments read_moments(std::istream& is) {
    AdamMoments m;
    const auto n = io::read_pod<std::uint64_t>(is);
    if (n > (1ULL << 32)) {
        throw DataError("checkpoint: implausible optimizer size");
    }
    m.m = io::read_f64_array(is, n);
    m.v = io::read_f64_array(is, n);
    return m;
}

inline void write_param_vectors(std::ostream& os, const std::vector<ParamVec>& v) {
    for (const auto& p : v) {
        for (const double x : p) {
            io::write_pod(os, x);
        }
    }
}

inline std::vector<ParamVec> read_param_vectors(std::istream& is, std::size_t n) {
    std::vector<ParamVec> v(n);
    for (auto& p : v) {
        for (auto& x : p) {
            x = io::read_pod<double>(is);
        }
    }
    return v;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
    const TrainState& st = ck.state;
    std::vector<std::pair<std::string, std::string>> sections;
    auto add = [&](const std::string& name, const std::function<void(std::ostream&)>& fill) {
        std::ostringstream s(std::ios::binary);
        fill(s);
        sections.emplace_back(name, s.str());
    };
    add("meta", [&](std::ostream& s) {
        s << "iteration = " << st.iteration << "\nstep = " << st.step << "\nextent = " << detail::format_double(st.extent)
          << "\nmedium = " << (st.model.medium ? "true" : "false") << "\nconfig_hash = " << ck.config_hash()
          << "\ndata = " << ck.data_root << '\n';
    });
    add("config", [&](std::ostream& s) { s << ck.config_text; });
    add("cameras", [&](std::ostream& s) { write_cameras(s, ck.cameras); });
    add("scene", [&](std::ostream& s) { write_scene(s, st.model.scene); });
    if (st.model.medium) {
        add("grid", [&](std::ostream& s) { write_grid(s, st.model.grid); });
        add("network", [&](std::ostream& s) { write_network(s, st.model.net); });
    }
    add("layers", [&](std::ostream& s) {
        io::write_pod<std::uint32_t>(s, static_cast<std::uint32_t>(st.layers.size()));
        for (const auto& l : st.layers) {
            io::write_pod<std::uint64_t>(s, l.view);
            io::write_pod<std::int64_t>(s, l.last_refresh);
            write_nimf(s, l.residual);
        }
    });
    add("optimizer", [&](std::ostream& s) {
        io::write_pod<std::uint64_t>(s, st.gaussian_opt.size());
        detail::write_param_vectors(s, st.gaussian_opt.first());
        detail::write_param_vectors(s, st.gaussian_opt.second());
        detail::write_moments(s, st.grid_opt);
        detail::write_moments(s, st.net_opt);
    });
    add("densify", [&](std::ostream& s) {
        io::write_pod<std::uint64_t>(s, st.densify.size());
        io::write_f64_array(s, st.densify.grad_sum);
        io::write_f64_array(s, st.densify.count);
    });

    io::write_magic(os, "NIMC");
    io::write_pod<std::uint32_t>(os, kCheckpointVersion);
    io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(sections.size()));
    std::uint64_t offset = 12 + sections.size() * 32;
    for (const auto& [name, payload] : sections) {
        char buf[16] = {};
        std::memcpy(buf, name.data(), std::min<std::size_t>(name.size(), 16));
        os.write(buf, 16);
        io::write_pod<std::uint64_t>(os, offset);
        io::write_pod<std::uint64_t>(os, payload.size());
        offset += payload.size();
    }
    for (const auto& [name, payload] : sections) {
        os.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    }
}

/// Section name -> payload bytes.
inline std::map<std::string, std::string> read_checkpoint_sections(std::istream& is) {
    io::expect_magic(is, "NIMC");
    const auto version = io::read_pod<std::uint32_t>(is);
    if (version != kCheckpointVersion) {
        throw DataError("unsupported checkpoint version " + std::to_string(version));
    }
    const auto count = io::read_pod<std::uint32_t>(is);
    if (count > 64) {
        throw DataError("checkpoint: implausible section count");
    }
    std::vector<std::tuple<std::string, std::uint64_t, std::uint64_t>> toc;
    for (std::uint32_t i = 0; i < count; ++i) {
        char buf[16];
        is.read(buf, 16);
        const auto off = io::read_pod<std::uint64_t>(is);
        const auto size = io::read_pod<std::uint64_t>(is);
        toc.emplace_back(std::string(buf, strnlen(buf, 16)), off, size);
    }
    std::map<std::string, std::string> out;
    for (const auto& [name, off, size] : toc) {
        if (size > (1ULL << 34)) {
            throw DataError("checkpoint: implausible section size");
        }
        is.seekg(static_cast<std::streamoff>(off));
        std::string payload(size, '\0');
        is.read(payload.data(), static_cast<std::streamsize>(size));
        if (!is) {
            throw DataError("checkpoint: truncated section " + name);
        }
        out[name] = std::move(payload);
    }
    return out;
}

inline Checkpoint read_checkpoint(std::istream& is) {
    auto sec = read_checkpoint_sections(is);
    auto need = [&](const std::string& name) -> std::string& {
        const auto it = sec.find(name);
        if (it == sec.end()) {
            throw DataError("checkpoint lacks section '" + name + "'");
        }
        return it->second;
    };
    Checkpoint ck;
    TrainState& st = ck.state;
    std::map<std::string, std::string> meta;
    {
        std::istringstream s(need("meta"));
        for (std::string line; std::getline(s, line);) {
            const auto eq = line.find('=');
            if (eq != std::string::npos) {
                meta[detail::trim(std::string_view(line).substr(0, eq))] = detail::trim(std::string_view(line).substr(eq + 1));
            }
        }
    }
    try {
        st.iteration = std::stol(meta.at("iteration"));
        st.step = std::stol(meta.at("step"));
        st.extent = std::stod(meta.at("extent"));
        st.model.medium = meta.at("medium") == "true";
        ck.data_root = meta.count("data") ? meta.at("data") : std::string();
    } catch (const std::exception&) {
        throw DataError("checkpoint meta section is malformed");
    }
    ck.config_text = need("config");
    {
        std::istringstream s(need("cameras"));
        ck.cameras = read_cameras(s);
    }
    {
        std::istringstream s(need("scene"), std::ios::binary);
        st.model.scene = read_scene(s);
    }
    if (st.model.medium) {
        std::istringstream g(need("grid"), std::ios::binary);
        st.model.grid = read_grid(g);
        std::istringstream n(need("network"), std::ios::binary);
        st.model.net = read_network(n);
    }
    {
        std::istringstream s(need("layers"), std::ios::binary);
        const auto n = io::read_pod<std::uint32_t>(s);
        for (std::uint32_t i = 0; i < n; ++i) {
            ParticulateLayer l;
            l.view = io::read_pod<std::uint64_t>(s);
            l.last_refresh = io::read_pod<std::int64_t>(s);
            l.residual = read_nimf(s);
            st.layers.push_back(std::move(l));
        }
    }
    {
        std::istringstream s(need("optimizer"), std::ios::binary);
        const auto n = io::read_pod<std::uint64_t>(s);
        if (n != st.model.scene.size()) {
            throw DataError("checkpoint: optimizer size does not match the scene");
        }
        st.gaussian_opt.resize(n);
        st.gaussian_opt.first() = detail::read_param_vectors(s, n);
        st.gaussian_opt.second() = detail::read_param_vectors(s, n);
        st.grid_opt = detail::read_moments(s);
        st.net_opt = detail::read_moments(s);
    }
    {
        std::istringstream s(need("densify"), std::ios::binary);
        const auto n = io::read_pod<std::uint64_t>(s);
        if (n != st.model.scene.size()) {
            throw DataError("checkpoint: densify statistics do not match the scene");
        }
        st.densify.grad_sum = io::read_f64_array(s, n);
        st.densify.count = io::read_f64_array(s, n);
    }
    if (meta.count("config_hash") && meta.at("config_hash") != std::to_string(ck.config_hash())) {
        throw DataError("checkpoint config hash does not match its config section");
    }
    return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
    const std::filesystem::path tmp = path.string() + ".partial";
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) {
            throw DataError("cannot write " + tmp.string());
        }
        write_checkpoint(os, ck);
        if (!os) {
            throw DataError("failed writing " + tmp.string());
        }
    }
    std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw DataError("cannot open checkpoint " + path.string());
    }
    return read_checkpoint(is);
}

// ---------------------------------------------------------------------------
// Training loop

struct IterationRecord {
    long iteration = 0;
    int stage = 1;
    std::size_t view = 0;
    LossReport loss;
    std::size_t gaussians = 0;
    double ggs_mean_factor = std::numeric_limits<double>::quiet_NaN();  // over visible Gaussians
    std::size_t ggs_visible = 0;
};

struct DensifyEvent {
    long iteration = 0;
    std::size_t parent = 0;
    Vec3 position = Vec3::Zero();
    bool split = false;
};

/// Optional outputs. Streams that are null are skipped.
struct TrainSinks {
    std::ostream* log = nullptr;
    std::ostream* ggs = nullptr;
    std::ostream* densify = nullptr;
    std::function<void(const TrainState&)> checkpoint;
    std::filesystem::path diagnostics;  // where a non-finite loss dumps its view
};

inline void write_log_header(std::ostream& os) {
    os << "iteration,stage,view,l1,ssim,dcp,tv,total,gaussians,ggs_mean_factor\n";
}

inline void write_densify_header(std::ostream& os) { os << "iteration,parent,x,y,z,kind\n"; }

inline void dump_view(const std::filesystem::path& dir, const ViewForward& f) {
    std::filesystem::create_directories(dir);
    write_nimf(dir / "clean.nimf", f.clean);
    write_nimf(dir / "alpha.nimf", f.alpha);
    write_nimf(dir / "depth.nimf", f.depth);
    write_nimf(dir / "transmittance.nimf", f.transmittance);
    write_nimf(dir / "airlight.nimf", f.airlight);
    write_nimf(dir / "airlight_color.nimf", f.airlight_color);
    write_nimf(dir / "continuous.nimf", f.continuous);
    write_nimf(dir / "residual.nimf", f.residual);
    write_nimf(dir / "degraded.nimf", f.degraded);
}

class Trainer {
public:
    Trainer(TrainingData data, TrainConfig cfg) : data_(std::move(data)), cfg_(std::move(cfg)) {
        check_inputs();
        st_ = initial_state(data_, cfg_);
    }

    Trainer(TrainingData data, TrainConfig cfg, TrainState resumed)
        : data_(std::move(data)), cfg_(std::move(cfg)), st_(std::move(resumed)) {
        check_inputs();
        if (st_.model.medium != cfg_.csm) {
            throw InvalidInput("resumed state and config disagree on the medium");
        }
        if (st_.gaussian_opt.size() != st_.model.scene.size() || st_.densify.size() != st_.model.scene.size()) {
            throw InvalidState("resumed optimizer state does not match the scene");
        }
    }

    void set_sinks(TrainSinks sinks) { sinks_ = std::move(sinks); }

    bool done() const { return st_.iteration >= cfg_.total(); }
    const TrainState& state() const noexcept { return st_; }
    TrainState& state() noexcept { return st_; }
    const TrainConfig& config() const noexcept { return cfg_; }
    const TrainingData& data() const noexcept { return data_; }
    const std::vector<IterationRecord>& history() const noexcept { return history_; }
    const std::vector<DensifyEvent>& densify_events() const noexcept { return events_; }

    /// Runs until `until` iterations are complete (default: the whole budget).
    void run(long until = -1) {
        const long stop = until < 0 ? cfg_.total() : std::min(until, cfg_.total());
        while (st_.iteration < stop) {
            step();
        }
    }

    /// The current model's forward pass for a view, with its layer attached in stage 2.
    ViewForward forward(std::size_t view) const {
        const ParticulateLayer* layer = view < st_.layers.size() ? &st_.layers[view] : nullptr;
        return forward_view(st_.model, data_.cameras.at(view), data_.inputs.at(view), layer, cfg_.samples);
    }

    IterationRecord step() {
        if (done()) {
            throw InvalidState("training budget exhausted");
        }
        const long it = st_.iteration;
        const StageInfo stage = stage_schedule(it, cfg_);
        if (stage.stage == 2 && stage.joint_iteration == 1) {
            begin_joint_stage();
        }
        const std::size_t view = view_for_iteration(it, data_.cameras.size(), cfg_.seed);
        const ParticulateLayer* layer = stage.residual ? &st_.layers.at(view) : nullptr;
        Rasterizer raster;
        StepGradients sg =
            compute_step_unscaled(st_.model, data_.cameras[view], data_.inputs[view], layer, stage.stage, cfg_, raster);

        IterationRecord rec;
        rec.iteration = it;
        rec.stage = stage.stage;
        rec.view = view;
        rec.loss = sg.loss.report;
        if (!std::isfinite(rec.loss.total)) {
            const std::filesystem::path dir =
                sinks_.diagnostics / ("abort_iteration_" + std::to_string(it) + "_view_" + std::to_string(view));
            if (!sinks_.diagnostics.empty()) {
                dump_view(dir, sg.forward);
            }
            throw NumericalAbort("non-finite loss at iteration " + std::to_string(it) + ", view " +
                                 std::to_string(view) +
                                 (sinks_.diagnostics.empty() ? std::string() : "; intermediates in " + dir.string()));
        }

        if (stage.ggs) {
            const GgsState gs =
                compute_ggs(raster.fragments(), l1_error_map(sg.forward.degraded, data_.inputs[view]), GgsConfig{cfg_.r0, cfg_.ggs_drop});
            rescale_gradients(sg.gaussians, scene_factors(gs, st_.model.scene.size()));
            rec.ggs_visible = gs.size();
            if (gs.size() > 0) {
                double s = 0.0;
                for (const double f : gs.factor) {
                    s += f;
                }
                rec.ggs_mean_factor = s / static_cast<double>(gs.size());
            }
            if (sinks_.ggs) {
                write_ggs_csv(*sinks_.ggs, it, view, gs);
            }
        }
        if (stage.stage == 2 || cfg_.densify_stage1) {
            st_.densify.add(sg.gaussians);
        }

        ++st_.step;
        const AdamHyper hyper;
        st_.gaussian_opt.step(st_.model.scene, sg.gaussians, st_.step, hyper, gaussian_lr(it, cfg_, st_.extent));
        for (auto& g : st_.model.scene) {
            normalize_primitive(g);
        }
        if (st_.model.medium) {
            st_.grid_opt.step(st_.model.grid.raw(), sg.grid, st_.step, hyper, cfg_.lr_grid);
            st_.net_opt.step(st_.model.net.params(), sg.network, st_.step, hyper, cfg_.lr_airlight);
        }

        // Residuals come from the settled model, before densification perturbs it.
        if (stage.residual) {
            refresh_all(
                st_.layers, data_.inputs,
                [&](std::size_t v) {
                    return forward_view(st_.model, data_.cameras[v], data_.inputs[v], nullptr, cfg_.samples).continuous;
                },
                stage.joint_iteration, cfg_.z_ref);
        }
        if (stage.densify) {
            densify(it);
        }

        ++st_.iteration;
        rec.gaussians = st_.model.scene.size();
        history_.push_back(rec);
        if (sinks_.log) {
            auto& os = *sinks_.log;
            os << rec.iteration << ',' << rec.stage << ',' << rec.view << ',' << detail::format_double(rec.loss.photometric_l1)
               << ',' << detail::format_double(rec.loss.photometric_ssim) << ',' << detail::format_double(rec.loss.dcp)
               << ',' << detail::format_double(rec.loss.tv) << ',' << detail::format_double(rec.loss.total) << ','
               << rec.gaussians << ',';
            if (std::isfinite(rec.ggs_mean_factor)) {
                os << detail::format_double(rec.ggs_mean_factor);
            }
            os << '\n';
        }
        if (sinks_.checkpoint && cfg_.checkpoint_interval > 0 && st_.iteration % cfg_.checkpoint_interval == 0 &&
            !done()) {
            sinks_.checkpoint(st_);
        }
        return rec;
    }

private:
    void check_inputs() const {
        cfg_.validate();
        if (data_.cameras.size() < 2 || data_.cameras.size() != data_.inputs.size()) {
            throw InvalidInput("training needs at least two views with one input image each");
        }
        for (std::size_t k = 0; k < data_.cameras.size(); ++k) {
            const Camera& c = data_.cameras[k];
            if (data_.inputs[k].height() != c.height || data_.inputs[k].width() != c.width ||
                data_.inputs[k].channels() != 3) {
                throw InvalidInput("input " + std::to_string(k) + " does not match its camera");
            }
        }
    }

    void begin_joint_stage() {
        if (cfg_.plm) {
            st_.layers.clear();
            for (std::size_t v = 0; v < data_.cameras.size(); ++v) {
                const ImageBuffer con =
                    forward_view(st_.model, data_.cameras[v], data_.inputs[v], nullptr, cfg_.samples).continuous;
                st_.layers.push_back(extract_residual(data_.inputs[v], con, v, 0));
            }
        }
        st_.densify.reset(st_.model.scene.size());
    }

    void densify(long it) {
        DensifyConfig dc;
        dc.grad_threshold = cfg_.densify_grad_threshold;
        dc.scale_split_threshold = cfg_.densify_split_fraction * st_.extent;
        dc.opacity_prune_threshold = cfg_.densify_prune_opacity;
        dc.interval = cfg_.densify_interval;
        dc.max_gaussians = static_cast<std::size_t>(std::max<int>(cfg_.densify_max, static_cast<int>(st_.model.scene.size())));
        std::mt19937_64 rng(mix_seed(mix_seed(cfg_.seed, 3), static_cast<std::uint64_t>(it)));
        const DensifyResult r = densify_and_prune(st_.model.scene, st_.densify, dc, rng);
        for (const std::size_t i : r.densified) {
            DensifyEvent e;
            e.iteration = it;
            e.parent = i;
            e.position = st_.model.scene[i].mu;
            e.split = st_.model.scene[i].max_scale() >= dc.scale_split_threshold;
            events_.push_back(e);
            if (sinks_.densify) {
                *sinks_.densify << it << ',' << i << ',' << detail::format_double(e.position[0]) << ','
                                << detail::format_double(e.position[1]) << ',' << detail::format_double(e.position[2])
                                << ',' << (e.split ? "split" : "clone") << '\n';
            }
        }
        st_.gaussian_opt.remap(r);
        st_.model.scene = r.scene;
        st_.densify.reset(st_.model.scene.size());
    }

    TrainingData data_;
    TrainConfig cfg_;
    TrainState st_;
    TrainSinks sinks_;
    std::vector<IterationRecord> history_;
    std::vector<DensifyEvent> events_;
};

inline Checkpoint make_checkpoint(const Trainer& t, const std::string& data_root = {}) {
    return Checkpoint{t.state(), config_to_text(t.config()), t.data().cameras, data_root};
}

}  // namespace nimbus
