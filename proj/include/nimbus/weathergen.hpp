#pragma once

#include "nimbus/gaussian_field.hpp"
#include "nimbus/imaging.hpp"

#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>

namespace nimbus {

// ---------------------------------------------------------------------------
// Scene synthesis: a floor disc ringed by a cylindrical wall, a few objects
// near the center, and a camera ring looking inward. The far wall sits about
// twice as deep as the objects, so the scene spreads in depth.

struct SceneSpec {
    std::uint64_t seed = 7;
    int gaussians = 1200;
    double extent = 2.8;       // floor and wall radius
    double wall_height = 3.0;
    int cameras = 8;
    double ring_radius = 2.1;
    double elevation = 0.9;    // camera height
    double target_height = 0.6;
    int width = 64;
    int height = 64;
    double focal = 56.0;
    int init_points = 600;
    std::vector<Vec3> palette = {{0.85, 0.12, 0.03}, {0.10, 0.65, 0.04}, {0.04, 0.20, 0.80},
                                 {0.90, 0.75, 0.04}, {0.55, 0.04, 0.65}, {0.02, 0.55, 0.60}};

    /// Gaussians whose horizontal distance from the axis exceeds this belong to the far region.
    double far_radius() const { return 0.7 * extent; }

    void validate() const {
        if (cameras < 2) {
            throw InvalidInput("scene needs at least two cameras");
        }
        if (gaussians < 16 || init_points < 4 || width < 11 || height < 11 || !(focal > 0) || !(extent > 0) ||
            !(wall_height > 0) || palette.size() < 2) {
            throw InvalidInput("scene spec out of range");
        }
        if (!(ring_radius > 0) || !(ring_radius < extent)) {
            throw InvalidInput("camera ring must lie inside the wall");
        }
        for (const auto& c : palette) {
            if ((c.array() < 0).any() || (c.array() > 1).any()) {
                throw InvalidInput("palette colors must lie in [0,1]");
            }
        }
    }
};

struct SyntheticScene {
    GaussianScene gaussians;
    std::vector<Camera> cameras;
    std::vector<ImageBuffer> clean;  // 3 channels
    std::vector<ImageBuffer> depth;  // camera-space z
    std::vector<ImageBuffer> alpha;
    std::vector<Vec3> points;        // surface samples for initialization
};

namespace detail {

inline Vec4 frame_quaternion(const Vec3& normal) {
    Vec3 t = std::abs(normal.z()) < 0.9 ? Vec3::UnitZ() : Vec3::UnitX();
    const Vec3 a = t.cross(normal).normalized();
    const Vec3 b = normal.cross(a);
    Mat3 r;
    r.col(0) = a;
    r.col(1) = b;
    r.col(2) = normal;
    return matrix_to_quaternion(r);
}

inline GaussianPrimitive surfel(const Vec3& at, const Vec3& normal, double spacing, const Vec3& color) {
    GaussianPrimitive g;
    g.mu = at;
    g.log_scale = Vec3(std::log(0.6 * spacing), std::log(0.6 * spacing), std::log(0.05 * spacing));
    g.rotation = frame_quaternion(normal.normalized());
    g.opacity_logit = 3.0;
    g.color = color;
    return g;
}

struct Blob {
    Vec3 center;
    double radius;
    std::size_t color;
};

inline std::vector<Blob> scene_blobs(const SceneSpec& spec) {
    const double r = 0.16 * spec.extent;
    return {{Vec3(0.25 * spec.extent, 0.05 * spec.extent, r), r, 0},
            {Vec3(-0.2 * spec.extent, 0.2 * spec.extent, 0.8 * r), 0.8 * r, 2},
            {Vec3(-0.05 * spec.extent, -0.25 * spec.extent, 1.1 * r), 1.1 * r, 4}};
}

inline Vec3 floor_color(const SceneSpec& spec, const Vec3& p) {
    const double cell = 0.2 * spec.extent;
    const long i = static_cast<long>(std::floor(p.x() / cell)) + static_cast<long>(std::floor(p.y() / cell));
    return spec.palette[(i & 1) ? 3 : 1];
}

inline Vec3 wall_color(const SceneSpec& spec, const Vec3& p) {
    const double theta = std::atan2(p.y(), p.x()) + std::numbers::pi;
    const auto band = static_cast<std::size_t>(std::floor(theta / (2 * std::numbers::pi) * 12.0)) % 12;
    const bool upper = p.z() > 0.5 * spec.wall_height;
    return spec.palette[(band + (upper ? 3 : 0)) % spec.palette.size()];
}

inline Vec3 jitter(const Vec3& c, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.9, 1.1);
    return (c * u(rng)).cwiseMin(1.0);
}

}  // namespace detail

/// Deterministic scene from spec.seed; clean views and depth come from the
/// Gaussian renderer so the reconstruction target is exactly representable.
inline SyntheticScene build_scene(const SceneSpec& spec) {
    spec.validate();
    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
    const double floor_area = std::numbers::pi * spec.extent * spec.extent;
    const double wall_area = 2 * std::numbers::pi * spec.extent * spec.wall_height;
    const auto blobs = detail::scene_blobs(spec);
    double blob_area = 0.0;
    for (const auto& b : blobs) {
        blob_area += 4 * std::numbers::pi * b.radius * b.radius;
    }
    const double spacing = std::sqrt((floor_area + wall_area + blob_area) / spec.gaussians);

    SyntheticScene out;
    const auto n_floor = static_cast<int>(std::lround(floor_area / (spacing * spacing)));
    for (int i = 0; i < n_floor; ++i) {
        const double r = spec.extent * std::sqrt((i + 0.5) / n_floor);
        const Vec3 p(r * std::cos(i * golden), r * std::sin(i * golden), 0.0);
        out.gaussians.push_back(
            detail::surfel(p, Vec3::UnitZ(), spacing, detail::jitter(detail::floor_color(spec, p), rng)));
    }
    const int n_theta = std::max(8, static_cast<int>(std::lround(2 * std::numbers::pi * spec.extent / spacing)));
    const int n_z = std::max(2, static_cast<int>(std::lround(spec.wall_height / spacing)));
    for (int iz = 0; iz < n_z; ++iz) {
        for (int it = 0; it < n_theta; ++it) {
            const double theta = (it + 0.5 * (iz & 1)) * 2 * std::numbers::pi / n_theta;
            const Vec3 p(spec.extent * std::cos(theta), spec.extent * std::sin(theta),
                         (iz + 0.5) * spec.wall_height / n_z);
            const Vec3 inward(-std::cos(theta), -std::sin(theta), 0.0);
            out.gaussians.push_back(
                detail::surfel(p, inward, spacing, detail::jitter(detail::wall_color(spec, p), rng)));
        }
    }
    for (const auto& b : blobs) {
        const auto n = std::max(8, static_cast<int>(std::lround(4 * std::numbers::pi * b.radius * b.radius /
                                                                 (spacing * spacing))));
        for (int i = 0; i < n; ++i) {
            const double z = 1.0 - 2.0 * (i + 0.5) / n;
            const double rho = std::sqrt(1.0 - z * z);
            const Vec3 nrm(rho * std::cos(i * golden), rho * std::sin(i * golden), z);
            const Vec3 color = spec.palette[(b.color + (z > 0.3 ? 1 : 0)) % spec.palette.size()];
            out.gaussians.push_back(detail::surfel(b.center + b.radius * nrm, nrm, spacing, detail::jitter(color, rng)));
        }
    }

    // Initialization points: random samples on the same surfaces.
    for (int i = 0; i < spec.init_points; ++i) {
        const double pick = u01(rng) * (floor_area + wall_area + blob_area);
        if (pick < floor_area) {
            const double r = spec.extent * std::sqrt(u01(rng)), t = 2 * std::numbers::pi * u01(rng);
            out.points.emplace_back(r * std::cos(t), r * std::sin(t), 0.0);
        } else if (pick < floor_area + wall_area) {
            const double t = 2 * std::numbers::pi * u01(rng);
            out.points.emplace_back(spec.extent * std::cos(t), spec.extent * std::sin(t), spec.wall_height * u01(rng));
        } else {
            const auto& b = blobs[static_cast<std::size_t>(u01(rng) * blobs.size()) % blobs.size()];
            const double z = 2 * u01(rng) - 1, t = 2 * std::numbers::pi * u01(rng), rho = std::sqrt(1 - z * z);
            out.points.push_back(b.center + b.radius * Vec3(rho * std::cos(t), rho * std::sin(t), z));
        }
    }

    const Vec3 target(0.0, 0.0, spec.target_height);
    for (int k = 0; k < spec.cameras; ++k) {
        const double t = 2 * std::numbers::pi * k / spec.cameras;
        const Vec3 eye(spec.ring_radius * std::cos(t), spec.ring_radius * std::sin(t), spec.elevation);
        out.cameras.push_back(Camera::look_at(eye, target, Vec3::UnitZ(), spec.focal, spec.width, spec.height));
    }
    out.clean.resize(out.cameras.size());
    out.depth.resize(out.cameras.size());
    out.alpha.resize(out.cameras.size());
    for (std::size_t k = 0; k < out.cameras.size(); ++k) {
        Rasterizer r;
        RenderOutput ro = r.render(out.gaussians, out.cameras[k]);
        out.clean[k] = std::move(ro.color);
        out.depth[k] = std::move(ro.depth);
        out.alpha[k] = std::move(ro.alpha);
    }
    return out;
}

/// Axis-aligned box around the Gaussian centers.
inline std::pair<Vec3, Vec3> scene_bounds(const GaussianScene& scene) {
    Vec3 lo = scene.at(0).mu, hi = scene.at(0).mu;
    for (const auto& g : scene) {
        lo = lo.cwiseMin(g.mu);
        hi = hi.cwiseMax(g.mu);
    }
    return {lo, hi};
}

/// Ray distance from the camera-space depth map.
inline ImageBuffer range_map(const Camera& cam, const ImageBuffer& depth) {
    ImageBuffer out(depth.height(), depth.width(), 1);
    for (int y = 0; y < depth.height(); ++y) {
        for (int x = 0; x < depth.width(); ++x) {
            out.at(y, x) = depth.at(y, x) / cam.z_per_distance({x + 0.5, y + 0.5});
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Degradations

struct HazeSpec {
    double extinction = 0.3;
    Vec3 airlight = Vec3::Constant(0.9);
};

struct RainSpec {
    int count = 40;
    double length = 12.0;  // pixels
    double angle = 10.0;   // degrees from vertical
    double width = 1.0;    // pixels
    double intensity = 0.6;
};

struct SnowSpec {
    int count = 30;
    double radius = 1.5;  // pixels
    double intensity = 0.8;
};

struct WeatherSpec {
    bool haze = false, rain = false, snow = false;
    HazeSpec haze_params;
    RainSpec rain_params;
    SnowSpec snow_params;
    std::uint64_t seed = 11;

    void validate() const {
        if (!(haze_params.extinction >= 0) || (haze_params.airlight.array() < 0).any() ||
            (haze_params.airlight.array() > 1).any()) {
            throw InvalidInput("haze extinction must be >= 0 and airlight in [0,1]");
        }
        for (const double v : {rain_params.intensity, snow_params.intensity}) {
            if (!(v >= 0 && v <= 1)) {
                throw InvalidInput("particle intensities must lie in [0,1]");
            }
        }
        if (rain_params.count < 0 || snow_params.count < 0 || !(rain_params.length > 0) ||
            !(rain_params.width > 0) || !(snow_params.radius > 0)) {
            throw InvalidInput("particle counts and sizes out of range");
        }
    }

    std::string kinds() const {
        std::string s;
        for (const auto& [on, name] : {std::pair{haze, "haze"}, std::pair{rain, "rain"}, std::pair{snow, "snow"}}) {
            if (on) {
                s += s.empty() ? name : std::string(",") + name;
            }
        }
        return s.empty() ? "none" : s;
    }
};

/// t = exp(-extinction * distance); out = clean * t + airlight * (1 - t).
inline ImageBuffer apply_haze(const ImageBuffer& clean, const ImageBuffer& distance, double extinction,
                              const Vec3& airlight) {
    if (distance.height() != clean.height() || distance.width() != clean.width() || distance.channels() != 1 ||
        clean.channels() != 3) {
        throw InvalidInput("apply_haze: image and distance map dimensions differ");
    }
    if (!(extinction >= 0)) {
        throw InvalidInput("apply_haze: extinction must be >= 0");
    }
    ImageBuffer out(clean.height(), clean.width(), 3);
    for (int y = 0; y < clean.height(); ++y) {
        for (int x = 0; x < clean.width(); ++x) {
            const double t = std::exp(-extinction * distance.at(y, x));
            for (int c = 0; c < 3; ++c) {
                out.at(y, x, c) = clean.at(y, x, c) * t + airlight[c] * (1.0 - t);
            }
        }
    }
    return out;
}

enum class ParticleKind { Rain, Snow };

struct ParticleResult {
    ImageBuffer image;
    ImageBuffer mask;  // 1 channel, intensity-scaled additive brightness before clamping
};

namespace detail {

inline double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
    const double dx = bx - ax, dy = by - ay;
    const double len2 = dx * dx + dy * dy;
    const double t = len2 > 0 ? std::clamp(((px - ax) * dx + (py - ay) * dy) / len2, 0.0, 1.0) : 0.0;
    return std::hypot(px - ax - t * dx, py - ay - t * dy);
}

}  // namespace detail

/// Additive bright strokes: anti-aliased line segments for rain, Gaussian
/// discs for snow. out = clamp(img + mask, 0, 1).
inline ParticleResult apply_particles(const ImageBuffer& img, ParticleKind kind, const WeatherSpec& spec,
                                      std::uint64_t view_seed) {
    const int h = img.height(), w = img.width();
    ImageBuffer shape(h, w, 1);
    std::mt19937_64 rng(view_seed);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    if (kind == ParticleKind::Rain) {
        const RainSpec& r = spec.rain_params;
        for (int n = 0; n < r.count; ++n) {
            const double cx = u01(rng) * w, cy = u01(rng) * h;
            const double angle = (r.angle + 10.0 * (u01(rng) - 0.5)) * std::numbers::pi / 180.0;
            const double amp = 0.6 + 0.4 * u01(rng);
            const double hx = 0.5 * r.length * std::sin(angle), hy = 0.5 * r.length * std::cos(angle);
            const int x0 = std::max(0, static_cast<int>(std::floor(cx - std::abs(hx) - r.width - 1)));
            const int x1 = std::min(w - 1, static_cast<int>(std::ceil(cx + std::abs(hx) + r.width + 1)));
            const int y0 = std::max(0, static_cast<int>(std::floor(cy - std::abs(hy) - r.width - 1)));
            const int y1 = std::min(h - 1, static_cast<int>(std::ceil(cy + std::abs(hy) + r.width + 1)));
            for (int y = y0; y <= y1; ++y) {
                for (int x = x0; x <= x1; ++x) {
                    const double d = detail::segment_distance(x + 0.5, y + 0.5, cx - hx, cy - hy, cx + hx, cy + hy);
                    const double cover = std::clamp(0.5 * r.width + 0.5 - d, 0.0, 1.0);
                    shape.at(y, x) = std::max(shape.at(y, x), amp * cover);
                }
            }
        }
    } else {
        const SnowSpec& s = spec.snow_params;
        for (int n = 0; n < s.count; ++n) {
            const double cx = u01(rng) * w, cy = u01(rng) * h;
            const double radius = s.radius * (0.7 + 0.6 * u01(rng));
            const double amp = 0.7 + 0.3 * u01(rng);
            const int reach = static_cast<int>(std::ceil(3 * radius));
            for (int y = std::max(0, static_cast<int>(cy) - reach); y <= std::min(h - 1, static_cast<int>(cy) + reach); ++y) {
                for (int x = std::max(0, static_cast<int>(cx) - reach); x <= std::min(w - 1, static_cast<int>(cx) + reach);
                     ++x) {
                    const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
                    const double v = amp * std::exp(-0.5 * (dx * dx + dy * dy) / (radius * radius));
                    shape.at(y, x) = std::max(shape.at(y, x), v);
                }
            }
        }
    }
    const double intensity = kind == ParticleKind::Rain ? spec.rain_params.intensity : spec.snow_params.intensity;
    ParticleResult out{img, ImageBuffer(h, w, 1)};
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const double m = intensity * shape.at(y, x);
            out.mask.at(y, x) = m;
            for (int c = 0; c < img.channels(); ++c) {
                out.image.at(y, x, c) = std::clamp(img.at(y, x, c) + m, 0.0, 1.0);
            }
        }
    }
    return out;
}

struct DegradedView {
    ImageBuffer input;
    ImageBuffer mask;
};

/// Medium first, then particles, so the input follows I*T + P + R.
inline DegradedView degrade_view(const ImageBuffer& clean, const ImageBuffer& distance, const WeatherSpec& weather,
                                 std::size_t view) {
    DegradedView out{clean, ImageBuffer(clean.height(), clean.width(), 1)};
    if (weather.haze) {
        out.input = apply_haze(clean, distance, weather.haze_params.extinction, weather.haze_params.airlight);
    }
    const std::pair<bool, ParticleKind> kinds[] = {{weather.rain, ParticleKind::Rain}, {weather.snow, ParticleKind::Snow}};
    for (const auto& [on, kind] : kinds) {
        if (!on) {
            continue;
        }
        const std::uint64_t seed = mix_seed(mix_seed(weather.seed, view), static_cast<std::uint64_t>(kind) + 1);
        ParticleResult p = apply_particles(out.input, kind, weather, seed);
        out.input = std::move(p.image);
        for (std::size_t i = 0; i < out.mask.size(); ++i) {
            out.mask[i] += p.mask[i];
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Presets

inline const std::vector<std::string>& preset_names() {
    static const std::vector<std::string> names = {"H", "R", "S", "H+R", "H+S", "R+S", "H+R+S"};
    return names;
}

/// "none" yields an undegraded dataset.
inline WeatherSpec weather_preset(const std::string& name, std::uint64_t seed) {
    WeatherSpec w;
    w.seed = seed;
    if (name == "none") {
        return w;
    }
    if (std::find(preset_names().begin(), preset_names().end(), name) == preset_names().end()) {
        throw InvalidInput("unknown preset '" + name + "' (expected H, R, S, H+R, H+S, R+S, H+R+S or none)");
    }
    w.haze = name.find('H') != std::string::npos;
    w.rain = name.find('R') != std::string::npos;
    w.snow = name.find('S') != std::string::npos;
    return w;
}

// ---------------------------------------------------------------------------
// Dataset directory: manifest.txt, cameras.txt, points.txt and
// view_<k>/{input.png, clean.png, depth.nimf, mask.nimf}.

namespace detail {

inline std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

inline std::string fmt(const Vec3& v) { return fmt(v[0]) + ' ' + fmt(v[1]) + ' ' + fmt(v[2]); }

inline std::map<std::string, std::string> read_key_values(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) {
        throw DataError("cannot open " + path.string());
    }
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(is, line)) {
        const auto hash = line.find('#');
        if (hash != std::string::npos) {
            line.erase(hash);
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            if (line.find_first_not_of(" \t\r") != std::string::npos) {
                throw DataError("malformed line in " + path.string() + ": " + line);
            }
            continue;
        }
        auto trim = [](std::string s) {
            const auto a = s.find_first_not_of(" \t\r");
            const auto b = s.find_last_not_of(" \t\r");
            return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
        };
        kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    return kv;
}

}  // namespace detail

inline std::string view_dir_name(std::size_t k) { return "view_" + std::to_string(k); }

inline void write_manifest(std::ostream& os, const SceneSpec& s, const WeatherSpec& w) {
    os << "format = nimbus-dataset 1\n";
    os << "scene.seed = " << s.seed << "\nscene.gaussians = " << s.gaussians << "\nscene.extent = " << detail::fmt(s.extent)
       << "\nscene.wall_height = " << detail::fmt(s.wall_height) << "\nscene.cameras = " << s.cameras
       << "\nscene.ring_radius = " << detail::fmt(s.ring_radius) << "\nscene.elevation = " << detail::fmt(s.elevation)
       << "\nscene.target_height = " << detail::fmt(s.target_height) << "\nscene.width = " << s.width
       << "\nscene.height = " << s.height << "\nscene.focal = " << detail::fmt(s.focal)
       << "\nscene.init_points = " << s.init_points << "\nscene.far_radius = " << detail::fmt(s.far_radius()) << '\n';
    for (std::size_t i = 0; i < s.palette.size(); ++i) {
        os << "scene.palette." << i << " = " << detail::fmt(s.palette[i]) << '\n';
    }
    os << "weather.kinds = " << w.kinds() << "\nweather.seed = " << w.seed
       << "\nweather.haze.extinction = " << detail::fmt(w.haze_params.extinction)
       << "\nweather.haze.airlight = " << detail::fmt(w.haze_params.airlight)
       << "\nweather.rain.count = " << w.rain_params.count << "\nweather.rain.length = " << detail::fmt(w.rain_params.length)
       << "\nweather.rain.angle = " << detail::fmt(w.rain_params.angle)
       << "\nweather.rain.width = " << detail::fmt(w.rain_params.width)
       << "\nweather.rain.intensity = " << detail::fmt(w.rain_params.intensity)
       << "\nweather.snow.count = " << w.snow_params.count << "\nweather.snow.radius = " << detail::fmt(w.snow_params.radius)
       << "\nweather.snow.intensity = " << detail::fmt(w.snow_params.intensity) << '\n';
    os << "views = " << s.cameras << '\n';
    for (int k = 0; k < s.cameras; ++k) {
        for (const char* f : {"input.png", "clean.png", "depth.nimf", "mask.nimf"}) {
            os << "file = " << view_dir_name(static_cast<std::size_t>(k)) << '/' << f << '\n';
        }
    }
    os << "file = cameras.txt\nfile = points.txt\n";
}

/// Parses the scene and weather parameters back out of a manifest.
inline std::pair<SceneSpec, WeatherSpec> read_manifest(const std::filesystem::path& path) {
    const auto kv = detail::read_key_values(path);
    auto get = [&](const std::string& key) -> const std::string& {
        const auto it = kv.find(key);
        if (it == kv.end()) {
            throw DataError("manifest " + path.string() + " lacks '" + key + "'");
        }
        return it->second;
    };
    auto num = [&](const std::string& key) {
        try {
            std::size_t used = 0;
            const double v = std::stod(get(key), &used);
            if (used != get(key).size()) {
                throw std::invalid_argument(key);
            }
            return v;
        } catch (const std::logic_error&) {
            throw DataError("manifest value for '" + key + "' is not a number");
        }
    };
    auto vec = [&](const std::string& key) {
        std::istringstream is(get(key));
        Vec3 v;
        if (!(is >> v[0] >> v[1] >> v[2])) {
            throw DataError("manifest value for '" + key + "' is not a 3-vector");
        }
        return v;
    };
    if (get("format") != "nimbus-dataset 1") {
        throw DataError("unsupported dataset format in " + path.string());
    }
    SceneSpec s;
    s.seed = std::stoull(get("scene.seed"));
    s.gaussians = static_cast<int>(num("scene.gaussians"));
    s.extent = num("scene.extent");
    s.wall_height = num("scene.wall_height");
    s.cameras = static_cast<int>(num("scene.cameras"));
    s.ring_radius = num("scene.ring_radius");
    s.elevation = num("scene.elevation");
    s.target_height = num("scene.target_height");
    s.width = static_cast<int>(num("scene.width"));
    s.height = static_cast<int>(num("scene.height"));
    s.focal = num("scene.focal");
    s.init_points = static_cast<int>(num("scene.init_points"));
    s.palette.clear();
    for (std::size_t i = 0; kv.count("scene.palette." + std::to_string(i)); ++i) {
        s.palette.push_back(vec("scene.palette." + std::to_string(i)));
    }
    WeatherSpec w;
    const std::string kinds = get("weather.kinds");
    w.haze = kinds.find("haze") != std::string::npos;
    w.rain = kinds.find("rain") != std::string::npos;
    w.snow = kinds.find("snow") != std::string::npos;
    w.seed = std::stoull(get("weather.seed"));
    w.haze_params.extinction = num("weather.haze.extinction");
    w.haze_params.airlight = vec("weather.haze.airlight");
    w.rain_params.count = static_cast<int>(num("weather.rain.count"));
    w.rain_params.length = num("weather.rain.length");
    w.rain_params.angle = num("weather.rain.angle");
    w.rain_params.width = num("weather.rain.width");
    w.rain_params.intensity = num("weather.rain.intensity");
    w.snow_params.count = static_cast<int>(num("weather.snow.count"));
    w.snow_params.radius = num("weather.snow.radius");
    w.snow_params.intensity = num("weather.snow.intensity");
    s.validate();
    w.validate();
    return {s, w};
}

inline void write_points(std::ostream& os, const std::vector<Vec3>& pts) {
    os << std::setprecision(17);
    for (const auto& p : pts) {
        os << p[0] << ' ' << p[1] << ' ' << p[2] << '\n';
    }
}

inline std::vector<Vec3> read_points(std::istream& is) {
    std::vector<Vec3> pts;
    Vec3 p;
    while (is >> p[0] >> p[1] >> p[2]) {
        pts.push_back(p);
    }
    if (!is.eof()) {
        throw DataError("malformed points file");
    }
    return pts;
}

/// Writes the dataset; the manifest goes last and marks the directory complete.
/// An existing non-empty `root` is an error unless `overwrite` is set.
inline void compose_dataset(const std::filesystem::path& root, const SyntheticScene& scene, const SceneSpec& spec,
                            const WeatherSpec& weather, bool overwrite) {
    namespace fs = std::filesystem;
    weather.validate();
    if (fs::exists(root) && !(fs::is_directory(root) && fs::is_empty(root))) {
        if (!overwrite) {
            throw InvalidInput("output path " + root.string() + " exists (use overwrite)");
        }
        fs::remove_all(root);
    }
    fs::create_directories(root);
    const std::size_t n = scene.cameras.size();
    std::vector<std::string> errors(n);
    parallel_for_chunks(n, [&](std::size_t k) {
        try {
            const fs::path dir = root / view_dir_name(k);
            fs::create_directories(dir);
            const ImageBuffer distance = range_map(scene.cameras[k], scene.depth[k]);
            const DegradedView dv = degrade_view(scene.clean[k], distance, weather, k);
            write_png(dir / "input.png", dv.input);
            write_png(dir / "clean.png", scene.clean[k]);
            write_nimf(dir / "depth.nimf", scene.depth[k]);
            write_nimf(dir / "mask.nimf", dv.mask);
        } catch (const std::exception& e) {
            errors[k] = e.what();
        }
    });
    for (const auto& e : errors) {
        if (!e.empty()) {
            throw DataError(e);
        }
    }
    {
        std::ofstream os(root / "cameras.txt");
        write_cameras(os, scene.cameras);
        std::ofstream ps(root / "points.txt");
        write_points(ps, scene.points);
        if (!os || !ps) {
            throw DataError("cannot write cameras or points under " + root.string());
        }
    }
    std::ofstream ms(root / "manifest.txt");
    write_manifest(ms, spec, weather);
    if (!ms) {
        throw DataError("cannot write manifest under " + root.string());
    }
}

struct Dataset {
    std::filesystem::path root;
    SceneSpec scene;
    WeatherSpec weather;
    std::vector<Camera> cameras;
    std::vector<ImageBuffer> inputs, clean, depth, masks;
    std::vector<Vec3> points;

    std::size_t size() const noexcept { return cameras.size(); }
};

inline Dataset load_dataset(const std::filesystem::path& root) {
    namespace fs = std::filesystem;
    const fs::path manifest = root / "manifest.txt";
    if (!fs::exists(manifest)) {
        throw DataError("dataset manifest not found: " + manifest.string());
    }
    Dataset d;
    d.root = root;
    std::tie(d.scene, d.weather) = read_manifest(manifest);
    {
        std::ifstream is(root / "cameras.txt");
        if (!is) {
            throw DataError("cannot open " + (root / "cameras.txt").string());
        }
        d.cameras = read_cameras(is);
    }
    {
        std::ifstream is(root / "points.txt");
        if (!is) {
            throw DataError("cannot open " + (root / "points.txt").string());
        }
        d.points = read_points(is);
    }
    if (d.cameras.size() != static_cast<std::size_t>(d.scene.cameras)) {
        throw DataError("cameras.txt does not match the manifest view count");
    }
    for (std::size_t k = 0; k < d.cameras.size(); ++k) {
        const fs::path dir = root / view_dir_name(k);
        d.inputs.push_back(read_png(dir / "input.png"));
        d.clean.push_back(read_png(dir / "clean.png"));
        d.depth.push_back(read_nimf(dir / "depth.nimf"));
        d.masks.push_back(read_nimf(dir / "mask.nimf"));
        const Camera& c = d.cameras[k];
        for (const ImageBuffer* img : {&d.inputs[k], &d.clean[k], &d.depth[k], &d.masks[k]}) {
            if (img->height() != c.height || img->width() != c.width) {
                throw DataError("view " + std::to_string(k) + " image size does not match its camera");
            }
        }
    }
    return d;
}

}  // namespace nimbus
