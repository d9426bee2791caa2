#pragma once

#include "nimbus/gaussian_field.hpp"
#include "nimbus/imaging.hpp"

#include <ostream>

namespace nimbus {

/// Factor left out for the factor-wise ablation (replaced by 1).
enum class GgsFactor : std::uint8_t { None, Depth, Radius, Error };

inline constexpr double kMadFloor = 1e-8;
inline constexpr double kWeightMeanFloor = 1e-12;

struct GgsConfig {
    double r0 = 3.0;  // reference radius, pixels
    GgsFactor drop = GgsFactor::None;
};

/// Per-view statistics over the visible Gaussians, in fragment order.
struct GgsState {
    std::vector<std::size_t> gaussian;
    std::vector<double> depth, depth_norm, radius, error, error_norm, weight, factor;

    std::size_t size() const noexcept { return gaussian.size(); }
};

inline std::vector<double> normalize_depth(const std::vector<double>& depths) {
    if (depths.empty()) {
        return {};
    }
    const auto [lo_it, hi_it] = std::minmax_element(depths.begin(), depths.end());
    const double lo = *lo_it, hi = *hi_it;
    std::vector<double> out(depths.size(), 0.5);
    if (hi > lo) {
        for (std::size_t i = 0; i < depths.size(); ++i) {
            out[i] = (depths[i] - lo) / (hi - lo);
        }
    }
    return out;
}

/// Channel-summed absolute difference, detached from any gradient.
inline ImageBuffer l1_error_map(const ImageBuffer& degraded, const ImageBuffer& input) {
    require_same_shape(degraded, input, "l1_error_map");
    ImageBuffer out(input.height(), input.width(), 1);
    for (int y = 0; y < input.height(); ++y) {
        for (int x = 0; x < input.width(); ++x) {
            double s = 0.0;
            for (int c = 0; c < input.channels(); ++c) {
                s += std::abs(degraded.at(y, x, c) - input.at(y, x, c));
            }
            out.at(y, x) = s;
        }
    }
    return out;
}

/// e_i at each projected center. Centers use the pixel-center convention
/// (pixel j spans [j, j+1)), so they are shifted by half a pixel onto the lattice.
inline std::vector<double> sample_errors(const ImageBuffer& error_map, const std::vector<SplatFragment>& fragments) {
    std::vector<double> out;
    out.reserve(fragments.size());
    for (const auto& fr : fragments) {
        out.push_back(bilinear_sample(error_map, {fr.center.u - 0.5, fr.center.v - 0.5}, 0));
    }
    return out;
}

inline double median(std::vector<double> v) {
    if (v.empty()) {
        throw InvalidInput("median of an empty set");
    }
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// (e - median) / max(MAD, 1e-8).
inline std::vector<double> robust_normalize(const std::vector<double>& errors) {
    if (errors.empty()) {
        return {};
    }
    const double med = median(errors);
    std::vector<double> dev(errors.size());
    for (std::size_t i = 0; i < errors.size(); ++i) {
        dev[i] = std::abs(errors[i] - med);
    }
    const double mad = std::max(median(dev), kMadFloor);
    std::vector<double> out(errors.size());
    for (std::size_t i = 0; i < errors.size(); ++i) {
        out[i] = (errors[i] - med) / mad;
    }
    return out;
}

/// w_i = d_norm * (r / r0) * sigmoid(e_norm); factor = w / mean(w), or 1 when
/// the mean vanishes.
inline void compute_weights(GgsState& st, const GgsConfig& cfg) {
    const std::size_t n = st.size();
    st.weight.assign(n, 0.0);
    st.factor.assign(n, 1.0);
    if (n == 0) {
        return;
    }
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = cfg.drop == GgsFactor::Depth ? 1.0 : st.depth_norm[i];
        const double r = cfg.drop == GgsFactor::Radius ? 1.0 : st.radius[i] / cfg.r0;
        const double e = cfg.drop == GgsFactor::Error ? 1.0 : sigmoid(st.error_norm[i]);
        st.weight[i] = d * r * e;
        sum += st.weight[i];
    }
    const double mean = sum / static_cast<double>(n);
    if (mean < kWeightMeanFloor) {
        return;
    }
    for (std::size_t i = 0; i < n; ++i) {
        st.factor[i] = st.weight[i] / mean;
    }
}

inline GgsState compute_ggs(const std::vector<SplatFragment>& fragments, const ImageBuffer& error_map,
                            const GgsConfig& cfg) {
    GgsState st;
    for (const auto& fr : fragments) {
        st.gaussian.push_back(fr.index);
        st.depth.push_back(fr.depth);
        st.radius.push_back(fr.radius);
    }
    st.depth_norm = normalize_depth(st.depth);
    st.error = sample_errors(error_map, fragments);
    st.error_norm = robust_normalize(st.error);
    compute_weights(st, cfg);
    return st;
}

/// Per-Gaussian factors for a scene of `n` Gaussians; culled ones get 1.
inline std::vector<double> scene_factors(const GgsState& st, std::size_t n) {
    std::vector<double> f(n, 1.0);
    for (std::size_t k = 0; k < st.size(); ++k) {
        f[st.gaussian[k]] = st.factor[k];
    }
    return f;
}

/// Multiplies every parameter gradient and the densification contribution of
/// Gaussian i by factor[i]. The factors are constants (stop-gradient).
inline void rescale_gradients(GaussianGradients& grads, const std::vector<double>& factor) {
    if (grads.rescaled) {
        throw InvalidState("rescale_gradients called twice on the same gradients");
    }
    if (factor.size() != grads.size()) {
        throw InvalidInput("rescale_gradients: factor count does not match gradient count");
    }
    for (std::size_t i = 0; i < grads.size(); ++i) {
        for (auto& g : grads.params[i]) {
            g *= factor[i];
        }
        grads.screen_grad[i] *= factor[i];
    }
    grads.rescaled = true;
}

inline void write_ggs_csv_header(std::ostream& os) { os << "iteration,view,gaussian,d_norm,r_i,e_i,e_norm,w_i,f_i\n"; }

inline void write_ggs_csv(std::ostream& os, long iteration, std::size_t view, const GgsState& st) {
    for (std::size_t k = 0; k < st.size(); ++k) {
        os << iteration << ',' << view << ',' << st.gaussian[k] << ',' << st.depth_norm[k] << ',' << st.radius[k] << ','
           << st.error[k] << ',' << st.error_norm[k] << ',' << st.weight[k] << ',' << st.factor[k] << '\n';
    }
}

inline GgsFactor parse_ggs_factor(const std::string& s) {
    if (s == "none" || s.empty()) return GgsFactor::None;
    if (s == "depth") return GgsFactor::Depth;
    if (s == "radius") return GgsFactor::Radius;
    if (s == "error") return GgsFactor::Error;
    throw InvalidInput("unknown GGS factor '" + s + "' (expected depth, radius, error or none)");
}

inline std::string to_string(GgsFactor f) {
    switch (f) {
        case GgsFactor::Depth: return "depth";
        case GgsFactor::Radius: return "radius";
        case GgsFactor::Error: return "error";
        default: return "none";
    }
}

}  // namespace nimbus
