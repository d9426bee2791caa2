#pragma once

#include "nimbus/gaussian_field.hpp"

#include <span>

namespace nimbus {

struct AdamHyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-15;
};

/// Moments for one flat parameter block. The step count is owned by the caller
/// so every block advances in lockstep.
struct AdamMoments {
    std::vector<double> m, v;

    void resize(std::size_t n) {
        m.assign(n, 0.0);
        v.assign(n, 0.0);
    }
    std::size_t size() const noexcept { return m.size(); }

    /// One update of params[i] with learning rate lr_of(i).
    template <class LrFn>
    void step(std::span<double> params, std::span<const double> grads, long t, const AdamHyper& h, LrFn&& lr_of) {
        if (params.size() != m.size() || grads.size() != m.size()) {
            throw InvalidState("Adam moment size does not match the parameter block");
        }
        const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(t));
        const double bc2_sqrt = std::sqrt(1.0 - std::pow(h.beta2, static_cast<double>(t)));
        for (std::size_t i = 0; i < params.size(); ++i) {
            const double g = grads[i];
            m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
            v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
            const double denom = std::sqrt(v[i]) / bc2_sqrt + h.eps;
            params[i] -= lr_of(i) / bc1 * m[i] / denom;
        }
    }

    void step(std::span<double> params, std::span<const double> grads, long t, const AdamHyper& h, double lr) {
        step(params, grads, t, h, [lr](std::size_t) { return lr; });
    }
};

/// Per-group learning rates for Gaussian parameters.
struct GaussianLr {
    double position = 1.6e-4;
    double scale = 5e-3;
    double rotation = 1e-3;
    double opacity = 5e-2;
    double color = 2.5e-3;

    double for_slot(int s) const {
        if (s < slot::kScale) return position;
        if (s < slot::kRotation) return scale;
        if (s < slot::kOpacity) return rotation;
        if (s < slot::kColor) return opacity;
        return color;
    }
};

/// Adam over the Gaussian scene, kept in step with densify/prune.
class GaussianAdam {
public:
    void resize(std::size_t n) {
        m_.assign(n, ParamVec{});
        v_.assign(n, ParamVec{});
    }
    std::size_t size() const noexcept { return m_.size(); }

    void step(GaussianScene& scene, const GaussianGradients& grads, long t, const AdamHyper& h, const GaussianLr& lr) {
        if (scene.size() != m_.size() || grads.size() != m_.size()) {
            throw InvalidState("Gaussian optimizer size does not match the scene");
        }
        const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(t));
        const double bc2_sqrt = std::sqrt(1.0 - std::pow(h.beta2, static_cast<double>(t)));
        std::array<double, kGaussianParams> lr_slot{};
        for (int k = 0; k < kGaussianParams; ++k) {
            lr_slot[k] = lr.for_slot(k);
        }
        for (std::size_t i = 0; i < scene.size(); ++i) {
            ParamVec p = scene[i].to_params();
            const ParamVec& g = grads.params[i];
            for (int k = 0; k < kGaussianParams; ++k) {
                m_[i][k] = h.beta1 * m_[i][k] + (1.0 - h.beta1) * g[k];
                v_[i][k] = h.beta2 * v_[i][k] + (1.0 - h.beta2) * g[k] * g[k];
                const double denom = std::sqrt(v_[i][k]) / bc2_sqrt + h.eps;
                p[k] -= lr_slot[k] / bc1 * m_[i][k] / denom;
            }
            scene[i] = GaussianPrimitive::from_params(p);
        }
    }

    /// Kept Gaussians and clones inherit their parent's moments; split children start from zero.
    void remap(const DensifyResult& r) {
        std::vector<ParamVec> m(r.scene.size()), v(r.scene.size());
        for (std::size_t k = 0; k < r.scene.size(); ++k) {
            if (r.origin[k] == Origin::Split) {
                continue;
            }
            m[k] = m_.at(r.parent[k]);
            v[k] = v_.at(r.parent[k]);
        }
        m_ = std::move(m);
        v_ = std::move(v);
    }

    std::vector<ParamVec>& first() noexcept { return m_; }
    std::vector<ParamVec>& second() noexcept { return v_; }
    const std::vector<ParamVec>& first() const noexcept { return m_; }
    const std::vector<ParamVec>& second() const noexcept { return v_; }

private:
    std::vector<ParamVec> m_, v_;
};

/// Unit quaternion and colors in [0,1] after each step.
inline void normalize_primitive(GaussianPrimitive& g) {
    const double n = g.rotation.norm();
    g.rotation = n > 0.0 ? Vec4(g.rotation / n) : Vec4(1, 0, 0, 0);
    for (int c = 0; c < 3; ++c) {
        g.color[c] = std::clamp(g.color[c], 0.0, 1.0);
    }
}

}  // namespace nimbus
