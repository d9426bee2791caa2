#pragma once

#include "nimbus/imaging.hpp"

namespace nimbus {

/// Per-view non-negative residual R. It is a buffer recomputed by subtraction,
/// never an optimized parameter, so no gradient flows into it.
struct ParticulateLayer {
    std::size_t view = 0;
    ImageBuffer residual;
    long last_refresh = -1;

    bool operator==(const ParticulateLayer&) const = default;
};

/// R = max(I_in - I_con, 0).
inline ParticulateLayer extract_residual(const ImageBuffer& input, const ImageBuffer& continuous, std::size_t view = 0,
                                         long iteration = 0) {
    require_same_shape(input, continuous, "extract_residual");
    ParticulateLayer layer{view, ImageBuffer(input.height(), input.width(), input.channels()), iteration};
    for (std::size_t i = 0; i < input.size(); ++i) {
        layer.residual[i] = std::max(input[i] - continuous[i], 0.0);
    }
    return layer;
}

/// I_deg = I_con + R.
inline ImageBuffer compose_degraded(const ImageBuffer& continuous, const ParticulateLayer& layer) {
    require_same_shape(continuous, layer.residual, "compose_degraded");
    ImageBuffer out = continuous;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] += layer.residual[i];
    }
    return out;
}

inline bool refresh_due(long joint_iteration, int z_ref) { return z_ref >= 1 && joint_iteration % z_ref == 0; }

/// Recomputes every layer when `joint_iteration` is a multiple of z_ref.
/// `render_continuous(view)` must return the current model's I_con for that view.
template <class RenderFn>
bool refresh_all(std::vector<ParticulateLayer>& layers, const std::vector<ImageBuffer>& inputs,
                 RenderFn&& render_continuous, long joint_iteration, int z_ref) {
    if (!refresh_due(joint_iteration, z_ref)) {
        return false;
    }
    if (layers.size() != inputs.size()) {
        throw InvalidState("refresh_all: layer count does not match view count");
    }
    for (std::size_t v = 0; v < layers.size(); ++v) {
        layers[v] = extract_residual(inputs[v], render_continuous(v), v, joint_iteration);
    }
    return true;
}

}  // namespace nimbus
