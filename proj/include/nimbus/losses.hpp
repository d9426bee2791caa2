#pragma once

#include "nimbus/imaging.hpp"
#include "nimbus/scattering.hpp"

namespace nimbus {

struct LossWeights {
    double lambda_r = 0.4;
    double lambda_dcp = 1.0;
    double lambda_tv = 0.1;

    void validate() const {
        if (!(lambda_r >= 0.0 && lambda_r <= 1.0) || !(lambda_dcp >= 0.0) || !(lambda_tv >= 0.0)) {
            throw InvalidInput("loss weights out of range");
        }
    }
};

/// Unweighted components plus the weighted total.
struct LossReport {
    double total = 0.0;
    double photometric_l1 = 0.0;
    double photometric_ssim = 0.0;  // 1 - SSIM
    double dcp = 0.0;
    double tv = 0.0;

    static double recombine(const LossReport& r, const LossWeights& w) {
        return (1.0 - w.lambda_r) * r.photometric_l1 + w.lambda_r * r.photometric_ssim + w.lambda_dcp * r.dcp +
               w.lambda_tv * r.tv;
    }
};

struct DarkChannel {
    ImageBuffer value;                // 1 channel
    std::vector<std::size_t> source;  // flat index into the input values achieving each minimum
};

/// Min over channels, then min over a patch x patch neighborhood with clamped
/// borders. Ties go to the first achiever in scan order.
inline DarkChannel dark_channel(const ImageBuffer& img, int patch) {
    if (patch < 1 || patch % 2 == 0) {
        throw InvalidInput("dark_channel: patch size must be odd and >= 1");
    }
    const int h = img.height(), w = img.width(), nc = img.channels();
    std::vector<double> cmin(static_cast<std::size_t>(h) * w);
    std::vector<std::size_t> carg(cmin.size());
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const std::size_t base = (static_cast<std::size_t>(y) * w + x) * nc;
            std::size_t best = base;
            for (int c = 1; c < nc; ++c) {
                if (img[base + c] < img[best]) {
                    best = base + c;
                }
            }
            cmin[static_cast<std::size_t>(y) * w + x] = img[best];
            carg[static_cast<std::size_t>(y) * w + x] = best;
        }
    }
    DarkChannel out{ImageBuffer(h, w, 1), std::vector<std::size_t>(static_cast<std::size_t>(h) * w)};
    const int r = patch / 2;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double best = std::numeric_limits<double>::infinity();
            std::size_t arg = 0;
            for (int dy = -r; dy <= r; ++dy) {
                const int yy = std::clamp(y + dy, 0, h - 1);
                for (int dx = -r; dx <= r; ++dx) {
                    const int xx = std::clamp(x + dx, 0, w - 1);
                    const std::size_t p = static_cast<std::size_t>(yy) * w + xx;
                    if (cmin[p] < best) {
                        best = cmin[p];
                        arg = carg[p];
                    }
                }
            }
            out.value.at(y, x) = best;
            out.source[static_cast<std::size_t>(y) * w + x] = arg;
        }
    }
    return out;
}

/// Mean absolute difference; grad (optional) receives d/d pred.
inline double l1_loss(const ImageBuffer& pred, const ImageBuffer& target, ImageBuffer* grad = nullptr) {
    require_same_shape(pred, target, "l1_loss");
    const double inv_n = 1.0 / static_cast<double>(pred.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = pred[i] - target[i];
        sum += std::abs(d);
        if (grad) {
            (*grad)[i] += d > 0 ? inv_n : (d < 0 ? -inv_n : 0.0);
        }
    }
    return sum * inv_n;
}

/// Mean dark channel of `clean`; grad (optional) receives d/d clean.
inline double dcp_loss(const ImageBuffer& clean, int patch, ImageBuffer* grad = nullptr) {
    const DarkChannel dc = dark_channel(clean, patch);
    const double inv_n = 1.0 / static_cast<double>(dc.value.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < dc.value.size(); ++i) {
        sum += std::abs(dc.value[i]);
        if (grad) {
            const double v = dc.value[i];
            (*grad)[dc.source[i]] += v > 0 ? inv_n : (v < 0 ? -inv_n : 0.0);
        }
    }
    return sum * inv_n;
}

struct StageLoss {
    LossReport report;
    ImageBuffer grad_prediction;  // d total / d (I_con or I_deg)
    ImageBuffer grad_clean;       // d total / d I_hat from the DCP term
    std::vector<double> grad_grid;  // d total / d raw grid values (empty without a grid)
};

namespace detail {

inline StageLoss photometric(const ImageBuffer& input, const ImageBuffer& prediction, const LossWeights& w) {
    StageLoss out;
    out.grad_prediction = ImageBuffer(input.height(), input.width(), input.channels());
    ImageBuffer g_l1(input.height(), input.width(), input.channels());
    out.report.photometric_l1 = l1_loss(prediction, input, &g_l1);
    const SsimResult s = ssim(prediction, input, true);
    out.report.photometric_ssim = 1.0 - s.value;
    for (std::size_t i = 0; i < g_l1.size(); ++i) {
        out.grad_prediction[i] = (1.0 - w.lambda_r) * g_l1[i] - w.lambda_r * s.grad[i];
    }
    return out;
}

inline void add_regularizers(StageLoss& out, const ImageBuffer* clean_for_dcp, int patch, const ExtinctionGrid* grid,
                             const LossWeights& w) {
    if (clean_for_dcp) {
        ImageBuffer g(clean_for_dcp->height(), clean_for_dcp->width(), clean_for_dcp->channels());
        out.report.dcp = dcp_loss(*clean_for_dcp, patch, &g);
        out.grad_clean = ImageBuffer(g.height(), g.width(), g.channels());
        for (std::size_t i = 0; i < g.size(); ++i) {
            out.grad_clean[i] = w.lambda_dcp * g[i];
        }
    }
    if (grid) {
        TvResult tv = tv_loss(*grid, true);
        out.report.tv = tv.value;
        for (auto& v : tv.grad) {
            v *= w.lambda_tv;
        }
        out.grad_grid = std::move(tv.grad);
    }
    out.report.total = LossReport::recombine(out.report, w);
}

}  // namespace detail

/// Geometry-initialization objective: photometric(I_in, I_con) + DCP(I_hat) + TV(beta).
inline StageLoss stage1_loss(const ImageBuffer& input, const ImageBuffer& continuous, const ImageBuffer& clean,
                             const ExtinctionGrid* grid, const LossWeights& w, int dcp_patch = 7) {
    w.validate();
    require_same_shape(input, continuous, "stage1_loss");
    require_same_shape(input, clean, "stage1_loss");
    StageLoss out = detail::photometric(input, continuous, w);
    detail::add_regularizers(out, &clean, dcp_patch, grid, w);
    return out;
}

/// Joint objective: photometric(I_in, I_deg) + TV(beta). `clean_for_dcp` keeps
/// the DCP term active for the loss ablation; pass nullptr for the default.
inline StageLoss stage2_loss(const ImageBuffer& input, const ImageBuffer& degraded, const ExtinctionGrid* grid,
                             const LossWeights& w, const ImageBuffer* clean_for_dcp = nullptr, int dcp_patch = 7) {
    w.validate();
    require_same_shape(input, degraded, "stage2_loss");
    StageLoss out = detail::photometric(input, degraded, w);
    detail::add_regularizers(out, clean_for_dcp, dcp_patch, grid, w);
    return out;
}

}  // namespace nimbus
