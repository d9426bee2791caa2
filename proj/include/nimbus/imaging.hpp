#pragma once

#include "nimbus/core.hpp"

#include <png.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>

namespace nimbus {

/// H x W x C double image, channels interleaved, row-major.
class ImageBuffer {
public:
    ImageBuffer() = default;
    ImageBuffer(int height, int width, int channels, double fill = 0.0)
        : height_(height), width_(width), channels_(channels) {
        if (height < 1 || width < 1 || channels < 1) {
            throw InvalidInput("image dimensions must be positive");
        }
        values_.assign(static_cast<std::size_t>(height) * width * channels, fill);
    }

    int height() const noexcept { return height_; }
    int width() const noexcept { return width_; }
    int channels() const noexcept { return channels_; }
    bool empty() const noexcept { return values_.empty(); }
    std::size_t size() const noexcept { return values_.size(); }
    std::size_t pixel_count() const noexcept { return static_cast<std::size_t>(height_) * width_; }

    double& at(int y, int x, int c = 0) { return values_[index(y, x, c)]; }
    double at(int y, int x, int c = 0) const { return values_[index(y, x, c)]; }
    double& operator[](std::size_t i) { return values_[i]; }
    double operator[](std::size_t i) const { return values_[i]; }

    std::vector<double>& values() noexcept { return values_; }
    const std::vector<double>& values() const noexcept { return values_; }

    bool same_shape(const ImageBuffer& o) const noexcept {
        return height_ == o.height_ && width_ == o.width_ && channels_ == o.channels_;
    }

    bool operator==(const ImageBuffer& o) const = default;

private:
    std::size_t index(int y, int x, int c) const noexcept {
        return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
    }

    int height_ = 0;
    int width_ = 0;
    int channels_ = 0;
    std::vector<double> values_;
};

/// Continuous image-plane position; u is horizontal, v vertical.
struct PixelCoord {
    double u = 0.0;
    double v = 0.0;
};

inline void require_same_shape(const ImageBuffer& a, const ImageBuffer& b, const char* what) {
    if (!a.same_shape(b)) {
        throw InvalidInput(std::string(what) + ": image dimension mismatch");
    }
}

/// Bilinear interpolation in lattice coordinates: (u, v) = (x, y) lands exactly
/// on pixel column x, row y. Out-of-range coordinates clamp to the border.
inline double bilinear_sample(const ImageBuffer& img, PixelCoord p, int channel) {
    if (img.empty()) {
        throw InvalidInput("bilinear_sample: empty image");
    }
    const double x = std::clamp(p.u, 0.0, static_cast<double>(img.width() - 1));
    const double y = std::clamp(p.v, 0.0, static_cast<double>(img.height() - 1));
    const int x0 = std::min(static_cast<int>(std::floor(x)), std::max(img.width() - 2, 0));
    const int y0 = std::min(static_cast<int>(std::floor(y)), std::max(img.height() - 2, 0));
    const int x1 = std::min(x0 + 1, img.width() - 1);
    const int y1 = std::min(y0 + 1, img.height() - 1);
    const double fx = x - x0;
    const double fy = y - y0;
    const double top = img.at(y0, x0, channel) * (1.0 - fx) + img.at(y0, x1, channel) * fx;
    const double bottom = img.at(y1, x0, channel) * (1.0 - fx) + img.at(y1, x1, channel) * fx;
    return top * (1.0 - fy) + bottom * fy;
}

inline std::vector<double> bilinear_sample(const ImageBuffer& img, PixelCoord p) {
    if (img.empty()) {
        throw InvalidInput("bilinear_sample: empty image");
    }
    std::vector<double> out(static_cast<std::size_t>(img.channels()));
    for (int c = 0; c < img.channels(); ++c) {
        out[static_cast<std::size_t>(c)] = bilinear_sample(img, p, c);
    }
    return out;
}

inline constexpr double kPsnrCap = 100.0;

inline double mse(const ImageBuffer& a, const ImageBuffer& b) {
    require_same_shape(a, b, "mse");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        acc += d * d;
    }
    return acc / static_cast<double>(a.size());
}

/// Peak signal-to-noise ratio for unit dynamic range, capped at 100 dB.
inline double psnr(const ImageBuffer& a, const ImageBuffer& b) {
    const double m = mse(a, b);
    if (m <= 0.0) {
        return kPsnrCap;
    }
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / m));
}

// ---------------------------------------------------------------------------
// SSIM with an 11x11 Gaussian window (sigma 1.5), valid-region windows only,
// averaged over window positions and channels.

struct SsimResult {
    double value = 0.0;
    ImageBuffer grad;  // d value / d a; empty when not requested
};

namespace detail {

inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

inline const std::array<double, kSsimWindow>& ssim_kernel() {
    static const std::array<double, kSsimWindow> k = [] {
        std::array<double, kSsimWindow> w{};
        double sum = 0.0;
        for (int i = 0; i < kSsimWindow; ++i) {
            const double d = i - kSsimWindow / 2;
            w[static_cast<std::size_t>(i)] = std::exp(-d * d / (2.0 * kSsimSigma * kSsimSigma));
            sum += w[static_cast<std::size_t>(i)];
        }
        for (auto& v : w) {
            v /= sum;
        }
        return w;
    }();
    return k;
}

// Valid separable correlation of a single-channel h x w plane.
inline std::vector<double> filter_valid(const std::vector<double>& src, int h, int w) {
    const auto& k = ssim_kernel();
    const int ow = w - kSsimWindow + 1;
    const int oh = h - kSsimWindow + 1;
    std::vector<double> tmp(static_cast<std::size_t>(h) * ow);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < ow; ++x) {
            double acc = 0.0;
            for (int i = 0; i < kSsimWindow; ++i) {
                acc += k[static_cast<std::size_t>(i)] * src[static_cast<std::size_t>(y) * w + x + i];
            }
            tmp[static_cast<std::size_t>(y) * ow + x] = acc;
        }
    }
    std::vector<double> out(static_cast<std::size_t>(oh) * ow);
    for (int y = 0; y < oh; ++y) {
        for (int x = 0; x < ow; ++x) {
            double acc = 0.0;
            for (int i = 0; i < kSsimWindow; ++i) {
                acc += k[static_cast<std::size_t>(i)] * tmp[static_cast<std::size_t>(y + i) * ow + x];
            }
            out[static_cast<std::size_t>(y) * ow + x] = acc;
        }
    }
    return out;
}

// Adjoint of filter_valid: spreads an oh x ow map back onto h x w.
inline std::vector<double> filter_valid_adjoint(const std::vector<double>& src, int h, int w) {
    const auto& k = ssim_kernel();
    const int ow = w - kSsimWindow + 1;
    const int oh = h - kSsimWindow + 1;
    std::vector<double> tmp(static_cast<std::size_t>(h) * ow, 0.0);
    for (int y = 0; y < oh; ++y) {
        for (int x = 0; x < ow; ++x) {
            const double v = src[static_cast<std::size_t>(y) * ow + x];
            for (int i = 0; i < kSsimWindow; ++i) {
                tmp[static_cast<std::size_t>(y + i) * ow + x] += k[static_cast<std::size_t>(i)] * v;
            }
        }
    }
    std::vector<double> out(static_cast<std::size_t>(h) * w, 0.0);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < ow; ++x) {
            const double v = tmp[static_cast<std::size_t>(y) * ow + x];
            for (int i = 0; i < kSsimWindow; ++i) {
                out[static_cast<std::size_t>(y) * w + x + i] += k[static_cast<std::size_t>(i)] * v;
            }
        }
    }
    return out;
}

}  // namespace detail

inline SsimResult ssim(const ImageBuffer& a, const ImageBuffer& b, bool want_grad = true) {
    using namespace detail;
    require_same_shape(a, b, "ssim");
    if (a.height() < kSsimWindow || a.width() < kSsimWindow) {
        throw InvalidInput("ssim: image smaller than the 11x11 window");
    }
    const int h = a.height();
    const int w = a.width();
    const int nc = a.channels();
    const int oh = h - kSsimWindow + 1;
    const int ow = w - kSsimWindow + 1;
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    const std::size_t out_plane = static_cast<std::size_t>(oh) * ow;
    const double norm = 1.0 / static_cast<double>(out_plane * static_cast<std::size_t>(nc));

    SsimResult result;
    if (want_grad) {
        result.grad = ImageBuffer(h, w, nc);
    }
    double total = 0.0;
    std::vector<double> x(plane), y(plane), xx(plane), yy(plane), xy(plane);
    for (int c = 0; c < nc; ++c) {
        for (std::size_t i = 0; i < plane; ++i) {
            x[i] = a[i * nc + c];
            y[i] = b[i * nc + c];
            xx[i] = x[i] * x[i];
            yy[i] = y[i] * y[i];
            xy[i] = x[i] * y[i];
        }
        const auto mx = filter_valid(x, h, w);
        const auto my = filter_valid(y, h, w);
        const auto sxx = filter_valid(xx, h, w);
        const auto syy = filter_valid(yy, h, w);
        const auto sxy = filter_valid(xy, h, w);
        std::vector<double> coef_1, coef_x, coef_y;
        if (want_grad) {
            coef_1.resize(out_plane);
            coef_x.resize(out_plane);
            coef_y.resize(out_plane);
        }
        for (std::size_t p = 0; p < out_plane; ++p) {
            const double vx = sxx[p] - mx[p] * mx[p];
            const double vy = syy[p] - my[p] * my[p];
            const double cxy = sxy[p] - mx[p] * my[p];
            const double a1 = 2.0 * mx[p] * my[p] + kSsimC1;
            const double a2 = 2.0 * cxy + kSsimC2;
            const double b1 = mx[p] * mx[p] + my[p] * my[p] + kSsimC1;
            const double b2 = vx + vy + kSsimC2;
            const double s = (a1 * a2) / (b1 * b2);
            total += s;
            if (want_grad) {
                const double d_mu = (2.0 * my[p] * a2) / (b1 * b2) - s * 2.0 * mx[p] / b1;
                const double d_var = -s / b2;
                const double d_cov = 2.0 * a1 / (b1 * b2);
                coef_1[p] = norm * (d_mu - 2.0 * d_var * mx[p] - d_cov * my[p]);
                coef_x[p] = norm * 2.0 * d_var;
                coef_y[p] = norm * d_cov;
            }
        }
        if (want_grad) {
            const auto g1 = filter_valid_adjoint(coef_1, h, w);
            const auto gx = filter_valid_adjoint(coef_x, h, w);
            const auto gy = filter_valid_adjoint(coef_y, h, w);
            for (std::size_t i = 0; i < plane; ++i) {
                result.grad[i * nc + c] = g1[i] + gx[i] * x[i] + gy[i] * y[i];
            }
        }
    }
    result.value = total * norm;
    return result;
}

// ---------------------------------------------------------------------------
// File I/O: 8-bit RGB PNG and the lossless "NIMF" raw float format.

inline void write_png(const std::filesystem::path& path, const ImageBuffer& img) {
    if (img.channels() != 1 && img.channels() != 3) {
        throw InvalidInput("write_png: only 1 or 3 channel images are supported");
    }
    std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
    if (!fp) {
        throw DataError("cannot open " + path.string() + " for writing");
    }
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw DataError("libpng failure writing " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width()), static_cast<png_uint_32>(img.height()), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_byte> row(static_cast<std::size_t>(img.width()) * 3);
    for (int y = 0; y < img.height(); ++y) {
        for (int x = 0; x < img.width(); ++x) {
            for (int c = 0; c < 3; ++c) {
                const double v = img.at(y, x, img.channels() == 3 ? c : 0);
                const double q = std::round(std::clamp(std::isfinite(v) ? v : 0.0, 0.0, 1.0) * 255.0);
                row[static_cast<std::size_t>(x) * 3 + c] = static_cast<png_byte>(q);
            }
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

inline ImageBuffer read_png(const std::filesystem::path& path) {
    std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "rb"), &std::fclose);
    if (!fp) {
        throw DataError("cannot open " + path.string());
    }
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError("libpng failure reading " + path.string());
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);
    const auto color = png_get_color_type(png, info);
    if (png_get_bit_depth(png, info) == 16) {
        png_set_strip_16(png);
    }
    if (color == PNG_COLOR_TYPE_PALETTE) {
        png_set_palette_to_rgb(png);
    }
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) {
        png_set_gray_to_rgb(png);
    }
    if (color & PNG_COLOR_MASK_ALPHA) {
        png_set_strip_alpha(png);
    }
    png_read_update_info(png, info);
    const int w = static_cast<int>(png_get_image_width(png, info));
    const int h = static_cast<int>(png_get_image_height(png, info));
    ImageBuffer img(h, w, 3);
    std::vector<png_byte> row(png_get_rowbytes(png, info));
    for (int y = 0; y < h; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < 3; ++c) {
                img.at(y, x, c) = row[static_cast<std::size_t>(x) * 3 + c] / 255.0;
            }
        }
    }
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

/// Raw float image: "NIMF", u32 H, u32 W, u32 C, then H*W*C f64 (little endian).
inline void write_nimf(std::ostream& os, const ImageBuffer& img) {
    io::write_magic(os, "NIMF");
    io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(img.height()));
    io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(img.width()));
    io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(img.channels()));
    io::write_f64_array(os, img.values());
}

inline ImageBuffer read_nimf(std::istream& is) {
    io::expect_magic(is, "NIMF");
    const auto h = io::read_pod<std::uint32_t>(is);
    const auto w = io::read_pod<std::uint32_t>(is);
    const auto c = io::read_pod<std::uint32_t>(is);
    if (h == 0 || w == 0 || c == 0 || static_cast<std::uint64_t>(h) * w * c > (1ULL << 32)) {
        throw DataError("NIMF: invalid dimensions");
    }
    ImageBuffer img(static_cast<int>(h), static_cast<int>(w), static_cast<int>(c));
    img.values() = io::read_f64_array(is, img.size());
    return img;
}

inline void write_nimf(const std::filesystem::path& path, const ImageBuffer& img) {
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw DataError("cannot open " + path.string() + " for writing");
    }
    write_nimf(os, img);
}

inline ImageBuffer read_nimf(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw DataError("cannot open " + path.string());
    }
    return read_nimf(is);
}

/// Round-trips values through the 8-bit quantizer used by write_png.
inline ImageBuffer quantize8(const ImageBuffer& img) {
    ImageBuffer out = img;
    for (auto& v : out.values()) {
        v = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
    }
    return out;
}

}  // namespace nimbus
