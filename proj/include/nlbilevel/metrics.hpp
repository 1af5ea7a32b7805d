#pragma once

#include <array>
#include <cmath>
#include <limits>

#include "nlbilevel/error.hpp"
#include "nlbilevel/image.hpp"

namespace nlbilevel {

struct QualityReport {
    double ssim = 0.0;
    double psnr = 0.0;     // dB; +inf when the images agree on the interior
    double l2_loss = 0.0;  // 1/2 * sum over the interior of (a - b)^2
};

namespace detail {

inline void require_same_shape(const Image& a, const Image& b) {
    if (!a.same_shape(b)) {
        throw ConfigError("image dimensions differ");
    }
}

inline constexpr int kSsimRadius = 5;  // 11x11 window

inline const std::array<double, 2 * kSsimRadius + 1>& ssim_taps() {
    static const auto taps = [] {
        std::array<double, 2 * kSsimRadius + 1> t{};
        constexpr double sigma = 1.5;
        for (int k = -kSsimRadius; k <= kSsimRadius; ++k) {
            t[k + kSsimRadius] = std::exp(-(k * k) / (2.0 * sigma * sigma));
        }
        return t;
    }();
    return taps;
}

}  // namespace detail

/// Loss 1/2 ||a - b||^2 over the interior (unit pixel area).
inline double l2_loss(const Image& a, const Image& b) {
    detail::require_same_shape(a, b);
    double sum = 0.0;
    for (int y = 0; y < a.height(); ++y) {
        for (int x = 0; x < a.width(); ++x) {
            const double d = a(x, y) - b(x, y);
            sum += d * d;
        }
    }
    return 0.5 * sum;
}

inline double mse(const Image& a, const Image& b) {
    return 2.0 * l2_loss(a, b) / static_cast<double>(a.size());
}

/// Peak signal-to-noise ratio for peak 255. Returns +infinity when MSE is 0.
inline double psnr(const Image& a, const Image& b) {
    const double err = mse(a, b);
    if (err == 0.0) {
        return std::numeric_limits<double>::infinity();
    }
    return 10.0 * std::log10(255.0 * 255.0 / err);
}

/// Mean SSIM with the usual constants C1 = (0.01*255)^2, C2 = (0.03*255)^2 and
/// an 11x11 Gaussian window (sigma 1.5). Windows are clipped to the interior
/// and renormalised, so every interior pixel contributes and no padding value
/// enters the statistics.
inline double ssim(const Image& a, const Image& b) {
    detail::require_same_shape(a, b);
    constexpr double c1 = (0.01 * 255.0) * (0.01 * 255.0);
    constexpr double c2 = (0.03 * 255.0) * (0.03 * 255.0);
    constexpr int r = detail::kSsimRadius;
    const auto& taps = detail::ssim_taps();
    const int w = a.width();
    const int h = a.height();

    double total = 0.0;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double wsum = 0.0, ma = 0.0, mb = 0.0;
            const int y0 = std::max(0, y - r), y1 = std::min(h - 1, y + r);
            const int x0 = std::max(0, x - r), x1 = std::min(w - 1, x + r);
            for (int yy = y0; yy <= y1; ++yy) {
                for (int xx = x0; xx <= x1; ++xx) {
                    const double g = taps[yy - y + r] * taps[xx - x + r];
                    wsum += g;
                    ma += g * a(xx, yy);
                    mb += g * b(xx, yy);
                }
            }
            ma /= wsum;
            mb /= wsum;
            double vaa = 0.0, vbb = 0.0, vab = 0.0;
            for (int yy = y0; yy <= y1; ++yy) {
                for (int xx = x0; xx <= x1; ++xx) {
                    const double g = taps[yy - y + r] * taps[xx - x + r];
                    const double da = a(xx, yy) - ma;
                    const double db = b(xx, yy) - mb;
                    vaa += g * da * da;
                    vbb += g * db * db;
                    vab += g * da * db;
                }
            }
            vaa /= wsum;
            vbb /= wsum;
            vab /= wsum;
            total += ((2.0 * ma * mb + c1) * (2.0 * vab + c2)) /
                     ((ma * ma + mb * mb + c1) * (vaa + vbb + c2));
        }
    }
    return total / static_cast<double>(a.size());
}

inline QualityReport quality(const Image& estimate, const Image& truth) {
    return {ssim(estimate, truth), psnr(estimate, truth), l2_loss(estimate, truth)};
}

}  // namespace nlbilevel
