#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "nlbilevel/error.hpp"

namespace nlbilevel {

/// Grayscale image on a rectangular domain with a zero ring (the interaction
/// padding) of width `pad` around it.
///
/// Coordinates are (x, y) with x in [0, width) along a row and y in
/// [0, height) down the columns. Storage is row-major over the padded grid,
/// so the interior pixel (x, y) lives at ((y + pad) * padded_width() + x + pad).
/// Intensities are kept as doubles with the nominal range [0, 255]; nothing is
/// clamped until an image is written to disk.
class Image {
public:
    Image() = default;

    Image(int width, int height, int pad = 0)
        : width_(width), height_(height), pad_(pad) {
        if (width < 1 || height < 1) {
            throw ConfigError("image dimensions must be at least 1x1");
        }
        if (pad < 0) {
            throw ConfigError("image padding must be non-negative");
        }
        data_.assign(static_cast<std::size_t>(padded_width()) * padded_height(), 0.0);
    }

    /// Builds an image from row-major interior values (width * height entries).
    static Image from_interior(int width, int height, int pad, std::span<const double> values) {
        Image img(width, height, pad);
        if (values.size() != img.size()) {
            throw ConfigError("interior value count does not match image dimensions");
        }
        for (int y = 0; y < height; ++y) {
            for (int x = 0; x < width; ++x) {
                img.set(x, y, values[static_cast<std::size_t>(y) * width + x]);
            }
        }
        return img;
    }

    int width() const noexcept { return width_; }
    int height() const noexcept { return height_; }
    int pad() const noexcept { return pad_; }
    int padded_width() const noexcept { return width_ + 2 * pad_; }
    int padded_height() const noexcept { return height_ + 2 * pad_; }
    /// Number of interior pixels.
    std::size_t size() const noexcept { return static_cast<std::size_t>(width_) * height_; }
    bool empty() const noexcept { return data_.empty(); }

    /// Value at (x, y); coordinates inside the padding ring return 0.
    double operator()(int x, int y) const {
        return data_[padded_index(x, y)];
    }

    /// Writes an interior pixel. The padding ring cannot be written.
    void set(int x, int y, double value) {
        if (x < 0 || y < 0 || x >= width_ || y >= height_) {
            throw ConfigError("Image::set outside the interior domain");
        }
        data_[padded_index(x, y)] = value;
    }

    std::size_t padded_index(int x, int y) const noexcept {
        return static_cast<std::size_t>(y + pad_) * padded_width() + (x + pad_);
    }

    std::span<const double> padded() const noexcept { return data_; }

    /// Interior values, row-major.
    std::vector<double> interior() const {
        std::vector<double> out(size());
        for (int y = 0; y < height_; ++y) {
            for (int x = 0; x < width_; ++x) {
                out[static_cast<std::size_t>(y) * width_ + x] = (*this)(x, y);
            }
        }
        return out;
    }

    /// Same interior with a different padding width.
    Image with_pad(int pad) const {
        Image out(width_, height_, pad);
        for (int y = 0; y < height_; ++y) {
            for (int x = 0; x < width_; ++x) {
                out.set(x, y, (*this)(x, y));
            }
        }
        return out;
    }

    bool same_shape(const Image& other) const noexcept {
        return width_ == other.width_ && height_ == other.height_;
    }

    friend bool operator==(const Image&, const Image&) = default;

private:
    int width_ = 0;
    int height_ = 0;
    int pad_ = 0;
    std::vector<double> data_;
};

struct NoiseSpec {
    double variance = 100.0;
    std::uint64_t seed = 0;
};

/// f = clean + n with n ~ N(0, variance) i.i.d. on the interior. The padding
/// stays zero and values are not clamped.
inline Image add_gaussian_noise(const Image& clean, const NoiseSpec& spec) {
    if (!(spec.variance > 0.0)) {
        throw ConfigError("noise variance must be positive");
    }
    std::mt19937_64 rng(spec.seed);
    std::normal_distribution<double> normal(0.0, std::sqrt(spec.variance));
    Image noisy(clean.width(), clean.height(), clean.pad());
    for (int y = 0; y < clean.height(); ++y) {
        for (int x = 0; x < clean.width(); ++x) {
            noisy.set(x, y, clean(x, y) + normal(rng));
        }
    }
    return noisy;
}

/// Nearest-neighbour resampling to the requested size.
inline Image downscale_nearest(const Image& img, int width, int height) {
    if (width < 1 || height < 1 || width > img.width() || height > img.height()) {
        throw ConfigError("downscale target must be within 1..source size");
    }
    Image out(width, height, img.pad());
    for (int y = 0; y < height; ++y) {
        const int sy = static_cast<int>((static_cast<long long>(y) * img.height()) / height);
        for (int x = 0; x < width; ++x) {
            const int sx = static_cast<int>((static_cast<long long>(x) * img.width()) / width);
            out.set(x, y, img(sx, sy));
        }
    }
    return out;
}

/// Deterministic test image: oblique stripes, a checkerboard, a horizontal
/// wave and a disc on a ramp, one per quadrant. Contrast is moderate (about
/// +-20 grey levels around mid-grey) so that noise of variance ~100 matters.
inline Image synthetic_texture(int width, int height, int pad = 0) {
    Image img(width, height, pad);
    const double two_pi = 2.0 * std::numbers::pi;
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            const bool left = x < width / 2;
            const bool top = y < height / 2;
            double value;
            if (top && left) {
                value = 128.0 + 20.0 * std::sin(two_pi * (x + 0.5 * y) / 6.0);
            } else if (top) {
                value = ((x / 4 + y / 4) % 2 == 0) ? 145.5 : 110.5;
            } else if (left) {
                value = 100.0 + 15.0 * std::sin(two_pi * y / 8.0);
            } else {
                const double dx = x - 0.72 * width;
                const double dy = y - 0.72 * height;
                value = dx * dx + dy * dy < 100.0 ? 153.0 : 80.0 + 0.4 * y;
            }
            img.set(x, y, value);
        }
    }
    return img;
}

/// Named noise levels {a, b, c, d} = variance {10^1.5, 10^2, 10^2.5, 10^3}
/// with the matching NLM filtering parameter and weight-bound factor.
struct NoisePreset {
    char name;
    double variance;
    double delta;
    double weight_bound_factor;
};

inline const std::vector<NoisePreset>& noise_presets() {
    static const std::vector<NoisePreset> presets = {
        {'a', std::pow(10.0, 1.5), 30.0, 12.0},
        {'b', 1e2, 1e2, 9.0},
        {'c', std::pow(10.0, 2.5), 3.16e2, 6.0},
        {'d', 1e3, 3.33e2, 3.0},
    };
    return presets;
}

inline const NoisePreset& noise_preset(char name) {
    for (const auto& p : noise_presets()) {
        if (p.name == name) {
            return p;
        }
    }
    throw ConfigError(std::string("unknown noise preset '") + name + "' (expected a-d)");
}

}  // namespace nlbilevel
