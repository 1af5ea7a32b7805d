#pragma once

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "nlbilevel/error.hpp"
#include "nlbilevel/image.hpp"

namespace nlbilevel {

namespace detail {

inline std::uint8_t to_byte(double v) {
    if (!std::isfinite(v)) {
        return 0;
    }
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
}

inline bool has_extension(const std::filesystem::path& path, const char* ext) {
    std::string e = path.extension().string();
    std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return std::tolower(c); });
    return e == ext;
}

struct FileCloser {
    void operator()(std::FILE* f) const noexcept {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline void skip_pgm_space(std::istream& in) {
    for (;;) {
        int c = in.peek();
        if (c == '#') {
            std::string line;
            std::getline(in, line);
        } else if (std::isspace(c)) {
            in.get();
        } else {
            return;
        }
    }
}

}  // namespace detail

/// Binary PGM (P5), 8-bit.
inline Image read_pgm(const std::filesystem::path& path, int pad = 0) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    std::string magic;
    in >> magic;
    if (magic != "P5") {
        throw IoError(path.string() + ": only binary PGM (P5) is supported");
    }
    int width = 0, height = 0, maxval = 0;
    detail::skip_pgm_space(in);
    in >> width;
    detail::skip_pgm_space(in);
    in >> height;
    detail::skip_pgm_space(in);
    in >> maxval;
    in.get();
    if (!in || width < 1 || height < 1 || maxval < 1 || maxval > 255) {
        throw IoError(path.string() + ": malformed PGM header");
    }
    std::vector<unsigned char> bytes(static_cast<std::size_t>(width) * height);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!in) {
        throw IoError(path.string() + ": truncated PGM data");
    }
    std::vector<double> values(bytes.begin(), bytes.end());
    if (maxval != 255) {
        for (auto& v : values) v *= 255.0 / maxval;
    }
    return Image::from_interior(width, height, pad, values);
}

inline void write_pgm(const std::filesystem::path& path, const Image& img) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    out << "P5\n" << img.width() << ' ' << img.height() << "\n255\n";
    for (int y = 0; y < img.height(); ++y) {
        for (int x = 0; x < img.width(); ++x) {
            out.put(static_cast<char>(detail::to_byte(img(x, y))));
        }
    }
    if (!out) {
        throw IoError("write failed for " + path.string());
    }
}

/// Reads any PNG libpng understands; colour is reduced to luma
/// 0.299 R + 0.587 G + 0.114 B and alpha is dropped.
inline Image read_png(const std::filesystem::path& path, int pad = 0) {
    detail::FilePtr file(std::fopen(path.string().c_str(), "rb"));
    if (!file) {
        throw IoError("cannot open " + path.string());
    }
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("libpng initialisation failed");
    }
    std::vector<png_bytep> rows;
    std::vector<png_byte> pixels;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError(path.string() + ": invalid PNG");
    }
    png_init_io(png, file.get());
    png_read_info(png, info);
    png_set_strip_16(png);
    png_set_packing(png);
    png_set_strip_alpha(png);
    const auto color = png_get_color_type(png, info);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) {
        png_set_expand_gray_1_2_4_to_8(png);
    }
    png_read_update_info(png, info);
    const int width = static_cast<int>(png_get_image_width(png, info));
    const int height = static_cast<int>(png_get_image_height(png, info));
    const int channels = png_get_channels(png, info);
    const std::size_t stride = png_get_rowbytes(png, info);
    pixels.resize(stride * height);
    rows.resize(height);
    for (int y = 0; y < height; ++y) rows[y] = pixels.data() + y * stride;
    png_read_image(png, rows.data());
    png_destroy_read_struct(&png, &info, nullptr);

    std::vector<double> values(static_cast<std::size_t>(width) * height);
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            const png_byte* p = rows[y] + static_cast<std::size_t>(x) * channels;
            values[static_cast<std::size_t>(y) * width + x] =
                channels >= 3 ? 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2] : p[0];
        }
    }
    return Image::from_interior(width, height, pad, values);
}

/// 8-bit grayscale PNG; values are rounded and clamped to [0, 255].
inline void write_png(const std::filesystem::path& path, const Image& img) {
    detail::FilePtr file(std::fopen(path.string().c_str(), "wb"));
    if (!file) {
        throw IoError("cannot write " + path.string());
    }
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng initialisation failed");
    }
    std::vector<png_byte> row(static_cast<std::size_t>(img.width()));
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("write failed for " + path.string());
    }
    png_init_io(png, file.get());
    png_set_IHDR(png, info, img.width(), img.height(), 8, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < img.height(); ++y) {
        for (int x = 0; x < img.width(); ++x) row[x] = detail::to_byte(img(x, y));
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

/// Dispatches on the extension (.png, otherwise PGM).
inline Image read_image(const std::filesystem::path& path, int pad = 0) {
    if (!std::filesystem::exists(path)) {
        throw IoError("no such file: " + path.string());
    }
    return detail::has_extension(path, ".png") ? read_png(path, pad) : read_pgm(path, pad);
}

inline void write_image(const std::filesystem::path& path, const Image& img) {
    if (detail::has_extension(path, ".png")) {
        write_png(path, img);
    } else {
        write_pgm(path, img);
    }
}

/// Raw little-endian float64 grid preceded by two int32 dimensions.
inline void write_raw_grid(const std::filesystem::path& path, int width, int height,
                           std::span<const double> values) {
    if (values.size() != static_cast<std::size_t>(width) * height) {
        throw ConfigError("raw grid size mismatch");
    }
    std::ofstream out(path, std::ios::binary);
    const std::int32_t dims[2] = {width, height};
    out.write(reinterpret_cast<const char*>(dims), sizeof dims);
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!out) {
        throw IoError("write failed for " + path.string());
    }
}

/// Min-max normalisation of a grid to [0, 255] for display.
inline Image normalized_grid_image(int width, int height, std::span<const double> values) {
    const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
    const double span = *hi - *lo;
    std::vector<double> scaled(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        scaled[i] = span > 0.0 ? 255.0 * (values[i] - *lo) / span : 0.0;
    }
    return Image::from_interior(width, height, 0, scaled);
}

}  // namespace nlbilevel
