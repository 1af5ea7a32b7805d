#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "nlbilevel/error.hpp"
#include "nlbilevel/image.hpp"

namespace nlbilevel {

struct PatchConfig {
    int patch_radius = 5;        // patches hold (2r+1)^2 pixels
    int interaction_radius = 1;  // l-infinity radius of the neighbourhood
    double threshold = 1e-9;     // kernel entries <= threshold are dropped

    int patch_size() const noexcept { return (2 * patch_radius + 1) * (2 * patch_radius + 1); }
    int neighbour_count() const noexcept {
        return (2 * interaction_radius + 1) * (2 * interaction_radius + 1);
    }
};

/// Largest radius whose square neighbourhood (2r+1)^2, centre included, stays
/// within 5 * min(width, height) pixels. Never below 1.
inline int default_interaction_radius(int width, int height) {
    const double budget = 5.0 * std::min(width, height);
    const int r = static_cast<int>(std::floor((std::sqrt(budget) - 1.0) / 2.0));
    return std::max(r, 1);
}

/// Row/column structure shared by every matrix built on one image.
///
/// Rows are the interior pixels in raster order. Each row stores exactly
/// (2r+1)^2 entries, one per offset of the square neighbourhood, enumerated in
/// raster order of the offsets. An entry whose neighbour falls in the padding
/// ring has column -1: it contributes to row sums but not to products with
/// interior vectors. Entry k of row i and entry count-1-k of its neighbour
/// describe the same pair, which is how symmetry is kept exact.
class BandLayout {
public:
    BandLayout() = default;

    BandLayout(int width, int height, int radius)
        : width_(width), height_(height), radius_(radius) {
        if (width < 1 || height < 1) {
            throw ConfigError("layout needs at least one interior pixel");
        }
        if (radius < 1) {
            throw ConfigError("interaction radius must be at least 1");
        }
        auto cols = std::make_shared<std::vector<std::int32_t>>(rows() * count());
        const int s = span();
        for (int y = 0; y < height; ++y) {
            for (int x = 0; x < width; ++x) {
                const std::size_t base = (static_cast<std::size_t>(y) * width + x) * count();
                for (int k = 0; k < count(); ++k) {
                    const int nx = x + k % s - radius;
                    const int ny = y + k / s - radius;
                    const bool inside = nx >= 0 && ny >= 0 && nx < width && ny < height;
                    (*cols)[base + k] = inside ? ny * width + nx : -1;
                }
            }
        }
        columns_ = std::move(cols);
    }

    int width() const noexcept { return width_; }
    int height() const noexcept { return height_; }
    int radius() const noexcept { return radius_; }
    int span() const noexcept { return 2 * radius_ + 1; }
    int count() const noexcept { return span() * span(); }
    int center() const noexcept { return count() / 2; }
    std::size_t rows() const noexcept { return static_cast<std::size_t>(width_) * height_; }
    std::size_t entries() const noexcept { return rows() * count(); }

    int dx(int k) const noexcept { return k % span() - radius_; }
    int dy(int k) const noexcept { return k / span() - radius_; }
    int mirror(int k) const noexcept { return count() - 1 - k; }

    /// Interior neighbour index of entry k in row i, or -1 for the padding ring.
    std::int32_t column(std::size_t row, int k) const noexcept {
        return (*columns_)[row * count() + k];
    }
    const std::vector<std::int32_t>& columns() const noexcept { return *columns_; }

    bool compatible(const BandLayout& other) const noexcept {
        return width_ == other.width_ && height_ == other.height_ && radius_ == other.radius_;
    }

private:
    int width_ = 0;
    int height_ = 0;
    int radius_ = 0;
    std::shared_ptr<const std::vector<std::int32_t>> columns_;
};

/// Squared patch distances D_ij between each interior pixel and every pixel of
/// its neighbourhood (padding ring included). Independent of the kernel weight.
struct DissimilarityMatrix {
    BandLayout layout;
    PatchConfig config;
    std::vector<double> values;  // rows * count, layout order

    double operator()(std::size_t row, int k) const { return values[row * layout.count() + k]; }
    double max_value() const {
        double m = 0.0;
        for (double v : values) m = std::max(m, v);
        return m;
    }
};

/// Nonlocal-means kernel gamma_ij = exp(-w D_ij) on entries that pass the
/// threshold, 0 elsewhere, plus its row sums eta_i (self term included).
struct KernelMatrix {
    BandLayout layout;
    std::vector<double> values;
    std::vector<std::uint8_t> mask;  // 1 where the entry is kept
    std::vector<double> row_sums;
    double weight = 0.0;

    double operator()(std::size_t row, int k) const { return values[row * layout.count() + k]; }
};

/// Derivative of the kernel with respect to a constant weight, -D o gamma,
/// with its row sums.
struct LinearizedKernel {
    BandLayout layout;
    std::vector<double> values;
    std::vector<double> row_sums;
};

/// Multiply-add counter for kernel assembly.
struct KernelOpCount {
    std::uint64_t multiply_adds = 0;
};

/// Reference operation count |P| [NM (1 + E) - E] for assembling the kernel.
inline double kernel_op_budget(int width, int height, const PatchConfig& cfg) {
    const double nm = static_cast<double>(width) * height;
    const double e = cfg.neighbour_count();
    return cfg.patch_size() * (nm * (1.0 + e) - e);
}

namespace detail {

inline void row_sums(const BandLayout& layout, const std::vector<double>& values,
                     std::vector<double>& sums) {
    const int count = layout.count();
    sums.assign(layout.rows(), 0.0);
    for (std::size_t i = 0; i < layout.rows(); ++i) {
        const double* row = values.data() + i * count;
        double s = 0.0;
        for (int k = 0; k < count; ++k) s += row[k];
        sums[i] = s;
    }
}

}  // namespace detail

/// D_ij = px_i(f^2) + px_j(f^2) - 2 sum_t P_i(t) P_j(t), where px are squared
/// patch measures computed once per pixel. Only pairs with j before i in raster
/// order are evaluated; the rest are mirrored. The image is zero-extended
/// outside its interior.
inline DissimilarityMatrix build_dissimilarity(const Image& f, const PatchConfig& cfg,
                                               KernelOpCount* ops = nullptr) {
    if (cfg.patch_radius < 0) {
        throw ConfigError("patch radius must be non-negative");
    }
    if (cfg.interaction_radius < 1) {
        throw ConfigError("interaction radius must be at least 1");
    }
    if (!(cfg.threshold >= 0.0)) {
        throw ConfigError("kernel threshold must be non-negative");
    }
    if (f.empty()) {
        throw ConfigError("image has no interior pixels");
    }

    const int w = f.width();
    const int h = f.height();
    const int eps = cfg.interaction_radius;
    const int rho = cfg.patch_radius;

    // zero-extended copy wide enough for patches centred in the padding ring
    const int ext = eps + rho;
    const int bw = w + 2 * ext;
    const int bh = h + 2 * ext;
    std::vector<double> buf(static_cast<std::size_t>(bw) * bh, 0.0);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            buf[static_cast<std::size_t>(y + ext) * bw + x + ext] = f(x, y);
        }
    }
    auto at = [&](int x, int y) { return static_cast<std::size_t>(y + ext) * bw + (x + ext); };

    // squared patch measures over interior + padding ring
    const int pw = w + 2 * eps;
    const int ph = h + 2 * eps;
    std::vector<double> measure(static_cast<std::size_t>(pw) * ph, 0.0);
    for (int y = -eps; y < h + eps; ++y) {
        for (int x = -eps; x < w + eps; ++x) {
            double s = 0.0;
            for (int ty = -rho; ty <= rho; ++ty) {
                const double* line = buf.data() + at(x - rho, y + ty);
                for (int tx = 0; tx <= 2 * rho; ++tx) s += line[tx] * line[tx];
            }
            measure[static_cast<std::size_t>(y + eps) * pw + x + eps] = s;
        }
    }
    std::uint64_t count_ops = static_cast<std::uint64_t>(pw) * ph * cfg.patch_size();

    DissimilarityMatrix d{BandLayout(w, h, eps), cfg, {}};
    const BandLayout& layout = d.layout;
    const int count = layout.count();
    d.values.assign(layout.entries(), 0.0);

    auto pair_distance = [&](int xi, int yi, int xj, int yj) {
        double cross = 0.0;
        for (int ty = -rho; ty <= rho; ++ty) {
            const double* a = buf.data() + at(xi - rho, yi + ty);
            const double* b = buf.data() + at(xj - rho, yj + ty);
            for (int tx = 0; tx <= 2 * rho; ++tx) cross += a[tx] * b[tx];
        }
        const double mi = measure[static_cast<std::size_t>(yi + eps) * pw + xi + eps];
        const double mj = measure[static_cast<std::size_t>(yj + eps) * pw + xj + eps];
        return std::max(0.0, mi + mj - 2.0 * cross);
    };

    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * w + x;
            for (int k = 0; k < count; ++k) {
                if (k == layout.center()) continue;
                const std::int32_t j = layout.column(i, k);
                // interior pairs ahead of i in raster order are filled by mirroring
                if (k > layout.center() && j >= 0) continue;
                const double v = pair_distance(x, y, x + layout.dx(k), y + layout.dy(k));
                count_ops += cfg.patch_size();
                d.values[i * count + k] = v;
                if (j >= 0) {
                    d.values[static_cast<std::size_t>(j) * count + layout.mirror(k)] = v;
                }
            }
        }
    }
    if (ops) ops->multiply_adds += count_ops;
    return d;
}

/// Kernel at weight w with an explicit mask (1 keeps the entry).
inline KernelMatrix assemble_kernel(const DissimilarityMatrix& d, double weight,
                                    const std::vector<std::uint8_t>& mask) {
    if (!(weight >= 0.0)) {
        throw ConfigError("kernel weight must be non-negative");
    }
    if (mask.size() != d.values.size()) {
        throw ConfigError("kernel mask does not match the dissimilarity pattern");
    }
    KernelMatrix k{d.layout, std::vector<double>(d.values.size()), mask, {}, weight};
    for (std::size_t e = 0; e < d.values.size(); ++e) {
        k.values[e] = mask[e] ? std::exp(-weight * d.values[e]) : 0.0;
    }
    detail::row_sums(k.layout, k.values, k.row_sums);
    return k;
}

/// Kernel at weight w, keeping entries with exp(-w D_ij) > threshold.
inline KernelMatrix assemble_kernel(const DissimilarityMatrix& d, double weight) {
    if (!(weight >= 0.0)) {
        throw ConfigError("kernel weight must be non-negative");
    }
    std::vector<std::uint8_t> mask(d.values.size());
    for (std::size_t e = 0; e < d.values.size(); ++e) {
        mask[e] = std::exp(-weight * d.values[e]) > d.config.threshold ? 1 : 0;
    }
    return assemble_kernel(d, weight, mask);
}

/// gamma_new = gamma_old^(w_new / w_old) on kept entries; the mask is not
/// revisited. Requires a kernel built at a positive weight.
inline KernelMatrix reweight(const KernelMatrix& kernel, double new_weight) {
    if (!(kernel.weight > 0.0)) {
        throw ConfigError("power re-weighting needs a kernel with positive weight");
    }
    if (!(new_weight >= 0.0)) {
        throw ConfigError("kernel weight must be non-negative");
    }
    KernelMatrix out{kernel.layout, std::vector<double>(kernel.values.size()), kernel.mask, {},
                     new_weight};
    const double ratio = new_weight / kernel.weight;
    for (std::size_t e = 0; e < kernel.values.size(); ++e) {
        out.values[e] = kernel.mask[e] ? std::pow(kernel.values[e], ratio) : 0.0;
    }
    detail::row_sums(out.layout, out.values, out.row_sums);
    return out;
}

/// As above, falling back to direct assembly (same mask) when the source
/// kernel was built at weight 0.
inline KernelMatrix reweight(const KernelMatrix& kernel, const DissimilarityMatrix& d,
                             double new_weight) {
    if (kernel.weight > 0.0) {
        return reweight(kernel, new_weight);
    }
    return assemble_kernel(d, new_weight, kernel.mask);
}

/// d gamma / d w = -D o gamma for a constant weight.
inline LinearizedKernel linearized_kernel(const KernelMatrix& kernel, const DissimilarityMatrix& d) {
    if (!kernel.layout.compatible(d.layout) || kernel.values.size() != d.values.size()) {
        throw ConfigError("kernel and dissimilarity patterns differ");
    }
    LinearizedKernel out{kernel.layout, std::vector<double>(kernel.values.size()), {}};
    for (std::size_t e = 0; e < kernel.values.size(); ++e) {
        out.values[e] = -d.values[e] * kernel.values[e];
    }
    detail::row_sums(out.layout, out.values, out.row_sums);
    return out;
}

// Binary dump of D:
//   "NLBDISS1" | int32 width, height, eps, rho | f64 threshold |
//   u64 rows | u64 nnz | u64 row_offsets[rows+1] | i64 columns[nnz] | f64 values[nnz]
// Columns are indices into the (width+2eps) x (height+2eps) padded grid.

inline void save_dissimilarity(const std::filesystem::path& path, const DissimilarityMatrix& d) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    auto put = [&](const auto& v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); };
    const BandLayout& l = d.layout;
    out.write("NLBDISS1", 8);
    put(static_cast<std::int32_t>(l.width()));
    put(static_cast<std::int32_t>(l.height()));
    put(static_cast<std::int32_t>(l.radius()));
    put(static_cast<std::int32_t>(d.config.patch_radius));
    put(d.config.threshold);
    put(static_cast<std::uint64_t>(l.rows()));
    put(static_cast<std::uint64_t>(l.entries()));
    for (std::size_t i = 0; i <= l.rows(); ++i) put(static_cast<std::uint64_t>(i * l.count()));
    const int pw = l.width() + 2 * l.radius();
    for (int y = 0; y < l.height(); ++y) {
        for (int x = 0; x < l.width(); ++x) {
            for (int k = 0; k < l.count(); ++k) {
                const std::int64_t col = static_cast<std::int64_t>(y + l.radius() + l.dy(k)) * pw +
                                         (x + l.radius() + l.dx(k));
                put(col);
            }
        }
    }
    out.write(reinterpret_cast<const char*>(d.values.data()),
              static_cast<std::streamsize>(d.values.size() * sizeof(double)));
    if (!out) {
        throw IoError("write failed for " + path.string());
    }
}

inline DissimilarityMatrix load_dissimilarity(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    auto get = [&](auto& v) {
        in.read(reinterpret_cast<char*>(&v), sizeof v);
        if (!in) throw IoError(path.string() + ": truncated dissimilarity file");
    };
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, "NLBDISS1", 8) != 0) {
        throw IoError(path.string() + ": not a dissimilarity dump");
    }
    std::int32_t width, height, eps, rho;
    double threshold;
    std::uint64_t rows, nnz;
    get(width);
    get(height);
    get(eps);
    get(rho);
    get(threshold);
    get(rows);
    get(nnz);
    if (width < 1 || height < 1 || eps < 1 || rho < 0) {
        throw IoError(path.string() + ": invalid dimensions");
    }
    DissimilarityMatrix d{BandLayout(width, height, eps), PatchConfig{rho, eps, threshold}, {}};
    const BandLayout& l = d.layout;
    if (rows != l.rows() || nnz != l.entries()) {
        throw IoError(path.string() + ": pattern size does not match dimensions");
    }
    for (std::uint64_t i = 0; i <= rows; ++i) {
        std::uint64_t off;
        get(off);
        if (off != i * static_cast<std::uint64_t>(l.count())) {
            throw IoError(path.string() + ": row offsets are not banded");
        }
    }
    const int pw = width + 2 * eps;
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            for (int k = 0; k < l.count(); ++k) {
                std::int64_t col;
                get(col);
                const std::int64_t expect = static_cast<std::int64_t>(y + eps + l.dy(k)) * pw +
                                            (x + eps + l.dx(k));
                if (col != expect) {
                    throw IoError(path.string() + ": column indices do not match the band pattern");
                }
            }
        }
    }
    d.values.resize(nnz);
    in.read(reinterpret_cast<char*>(d.values.data()), static_cast<std::streamsize>(nnz * sizeof(double)));
    if (!in) {
        throw IoError(path.string() + ": truncated dissimilarity values");
    }
    return d;
}

}  // namespace nlbilevel
