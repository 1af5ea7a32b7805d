#pragma once

// Independent reference implementations used by the tests. Nothing here
// reuses the band layout or the patch-measure shortcut.

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "nlbilevel/image.hpp"

namespace oracle {

using nlbilevel::Image;

inline Image random_image(int w, int h, std::uint64_t seed, double lo = 0.0, double hi = 255.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    Image img(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) img.set(x, y, u(rng));
    return img;
}

/// Smooth random field plus an edge, so kernels have structure.
inline Image random_scene(int w, int h, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double a = 40 + 40 * u(rng), fx = 0.2 + 0.5 * u(rng), fy = 0.2 + 0.5 * u(rng);
    const double cut = w * (0.3 + 0.4 * u(rng));
    Image img(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double v = 120 + a * std::sin(fx * x) * std::cos(fy * y);
            if (x > cut) v += 50;
            img.set(x, y, v);
        }
    return img;
}

/// f extended by zero outside the image.
inline double at(const Image& f, int x, int y) {
    if (x < 0 || y < 0 || x >= f.width() || y >= f.height()) return 0.0;
    return f(x, y);
}

/// Squared distance between the (2 rho + 1)^2 patches centred at (xi, yi) and
/// (xj, yj), summed in extended precision.
inline double patch_distance(const Image& f, int rho, int xi, int yi, int xj, int yj) {
    long double s = 0.0L;
    for (int ty = -rho; ty <= rho; ++ty)
        for (int tx = -rho; tx <= rho; ++tx) {
            const long double d = static_cast<long double>(at(f, xi + tx, yi + ty)) - at(f, xj + tx, yj + ty);
            s += d * d;
        }
    return static_cast<double>(s);
}

/// Dense A(lambda) = diag(lambda + sum_{j != i} gamma_ij) - Gamma on interior
/// pixels, with gamma_ij = exp(-w D_ij) when it exceeds iota (neighbours in the
/// l-infinity ball of radius eps, padding included in the row mass).
inline Eigen::MatrixXd dense_operator(const Image& f, int rho, int eps, double w, double iota,
                                      const std::vector<double>& lambda) {
    const int W = f.width(), H = f.height(), n = W * H;
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n, n);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const int i = y * W + x;
            double mass = 0.0;
            for (int dy = -eps; dy <= eps; ++dy)
                for (int dx = -eps; dx <= eps; ++dx) {
                    if (dx == 0 && dy == 0) continue;
                    const double g = std::exp(-w * patch_distance(f, rho, x, y, x + dx, y + dy));
                    if (!(g > iota)) continue;
                    mass += g;
                    const int nx = x + dx, ny = y + dy;
                    if (nx >= 0 && ny >= 0 && nx < W && ny < H) a(i, ny * W + nx) -= g;
                }
            a(i, i) = lambda[i] + mass;
        }
    return a;
}

inline Eigen::VectorXd to_eigen(const std::vector<double>& v) {
    return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline double rel_diff(const std::vector<double>& a, const Eigen::VectorXd& b) {
    return (to_eigen(a) - b).norm() / b.norm();
}

/// Central difference of a scalar function.
inline double central_difference(const std::function<double(double)>& f, double x, double h) {
    return (f(x + h) - f(x - h)) / (2.0 * h);
}

}  // namespace oracle
