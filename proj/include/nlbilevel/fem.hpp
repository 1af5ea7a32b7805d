#pragma once

#include <array>
#include <span>
#include <vector>

#include "nlbilevel/error.hpp"
#include "nlbilevel/linalg.hpp"
#include "nlbilevel/solver.hpp"

namespace nlbilevel {

/// Compressed-row sparse matrix.
struct SparseMatrix {
    std::size_t rows = 0;
    std::vector<std::size_t> row_ptr;
    std::vector<std::size_t> col;
    std::vector<double> val;

    void apply(std::span<const double> x, std::span<double> y) const {
        for (std::size_t i = 0; i < rows; ++i) {
            double s = 0.0;
            for (std::size_t e = row_ptr[i]; e < row_ptr[i + 1]; ++e) s += val[e] * x[col[e]];
            y[i] = s;
        }
    }

    Vector operator*(std::span<const double> x) const {
        Vector y(rows);
        apply(x, y);
        return y;
    }

    double at(std::size_t i, std::size_t j) const {
        for (std::size_t e = row_ptr[i]; e < row_ptr[i + 1]; ++e) {
            if (col[e] == j) return val[e];
        }
        return 0.0;
    }
};

/// Bilinear (Q1) stiffness and mass matrices on the unit-pixel mesh.
///
/// Pixel (x, y) is the element [x, x+1] x [y, y+1]; its corner nodes are
/// numbered ny * (width + 1) + nx. Element matrices are the exact closed forms
/// for a unit square.
struct FEMatrices {
    int width = 0;   // elements per row
    int height = 0;  // elements per column
    SparseMatrix stiffness;
    SparseMatrix mass;

    int nodes_x() const noexcept { return width + 1; }
    int nodes_y() const noexcept { return height + 1; }
    std::size_t nodes() const noexcept { return static_cast<std::size_t>(nodes_x()) * nodes_y(); }

    /// Corner nodes of element (x, y), counter-clockwise from (x, y).
    std::array<std::size_t, 4> element_nodes(int x, int y) const noexcept {
        const std::size_t nx = nodes_x();
        const std::size_t a = static_cast<std::size_t>(y) * nx + x;
        return {a, a + 1, a + 1 + nx, a + nx};
    }
};

inline FEMatrices assemble_q1(int width, int height) {
    if (width < 1 || height < 1) {
        throw ConfigError("finite element mesh needs at least one element");
    }
    // unit square, nodes (0,0) (1,0) (1,1) (0,1)
    static constexpr double ks[4][4] = {{4, -1, -2, -1}, {-1, 4, -1, -2}, {-2, -1, 4, -1}, {-1, -2, -1, 4}};
    static constexpr double ms[4][4] = {{4, 2, 1, 2}, {2, 4, 2, 1}, {1, 2, 4, 2}, {2, 1, 2, 4}};

    FEMatrices fe;
    fe.width = width;
    fe.height = height;
    const int nx = fe.nodes_x();
    const int ny = fe.nodes_y();
    const std::size_t n = fe.nodes();

    // 9-point pattern, columns sorted
    auto build_pattern = [&](SparseMatrix& m) {
        m.rows = n;
        m.row_ptr.assign(n + 1, 0);
        for (int y = 0; y < ny; ++y) {
            for (int x = 0; x < nx; ++x) {
                const std::size_t i = static_cast<std::size_t>(y) * nx + x;
                for (int dy = -1; dy <= 1; ++dy) {
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int cx = x + dx, cy = y + dy;
                        if (cx < 0 || cy < 0 || cx >= nx || cy >= ny) continue;
                        m.col.push_back(static_cast<std::size_t>(cy) * nx + cx);
                    }
                }
                m.row_ptr[i + 1] = m.col.size();
            }
        }
        m.val.assign(m.col.size(), 0.0);
    };
    build_pattern(fe.stiffness);
    build_pattern(fe.mass);

    auto add = [](SparseMatrix& m, std::size_t i, std::size_t j, double v) {
        for (std::size_t e = m.row_ptr[i]; e < m.row_ptr[i + 1]; ++e) {
            if (m.col[e] == j) {
                m.val[e] += v;
                return;
            }
        }
    };
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            const auto nodes = fe.element_nodes(x, y);
            for (int a = 0; a < 4; ++a) {
                for (int b = 0; b < 4; ++b) {
                    add(fe.stiffness, nodes[a], nodes[b], ks[a][b] / 6.0);
                    add(fe.mass, nodes[a], nodes[b], ms[a][b] / 36.0);
                }
            }
        }
    }
    return fe;
}

/// Per-pixel value of a nodal field: the mean over the element, i.e. the
/// average of its four corner values.
inline Vector element_average(const FEMatrices& fe, std::span<const double> nodal) {
    if (nodal.size() != fe.nodes()) {
        throw ConfigError("nodal vector size does not match the mesh");
    }
    Vector out(static_cast<std::size_t>(fe.width) * fe.height);
    for (int y = 0; y < fe.height; ++y) {
        for (int x = 0; x < fe.width; ++x) {
            const auto n = fe.element_nodes(x, y);
            out[static_cast<std::size_t>(y) * fe.width + x] =
                0.25 * (nodal[n[0]] + nodal[n[1]] + nodal[n[2]] + nodal[n[3]]);
        }
    }
    return out;
}

/// Load vector b_k = integral of v phi_k for a piecewise-constant v. Each
/// element contributes a quarter of its value to each corner. This is the
/// transpose of element_average.
inline Vector piecewise_constant_load(const FEMatrices& fe, std::span<const double> per_pixel) {
    if (per_pixel.size() != static_cast<std::size_t>(fe.width) * fe.height) {
        throw ConfigError("pixel vector size does not match the mesh");
    }
    Vector out(fe.nodes(), 0.0);
    for (int y = 0; y < fe.height; ++y) {
        for (int x = 0; x < fe.width; ++x) {
            const double q = 0.25 * per_pixel[static_cast<std::size_t>(y) * fe.width + x];
            for (std::size_t k : fe.element_nodes(x, y)) out[k] += q;
        }
    }
    return out;
}

/// (A + B) applied to a nodal vector.
inline Vector h1_apply(const FEMatrices& fe, std::span<const double> v) {
    Vector a = fe.stiffness * v;
    const Vector b = fe.mass * v;
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
    return a;
}

/// Solves (A + B) y = rhs with Jacobi-preconditioned CG.
inline std::pair<Vector, SolveReport> h1_riesz_solve(const FEMatrices& fe, std::span<const double> rhs,
                                                     double tol = 1e-13) {
    const std::size_t n = fe.nodes();
    Vector diag(n);
    for (std::size_t i = 0; i < n; ++i) diag[i] = fe.stiffness.at(i, i) + fe.mass.at(i, i);
    Vector scaled(n), tmp(n), z(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) scaled[i] = rhs[i] / std::sqrt(diag[i]);
    auto op = [&](std::span<const double> in, std::span<double> out) {
        for (std::size_t i = 0; i < n; ++i) tmp[i] = in[i] / std::sqrt(diag[i]);
        const Vector y = h1_apply(fe, tmp);
        for (std::size_t i = 0; i < n; ++i) out[i] = y[i] / std::sqrt(diag[i]);
    };
    SolveReport report = conjugate_gradient(op, scaled, z, tol, 10 * static_cast<int>(n) + 100);
    for (std::size_t i = 0; i < n; ++i) z[i] /= std::sqrt(diag[i]);
    return {std::move(z), report};
}

}  // namespace nlbilevel
