#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <deque>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "nlbilevel/error.hpp"
#include "nlbilevel/image.hpp"
#include "nlbilevel/kernel.hpp"
#include "nlbilevel/linalg.hpp"

namespace nlbilevel {

struct SolveReport {
    int iterations = 0;
    double relative_residual = 0.0;
    double seconds = 0.0;
    bool converged = false;
};

enum class KrylovMethod { lgmres, cg };

struct KrylovOptions {
    KrylovMethod method = KrylovMethod::lgmres;
    double tolerance = 1e-10;  // on ||A x - b|| / ||b||
    int restart = 30;
    int augmentation = 3;
    int max_iterations = 2000;
    bool precondition = true;
};

/// A(lambda) = diag(lambda) + diag(eta) - Gamma on the interior unknowns.
///
/// The padding ring carries the volume constraint u = 0, so its columns are
/// dropped while eta_i keeps the kernel mass reaching into it. The diagonal is
/// lambda_i plus the off-diagonal row mass; the self term gamma_ii appears in
/// both eta and Gamma and is left out of both.
/// The factor 1/2 of the diffusion term cancels with the constant of the
/// discrete nonlocal product, so no extra scaling appears here.
class FidelityOperator {
public:
    FidelityOperator(const KernelMatrix& kernel, Vector fidelity)
        : kernel_(&kernel), fidelity_(std::move(fidelity)) {
        const BandLayout& l = kernel.layout;
        if (fidelity_.size() != l.rows()) {
            throw ConfigError("fidelity weight size does not match the image");
        }
        for (double v : fidelity_) {
            if (!(v >= 0.0)) {
                throw ConfigError("fidelity weight must be non-negative");
            }
        }
        diagonal_.assign(l.rows(), 0.0);
        const int count = l.count();
        const int c = l.center();
        for (std::size_t i = 0; i < l.rows(); ++i) {
            const double* row = kernel.values.data() + i * count;
            double off = 0.0;
            for (int k = 0; k < count; ++k) {
                if (k != c) off += row[k];
            }
            diagonal_[i] = fidelity_[i] + off;
        }
    }

    FidelityOperator(const KernelMatrix& kernel, double fidelity)
        : FidelityOperator(kernel, Vector(kernel.layout.rows(), fidelity)) {}

    std::size_t size() const noexcept { return diagonal_.size(); }
    const Vector& fidelity() const noexcept { return fidelity_; }
    const Vector& diagonal() const noexcept { return diagonal_; }
    const KernelMatrix& kernel() const noexcept { return *kernel_; }

    void apply(std::span<const double> x, std::span<double> y) const {
        const BandLayout& l = kernel_->layout;
        const int count = l.count();
        const int c = l.center();
        const auto& cols = l.columns();
        const double* vals = kernel_->values.data();
        for (std::size_t i = 0; i < size(); ++i) {
            const std::size_t base = i * count;
            double s = diagonal_[i] * x[i];
            for (int k = 0; k < count; ++k) {
                const std::int32_t j = cols[base + k];
                if (j >= 0 && k != c) s -= vals[base + k] * x[j];
            }
            y[i] = s;
        }
    }

    Vector operator*(std::span<const double> x) const {
        Vector y(size());
        apply(x, y);
        return y;
    }

    /// Row-major dense copy; meant for small problems and tests.
    std::vector<double> dense() const {
        const BandLayout& l = kernel_->layout;
        const std::size_t n = size();
        std::vector<double> a(n * n, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            a[i * n + i] = diagonal_[i];
            for (int k = 0; k < l.count(); ++k) {
                const std::int32_t j = l.column(i, k);
                if (j >= 0 && k != l.center()) a[i * n + j] -= (*kernel_)(i, k);
            }
        }
        return a;
    }

    /// Sum of squares of row i.
    double row_norm_squared(std::size_t i) const {
        const BandLayout& l = kernel_->layout;
        double s = diagonal_[i] * diagonal_[i];
        for (int k = 0; k < l.count(); ++k) {
            if (l.column(i, k) >= 0 && k != l.center()) {
                const double v = (*kernel_)(i, k);
                s += v * v;
            }
        }
        return s;
    }

private:
    const KernelMatrix* kernel_;
    Vector fidelity_;
    Vector diagonal_;
};

/// Row-norm diagonal scaling P_ii = (sum_j a_ij^2)^(-1/2), from the row
/// sums of squares of the system matrix.
inline Vector precondition(std::span<const double> row_norms_squared) {
    Vector p(row_norms_squared.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (!(row_norms_squared[i] > 0.0)) {
            throw SolverError("zero row in system matrix (row " + std::to_string(i) +
                              "): fidelity and kernel both vanish there");
        }
        p[i] = 1.0 / std::sqrt(row_norms_squared[i]);
    }
    return p;
}

inline Vector precondition(const FidelityOperator& op) {
    Vector sq(op.size());
    for (std::size_t i = 0; i < sq.size(); ++i) sq[i] = op.row_norm_squared(i);
    return precondition(sq);
}

/// Loose GMRES: restarted GMRES whose search space is augmented with the
/// error corrections of the previous cycles. `apply(x, y)` computes y = A x.
/// Stops when the residual estimate drops below tol * ||b||.
template <class Apply>
SolveReport lgmres(Apply&& apply, std::span<const double> b, std::span<double> x, double tol,
                   int restart, int augmentation, int max_iterations) {
    SolveReport report;
    const std::size_t n = b.size();
    const double bnorm = norm2(b);
    if (bnorm == 0.0) {
        std::fill(x.begin(), x.end(), 0.0);
        report.converged = true;
        return report;
    }

    struct Correction {
        Vector z;
        Vector az;
    };
    std::deque<Correction> outer;
    Vector r(n), w(n);

    while (report.iterations < max_iterations) {
        apply(std::span<const double>(x.data(), n), r);
        for (std::size_t i = 0; i < n; ++i) r[i] = b[i] - r[i];
        const double beta = norm2(r);
        report.relative_residual = beta / bnorm;
        if (beta <= tol * bnorm) {
            report.converged = true;
            return report;
        }

        const int inner = restart + static_cast<int>(outer.size());
        std::vector<Vector> v;
        std::vector<Vector> z;
        v.reserve(inner + 1);
        z.reserve(inner);
        v.push_back(r);
        scale(1.0 / beta, v.back());

        // hessenberg columns, raw and rotated
        std::vector<Vector> h_raw, h;
        Vector cs, sn, g(inner + 1, 0.0);
        g[0] = beta;
        int cols = 0;
        for (int j = 0; j < inner && report.iterations < max_iterations; ++j) {
            if (j < restart) {
                z.push_back(v[j]);
                apply(std::span<const double>(z.back()), w);
            } else {
                const Correction& c = outer[j - restart];
                z.push_back(c.z);
                w = c.az;
            }
            ++report.iterations;

            Vector col(j + 2, 0.0);
            for (int i = 0; i <= j; ++i) {
                col[i] = dot(w, v[i]);
                axpy(-col[i], v[i], w);
            }
            // second pass keeps the basis orthogonal when cancellation is severe
            for (int i = 0; i <= j; ++i) {
                const double c = dot(w, v[i]);
                col[i] += c;
                axpy(-c, v[i], w);
            }
            col[j + 1] = norm2(w);
            h_raw.push_back(col);

            for (int i = 0; i < j; ++i) {
                const double t = cs[i] * col[i] + sn[i] * col[i + 1];
                col[i + 1] = -sn[i] * col[i] + cs[i] * col[i + 1];
                col[i] = t;
            }
            const double denom = std::hypot(col[j], col[j + 1]);
            const double c = denom == 0.0 ? 1.0 : col[j] / denom;
            const double s = denom == 0.0 ? 0.0 : col[j + 1] / denom;
            cs.push_back(c);
            sn.push_back(s);
            col[j] = denom;
            col[j + 1] = 0.0;
            g[j + 1] = -s * g[j];
            g[j] = c * g[j];
            h.push_back(col);
            cols = j + 1;

            const double hnext = h_raw.back()[j + 1];
            if (hnext <= 1e-14 * beta) {
                break;
            }
            v.push_back(w);
            scale(1.0 / hnext, v.back());
            if (std::abs(g[j + 1]) <= tol * bnorm) {
                break;
            }
        }
        if (cols == 0) {
            break;
        }

        // back substitution on the rotated triangle
        Vector y(cols, 0.0);
        for (int i = cols - 1; i >= 0; --i) {
            double s = g[i];
            for (int k = i + 1; k < cols; ++k) s -= h[k][i] * y[k];
            if (h[i][i] == 0.0) {
                throw SolverError("LGMRES breakdown: singular Hessenberg matrix");
            }
            y[i] = s / h[i][i];
        }
        Vector dx(n, 0.0);
        for (int k = 0; k < cols; ++k) axpy(y[k], z[k], dx);
        for (std::size_t i = 0; i < n; ++i) x[i] += dx[i];

        const double dxnorm = norm2(dx);
        if (augmentation > 0 && dxnorm > 0.0) {
            // A dx = V H y from the Arnoldi relation, no extra product needed
            Vector adx(n, 0.0);
            for (int k = 0; k < cols; ++k) {
                for (int i = 0; i <= k + 1 && i < static_cast<int>(v.size()); ++i) {
                    axpy(h_raw[k][i] * y[k], v[i], adx);
                }
            }
            scale(1.0 / dxnorm, dx);
            scale(1.0 / dxnorm, adx);
            outer.push_front({std::move(dx), std::move(adx)});
            if (static_cast<int>(outer.size()) > augmentation) outer.pop_back();
        }
    }

    apply(std::span<const double>(x.data(), n), r);
    for (std::size_t i = 0; i < n; ++i) r[i] = b[i] - r[i];
    report.relative_residual = norm2(r) / bnorm;
    report.converged = report.relative_residual <= tol;
    return report;
}

/// Conjugate gradients for symmetric positive definite operators.
template <class Apply>
SolveReport conjugate_gradient(Apply&& apply, std::span<const double> b, std::span<double> x,
                               double tol, int max_iterations) {
    SolveReport report;
    const std::size_t n = b.size();
    const double bnorm = norm2(b);
    if (bnorm == 0.0) {
        std::fill(x.begin(), x.end(), 0.0);
        report.converged = true;
        return report;
    }
    Vector r(n), p(n), ap(n);
    apply(std::span<const double>(x.data(), n), r);
    for (std::size_t i = 0; i < n; ++i) r[i] = b[i] - r[i];
    p = r;
    double rr = dot(r, r);
    while (std::sqrt(rr) > tol * bnorm && report.iterations < max_iterations) {
        apply(p, ap);
        const double pap = dot(p, ap);
        if (!(pap > 0.0)) {
            throw SolverError("CG breakdown: operator is not positive definite");
        }
        const double alpha = rr / pap;
        axpy(alpha, p, x);
        axpy(-alpha, ap, r);
        const double rr_new = dot(r, r);
        for (std::size_t i = 0; i < n; ++i) p[i] = r[i] + (rr_new / rr) * p[i];
        rr = rr_new;
        ++report.iterations;
    }
    report.relative_residual = std::sqrt(rr) / bnorm;
    report.converged = report.relative_residual <= tol;
    return report;
}

/// Solves op x = b with symmetric diagonal scaling P A P z = P b, x = P z.
/// `x` holds the initial guess on entry. Convergence is judged on the
/// unscaled residual; the inner tolerance is tightened when scaling makes the
/// two disagree.
inline SolveReport solve(const FidelityOperator& op, std::span<const double> b, std::span<double> x,
                         const KrylovOptions& opts = {}) {
    if (!(opts.tolerance > 0.0)) {
        throw ConfigError("solver tolerance must be positive");
    }
    const auto start = std::chrono::steady_clock::now();
    const std::size_t n = op.size();
    const Vector p = opts.precondition ? precondition(op) : Vector(n, 1.0);

    Vector scaled_b(n), z(n), tmp(n);
    for (std::size_t i = 0; i < n; ++i) {
        scaled_b[i] = p[i] * b[i];
        z[i] = x[i] / p[i];
    }
    auto scaled_apply = [&](std::span<const double> in, std::span<double> out) {
        for (std::size_t i = 0; i < n; ++i) tmp[i] = p[i] * in[i];
        op.apply(tmp, out);
        for (std::size_t i = 0; i < n; ++i) out[i] *= p[i];
    };

    SolveReport total;
    const double bnorm = norm2(b);
    double inner_tol = opts.tolerance;
    for (int attempt = 0; attempt < 6; ++attempt) {
        const int budget = opts.max_iterations - total.iterations;
        if (budget <= 0) break;
        const SolveReport r =
            opts.method == KrylovMethod::cg
                ? conjugate_gradient(scaled_apply, scaled_b, z, inner_tol, budget)
                : lgmres(scaled_apply, scaled_b, z, inner_tol, opts.restart, opts.augmentation, budget);
        total.iterations += r.iterations;

        for (std::size_t i = 0; i < n; ++i) x[i] = p[i] * z[i];
        if (bnorm == 0.0) {
            total.relative_residual = 0.0;
            total.converged = true;
            break;
        }
        op.apply(x, tmp);
        double rn = 0.0;
        for (std::size_t i = 0; i < n; ++i) rn += (b[i] - tmp[i]) * (b[i] - tmp[i]);
        total.relative_residual = std::sqrt(rn) / bnorm;
        if (total.relative_residual <= opts.tolerance) {
            total.converged = true;
            break;
        }
        if (total.relative_residual > 0.0) {
            inner_tol *= std::clamp(0.5 * opts.tolerance / total.relative_residual, 1e-3, 0.5);
        }
    }
    total.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return total;
}

/// Lower-level system for one image: operator, data and solver settings.
struct LowerLevelSystem {
    FidelityOperator op;
    KrylovOptions options;
};

/// rhs_i = lambda_i f_i on the interior.
inline Vector assemble_state_rhs(std::span<const double> fidelity, const Image& f) {
    if (fidelity.size() != f.size()) {
        throw ConfigError("fidelity weight size does not match the image");
    }
    const Vector fv = f.interior();
    Vector rhs(fv.size());
    for (std::size_t i = 0; i < rhs.size(); ++i) {
        if (!(fidelity[i] >= 0.0)) {
            throw ConfigError("fidelity weight must be non-negative");
        }
        rhs[i] = fidelity[i] * fv[i];
    }
    return rhs;
}

inline Vector assemble_state_rhs(double fidelity, const Image& f) {
    return assemble_state_rhs(Vector(f.size(), fidelity), f);
}

/// A(lambda) u = lambda o f.
inline std::pair<Vector, SolveReport> solve_state(const LowerLevelSystem& sys, const Image& f) {
    const Vector rhs = assemble_state_rhs(sys.op.fidelity(), f);
    Vector u = f.interior();  // the data is a good first guess
    const SolveReport report = solve(sys.op, rhs, u, sys.options);
    return {std::move(u), report};
}

/// A(lambda) p = scale * (u_T - u). The operator is symmetric, so the adjoint
/// uses the state operator unchanged.
inline std::pair<Vector, SolveReport> solve_adjoint(const LowerLevelSystem& sys,
                                                    std::span<const double> u, const Image& truth,
                                                    double scale = 1.0) {
    const Vector t = truth.interior();
    if (t.size() != u.size()) {
        throw ConfigError("state and ground truth sizes differ");
    }
    Vector rhs(u.size());
    for (std::size_t i = 0; i < rhs.size(); ++i) rhs[i] = scale * (t[i] - u[i]);
    Vector p(u.size(), 0.0);
    const SolveReport report = solve(sys.op, rhs, p, sys.options);
    return {std::move(p), report};
}

}  // namespace nlbilevel
