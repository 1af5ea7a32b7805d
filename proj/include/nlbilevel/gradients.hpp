#pragma once

#include <algorithm>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "nlbilevel/error.hpp"
#include "nlbilevel/fem.hpp"
#include "nlbilevel/image.hpp"
#include "nlbilevel/kernel.hpp"
#include "nlbilevel/linalg.hpp"
#include "nlbilevel/solver.hpp"

namespace nlbilevel {

/// Reduced objective with its derivative and the solves behind it.
struct ReducedGradient {
    Vector value;         // scalar problems: one entry; spatial: nodal Riesz representative
    Vector dual;          // spatial only: the derivative as a load vector, (A + B) value
    double objective = 0.0;
    double loss = 0.0;    // 1/2 ||u - u_T||^2 part of the objective
    Vector state;         // u
    Vector adjoint;       // p
    SolveReport state_report;
    SolveReport adjoint_report;

    double scalar() const { return value.at(0); }
};

namespace detail {

inline void require_converged(const SolveReport& r, const char* what) {
    if (!r.converged) {
        throw SolverError(std::string(what) + " solve did not converge (relative residual " +
                          std::to_string(r.relative_residual) + " after " +
                          std::to_string(r.iterations) + " iterations)");
    }
}

inline double half_squared_distance(std::span<const double> u, const Image& truth) {
    const Vector t = truth.interior();
    double s = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) s += (u[i] - t[i]) * (u[i] - t[i]);
    return 0.5 * s;
}

/// Shared state/adjoint step: returns u, p and the loss.
inline ReducedGradient state_and_adjoint(const LowerLevelSystem& sys, const Image& f,
                                         const Image& truth, double adjoint_scale) {
    if (!f.same_shape(truth)) {
        throw ConfigError("noisy image and ground truth differ in size");
    }
    ReducedGradient out;
    auto [u, rs] = solve_state(sys, f);
    require_converged(rs, "state");
    auto [p, ra] = solve_adjoint(sys, u, truth, adjoint_scale);
    require_converged(ra, "adjoint");
    out.loss = half_squared_distance(u, truth);
    out.objective = out.loss;
    out.state = std::move(u);
    out.adjoint = std::move(p);
    out.state_report = rs;
    out.adjoint_report = ra;
    return out;
}

/// (u - f) o p, per pixel.
inline Vector fidelity_sensitivity(const ReducedGradient& g, const Image& f) {
    const Vector fv = f.interior();
    Vector s(fv.size());
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = (g.state[i] - fv[i]) * g.adjoint[i];
    return s;
}

}  // namespace detail

/// State solve and loss 1/2 ||u - u_T||^2 only (no adjoint).
inline std::pair<double, Vector> reduced_loss(const LowerLevelSystem& sys, const Image& f,
                                              const Image& truth) {
    auto [u, rs] = solve_state(sys, f);
    detail::require_converged(rs, "state");
    const double loss = detail::half_squared_distance(u, truth);
    return {loss, std::move(u)};
}

/// Scalar fidelity weight: j'(lambda) = sum_i (u_i - f_i) p_i.
inline ReducedGradient grad_lambda_scalar(const Image& f, const Image& truth, double lambda,
                                          const KernelMatrix& kernel, const KrylovOptions& opts = {}) {
    if (!(lambda >= 0.0)) {
        throw ConfigError("lambda must be non-negative");
    }
    const LowerLevelSystem sys{FidelityOperator(kernel, lambda), opts};
    ReducedGradient g = detail::state_and_adjoint(sys, f, truth, 1.0);
    const Vector s = detail::fidelity_sensitivity(g, f);
    double sum = 0.0;
    for (double v : s) sum += v;
    g.value = {sum};
    return g;
}

inline double objective_lambda_scalar(const Image& f, const Image& truth, double lambda,
                                      const KernelMatrix& kernel, const KrylovOptions& opts = {}) {
    const LowerLevelSystem sys{FidelityOperator(kernel, lambda), opts};
    return reduced_loss(sys, f, truth).first;
}

/// H1 Tikhonov term beta/2 ||lambda||^2_{H1} with unit weights on both parts.
inline double h1_penalty(const FEMatrices& fe, std::span<const double> nodal, double beta) {
    return 0.5 * beta * dot(nodal, h1_apply(fe, nodal));
}

/// Spatially varying fidelity weight given at the Q1 nodes.
///
/// The lower-level problem sees the element average of lambda on each pixel.
/// The derivative in direction h is
///   j'(lambda) h = int (u - f) p h dx + beta (lambda, h)_{H1},
/// assembled as a nodal load vector F (`dual`); the returned gradient is the
/// H1 Riesz representative y with (A + B) y = F.
inline ReducedGradient grad_lambda_spatial(const Image& f, const Image& truth,
                                           std::span<const double> nodal_lambda, double beta,
                                           const KernelMatrix& kernel, const FEMatrices& fe,
                                           const KrylovOptions& opts = {}) {
    if (!(beta >= 0.0)) {
        throw ConfigError("Tikhonov weight beta must be non-negative");
    }
    if (fe.width != f.width() || fe.height != f.height()) {
        throw ConfigError("finite element mesh does not match the image");
    }
    const LowerLevelSystem sys{FidelityOperator(kernel, element_average(fe, nodal_lambda)), opts};
    ReducedGradient g = detail::state_and_adjoint(sys, f, truth, 1.0);
    Vector load = piecewise_constant_load(fe, detail::fidelity_sensitivity(g, f));
    if (beta > 0.0) {
        axpy(beta, h1_apply(fe, nodal_lambda), load);
        g.objective += h1_penalty(fe, nodal_lambda, beta);
    }
    auto [y, report] = h1_riesz_solve(fe, load);
    detail::require_converged(report, "H1 Riesz");
    g.value = std::move(y);
    g.dual = std::move(load);
    return g;
}

inline double objective_lambda_spatial(const Image& f, const Image& truth,
                                       std::span<const double> nodal_lambda, double beta,
                                       const KernelMatrix& kernel, const FEMatrices& fe,
                                       const KrylovOptions& opts = {}) {
    const LowerLevelSystem sys{FidelityOperator(kernel, element_average(fe, nodal_lambda)), opts};
    return reduced_loss(sys, f, truth).first + h1_penalty(fe, nodal_lambda, beta);
}

/// Kernel weight: j'(w) = p . (diag(eta_hat) - Gamma_hat) u, with
/// Gamma_hat = -D o gamma_w. With `kappa` != 1 the derivative is taken with
/// respect to s = w / kappa.
inline ReducedGradient grad_weight(const Image& f, const Image& truth, double lambda,
                                   const KernelMatrix& kernel, const DissimilarityMatrix& d,
                                   double kappa = 1.0, const KrylovOptions& opts = {}) {
    const LowerLevelSystem sys{FidelityOperator(kernel, lambda), opts};
    ReducedGradient g = detail::state_and_adjoint(sys, f, truth, 1.0);
    const LinearizedKernel lin = linearized_kernel(kernel, d);
    const BandLayout& l = lin.layout;
    const int count = l.count();
    const int c = l.center();
    double sum = 0.0;
    for (std::size_t i = 0; i < l.rows(); ++i) {
        // (diag(eta_hat) - Gamma_hat) u, self term cancelling as in the state operator
        double off = 0.0;
        double au = 0.0;
        for (int k = 0; k < count; ++k) {
            if (k == c) continue;
            const double v = lin.values[i * count + k];
            off += v;
            const std::int32_t j = l.column(i, k);
            if (j >= 0) au -= v * g.state[j];
        }
        au += off * g.state[i];
        sum += g.adjoint[i] * au;
    }
    g.value = {kappa * sum};
    return g;
}

struct BatchSample {
    const Image* noisy;
    const Image* truth;
    const KernelMatrix* kernel;
};

/// Shared scalar lambda over a training set. Adjoint right-hand sides carry
/// the 1/|I| factor, so j = 1/(2|I|) sum_i ||u_i - u_i^T||^2 and
/// j' = sum_i (u_i - f_i) . p_i. Samples are solved concurrently and reduced in
/// index order.
inline ReducedGradient grad_lambda_batch(std::span<const BatchSample> samples, double lambda,
                                         const KrylovOptions& opts = {}, int threads = 0) {
    if (samples.empty()) {
        throw ConfigError("batch is empty");
    }
    if (!(lambda >= 0.0)) {
        throw ConfigError("lambda must be non-negative");
    }
    const double scale = 1.0 / static_cast<double>(samples.size());
    std::vector<ReducedGradient> parts(samples.size());
    std::vector<std::string> errors(samples.size());

    auto work = [&](std::size_t i) {
        try {
            const LowerLevelSystem sys{FidelityOperator(*samples[i].kernel, lambda), opts};
            parts[i] = detail::state_and_adjoint(sys, *samples[i].noisy, *samples[i].truth, scale);
            const Vector s = detail::fidelity_sensitivity(parts[i], *samples[i].noisy);
            double sum = 0.0;
            for (double v : s) sum += v;
            parts[i].value = {sum};
        } catch (const std::exception& e) {
            errors[i] = e.what();
        }
    };
    const std::size_t nthreads = std::min<std::size_t>(
        samples.size(), threads > 0 ? threads : std::max(1u, std::thread::hardware_concurrency()));
    if (nthreads <= 1) {
        for (std::size_t i = 0; i < samples.size(); ++i) work(i);
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < nthreads; ++t) {
            pool.emplace_back([&, t] {
                for (std::size_t i = t; i < samples.size(); i += nthreads) work(i);
            });
        }
        for (auto& th : pool) th.join();
    }
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (!errors[i].empty()) {
            throw SolverError("batch sample " + std::to_string(i) + ": " + errors[i]);
        }
    }

    ReducedGradient total;
    double g = 0.0;
    for (const auto& p : parts) {
        g += p.value[0];
        total.loss += p.loss;
        total.state_report.iterations += p.state_report.iterations;
        total.adjoint_report.iterations += p.adjoint_report.iterations;
    }
    total.loss *= scale;
    total.objective = total.loss;
    total.value = {g};
    total.state_report.converged = total.adjoint_report.converged = true;
    return total;
}

inline double objective_lambda_batch(std::span<const BatchSample> samples, double lambda,
                                     const KrylovOptions& opts = {}) {
    double total = 0.0;
    for (const auto& s : samples) {
        const LowerLevelSystem sys{FidelityOperator(*s.kernel, lambda), opts};
        total += reduced_loss(sys, *s.noisy, *s.truth).first;
    }
    return total / static_cast<double>(samples.size());
}

}  // namespace nlbilevel
