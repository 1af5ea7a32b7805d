#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "nlbilevel/error.hpp"
#include "nlbilevel/fem.hpp"
#include "nlbilevel/gradients.hpp"
#include "nlbilevel/image.hpp"
#include "nlbilevel/kernel.hpp"
#include "nlbilevel/optimizer.hpp"
#include "nlbilevel/solver.hpp"

namespace nlbilevel {

namespace detail {

/// Objective value for trial points; a lower-level system that cannot be
/// solved there (e.g. a zero row at lambda = 0) counts as +inf so the
/// optimizer rejects the point.
template <class F>
double guarded_value(F&& f) {
    try {
        return f();
    } catch (const SolverError&) {
        return std::numeric_limits<double>::infinity();
    }
}

}  // namespace detail

/// Solver and optimizer settings shared by all learning problems.
struct LearnOptions {
    KrylovOptions krylov;
    TrustRegionOptions trust_region;
    std::function<void(const TraceEntry&)> on_trace;
};

/// Outcome of one learning run.
struct LearnResult {
    Vector parameter;  // optimizer variable: lambda, nodal lambda, or w / kappa
    double weight = 0.0;  // kernel weight used (learned for the weight problem)
    Vector fidelity;      // per-pixel lambda seen by the lower-level problem
    Vector state;         // denoised interior at the solution
    MinimizeResult optimizer;
};

/// Denoises f with a fixed kernel and fidelity weight.
inline std::pair<Vector, SolveReport> denoise(const Image& f, const KernelMatrix& kernel,
                                              std::span<const double> fidelity,
                                              const KrylovOptions& opts = {}) {
    const LowerLevelSystem sys{FidelityOperator(kernel, Vector(fidelity.begin(), fidelity.end())), opts};
    auto out = solve_state(sys, f);
    detail::require_converged(out.second, "state");
    return out;
}

inline std::pair<Vector, SolveReport> denoise(const Image& f, const KernelMatrix& kernel, double lambda,
                                              const KrylovOptions& opts = {}) {
    return denoise(f, kernel, Vector(f.size(), lambda), opts);
}

/// Learns a constant fidelity weight in [0, upper].
inline LearnResult learn_lambda_scalar(const Image& f, const Image& truth, const KernelMatrix& kernel,
                                       double lambda0 = 100.0, double upper = 1e5,
                                       const LearnOptions& opts = {}) {
    Objective obj;
    obj.value = [&](std::span<const double> x) {
        return detail::guarded_value(
            [&] { return objective_lambda_scalar(f, truth, x[0], kernel, opts.krylov); });
    };
    obj.value_and_gradient = [&](std::span<const double> x, Vector& g) {
        const ReducedGradient r = grad_lambda_scalar(f, truth, x[0], kernel, opts.krylov);
        g = r.value;
        return r.objective;
    };
    LearnResult res;
    const Vector x0{lambda0};
    res.optimizer = minimize(obj, x0, Box::uniform(1, 0.0, upper), opts.trust_region, opts.on_trace);
    res.parameter = res.optimizer.x;
    res.weight = kernel.weight;
    res.fidelity.assign(f.size(), res.parameter[0]);
    res.state = denoise(f, kernel, res.fidelity, opts.krylov).first;
    return res;
}

/// How the spatial gradient is handed to the optimizer.
enum class SpatialGradient {
    riesz,  // H1 representative y, (A + B) y = F
    dual,   // load vector F
};

/// Learns a nodal Q1 fidelity weight in [0, upper] with an H1 penalty.
inline LearnResult learn_lambda_spatial(const Image& f, const Image& truth, const KernelMatrix& kernel,
                                        double lambda0 = 200.0, double upper = 255.0,
                                        double beta = 1e-4, const LearnOptions& opts = {},
                                        SpatialGradient representation = SpatialGradient::dual) {
    const FEMatrices fe = assemble_q1(f.width(), f.height());
    Objective obj;
    obj.value = [&](std::span<const double> x) {
        return detail::guarded_value(
            [&] { return objective_lambda_spatial(f, truth, x, beta, kernel, fe, opts.krylov); });
    };
    obj.value_and_gradient = [&](std::span<const double> x, Vector& g) {
        ReducedGradient r = grad_lambda_spatial(f, truth, x, beta, kernel, fe, opts.krylov);
        g = representation == SpatialGradient::riesz ? std::move(r.value) : std::move(r.dual);
        return r.objective;
    };
    LearnResult res;
    const Vector x0(fe.nodes(), lambda0);
    res.optimizer = minimize(obj, x0, Box::uniform(fe.nodes(), 0.0, upper), opts.trust_region,
                             opts.on_trace);
    res.parameter = res.optimizer.x;
    res.weight = kernel.weight;
    res.fidelity = element_average(fe, res.parameter);
    res.state = denoise(f, kernel, res.fidelity, opts.krylov).first;
    return res;
}

/// Upper bound on the scaled weight s = w / kappa: K max(300 / max D, (5 / kappa) 1e-5).
inline double weight_upper_bound(double max_dissimilarity, double factor, double kappa) {
    if (!(factor > 0.0) || !(kappa > 0.0)) {
        throw ConfigError("weight bound factor and kappa must be positive");
    }
    const double a = max_dissimilarity > 0.0 ? 300.0 / max_dissimilarity : 0.0;
    return factor * std::max(a, (5.0 / kappa) * 1e-5);
}

struct WeightProblem {
    double lambda = 0.5;
    double initial_weight = 1.1e-6;
    double kappa = 1e-6;
    double reference_weight = 1e-6;  // mask and power base are frozen here
    double upper = 0.0;              // bound on w / kappa; 0 means weight_upper_bound with factor 9
};

/// Kernel used by the weight problem: a fixed-mask kernel at the reference
/// weight, re-weighted by powers.
inline KernelMatrix weight_reference_kernel(const DissimilarityMatrix& d, const WeightProblem& p) {
    return assemble_kernel(d, p.reference_weight);
}

/// Learns the kernel weight w = kappa s with s in [0, upper].
inline LearnResult learn_weight(const Image& f, const Image& truth, const DissimilarityMatrix& d,
                                const WeightProblem& problem = {}, const LearnOptions& opts = {}) {
    if (!(problem.kappa > 0.0)) {
        throw ConfigError("kappa must be positive");
    }
    const double upper = problem.upper > 0.0 ? problem.upper
                                             : weight_upper_bound(d.max_value(), 9.0, problem.kappa);
    const double s0 = problem.initial_weight / problem.kappa;
    if (!(s0 >= 0.0 && s0 <= upper)) {
        throw ConfigError("initial weight lies outside [0, W]");
    }
    const KernelMatrix reference = weight_reference_kernel(d, problem);
    auto kernel_at = [&](double s) { return reweight(reference, d, problem.kappa * s); };

    Objective obj;
    obj.value = [&](std::span<const double> x) {
        return detail::guarded_value([&] {
            return objective_lambda_scalar(f, truth, problem.lambda, kernel_at(x[0]), opts.krylov);
        });
    };
    obj.value_and_gradient = [&](std::span<const double> x, Vector& g) {
        const ReducedGradient r =
            grad_weight(f, truth, problem.lambda, kernel_at(x[0]), d, problem.kappa, opts.krylov);
        g = r.value;
        return r.objective;
    };
    LearnResult res;
    const Vector x0{s0};
    res.optimizer = minimize(obj, x0, Box::uniform(1, 0.0, upper), opts.trust_region, opts.on_trace);
    res.parameter = res.optimizer.x;
    res.weight = problem.kappa * res.parameter[0];
    res.fidelity.assign(f.size(), problem.lambda);
    res.state = denoise(f, kernel_at(res.parameter[0]), res.fidelity, opts.krylov).first;
    return res;
}

/// Learns one constant fidelity weight shared by a training set.
/// `states` receives the denoised interior of every sample.
inline LearnResult learn_lambda_batch(std::span<const BatchSample> samples, double lambda0 = 0.1,
                                      double upper = 1e10, const LearnOptions& opts = {},
                                      int threads = 0, std::vector<Vector>* states = nullptr) {
    Objective obj;
    obj.value = [&](std::span<const double> x) {
        return detail::guarded_value([&] { return objective_lambda_batch(samples, x[0], opts.krylov); });
    };
    obj.value_and_gradient = [&](std::span<const double> x, Vector& g) {
        const ReducedGradient r = grad_lambda_batch(samples, x[0], opts.krylov, threads);
        g = r.value;
        return r.objective;
    };
    LearnResult res;
    const Vector x0{lambda0};
    res.optimizer = minimize(obj, x0, Box::uniform(1, 0.0, upper), opts.trust_region, opts.on_trace);
    res.parameter = res.optimizer.x;
    if (states) {
        states->clear();
        for (const auto& s : samples) {
            states->push_back(denoise(*s.noisy, *s.kernel, res.parameter[0], opts.krylov).first);
        }
    }
    return res;
}

struct SweepPoint {
    double lambda;
    double weight;
    double loss;
};

/// Loss 1/2 ||u - u_T||^2 on a lambda x w grid, w-major. Kernels are
/// assembled afresh for each weight. Grid points where the lower-level solve
/// fails get an infinite loss.
inline std::vector<SweepPoint> sweep(const Image& f, const Image& truth, const DissimilarityMatrix& d,
                                     std::span<const double> lambdas, std::span<const double> weights,
                                     const KrylovOptions& opts = {}) {
    if (lambdas.empty() || weights.empty()) {
        throw ConfigError("sweep grid is empty");
    }
    std::vector<SweepPoint> out;
    out.reserve(lambdas.size() * weights.size());
    for (double w : weights) {
        const KernelMatrix k = assemble_kernel(d, w);
        for (double l : lambdas) {
            const double loss =
                detail::guarded_value([&] { return objective_lambda_scalar(f, truth, l, k, opts); });
            out.push_back({l, w, loss});
        }
    }
    return out;
}

/// n points from a to b, evenly spaced in log10 (n = 1 gives a).
inline Vector log_space(double a, double b, int n) {
    if (n < 1 || !(a > 0.0) || !(b > 0.0)) {
        throw ConfigError("log grid needs n >= 1 and positive end points");
    }
    Vector out(n);
    for (int i = 0; i < n; ++i) {
        const double t = n == 1 ? 0.0 : static_cast<double>(i) / (n - 1);
        out[i] = std::pow(10.0, std::log10(a) + t * (std::log10(b) - std::log10(a)));
    }
    return out;
}

}  // namespace nlbilevel
