#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "nlbilevel/error.hpp"
#include "nlbilevel/linalg.hpp"

namespace nlbilevel {

/// Elementwise bounds lower <= x <= upper.
struct Box {
    Vector lower;
    Vector upper;

    Box() = default;
    Box(Vector lo, Vector hi) : lower(std::move(lo)), upper(std::move(hi)) {
        if (lower.size() != upper.size()) {
            throw ConfigError("box bounds differ in dimension");
        }
        for (std::size_t i = 0; i < lower.size(); ++i) {
            if (!(lower[i] <= upper[i])) {
                throw ConfigError("box lower bound exceeds upper bound");
            }
        }
    }
    static Box uniform(std::size_t n, double lo, double hi) {
        return Box(Vector(n, lo), Vector(n, hi));
    }

    std::size_t size() const noexcept { return lower.size(); }

    Vector project(std::span<const double> x) const {
        Vector out(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::clamp(x[i], lower[i], upper[i]);
        return out;
    }

    bool contains(std::span<const double> x) const {
        for (std::size_t i = 0; i < x.size(); ++i) {
            if (!(x[i] >= lower[i] && x[i] <= upper[i])) return false;
        }
        return true;
    }
};

/// ||P(x - c g) - x||_inf, the stationarity residual of a box-constrained problem.
inline double projected_gradient_residual(const Box& box, std::span<const double> x,
                                          std::span<const double> g, double c = 1.0) {
    double r = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double p = std::clamp(x[i] - c * g[i], box.lower[i], box.upper[i]);
        r = std::max(r, std::abs(p - x[i]));
    }
    return r;
}

namespace detail {

/// Dense LU with partial pivoting for the small compact-form middle matrix.
class SmallLU {
public:
    SmallLU() = default;
    explicit SmallLU(std::vector<double> a, std::size_t n) : n_(n), lu_(std::move(a)), piv_(n) {
        for (std::size_t k = 0; k < n_; ++k) {
            std::size_t p = k;
            for (std::size_t i = k + 1; i < n_; ++i) {
                if (std::abs(lu_[i * n_ + k]) > std::abs(lu_[p * n_ + k])) p = i;
            }
            piv_[k] = p;
            if (p != k) {
                for (std::size_t j = 0; j < n_; ++j) std::swap(lu_[k * n_ + j], lu_[p * n_ + j]);
            }
            const double d = lu_[k * n_ + k];
            if (d == 0.0) {
                singular_ = true;
                return;
            }
            for (std::size_t i = k + 1; i < n_; ++i) {
                const double f = lu_[i * n_ + k] / d;
                lu_[i * n_ + k] = f;
                for (std::size_t j = k + 1; j < n_; ++j) lu_[i * n_ + j] -= f * lu_[k * n_ + j];
            }
        }
    }

    bool singular() const noexcept { return singular_; }

    Vector solve(Vector b) const {
        for (std::size_t k = 0; k < n_; ++k) std::swap(b[k], b[piv_[k]]);
        for (std::size_t i = 0; i < n_; ++i) {
            for (std::size_t j = 0; j < i; ++j) b[i] -= lu_[i * n_ + j] * b[j];
        }
        for (std::size_t i = n_; i-- > 0;) {
            for (std::size_t j = i + 1; j < n_; ++j) b[i] -= lu_[i * n_ + j] * b[j];
            b[i] /= lu_[i * n_ + i];
        }
        return b;
    }

private:
    std::size_t n_ = 0;
    std::vector<double> lu_;
    std::vector<std::size_t> piv_;
    bool singular_ = false;
};

}  // namespace detail

enum class RestartAction { none, reset_radius, wipe_memory, terminate };

struct RestartSettings {
    double radius_threshold = 1e-12;  // restart once the radius drops below this
    double curvature_threshold = 1e-12;
    int max_radius_restarts = 5;
};

/// Decides what to do after a rejected step shrank the radius to `radius`.
inline RestartAction radius_restart_action(double radius, bool last_step_decreased,
                                           int restarts_used, const RestartSettings& s) {
    if (radius >= s.radius_threshold) return RestartAction::none;
    if (last_step_decreased && restarts_used < s.max_radius_restarts) {
        return RestartAction::reset_radius;
    }
    return RestartAction::terminate;
}

/// Decides whether a correction pair is too close to violating the curvature
/// condition s'y > 0 to be kept.
inline RestartAction curvature_restart_action(double sy, double s_norm, double y_norm,
                                              const RestartSettings& s) {
    if (!(sy >= s.curvature_threshold * s_norm * y_norm) || sy <= 0.0) {
        return RestartAction::wipe_memory;
    }
    return RestartAction::none;
}

/// Limited-memory BFGS approximation of the Hessian in compact form
/// B = theta I - W M W^T with W = [Y, theta S].
class LBFGSMemory {
public:
    explicit LBFGSMemory(std::size_t capacity = 10, double powell_threshold = 0.2)
        : capacity_(capacity), powell_(powell_threshold) {}

    std::size_t size() const noexcept { return s_.size(); }
    std::size_t capacity() const noexcept { return capacity_; }
    double theta() const noexcept { return theta_; }
    const std::deque<Vector>& steps() const noexcept { return s_; }
    const std::deque<Vector>& gradient_differences() const noexcept { return y_; }

    void clear() {
        s_.clear();
        y_.clear();
        theta_ = 1.0;
        rebuild();
    }

    /// B v.
    Vector apply(std::span<const double> v) const {
        Vector out(v.begin(), v.end());
        scale(theta_, out);
        const std::size_t m = s_.size();
        if (m == 0) return out;
        Vector q(2 * m);
        for (std::size_t i = 0; i < m; ++i) {
            q[i] = dot(y_[i], v);
            q[m + i] = theta_ * dot(s_[i], v);
        }
        const Vector p = middle_.solve(q);
        for (std::size_t i = 0; i < m; ++i) {
            axpy(-p[i], y_[i], out);
            axpy(-theta_ * p[m + i], s_[i], out);
        }
        return out;
    }

    enum class UpdateResult { stored, damped, wiped };

    /// Adds the pair (s, y). Powell damping replaces y by a blend with B s when
    /// s'y < powell * s'Bs. If the resulting pair still fails the curvature test
    /// the whole memory is discarded.
    UpdateResult update(Vector s, Vector y, const RestartSettings& restart = {}) {
        const Vector bs = apply(s);
        const double sbs = dot(s, bs);
        double sy = dot(s, y);
        bool damped = false;
        if (sy < powell_ * sbs) {
            const double alpha = (1.0 - powell_) * sbs / (sbs - sy);
            for (std::size_t i = 0; i < y.size(); ++i) y[i] = alpha * y[i] + (1.0 - alpha) * bs[i];
            sy = dot(s, y);
            damped = true;
        }
        if (curvature_restart_action(sy, norm2(s), norm2(y), restart) == RestartAction::wipe_memory) {
            clear();
            return UpdateResult::wiped;
        }
        // scalar initialisation from the newest pair
        theta_ = dot(y, y) / sy;
        s_.push_back(std::move(s));
        y_.push_back(std::move(y));
        if (s_.size() > capacity_) {
            s_.pop_front();
            y_.pop_front();
        }
        rebuild();
        return damped ? UpdateResult::damped : UpdateResult::stored;
    }

private:
    void rebuild() {
        const std::size_t m = s_.size();
        if (m == 0) {
            middle_ = {};
            return;
        }
        // [[-D, L^T], [L, theta S^T S]] with S^T Y = L + D + R
        const std::size_t n2 = 2 * m;
        std::vector<double> a(n2 * n2, 0.0);
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < m; ++j) {
                const double sy = dot(s_[i], y_[j]);
                if (i == j) a[i * n2 + j] = -sy;
                if (i > j) {
                    a[(m + i) * n2 + j] = sy;  // L
                    a[j * n2 + (m + i)] = sy;  // L^T
                }
                a[(m + i) * n2 + (m + j)] = theta_ * dot(s_[i], s_[j]);
            }
        }
        middle_ = detail::SmallLU(std::move(a), n2);
        if (middle_.singular()) {
            s_.clear();
            y_.clear();
            middle_ = {};
        }
    }

    std::size_t capacity_;
    double powell_;
    double theta_ = 1.0;
    std::deque<Vector> s_;
    std::deque<Vector> y_;
    detail::SmallLU middle_;
};

struct TrustRegionOptions {
    double initial_radius = 1.0;
    double max_radius = 0.0;       // 0 means 1e3 * initial_radius
    double min_radius = 1e-12;
    double accept_ratio = 0.25;    // also the shrink factor on rejection
    double expand_ratio = 0.75;
    double shrink = 0.25;
    double expand = 2.0;
    double sufficient_decrease = 1e-4;
    double active_set_c = 1e-2;
    double gradient_step_cap = 1e3;  // caps the projected-gradient step length
    std::size_t memory = 10;
    double powell = 0.2;
    int line_search_points = 10;
    double tolerance = 1e-8;
    double relative_tolerance = 0.0;  // also stop once r <= relative_tolerance * |j|
    int max_iterations = 100;
    RestartSettings restart;
};

enum class StepType { initial, accepted, rejected, restart };

inline const char* to_string(StepType t) {
    switch (t) {
        case StepType::initial: return "initial";
        case StepType::accepted: return "accepted";
        case StepType::rejected: return "rejected";
        case StepType::restart: return "restart";
    }
    return "?";
}

struct TraceEntry {
    int iteration = 0;
    double objective = 0.0;
    double projected_gradient = 0.0;
    double radius = 0.0;
    StepType step = StepType::initial;
    double seconds = 0.0;
};

enum class Termination { converged, max_iterations, radius_collapse };

inline const char* to_string(Termination t) {
    switch (t) {
        case Termination::converged: return "converged";
        case Termination::max_iterations: return "max-iterations";
        case Termination::radius_collapse: return "radius-collapse";
    }
    return "?";
}

struct MinimizeResult {
    Vector x;
    double objective = 0.0;
    Vector gradient;
    double projected_gradient = 0.0;
    int iterations = 0;
    int evaluations = 0;
    int restarts = 0;
    Termination termination = Termination::max_iterations;
    std::vector<TraceEntry> trace;
};

/// Objective callbacks. `value` may be left empty, in which case
/// `value_and_gradient` is used for function-only evaluations too.
struct Objective {
    std::function<double(std::span<const double>)> value;
    std::function<double(std::span<const double>, Vector&)> value_and_gradient;
};

namespace detail {

/// Steihaug truncated CG for min c'd + 1/2 d'Bd, ||d|| <= radius, with B
/// applied through `apply`.
template <class Apply>
Vector steihaug(Apply&& apply, std::span<const double> c, double radius, int max_iterations) {
    const std::size_t n = c.size();
    Vector d(n, 0.0);
    Vector r(c.begin(), c.end());  // gradient of the model at d
    const double r0 = norm2(r);
    if (r0 == 0.0) return d;
    Vector p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = -r[i];

    auto to_boundary = [&](const Vector& dir) {
        const double dd = dot(d, d), dp = dot(d, dir), pp = dot(dir, dir);
        const double tau = (-dp + std::sqrt(std::max(0.0, dp * dp + pp * (radius * radius - dd)))) / pp;
        Vector out = d;
        axpy(tau, dir, out);
        return out;
    };

    for (int it = 0; it < max_iterations; ++it) {
        const Vector bp = apply(p);
        const double pbp = dot(p, bp);
        if (pbp <= 0.0) return to_boundary(p);
        const double rr = dot(r, r);
        const double alpha = rr / pbp;
        Vector next = d;
        axpy(alpha, p, next);
        if (norm2(next) >= radius) return to_boundary(p);
        d = std::move(next);
        axpy(alpha, bp, r);
        const double rr_new = dot(r, r);
        if (std::sqrt(rr_new) <= 1e-10 * r0) break;
        for (std::size_t i = 0; i < n; ++i) p[i] = -r[i] + (rr_new / rr) * p[i];
    }
    return d;
}

inline void require_finite(double j, std::span<const double> g) {
    if (!std::isfinite(j)) {
        throw OptimizerError("objective returned a non-finite value");
    }
    for (double v : g) {
        if (!std::isfinite(v)) throw OptimizerError("objective returned a non-finite gradient");
    }
}

}  // namespace detail

/// Projected trust-region method with active-set prediction and L-BFGS
/// curvature for min j(x) subject to box bounds.
///
/// Each iteration splits the variables into a strongly active set (within
/// xi_k of a bound, with the gradient pushing towards it) and the rest. Active
/// variables move onto their bound, the remaining block solves a reduced
/// trust-region subproblem, and the projected result is blended with a scaled
/// projected-gradient step by a one-dimensional search in the blend factor.
/// Steps are accepted on sufficient decrease and model agreement; otherwise
/// the radius shrinks. Radius collapse after a productive step resets the
/// radius (and the curvature memory); a degenerate curvature pair wipes the
/// memory.
inline MinimizeResult minimize(const Objective& objective, std::span<const double> x0, const Box& box,
                               const TrustRegionOptions& opts = {},
                               const std::function<void(const TraceEntry&)>& on_trace = {}) {
    const std::size_t n = x0.size();
    if (box.size() != n) {
        throw ConfigError("box and starting point differ in dimension");
    }
    if (!box.contains(x0)) {
        throw ConfigError("starting point lies outside the box");
    }
    if (!objective.value_and_gradient) {
        throw ConfigError("objective needs a gradient callback");
    }
    const auto start = std::chrono::steady_clock::now();
    auto elapsed = [&] {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    };

    const double delta0 = opts.initial_radius;
    const double delta_max = opts.max_radius > 0.0 ? opts.max_radius : 1e3 * delta0;
    double min_width = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) min_width = std::min(min_width, box.upper[i] - box.lower[i]);

    MinimizeResult res;
    res.x.assign(x0.begin(), x0.end());
    Vector g(n);
    double j = objective.value_and_gradient(res.x, g);
    ++res.evaluations;
    detail::require_finite(j, g);

    auto value_at = [&](std::span<const double> x) {
        Vector scratch(n);
        const double v = objective.value ? objective.value(x) : objective.value_and_gradient(x, scratch);
        ++res.evaluations;
        return v;
    };
    auto record = [&](int iter, double radius, StepType type) {
        TraceEntry e{iter, j, projected_gradient_residual(box, res.x, g), radius, type, elapsed()};
        res.trace.push_back(e);
        if (on_trace) on_trace(e);
    };

    LBFGSMemory memory(opts.memory, opts.powell);
    double radius = delta0;
    double beta_k = std::min(delta0, 0.49 * min_width);
    bool last_step_decreased = false;
    record(0, radius, StepType::initial);

    int iter = 0;
    for (;;) {
        const double r = projected_gradient_residual(box, res.x, g);
        if (r <= opts.tolerance || r <= opts.relative_tolerance * std::abs(j)) {
            res.termination = Termination::converged;
            break;
        }
        if (iter >= opts.max_iterations) {
            res.termination = Termination::max_iterations;
            break;
        }
        ++iter;

        radius = std::clamp(radius, opts.min_radius, delta_max);
        double trial_radius = radius;
        const double gnorm = norm2(g);
        const double xi = std::max(0.0, std::min({beta_k, opts.active_set_c * gnorm, 0.49 * min_width}));

        std::vector<char> active(n, 0);
        Vector to_bound(n, 0.0);
        std::vector<std::size_t> free_idx;
        for (std::size_t i = 0; i < n; ++i) {
            if (res.x[i] <= box.lower[i] + xi && g[i] > 0.0) {
                active[i] = 1;
                to_bound[i] = box.lower[i] - res.x[i];
            } else if (res.x[i] >= box.upper[i] - xi && g[i] < 0.0) {
                active[i] = 1;
                to_bound[i] = box.upper[i] - res.x[i];
            } else {
                free_idx.push_back(i);
            }
        }
        const double to_bound_norm = norm2(to_bound);
        const double kappa = std::min({1.0, delta_max / gnorm, opts.gradient_step_cap / gnorm});

        bool accepted = false;
        bool stop = false;
        while (!accepted) {
            // active block: move towards the bound, at most trial_radius
            Vector d_full(n, 0.0);
            const double fa = to_bound_norm > 0.0 ? std::min(1.0, trial_radius / to_bound_norm) : 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                if (active[i]) d_full[i] = fa * to_bound[i];
            }
            // free block: reduced trust-region subproblem
            if (!free_idx.empty()) {
                const Vector bda = memory.apply(d_full);
                Vector c(free_idx.size());
                for (std::size_t k = 0; k < free_idx.size(); ++k) {
                    c[k] = g[free_idx[k]] + bda[free_idx[k]];
                }
                auto reduced_apply = [&](std::span<const double> v) {
                    Vector full(n, 0.0);
                    for (std::size_t k = 0; k < free_idx.size(); ++k) full[free_idx[k]] = v[k];
                    const Vector bv = memory.apply(full);
                    Vector out(free_idx.size());
                    for (std::size_t k = 0; k < free_idx.size(); ++k) out[k] = bv[free_idx[k]];
                    return out;
                };
                const int cg_iters =
                    static_cast<int>(std::min<std::size_t>(free_idx.size(), 2 * opts.memory + 10));
                const Vector di = detail::steihaug(reduced_apply, c, trial_radius, cg_iters);
                for (std::size_t k = 0; k < free_idx.size(); ++k) d_full[free_idx[k]] = di[k];
            }
            Vector d_tr(n), d_g(n);
            for (std::size_t i = 0; i < n; ++i) {
                d_tr[i] = std::clamp(res.x[i] + d_full[i], box.lower[i], box.upper[i]) - res.x[i];
                const double step = (trial_radius / delta_max) * kappa * g[i];
                d_g[i] = std::clamp(res.x[i] - step, box.lower[i], box.upper[i]) - res.x[i];
            }

            // blend factor t in [0, 1]: golden-section refinement on j
            auto trial_point = [&](double t) {
                Vector xt(n);
                for (std::size_t i = 0; i < n; ++i) {
                    xt[i] = std::clamp(res.x[i] + t * d_g[i] + (1.0 - t) * d_tr[i], box.lower[i],
                                       box.upper[i]);
                }
                return xt;
            };
            double best_t = 0.0;
            double best_j = value_at(trial_point(0.0));
            const int points = opts.line_search_points;
            if (points > 1 && norm_inf(subtract(d_g, d_tr)) > 0.0) {
                const double phi = 0.5 * (std::sqrt(5.0) - 1.0);
                double a = 0.0, b = 1.0;
                double t1 = b - phi * (b - a), t2 = a + phi * (b - a);
                double j1 = value_at(trial_point(t1));
                double j2 = value_at(trial_point(t2));
                int used = 3;
                auto consider = [&](double t, double v) {
                    if (v < best_j) {
                        best_j = v;
                        best_t = t;
                    }
                };
                consider(t1, j1);
                consider(t2, j2);
                while (used < points) {
                    if (j1 <= j2) {
                        b = t2;
                        t2 = t1;
                        j2 = j1;
                        t1 = b - phi * (b - a);
                        j1 = value_at(trial_point(t1));
                        consider(t1, j1);
                    } else {
                        a = t1;
                        t1 = t2;
                        j1 = j2;
                        t2 = a + phi * (b - a);
                        j2 = value_at(trial_point(t2));
                        consider(t2, j2);
                    }
                    ++used;
                }
            }
            const Vector x_trial = trial_point(best_t);
            const Vector step = subtract(x_trial, res.x);
            const double gd = dot(g, step);
            const double predicted = gd + 0.5 * dot(step, memory.apply(step));
            const double actual = best_j - j;
            double ratio = predicted < 0.0 ? actual / predicted : -1.0;
            const bool decrease_ok =
                std::isfinite(best_j) && (j - best_j >= -opts.sufficient_decrease * dot(g, d_g));

            // near a minimiser the predicted reduction drops to rounding level in j;
            // the actual reduction is then taken from the gradients, 1/2 (g + g_new)'s
            const double noise = 100.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(j));
            const bool flat =
                predicted < 0.0 && -predicted <= noise && std::isfinite(best_j) && best_j <= j + noise;

            bool gradient_ok = false;
            Vector g_new(n);
            double j_new = 0.0;
            if (flat || (decrease_ok && ratio >= opts.accept_ratio && actual < 0.0)) {
                // a lower-level solve that fails at the trial point counts as a rejection
                try {
                    j_new = objective.value_and_gradient(x_trial, g_new);
                    gradient_ok = true;
                } catch (const SolverError&) {
                }
                ++res.evaluations;
            }
            if (gradient_ok && flat) {
                Vector gsum = g;
                axpy(1.0, g_new, gsum);
                ratio = 0.5 * dot(gsum, step) / predicted;
                gradient_ok = std::isfinite(j_new) && j_new <= j + noise && ratio >= opts.accept_ratio;
            }
            if (gradient_ok) {
                detail::require_finite(j_new, g_new);
                Vector y = subtract(g_new, g);
                memory.update(step, std::move(y), opts.restart);
                last_step_decreased = j_new < j;
                res.x = x_trial;
                j = j_new;
                g = std::move(g_new);
                beta_k = std::min(trial_radius, 0.49 * min_width);
                radius = ratio >= opts.expand_ratio ? opts.expand * trial_radius : trial_radius;
                accepted = true;
                record(iter, radius, StepType::accepted);
            } else {
                trial_radius *= opts.shrink;
                record(iter, trial_radius, StepType::rejected);
                const RestartAction action = radius_restart_action(
                    trial_radius, last_step_decreased, res.restarts, opts.restart);
                if (action == RestartAction::reset_radius) {
                    ++res.restarts;
                    trial_radius = delta0;
                    memory.clear();
                    last_step_decreased = false;
                    record(iter, trial_radius, StepType::restart);
                } else if (action == RestartAction::terminate) {
                    stop = true;
                    break;
                }
            }
        }
        if (stop) {
            res.termination = Termination::radius_collapse;
            break;
        }
    }
    res.iterations = iter;
    res.objective = j;
    res.gradient = g;
    res.projected_gradient = projected_gradient_residual(box, res.x, g);
    return res;
}

}  // namespace nlbilevel
