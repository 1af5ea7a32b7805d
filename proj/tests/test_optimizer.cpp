#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <random>

#include "nlbilevel/optimizer.hpp"
#include "oracles.hpp"

using namespace nlbilevel;

namespace {

/// f(x) = 1/2 x'Hx - b'x with a fixed SPD H.
struct Quadratic {
    Eigen::MatrixXd h;
    Eigen::VectorXd b;

    explicit Quadratic(int n, std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        std::uniform_real_distribution<double> u(-1.0, 1.0);
        Eigen::MatrixXd m(n, n);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) m(i, j) = u(rng);
        h = m * m.transpose() + n * Eigen::MatrixXd::Identity(n, n);
        b.resize(n);
        for (int i = 0; i < n; ++i) b(i) = 5.0 * u(rng);
    }

    Objective objective() const {
        Objective o;
        o.value_and_gradient = [this](std::span<const double> x, Vector& g) {
            const Eigen::Map<const Eigen::VectorXd> xv(x.data(), static_cast<Eigen::Index>(x.size()));
            const Eigen::VectorXd gv = h * xv - b;
            g.assign(gv.data(), gv.data() + gv.size());
            return 0.5 * xv.dot(h * xv) - b.dot(xv);
        };
        return o;
    }
};

Objective rosenbrock() {
    Objective o;
    o.value_and_gradient = [](std::span<const double> x, Vector& g) {
        const double a = 1.0 - x[0], q = x[1] - x[0] * x[0];
        g = {-2.0 * a - 400.0 * x[0] * q, 200.0 * q};
        return a * a + 100.0 * q * q;
    };
    return o;
}

// objective values within rounding of each other count as equal
constexpr double kRounding = 100 * std::numeric_limits<double>::epsilon();

bool monotone(const MinimizeResult& r) {
    for (std::size_t i = 1; i < r.trace.size(); ++i)
        if (r.trace[i].objective > r.trace[i - 1].objective + kRounding * std::abs(r.trace[i - 1].objective))
            return false;
    return true;
}

void expect_fixed_point(const Box& box, const MinimizeResult& r, double tol) {
    for (double c : {0.1, 1.0, 10.0}) {
        EXPECT_LE(projected_gradient_residual(box, r.x, r.gradient, c), 10 * tol) << "c = " << c;
    }
}

}  // namespace

TEST(Box, ProjectionAndResidual) {
    const Box box({0.0, -1.0}, {1.0, 1.0});
    EXPECT_EQ(box.project(std::vector<double>{2.0, -3.0}), (Vector{1.0, -1.0}));
    EXPECT_TRUE(box.contains(std::vector<double>{0.5, 0.0}));
    EXPECT_FALSE(box.contains(std::vector<double>{1.5, 0.0}));
    // gradient pushing into an active bound gives no residual
    EXPECT_EQ(projected_gradient_residual(box, std::vector<double>{0.0, 0.0}, std::vector<double>{3.0, 0.0}), 0.0);
    EXPECT_EQ(projected_gradient_residual(box, std::vector<double>{0.5, 0.0}, std::vector<double>{0.2, 0.0}), 0.2);
    EXPECT_THROW(Box({1.0}, {0.0}), ConfigError);
}

TEST(LBFGSMemory, SecantEquationAndSymmetry) {
    const Quadratic q(6, 3);
    LBFGSMemory mem(4);
    std::mt19937_64 rng(1);
    std::normal_distribution<double> nd;
    for (int k = 0; k < 6; ++k) {
        Eigen::VectorXd s(6);
        for (int i = 0; i < 6; ++i) s(i) = nd(rng);
        const Eigen::VectorXd y = q.h * s;
        const Vector sv(s.data(), s.data() + 6), yv(y.data(), y.data() + 6);
        ASSERT_EQ(mem.update(sv, yv), LBFGSMemory::UpdateResult::stored);
        // the newest pair satisfies B s = y
        const Vector bs = mem.apply(sv);
        EXPECT_LE(oracle::rel_diff(bs, y), 1e-10);
    }
    EXPECT_EQ(mem.size(), 4u);
    Vector a(6), b(6);
    for (int i = 0; i < 6; ++i) {
        a[i] = nd(rng);
        b[i] = nd(rng);
    }
    EXPECT_NEAR(dot(a, mem.apply(b)), dot(b, mem.apply(a)), 1e-10 * norm2(a) * norm2(b) * mem.theta());
    EXPECT_GT(dot(a, mem.apply(a)), 0.0);
}

TEST(LBFGSMemory, PowellDampingAndWipe) {
    LBFGSMemory mem(5, 0.2);
    EXPECT_EQ(mem.update({1.0, 0.0}, {2.0, 0.0}), LBFGSMemory::UpdateResult::stored);
    EXPECT_DOUBLE_EQ(mem.theta(), 2.0);
    // negative curvature is damped into a usable pair
    EXPECT_EQ(mem.update({0.0, 1.0}, {0.0, -1.0}), LBFGSMemory::UpdateResult::damped);
    const auto& y = mem.gradient_differences().back();
    const auto& s = mem.steps().back();
    EXPECT_GT(dot(s, y), 0.0);
    EXPECT_EQ(mem.size(), 2u);
    // a zero step cannot satisfy the curvature test
    EXPECT_EQ(mem.update({0.0, 0.0}, {1.0, 1.0}), LBFGSMemory::UpdateResult::wiped);
    EXPECT_EQ(mem.size(), 0u);
    EXPECT_EQ(mem.apply(std::vector<double>{1.0, 2.0}), (Vector{1.0, 2.0}));
}

TEST(RestartRules, RadiusAndCurvature) {
    const RestartSettings s;
    EXPECT_EQ(radius_restart_action(1e-3, true, 0, s), RestartAction::none);
    EXPECT_EQ(radius_restart_action(1e-13, true, 0, s), RestartAction::reset_radius);
    EXPECT_EQ(radius_restart_action(1e-13, false, 0, s), RestartAction::terminate);
    EXPECT_EQ(radius_restart_action(1e-13, true, 5, s), RestartAction::terminate);
    EXPECT_EQ(curvature_restart_action(1.0, 1.0, 1.0, s), RestartAction::none);
    EXPECT_EQ(curvature_restart_action(1e-14, 1.0, 1.0, s), RestartAction::wipe_memory);
    EXPECT_EQ(curvature_restart_action(-1.0, 1.0, 1.0, s), RestartAction::wipe_memory);
}

TEST(Steihaug, InteriorAndBoundarySolutions) {
    auto apply = [](std::span<const double> v) { return Vector{2.0 * v[0], 8.0 * v[1]}; };
    const Vector c{-2.0, -8.0};
    const Vector inside = detail::steihaug(apply, c, 10.0, 10);
    EXPECT_NEAR(inside[0], 1.0, 1e-12);
    EXPECT_NEAR(inside[1], 1.0, 1e-12);
    const Vector edge = detail::steihaug(apply, c, 0.5, 10);
    EXPECT_NEAR(norm2(edge), 0.5, 1e-12);
}

TEST(Minimize, UnconstrainedQuadratic) {
    for (std::uint64_t seed : {1, 2, 3}) {
        const Quadratic q(8, seed);
        const Box box = Box::uniform(8, -1e6, 1e6);
        TrustRegionOptions o;
        o.tolerance = 1e-11;
        o.max_iterations = 200;
        const auto r = minimize(q.objective(), Vector(8, 0.0), box, o);
        EXPECT_EQ(r.termination, Termination::converged);
        const Eigen::VectorXd x_star = q.h.ldlt().solve(q.b);
        EXPECT_LT(r.projected_gradient, 1e-10);
        EXPECT_LE(oracle::rel_diff(r.x, x_star), 1e-9);
        EXPECT_TRUE(monotone(r));
        expect_fixed_point(box, r, o.tolerance);
    }
}

TEST(Minimize, BoxClippedQuadratic) {
    // separable f = 1/2 sum d_i (x_i - c_i)^2, solution clamp(c, lo, hi)
    const Vector d{1.0, 4.0, 0.5, 2.0, 3.0};
    const Vector c{-3.0, 0.5, 4.0, -0.2, 9.0};
    Objective o;
    o.value_and_gradient = [&](std::span<const double> x, Vector& g) {
        g.resize(5);
        double v = 0.0;
        for (int i = 0; i < 5; ++i) {
            g[i] = d[i] * (x[i] - c[i]);
            v += 0.5 * d[i] * (x[i] - c[i]) * (x[i] - c[i]);
        }
        return v;
    };
    const Box box = Box::uniform(5, -1.0, 2.0);
    TrustRegionOptions opts;
    opts.tolerance = 1e-11;
    const auto r = minimize(o, Vector(5, 0.5), box, opts);
    EXPECT_EQ(r.termination, Termination::converged);
    EXPECT_LT(r.projected_gradient, 1e-10);
    const Vector expect = box.project(c);
    for (int i = 0; i < 5; ++i) EXPECT_NEAR(r.x[i], expect[i], 1e-10);
    EXPECT_TRUE(monotone(r));
    expect_fixed_point(box, r, opts.tolerance);
}

TEST(Minimize, CoupledQuadraticWithActiveBounds) {
    const Quadratic q(6, 11);
    const Box box = Box::uniform(6, -0.1, 0.1);
    TrustRegionOptions o;
    o.tolerance = 1e-11;
    o.max_iterations = 300;
    const auto r = minimize(q.objective(), Vector(6, 0.0), box, o);
    EXPECT_EQ(r.termination, Termination::converged);
    EXPECT_LT(r.projected_gradient, 1e-10);
    EXPECT_TRUE(monotone(r));
    expect_fixed_point(box, r, o.tolerance);
}

TEST(Minimize, RosenbrockInBox) {
    const Box box({-2.0, -2.0}, {2.0, 2.0});
    TrustRegionOptions o;
    o.tolerance = 1e-10;
    o.max_iterations = 1000;
    const auto r = minimize(rosenbrock(), Vector{-1.2, 1.0}, box, o);
    EXPECT_EQ(r.termination, Termination::converged);
    EXPECT_NEAR(r.x[0], 1.0, 1e-6);
    EXPECT_NEAR(r.x[1], 1.0, 1e-6);
    EXPECT_TRUE(monotone(r));
    expect_fixed_point(box, r, o.tolerance);
}

TEST(Minimize, RosenbrockWithActiveUpperBound) {
    // the box cuts off (1, 1); the constrained minimum sits on x0 = 0.5
    const Box box({-2.0, -2.0}, {0.5, 2.0});
    TrustRegionOptions o;
    o.tolerance = 1e-10;
    o.max_iterations = 1000;
    const auto r = minimize(rosenbrock(), Vector{-1.2, 1.0}, box, o);
    EXPECT_EQ(r.termination, Termination::converged);
    EXPECT_NEAR(r.x[0], 0.5, 1e-9);
    EXPECT_NEAR(r.x[1], 0.25, 1e-6);
    expect_fixed_point(box, r, o.tolerance);
}

TEST(Minimize, RelativeToleranceAndIterationCap) {
    const Quadratic q(5, 4);
    const Box box = Box::uniform(5, -1e6, 1e6);
    TrustRegionOptions o;
    o.tolerance = 0.0;
    o.max_iterations = 2;
    auto r = minimize(q.objective(), Vector(5, 0.0), box, o);
    EXPECT_EQ(r.termination, Termination::max_iterations);
    EXPECT_EQ(r.iterations, 2);
    o.max_iterations = 100;
    o.relative_tolerance = 1e-3;
    r = minimize(q.objective(), Vector(5, 0.0), box, o);
    EXPECT_EQ(r.termination, Termination::converged);
    EXPECT_LE(r.projected_gradient, 1e-3 * std::abs(r.objective));
}

TEST(Minimize, TraceCallbackSeesEveryEntry) {
    const Quadratic q(3, 5);
    int calls = 0;
    const auto r = minimize(q.objective(), Vector(3, 0.0), Box::uniform(3, -10, 10), {},
                            [&](const TraceEntry&) { ++calls; });
    EXPECT_EQ(calls, static_cast<int>(r.trace.size()));
    EXPECT_EQ(r.trace.front().step, StepType::initial);
}

TEST(Minimize, InfiniteTrialValuesAreRejected) {
    // the objective is undefined (inf) for x > 1; the minimiser of the smooth part is at 3
    Objective o;
    o.value = [](std::span<const double> x) {
        return x[0] > 1.0 ? std::numeric_limits<double>::infinity() : (x[0] - 3.0) * (x[0] - 3.0);
    };
    o.value_and_gradient = [](std::span<const double> x, Vector& g) {
        g = {2.0 * (x[0] - 3.0)};
        return (x[0] - 3.0) * (x[0] - 3.0);
    };
    TrustRegionOptions opts;
    opts.max_iterations = 30;
    const auto r = minimize(o, Vector{0.0}, Box::uniform(1, -5, 5), opts);
    EXPECT_LE(r.x[0], 1.0);
    EXPECT_TRUE(monotone(r));
}

TEST(Minimize, RejectsBadInput) {
    const Quadratic q(2, 1);
    EXPECT_THROW(minimize(q.objective(), Vector{5.0, 0.0}, Box::uniform(2, -1, 1)), ConfigError);
    EXPECT_THROW(minimize(q.objective(), Vector{0.0}, Box::uniform(2, -1, 1)), ConfigError);
    Objective bad;
    bad.value_and_gradient = [](std::span<const double>, Vector& g) {
        g = {std::nan(""), 0.0};
        return 1.0;
    };
    EXPECT_THROW(minimize(bad, Vector{0.0, 0.0}, Box::uniform(2, -1, 1)), OptimizerError);
}
