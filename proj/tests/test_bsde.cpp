#include <doctest.h>

#include <cmath>
#include <sstream>

#include "ttbsde/bsde.hpp"
#include "ttbsde/common.hpp"

using namespace ttbsde;

namespace {

PdeProblem heat_1d(double sigma_scale, std::function<double(double)> g1,
                   std::function<double(double)> dg1) {
    PdeProblem p;
    p.id = "heat1d";
    p.dim = 1;
    p.horizon = 0.5;
    p.x0 = Vector::Constant(1, 1.0);
    p.drift = [](const Vector&, double) { return Vector::Zero(1); };
    p.diffusion = DiffusionSpec::scaled_identity(sigma_scale);
    p.nonlinearity = [](const Vector&, double, double, const Vector&) { return 0.0; };
    SmoothFunction g;
    g.value = [g1](const Vector& x) { return g1(x[0]); };
    g.gradient = [dg1](const Vector& x) { return Vector::Constant(1, dg1(x[0])); };
    g.laplacian = [](const Vector&) { return 0.0; };
    g.hess_quadratic = [](const Vector&, const Vector&) { return 0.0; };
    g.weighted_laplacian = [](const Vector&, const Vector&) { return 0.0; };
    p.terminal = std::move(g);
    return p;
}

SolverConfig basic_config(int degree, RankTuple ranks) {
    SolverConfig c;
    c.degree = degree;
    c.als.rank_policy = RankPolicy::fixed_ranks(std::move(ranks));
    c.als.delta = 1e-10;
    c.als.max_sweeps = 10;
    return c;
}

std::string serialize_solution(const BackwardSolution& s) {
    std::ostringstream out;
    for (int n = 0; n < s.step_count(); ++n) save_functional_tt(s.step(n), out);
    return out.str();
}

}  // namespace

TEST_CASE("assemble_targets: h = 0 projection targets are next-step values") {
    auto p = heat_1d(1.0, [](double x) { return x * x; }, [](double x) { return 2 * x; });
    TimeGrid grid{p.horizon, 5};
    auto paths = simulate(p, grid, 100, 3);
    StepFunction terminal(&p.terminal);
    auto targets = assemble_targets(LossKind::ProjExplicit, grid.steps - 1, terminal, nullptr,
                                    paths, grid, p);
    for (Index k = 0; k < 100; ++k) {
        const double x1 = paths.state(grid.steps)(0, k);
        CHECK(targets.y[k] == doctest::Approx(x1 * x1).epsilon(1e-14));
        CHECK(targets.xi(0, k) == 0.0);
    }
}

TEST_CASE("assemble_targets: HJB nonlinearity uses next-step values and gradients") {
    PdeProblem p = heat_1d(std::sqrt(2.0), [](double x) { return x * x; },
                           [](double x) { return 2 * x; });
    p.nonlinearity = [](const Vector&, double, double, const Vector& z) {
        return -0.5 * z.squaredNorm();
    };
    TimeGrid grid{p.horizon, 5};
    auto paths = simulate(p, grid, 64, 4);
    StepFunction terminal(&p.terminal);
    const int n = grid.steps - 1;
    auto targets =
        assemble_targets(LossKind::BsdeExplicit, n, terminal, nullptr, paths, grid, p);
    const double dt = grid.dt();
    for (Index k = 0; k < 64; ++k) {
        const double x1 = paths.state(n + 1)(0, k);
        const double z = std::sqrt(2.0) * 2.0 * x1;  // sigma^T grad g
        const double expect = -0.5 * z * z * dt + x1 * x1;
        CHECK(targets.y[k] == doctest::Approx(expect).epsilon(1e-12));
        // Xi = sqrt(dt) sigma xi
        const double xi = paths.increment(n)(0, k);
        CHECK(targets.xi(0, k) ==
              doctest::Approx(std::sqrt(dt) * std::sqrt(2.0) * xi).epsilon(1e-14));
    }
}

TEST_CASE("assemble_targets: explicit kinds coincide as dt -> 0") {
    PdeProblem p = heat_1d(std::sqrt(2.0), [](double x) { return std::sin(x); },
                           [](double x) { return std::cos(x); });
    p.nonlinearity = [](const Vector&, double, double, const Vector& z) {
        return -0.5 * z.squaredNorm();
    };
    StepFunction terminal(&p.terminal);
    double prev_gap = std::numeric_limits<double>::infinity();
    for (int steps : {10, 100, 1000}) {
        TimeGrid grid{p.horizon, steps};
        auto paths = simulate(p, grid, 50, 5);
        auto proj = assemble_targets(LossKind::ProjExplicit, steps - 1, terminal, nullptr, paths,
                                     grid, p);
        auto bsde = assemble_targets(LossKind::BsdeExplicit, steps - 1, terminal, nullptr, paths,
                                     grid, p);
        CHECK((proj.y - bsde.y).lpNorm<Eigen::Infinity>() == 0.0);  // same y by construction
        const double xi_mag = bsde.xi.cwiseAbs().maxCoeff();
        CHECK(xi_mag < prev_gap);
        prev_gap = xi_mag;
    }
}

TEST_CASE("solve_step: h = 0 implicit equals explicit bit for bit and converges in one outer") {
    auto p = heat_1d(std::sqrt(2.0), [](double x) { return x; }, [](double) { return 1.0; });
    TimeGrid grid{p.horizon, 4};
    auto paths = simulate(p, grid, 400, 7);
    StepFunction terminal(&p.terminal);
    auto config = basic_config(1, {});

    StepDiagnostics d_exp, d_imp;
    auto f_exp = solve_step(LossKind::BsdeExplicit, grid.steps - 1, terminal, nullptr, paths,
                            grid, p, config, &d_exp);
    auto f_imp = solve_step(LossKind::BsdeImplicit, grid.steps - 1, terminal, nullptr, paths,
                            grid, p, config, &d_imp);
    CHECK(d_imp.outer_iterations == 1);
    std::ostringstream sa, sb;
    save_functional_tt(f_exp, sa);
    save_functional_tt(f_imp, sb);
    CHECK(sa.str() == sb.str());
}

TEST_CASE("solve_step: degenerate n = 0 design returns the minimum-norm fit") {
    auto p = heat_1d(1.0, [](double x) { return x * x; }, [](double x) { return 2 * x; });
    TimeGrid grid{p.horizon, 3};
    auto paths = simulate(p, grid, 500, 9);
    StepFunction terminal(&p.terminal);
    SolverConfig config = basic_config(2, {});
    config.als.delta = 1e-6;

    // All samples at n = 0 coincide with x0.
    CHECK((paths.state(0).colwise() - p.x0).cwiseAbs().maxCoeff() == 0.0);
    auto targets =
        assemble_targets(LossKind::ProjExplicit, 0, terminal, nullptr, paths, grid, p);
    auto fit = solve_step(LossKind::ProjExplicit, 0, terminal, nullptr, paths, grid, p, config);
    const double fitted = fit.evaluate(p.x0);
    CHECK(std::isfinite(fitted));
    CHECK(std::abs(fitted - targets.y.mean()) < 1e-4);
}

TEST_CASE("backward_solve: linear 1-d heat with g(x) = x is reproduced") {
    auto p = heat_1d(std::sqrt(2.0), [](double x) { return x; }, [](double) { return 1.0; });
    TimeGrid grid{p.horizon, 20};
    auto config = basic_config(1, {});
    auto solution = backward_solve(LossKind::BsdeExplicit, p, grid, 2000, 11, config);

    auto paths = simulate(p, grid, 2000, 11);
    for (int n = 1; n < grid.steps; ++n) {
        const Matrix& xs = paths.state(n);
        double sq = 0.0;
        for (Index k = 0; k < xs.cols(); ++k) {
            const double err = solution.value(n, xs.col(k)) - xs(0, k);
            sq += err * err;
        }
        CHECK(std::sqrt(sq / static_cast<double>(xs.cols())) < 1e-4);
    }
}

TEST_CASE("backward_solve: one-step value matches the conditional expectation") {
    auto p = heat_1d(std::sqrt(2.0), [](double x) { return std::sin(x); },
                     [](double x) { return std::cos(x); });
    TimeGrid grid{p.horizon, 1};
    const Index K = 20000;
    auto config = basic_config(1, {});
    config.als.delta = 1e-8;
    auto solution = backward_solve(LossKind::ProjExplicit, p, grid, K, 13, config);

    auto paths = simulate(p, grid, K, 13);
    Vector g_vals(K);
    for (Index k = 0; k < K; ++k) g_vals[k] = std::sin(paths.state(1)(0, k));
    const double mean = g_vals.mean();
    const double sd = std::sqrt((g_vals.array() - mean).square().sum() / (K - 1.0));
    const double se = sd / std::sqrt(static_cast<double>(K));
    CHECK(std::abs(solution.value(0, p.x0) - mean) < 3.0 * se + 1e-6);
}

TEST_CASE("backward_solve: terminal augmentation keeps g under frozen dynamics") {
    // g enters the model space via the extra term; with near-frozen dynamics
    // every step must return (almost exactly) g itself.
    auto p = heat_1d(1e-5, [](double x) { return std::exp(0.3 * x); },
                     [](double x) { return 0.3 * std::exp(0.3 * x); });
    TimeGrid grid{p.horizon, 5};
    SolverConfig config = basic_config(1, {});
    config.als.include_terminal = true;
    config.als.delta = 1e-10;
    auto solution = backward_solve(LossKind::ProjExplicit, p, grid, 300, 17, config);
    auto paths = simulate(p, grid, 300, 17);
    for (int n = 0; n < grid.steps; ++n) {
        REQUIRE(solution.step(n).extra());
        const Matrix& xs = paths.state(n);
        double sq = 0.0;
        for (Index k = 0; k < xs.cols(); ++k) {
            const double err = solution.value(n, xs.col(k)) - std::exp(0.3 * xs(0, k));
            sq += err * err;
        }
        CHECK(std::sqrt(sq / static_cast<double>(xs.cols())) < 1e-6);
    }
}

TEST_CASE("backward_solve: implicit equals explicit bit for bit when h = 0") {
    auto p = heat_1d(std::sqrt(2.0), [](double x) { return x * x; },
                     [](double x) { return 2 * x; });
    TimeGrid grid{p.horizon, 6};
    auto config = basic_config(2, {});
    auto exp_sol = backward_solve(LossKind::BsdeExplicit, p, grid, 500, 19, config);
    auto imp_sol = backward_solve(LossKind::BsdeImplicit, p, grid, 500, 19, config);
    CHECK(serialize_solution(exp_sol) == serialize_solution(imp_sol));
}

TEST_CASE("backward_solve: identical seed and config give identical serialization") {
    auto p = heat_1d(std::sqrt(2.0), [](double x) { return std::cos(x); },
                     [](double x) { return -std::sin(x); });
    TimeGrid grid{p.horizon, 5};
    auto config = basic_config(2, {});
    set_threads(1);
    auto a = backward_solve(LossKind::BsdeExplicit, p, grid, 300, 23, config);
    set_threads(2);
    auto b = backward_solve(LossKind::BsdeExplicit, p, grid, 300, 23, config);
    CHECK(serialize_solution(a) == serialize_solution(b));
}

TEST_CASE("loss_statistics_at: deterministic dynamics give zero residuals") {
    auto p = heat_1d(0.0, [](double x) { return x; }, [](double) { return 1.0; });
    TimeGrid grid{p.horizon, 4};
    auto paths = simulate(p, grid, 50, 29);
    TimeField exact;
    exact.value = [](const Vector& x, double) { return x[0]; };
    exact.gradient = [](const Vector&, double) { return Vector::Constant(1, 1.0); };
    for (auto kind : {LossKind::ProjExplicit, LossKind::BsdeExplicit, LossKind::BsdeImplicit}) {
        auto stats = loss_statistics_at(exact, kind, 1, paths, grid, p);
        CHECK(stats.mean_sq == doctest::Approx(0.0).epsilon(1e-28));
    }
}

TEST_CASE("loss_statistics_at: heat residual has the closed form 2 dt (1 - xi^2)") {
    // V(x,t) = x^2 + 2(T - t) solves the heat equation with sigma = sqrt(2).
    auto p = heat_1d(std::sqrt(2.0), [](double x) { return x * x; },
                     [](double x) { return 2 * x; });
    const double T = p.horizon;
    TimeField exact;
    exact.value = [T](const Vector& x, double t) { return x[0] * x[0] + 2.0 * (T - t); };
    exact.gradient = [](const Vector& x, double) { return Vector(2.0 * x); };

    TimeGrid grid{T, 10};
    const double dt = grid.dt();
    auto paths = simulate(p, grid, 400, 31);
    const int n = 3;

    auto stats = loss_statistics_at(exact, LossKind::BsdeExplicit, n, paths, grid, p);
    Vector expect(400);
    for (Index k = 0; k < 400; ++k) {
        const double xi = paths.increment(n)(0, k);
        expect[k] = 2.0 * dt * (1.0 - xi * xi);
    }
    const double mean_sq = expect.array().square().mean();
    CHECK(stats.mean_sq == doctest::Approx(mean_sq).epsilon(1e-10));

    // Projection residual keeps the stochastic-integral term.
    auto proj = loss_statistics_at(exact, LossKind::ProjExplicit, n, paths, grid, p);
    CHECK(proj.mean_sq > 10.0 * stats.mean_sq);
}

TEST_CASE("gateaux_variance_at: robust gradient variance collapses relative to projection") {
    auto p = heat_1d(std::sqrt(2.0), [](double x) { return x * x; },
                     [](double x) { return 2 * x; });
    const double T = p.horizon;
    TimeField exact;
    exact.value = [T](const Vector& x, double t) { return x[0] * x[0] + 2.0 * (T - t); };
    exact.gradient = [](const Vector& x, double) { return Vector(2.0 * x); };
    SmoothFunction psi;
    psi.value = [](const Vector& x) { return x[0]; };
    psi.gradient = [](const Vector&) { return Vector::Constant(1, 1.0); };

    TimeGrid grid{T, 100};
    auto paths = simulate(p, grid, 4000, 37);
    const int n = 50;
    auto robust = gateaux_variance_at(exact, LossKind::BsdeExplicit, n, paths, grid, p, psi);
    auto proj = gateaux_variance_at(exact, LossKind::ProjExplicit, n, paths, grid, p, psi);
    CHECK(robust.estimator_variance < 0.05 * proj.estimator_variance);
}

TEST_CASE("functional TT file round trip preserves bytes and values") {
    auto basis = BasisSet::make(BasisFamily::H2Orthonormal, 3, 2, -2.0, 2.0);
    auto f = random_functional_tt(basis, RankTuple({2, 2}), 41);
    std::stringstream buf;
    save_functional_tt(f, buf);
    auto loaded = load_functional_tt(buf);
    Vector x(3);
    x << 0.3, -0.7, 1.1;
    CHECK(loaded.evaluate(x) == f.evaluate(x));

    std::stringstream again;
    save_functional_tt(loaded, again);
    CHECK(again.str() == buf.str());
}

TEST_CASE("solution directory round trip") {
    auto p = heat_1d(std::sqrt(2.0), [](double x) { return x; }, [](double) { return 1.0; });
    TimeGrid grid{p.horizon, 3};
    auto config = basic_config(1, {});
    auto solution = backward_solve(LossKind::BsdeExplicit, p, grid, 200, 43, config);
    const std::string dir = "/tmp/ttbsde_test_solution";
    save_solution(solution, p.id, "cfg0000", dir);
    auto steps = load_solution_steps(dir);
    REQUIRE(static_cast<int>(steps.size()) == grid.steps);
    Vector x = Vector::Constant(1, 0.8);
    for (int n = 0; n < grid.steps; ++n)
        CHECK(steps[static_cast<std::size_t>(n)].evaluate(x) == solution.value(n, x));
}
