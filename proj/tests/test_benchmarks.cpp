#include <doctest.h>

#include <cmath>

#include "ttbsde/benchmarks.hpp"
#include "ttbsde/rng.hpp"

using namespace ttbsde;

TEST_CASE("hjb problem assembles the stated coefficients") {
    auto p = make_hjb_log(4);
    Vector x(4);
    x << 0.5, -1.0, 2.0, 0.0;
    CHECK(p.drift(x, 0.3).norm() == 0.0);
    CHECK(p.diffusion.kind() == DiffusionSpec::Kind::ScaledIdentity);
    CHECK(p.diffusion.scale() == doctest::Approx(std::sqrt(2.0)));
    Vector z(4);
    z << 1.0, 2.0, 0.0, -1.0;
    CHECK(p.nonlinearity(x, 0.0, 5.0, z) == doctest::Approx(-0.5 * z.squaredNorm()));
    CHECK(p.terminal.value(x) == doctest::Approx(std::log(0.5 + 0.5 * x.squaredNorm())));

    // Gradient and laplacian of g against finite differences.
    const double h = 1e-6;
    auto g = p.terminal;
    Vector grad = g.gradient(x);
    double lap_fd = 0.0;
    for (int j = 0; j < 4; ++j) {
        Vector xp = x, xm = x;
        xp[j] += h;
        xm[j] -= h;
        CHECK(grad[j] ==
              doctest::Approx((g.value(xp) - g.value(xm)) / (2 * h)).epsilon(1e-6));
        lap_fd += (g.value(xp) - 2 * g.value(x) + g.value(xm)) / (h * h);
    }
    CHECK(g.laplacian(x) == doctest::Approx(lap_fd).epsilon(1e-3));
}

TEST_CASE("double-well drift is the negative potential gradient") {
    const int d = 3;
    Matrix c(d, d);
    c << 0.3, 0.05, 0.0, 0.02, 0.4, -0.03, 0.0, 0.01, 0.2;
    Vector nu = Vector::Constant(d, 0.5);
    auto p = make_double_well(c, nu);
    auto psi = [&](const Vector& x) {
        double total = 0.0;
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j)
                total += c(i, j) * (x[i] * x[i] - 1.0) * (x[j] * x[j] - 1.0);
        return total;
    };
    Vector x(d);
    x << -0.7, 0.4, 1.2;
    const Vector b = p.drift(x, 0.0);
    const double h = 1e-6;
    for (int j = 0; j < d; ++j) {
        Vector xp = x, xm = x;
        xp[j] += h;
        xm[j] -= h;
        CHECK(b[j] == doctest::Approx(-(psi(xp) - psi(xm)) / (2 * h)).epsilon(1e-6));
    }
    CHECK(p.x0.isApprox(Vector::Constant(d, -1.0)));
}

TEST_CASE("sampled coupling is Id plus small noise, fixed per seed") {
    auto c1 = sample_double_well_coupling(20, 99);
    auto c2 = sample_double_well_coupling(20, 99);
    CHECK((c1 - c2).cwiseAbs().maxCoeff() == 0.0);
    CHECK((c1 - Matrix::Identity(20, 20)).cwiseAbs().maxCoeff() < 0.6);
    CHECK((c1 - Matrix::Identity(20, 20)).cwiseAbs().maxCoeff() > 1e-4);
}

TEST_CASE("cir problem reproduces the stated differential operator") {
    const int d = 5;
    auto cir = make_cir(d, 7);
    const auto& p = cir.problem;
    for (int i = 0; i < d; ++i) {
        CHECK(cir.a[i] >= 0.0);
        CHECK(cir.a[i] <= 1.0);
        CHECK(cir.b[i] >= 0.0);
        CHECK(cir.b[i] <= 1.0);
        CHECK(cir.gamma[i] >= 0.0);
        CHECK(cir.gamma[i] <= 1.0);
    }
    Vector x(d);
    x << 0.7, 0.1, 1.3, 0.4, 0.9;

    // Drift term-by-term.
    const Vector b = p.drift(x, 0.0);
    for (int i = 0; i < d; ++i)
        CHECK(b[i] == doctest::Approx(cir.a[i] * (cir.b[i] - x[i])).epsilon(1e-14));

    // sigma sigma^T against sqrt(x_i x_j) gamma_i gamma_j (+ floor).
    const Matrix sig = p.diffusion.dense_matrix(x, 0.0);
    const Matrix a = sig * sig.transpose();
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) {
            const double expect = std::sqrt(x[i] * x[j]) * cir.gamma[i] * cir.gamma[j] +
                                  (i == j ? 1e-12 : 0.0);
            CHECK(a(i, j) == doctest::Approx(expect).epsilon(1e-8));
        }

    // h = -(max_i x_i) y and g = 1.
    CHECK(p.nonlinearity(x, 0.0, 2.0, Vector::Zero(d)) == doctest::Approx(-1.3 * 2.0));
    CHECK(p.terminal.value(x) == 1.0);

    // Negative coordinates are clamped and counted.
    const auto before = cir.clamp_events->load();
    Vector neg = x;
    neg[2] = -0.5;
    p.diffusion.apply_sigma(neg, 0.0, Vector::Ones(d));
    CHECK(cir.clamp_events->load() == before + 1);
}

TEST_CASE("cir diagonal variant stays diagonal") {
    auto cir = make_cir(4, 11, CirDiffusion::Diagonal);
    Vector x = Vector::Constant(4, 0.5);
    Matrix sig = cir.problem.diffusion.dense_matrix(x, 0.0);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j)
            if (i != j) CHECK(sig(i, j) == 0.0);
}

TEST_CASE("hjb_reference: terminal time returns g exactly with zero error") {
    Vector x(3);
    x << 0.4, -0.2, 1.0;
    auto est = hjb_reference(x, 1.0, 1.0, 1000, 5);
    CHECK(est.value == doctest::Approx(std::log(0.5 + 0.5 * x.squaredNorm())).epsilon(1e-12));
    CHECK(est.std_error == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("hjb_reference: matches 1-d quadrature within Monte Carlo error") {
    Vector x = Vector::Constant(1, 0.3);
    const double T = 1.0, t = 0.0;
    auto est = hjb_reference(x, t, T, 400000, 12);

    // Trapezoid quadrature of E[exp(-g(x + sqrt(2 (T-t)) u))], u standard normal.
    const double scale = std::sqrt(2.0 * (T - t));
    const int n = 40001;
    const double lo = -10.0, hi = 10.0, dz = (hi - lo) / (n - 1);
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
        const double u = lo + i * dz;
        const double y = x[0] + scale * u;
        const double val = 1.0 / (0.5 + 0.5 * y * y) * std::exp(-0.5 * u * u) /
                           std::sqrt(2.0 * std::acos(-1.0));
        acc += (i == 0 || i == n - 1 ? 0.5 : 1.0) * val;
    }
    const double quad = -std::log(acc * dz);
    CHECK(std::abs(est.value - quad) < 3.0 * est.std_error + 1e-6);
}

TEST_CASE("hjb_reference: standard error scales like 1/sqrt(M)") {
    Vector x = Vector::Zero(5);
    auto small = hjb_reference(x, 0.0, 1.0, 1000, 9);
    auto large = hjb_reference(x, 0.0, 1.0, 100000, 9);
    const double ratio = small.std_error / large.std_error;
    CHECK(ratio > 0.5 * 10.0);
    CHECK(ratio < 2.0 * 10.0);
}

TEST_CASE("double_well_reference_mc: terminal time returns g") {
    Matrix c = 0.1 * Matrix::Identity(2, 2);
    Vector nu = Vector::Constant(2, 0.05);
    Vector x(2);
    x << -1.0, 0.5;
    auto est = double_well_reference_mc(c, nu, x, 0.5, 0.5, 100, 3, 1);
    const double g = 0.05 * ((x[0] - 1) * (x[0] - 1) + (x[1] - 1) * (x[1] - 1));
    CHECK(est.value == doctest::Approx(g).epsilon(1e-10));
}

TEST_CASE("double_well factorized reference: zero terminal gives zero") {
    Matrix c = 0.1 * Matrix::Identity(3, 3);
    Vector nu = Vector::Zero(3);
    Vector x = Vector::Constant(3, -1.0);
    auto ref = double_well_reference_factorized(c, nu, x, 0.0, 0.5);
    CHECK(std::abs(ref.value) < 1e-10);
}

TEST_CASE("double_well factorized reference: terminal time returns g") {
    Matrix c = 0.1 * Matrix::Identity(2, 2);
    Vector nu = Vector::Constant(2, 0.05);
    Vector x(2);
    x << -0.8, 0.3;
    auto ref = double_well_reference_factorized(c, nu, x, 0.5, 0.5);
    const double g = 0.05 * ((x[0] - 1) * (x[0] - 1) + (x[1] - 1) * (x[1] - 1));
    CHECK(ref.value == doctest::Approx(g).epsilon(1e-6));
}

TEST_CASE("double_well factorized reference rejects non-diagonal C") {
    Matrix c(2, 2);
    c << 0.1, 0.01, 0.0, 0.1;
    Vector nu = Vector::Constant(2, 0.05);
    CHECK_THROWS_AS(
        double_well_reference_factorized(c, nu, Vector::Zero(2), 0.0, 0.5), ConfigError);
}

TEST_CASE("double_well: MC and finite-difference references agree in 1-d") {
    Matrix c = 0.1 * Matrix::Identity(1, 1);
    Vector nu = Vector::Constant(1, 0.05);
    Vector x = Vector::Constant(1, -1.0);
    auto fd = double_well_reference_factorized(c, nu, x, 0.0, 0.5);
    auto mc = double_well_reference_mc(c, nu, x, 0.0, 0.5, 400000, 21, 200);
    CHECK(std::abs(fd.value - mc.value) / std::abs(fd.value) < 5e-3);
    CHECK(fd.richardson_delta < 1e-5);
}

TEST_CASE("double_well: d=3 MC reference equals the sum of 1-d FD solutions") {
    Matrix c = 0.1 * Matrix::Identity(3, 3);
    Vector nu = Vector::Constant(3, 0.05);
    Vector x(3);
    x << -1.0, 0.3, -0.4;
    auto fd = double_well_reference_factorized(c, nu, x, 0.0, 0.5);
    auto mc = double_well_reference_mc(c, nu, x, 0.0, 0.5, 200000, 31, 100);
    CHECK(std::abs(fd.value - mc.value) <
          3.0 * mc.std_error + 0.01 * std::abs(fd.value));
}

TEST_CASE("factorized field matches the point reference and sums over dimensions") {
    Matrix c = 0.1 * Matrix::Identity(4, 4);
    Vector nu = Vector::Constant(4, 0.05);
    auto field = double_well_factorized_field(c, nu, 0.5);
    Vector x(4);
    x << -1.0, 0.2, 0.9, -0.3;
    auto point = double_well_reference_factorized(c, nu, x, 0.1, 0.5);
    // The field scales its step count with tau; resolutions differ slightly.
    CHECK(field(x, 0.1) == doctest::Approx(point.value).epsilon(1e-5));
}

TEST_CASE("compute_metrics: exact affine solution gives vanishing errors") {
    // Heat problem with g(x) = x1 + x2: V(x, t) = x1 + x2 solves it exactly.
    PdeProblem p;
    p.id = "affine";
    p.dim = 2;
    p.horizon = 0.5;
    p.x0 = Vector::Constant(2, 0.7);
    p.drift = [](const Vector&, double) { return Vector::Zero(2); };
    p.diffusion = DiffusionSpec::scaled_identity(std::sqrt(2.0));
    p.nonlinearity = [](const Vector&, double, double, const Vector&) { return 0.0; };
    SmoothFunction g;
    g.value = [](const Vector& x) { return x.sum(); };
    g.gradient = [](const Vector& x) { return Vector::Ones(x.size()); };
    g.laplacian = [](const Vector&) { return 0.0; };
    g.hess_quadratic = [](const Vector&, const Vector&) { return 0.0; };
    g.weighted_laplacian = [](const Vector&, const Vector&) { return 0.0; };
    p.terminal = g;

    TimeGrid grid{p.horizon, 10};
    SolverConfig config;
    config.degree = 1;
    config.als.rank_policy = RankPolicy::fixed_ranks({2});
    config.als.delta = 1e-10;
    auto solution = backward_solve(LossKind::BsdeExplicit, p, grid, 1000, 31, config);
    auto paths = simulate(p, grid, 1000, 31);

    ReferenceBundle refs;
    refs.origin_value = p.x0.sum();
    refs.full = [](const Vector& x, double) { return x.sum(); };
    auto report = compute_metrics(solution, paths, p, refs);

    CHECK(report.relative_error < 1e-6);
    CHECK(report.rmse < 1e-6);
    CHECK(report.pde_loss < 1e-8);
    REQUIRE(report.relative_reference_loss);
    CHECK(*report.relative_reference_loss < 1e-6);
    CHECK(report.runs == 1);

    // Single-run reduction: rmse is the absolute origin error.
    CHECK(report.rmse ==
          doctest::Approx(std::abs(report.value_at_origin - *refs.origin_value)));
}

TEST_CASE("compute_metrics: zero reference value flags the absolute fallback") {
    PdeProblem p;
    p.id = "zero_ref";
    p.dim = 1;
    p.horizon = 0.25;
    p.x0 = Vector::Zero(1);
    p.drift = [](const Vector&, double) { return Vector::Zero(1); };
    p.diffusion = DiffusionSpec::scaled_identity(1.0);
    p.nonlinearity = [](const Vector&, double, double, const Vector&) { return 0.0; };
    SmoothFunction g;
    g.value = [](const Vector& x) { return x[0]; };
    g.gradient = [](const Vector&) { return Vector::Ones(1); };
    g.laplacian = [](const Vector&) { return 0.0; };
    g.hess_quadratic = [](const Vector&, const Vector&) { return 0.0; };
    g.weighted_laplacian = [](const Vector&, const Vector&) { return 0.0; };
    p.terminal = g;

    TimeGrid grid{p.horizon, 4};
    SolverConfig config;
    config.degree = 1;
    config.als.rank_policy = RankPolicy::fixed_ranks({});
    auto solution = backward_solve(LossKind::BsdeExplicit, p, grid, 500, 37, config);
    auto paths = simulate(p, grid, 500, 37);
    ReferenceBundle refs;
    refs.origin_value = 0.0;
    auto report = compute_metrics(solution, paths, p, refs);
    CHECK(report.relative_is_absolute);
    CHECK(report.relative_error == report.rmse);
}
