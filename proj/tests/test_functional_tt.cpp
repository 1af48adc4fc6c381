#include <doctest.h>

#include <cmath>

#include "ttbsde/functional_tt.hpp"
#include "ttbsde/rng.hpp"

using namespace ttbsde;

namespace {

Vector random_point(int d, std::uint64_t seed, double scale = 0.6) {
    Vector x(d);
    for (int j = 0; j < d; ++j)
        x[j] = scale * counter_normal(seed, RngStream::TestData, 1, 0, static_cast<std::uint64_t>(j));
    return x;
}

// Dense-sum oracle: V(x) = sum_i c_{i...} prod_j phi_{i_j}(x_j).
double dense_sum_eval(const FunctionalTT& f, const Vector& x) {
    auto dense = tt_contract(f.tt());
    const int d = f.dimension();
    const int m = f.basis().size();
    std::vector<Vector> phis;
    for (int j = 0; j < d; ++j) phis.push_back(f.basis().values(j, x[j]));
    double total = 0.0;
    for (Index flat = 0; flat < dense.size(); ++flat) {
        Index rem = flat;
        double prod = dense[flat];
        for (int j = d - 1; j >= 0; --j) {
            prod *= phis[static_cast<std::size_t>(j)][rem % m];
            rem /= m;
        }
        total += prod;
    }
    if (f.extra() && f.extra()->coeff != 0.0) total += f.extra()->coeff * f.extra()->fn.value(x);
    return total;
}

// Naive per-partial contraction: substitute phi' in one mode at a time.
Vector naive_gradient(const FunctionalTT& f, const Vector& x) {
    auto dense = tt_contract(f.tt());
    const int d = f.dimension();
    const int m = f.basis().size();
    Vector grad = Vector::Zero(d);
    for (int target = 0; target < d; ++target) {
        std::vector<Vector> phis;
        for (int j = 0; j < d; ++j)
            phis.push_back(j == target ? f.basis().derivatives(j, x[j]) : f.basis().values(j, x[j]));
        double total = 0.0;
        for (Index flat = 0; flat < dense.size(); ++flat) {
            Index rem = flat;
            double prod = dense[flat];
            for (int j = d - 1; j >= 0; --j) {
                prod *= phis[static_cast<std::size_t>(j)][rem % m];
                rem /= m;
            }
            total += prod;
        }
        grad[target] = total;
    }
    return grad;
}

FunctionalTT random_instance(int d, int m, Index rank, std::uint64_t seed,
                             BasisFamily family = BasisFamily::H2Orthonormal) {
    auto basis = BasisSet::make(family, d, m - 1, -3.0, 3.0);
    RankTuple ranks(static_cast<std::size_t>(d) - 1, rank);
    return random_functional_tt(basis, ranks, seed);
}

}  // namespace

TEST_CASE("evaluate: constant rank-1 train with degree-0 basis") {
    auto basis = BasisSet::make(BasisFamily::Monomial, 4, 0, -5.0, 5.0);
    std::vector<DenseTensor> comps;
    for (int l = 0; l < 4; ++l)
        comps.emplace_back(std::vector<Index>{1, 1, 1}, std::vector<double>{1.0});
    FunctionalTT f(TensorTrain(std::move(comps)), basis);
    CHECK(f.evaluate(Vector::Zero(4)) == doctest::Approx(1.0));
    CHECK(f.evaluate(random_point(4, 3)) == doctest::Approx(1.0));
}

TEST_CASE("evaluate: rank-1 product function prod(1+x_j)") {
    const int d = 4;
    auto basis = BasisSet::make(BasisFamily::Monomial, d, 1, -1.0, 1.0);
    // phi_0 = 1, phi_1 = s = x on [-1,1]; component entries select 1 + x.
    std::vector<DenseTensor> comps;
    for (int l = 0; l < d; ++l)
        comps.emplace_back(std::vector<Index>{1, 2, 1}, std::vector<double>{1.0, 1.0});
    FunctionalTT f(TensorTrain(std::move(comps)), basis);
    auto x = random_point(d, 5, 0.4);
    double expect = 1.0;
    for (int j = 0; j < d; ++j) expect *= 1.0 + x[j];
    CHECK(f.evaluate(x) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("evaluate: matches dense-sum oracle on random instances") {
    for (std::uint64_t seed = 0; seed < 8; ++seed) {
        const int d = 2 + static_cast<int>(seed % 4);
        const int m = 2 + static_cast<int>(seed % 3);
        auto f = random_instance(d, m, 2, 100 + seed);
        auto x = random_point(d, 200 + seed);
        CHECK(f.evaluate(x) ==
              doctest::Approx(dense_sum_eval(f, x)).epsilon(1e-12));
    }
}

TEST_CASE("gradient: constant function has zero gradient") {
    auto basis = BasisSet::make(BasisFamily::Monomial, 3, 0, -5.0, 5.0);
    std::vector<DenseTensor> comps;
    for (int l = 0; l < 3; ++l)
        comps.emplace_back(std::vector<Index>{1, 1, 1}, std::vector<double>{1.0});
    FunctionalTT f(TensorTrain(std::move(comps)), basis);
    CHECK(f.gradient(random_point(3, 7)).norm() == doctest::Approx(0.0));
}

TEST_CASE("gradient: matches naive per-partial contraction exactly") {
    for (std::uint64_t seed = 0; seed < 6; ++seed) {
        const int d = 3 + static_cast<int>(seed % 3);
        auto f = random_instance(d, 3, 2, 300 + seed);
        auto x = random_point(d, 400 + seed);
        auto fast = f.gradient(x);
        auto slow = naive_gradient(f, x);
        for (int j = 0; j < d; ++j)
            CHECK(fast[j] == doctest::Approx(slow[j]).epsilon(1e-12));
    }
}

TEST_CASE("gradient: matches central finite differences") {
    auto f = random_instance(4, 4, 3, 500);
    auto x = random_point(4, 501);
    auto g = f.gradient(x);
    const double h = 1e-5;
    for (int j = 0; j < 4; ++j) {
        Vector xp = x, xm = x;
        xp[j] += h;
        xm[j] -= h;
        const double fd = (f.evaluate(xp) - f.evaluate(xm)) / (2 * h);
        CHECK(g[j] == doctest::Approx(fd).epsilon(1e-6));
    }
}

TEST_CASE("directional_grad: zero direction, unit directions, random composition") {
    auto f = random_instance(5, 3, 2, 600);
    auto x = random_point(5, 601);
    CHECK(f.directional_grad(x, Vector::Zero(5)) == doctest::Approx(0.0));

    auto g = f.gradient(x);
    for (int j = 0; j < 5; ++j) {
        Vector e = Vector::Zero(5);
        e[j] = 1.0;
        CHECK(f.directional_grad(x, e) == doctest::Approx(g[j]).epsilon(1e-12));
    }

    auto xi = random_point(5, 602, 1.0);
    CHECK(f.directional_grad(x, xi) == doctest::Approx(g.dot(xi)).epsilon(1e-12));
}

TEST_CASE("laplacian: affine function vanishes, quadratic sums to 2d") {
    const int d = 3;
    auto basis = BasisSet::make(BasisFamily::Monomial, d, 2, -1.0, 1.0);
    // V = sum_j x_j^2 as a rank-2 train over {1, s, s^2}.
    std::vector<DenseTensor> comps;
    {
        DenseTensor u({1, 3, 2});
        u.at({0, 2, 0}) = 1.0;  // x^2 * (tail ones)
        u.at({0, 0, 1}) = 1.0;  // 1 * (tail sum)
        comps.push_back(u);
        DenseTensor v({2, 3, 2});
        v.at({0, 0, 0}) = 1.0;
        v.at({1, 2, 0}) = 1.0;
        v.at({1, 0, 1}) = 1.0;
        comps.push_back(v);
        DenseTensor w({2, 3, 1});
        w.at({0, 0, 0}) = 1.0;
        w.at({1, 2, 0}) = 1.0;
        comps.push_back(w);
    }
    FunctionalTT f(TensorTrain(std::move(comps)), basis);
    auto x = random_point(d, 700, 0.3);
    CHECK(f.evaluate(x) == doctest::Approx(x.squaredNorm()).epsilon(1e-12));
    CHECK(f.laplacian(x) == doctest::Approx(2.0 * d).epsilon(1e-12));

    // Affine: V = 1 + sum x_j.
    std::vector<DenseTensor> affc;
    {
        DenseTensor u({1, 3, 2});
        u.at({0, 1, 0}) = 1.0;
        u.at({0, 0, 1}) = 1.0;
        affc.push_back(u);
        DenseTensor v({2, 3, 2});
        v.at({0, 0, 0}) = 1.0;
        v.at({1, 1, 0}) = 1.0;
        v.at({1, 0, 1}) = 1.0;
        affc.push_back(v);
        DenseTensor w({2, 3, 1});
        w.at({0, 0, 0}) = 1.0;
        w.at({1, 1, 0}) = 1.0;
        w.at({1, 0, 0}) += 1.0;  // constant offset
        affc.push_back(w);
    }
    FunctionalTT aff(TensorTrain(std::move(affc)), basis);
    CHECK(aff.laplacian(x) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("laplacian: matches second-order central differences") {
    auto f = random_instance(4, 4, 2, 800);
    auto x = random_point(4, 801);
    const double h = 1e-4;
    double fd = 0.0;
    for (int j = 0; j < 4; ++j) {
        Vector xp = x, xm = x;
        xp[j] += h;
        xm[j] -= h;
        fd += (f.evaluate(xp) - 2.0 * f.evaluate(x) + f.evaluate(xm)) / (h * h);
    }
    CHECK(f.laplacian(x) == doctest::Approx(fd).epsilon(1e-4));
}

TEST_CASE("hessian_quadratic: matches finite differences along the direction") {
    auto f = random_instance(4, 4, 2, 900);
    auto x = random_point(4, 901);
    auto v = random_point(4, 902, 1.0);
    const double h = 1e-4;
    const double fd =
        (f.evaluate(x + h * v) - 2.0 * f.evaluate(x) + f.evaluate(x - h * v)) / (h * h);
    CHECK(f.hessian_quadratic(x, v) == doctest::Approx(fd).epsilon(1e-4));

    // Weighted laplacian agrees with per-axis quadratic forms.
    Vector w(4);
    w << 0.5, 1.5, 2.0, 0.25;
    double expect = 0.0;
    for (int j = 0; j < 4; ++j) {
        Vector e = Vector::Zero(4);
        e[j] = 1.0;
        expect += w[j] * f.hessian_quadratic(x, e);
    }
    CHECK(f.weighted_laplacian(x, w) == doctest::Approx(expect).epsilon(1e-10));
}

TEST_CASE("build_stacks: conventions and local reassembly reproduce evaluate") {
    const int d = 5;
    auto f = random_instance(d, 3, 2, 1000);
    const int K = 7;
    Matrix pts(d, K);
    for (int k = 0; k < K; ++k) pts.col(k) = random_point(d, 1100 + static_cast<std::uint64_t>(k));
    Matrix dirs(d, K);
    for (int k = 0; k < K; ++k) dirs.col(k) = random_point(d, 1200 + static_cast<std::uint64_t>(k), 1.0);

    auto stacks = f.build_stacks(pts, &dirs);
    CHECK(stacks.psi_left[0].cols() == 1);
    CHECK(stacks.psi_right[d - 1].cols() == 1);
    for (int k = 0; k < K; ++k) {
        CHECK(stacks.psi_left[0](k, 0) == 1.0);
        CHECK(stacks.psi_right[d - 1](k, 0) == 1.0);
        CHECK(stacks.theta_left[0](k, 0) == 0.0);
        CHECK(stacks.theta_right[d - 1](k, 0) == 0.0);
    }

    for (int k = 0; k < K; ++k) {
        const double direct = f.evaluate(pts.col(k));
        const double dgrad = f.gradient(pts.col(k)).dot(dirs.col(k));
        for (int l = 0; l < d; ++l) {
            const auto& u = f.tt().component(l);
            auto phi = f.basis().values(l, pts(l, k));
            auto dphi = f.basis().derivatives(l, pts(l, k));
            const Index r0 = f.tt().bond_rank(l), r1 = f.tt().bond_rank(l + 1);
            double val = 0.0, dval = 0.0;
            for (Index a = 0; a < r0; ++a)
                for (Index i = 0; i < f.basis().size(); ++i)
                    for (Index b = 0; b < r1; ++b) {
                        const double uu = u.at({a, i, b});
                        const double pl = stacks.psi_left[static_cast<std::size_t>(l)](k, a);
                        const double pr = stacks.psi_right[static_cast<std::size_t>(l)](k, b);
                        val += pl * phi[i] * pr * uu;
                        dval += (stacks.theta_left[static_cast<std::size_t>(l)](k, a) * phi[i] * pr +
                                 pl * dphi[i] * dirs(l, k) * pr +
                                 pl * phi[i] * stacks.theta_right[static_cast<std::size_t>(l)](k, b)) *
                                uu;
                    }
            CHECK(val == doctest::Approx(direct).epsilon(1e-12));
            CHECK(dval == doctest::Approx(dgrad).epsilon(1e-11));
            CHECK(f.directional_grad(pts.col(k), dirs.col(k)) ==
                  doctest::Approx(dgrad).epsilon(1e-11));
        }
    }
}

TEST_CASE("augmented model is affine in the extra coefficient") {
    const int d = 3;
    SmoothFunction g;
    g.value = [](const Vector& x) { return std::sin(x.sum()); };
    g.gradient = [](const Vector& x) { return Vector::Constant(x.size(), std::cos(x.sum())); };
    auto basis = BasisSet::make(BasisFamily::H2Orthonormal, d, 2, -3.0, 3.0);
    RankTuple ranks(d - 1, 2);
    auto base = random_functional_tt(basis, ranks, 77, ExtraTerm{g, 0.0});

    auto x = random_point(d, 1300);
    auto xi = random_point(d, 1301, 1.0);
    auto at = [&](double c) { return base.with_extra_coeff(c); };

    for (double c : {0.0, 0.5, -2.0}) {
        CHECK(at(c).evaluate(x) ==
              doctest::Approx(at(0).evaluate(x) + c * g.value(x)).epsilon(1e-12));
        CHECK(at(c).directional_grad(x, xi) ==
              doctest::Approx(at(0).directional_grad(x, xi) + c * g.gradient(x).dot(xi))
                  .epsilon(1e-12));
        CHECK((at(c).gradient(x) - at(0).gradient(x) - c * g.gradient(x)).norm() < 1e-12);
    }
}

TEST_CASE("extrapolation outside the box is counted") {
    auto f = random_instance(3, 2, 1, 1400);
    CHECK(f.extrapolation_count() == 0);
    Vector inside = Vector::Zero(3);
    f.evaluate(inside);
    CHECK(f.extrapolation_count() == 0);
    Vector outside = Vector::Constant(3, 100.0);
    f.evaluate(outside);
    f.gradient(outside);
    CHECK(f.extrapolation_count() == 2);
}

TEST_CASE("batch evaluation agrees with scalar calls") {
    auto f = random_instance(4, 3, 2, 1500);
    const int K = 11;
    Matrix pts(4, K);
    for (int k = 0; k < K; ++k) pts.col(k) = random_point(4, 1600 + static_cast<std::uint64_t>(k));
    auto vals = f.evaluate_many(pts);
    auto grads = f.gradient_many(pts);
    for (int k = 0; k < K; ++k) {
        CHECK(vals[k] == f.evaluate(pts.col(k)));
        CHECK((grads.col(k) - f.gradient(pts.col(k))).norm() == 0.0);
    }
}
