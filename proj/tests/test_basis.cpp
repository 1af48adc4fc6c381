#include <doctest.h>

#include <cmath>

#include "ttbsde/basis.hpp"
#include "ttbsde/rng.hpp"

using namespace ttbsde;

TEST_CASE("gauss_legendre integrates polynomials exactly") {
    std::vector<double> x, w;
    gauss_legendre(8, x, w);
    double sum = 0.0, quad = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sum += w[i];
        quad += w[i] * x[i] * x[i];
    }
    CHECK(sum == doctest::Approx(2.0).epsilon(1e-14));
    CHECK(quad == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
}

TEST_CASE("monomial family evaluates scaled powers and derivatives") {
    auto basis = BasisSet::make(BasisFamily::Monomial, 1, 3, -2.0, 4.0);
    const double x = 1.0;  // s = 0
    auto v = basis.values(0, x);
    CHECK(v[0] == doctest::Approx(1.0));
    CHECK(v[1] == doctest::Approx(0.0));
    CHECK(v[2] == doctest::Approx(0.0));

    // Finite-difference check of first and second derivatives.
    const double h = 1e-6;
    auto vp = basis.values(0, x + h);
    auto vm = basis.values(0, x - h);
    auto d1 = basis.derivatives(0, x);
    auto d2 = basis.second_derivatives(0, x);
    for (int i = 0; i < basis.size(); ++i) {
        CHECK(d1[i] == doctest::Approx((vp[i] - vm[i]) / (2 * h)).epsilon(1e-6));
        CHECK(d2[i] == doctest::Approx((vp[i] - 2 * v[i] + vm[i]) / (h * h)).epsilon(1e-3));
    }
}

TEST_CASE("H2 orthonormal family has identity Gram") {
    auto basis = BasisSet::make(BasisFamily::H2Orthonormal, 2, 5, -1.5, 2.5);
    for (int mode = 0; mode < 2; ++mode) {
        Matrix g = basis.h2_gram(mode);
        CHECK((g - Matrix::Identity(g.rows(), g.cols())).cwiseAbs().maxCoeff() < 1e-10);
    }
}

TEST_CASE("degree zero H2 function is the normalized constant") {
    auto basis = BasisSet::make(BasisFamily::H2Orthonormal, 1, 0, 0.0, 4.0);
    CHECK(basis.values(0, 1.7)[0] == doctest::Approx(1.0));  // unit norm under the normalized measure
}

TEST_CASE("gram condition stays far below the independence bound") {
    auto mono = BasisSet::make(BasisFamily::Monomial, 1, 7, -1.0, 3.0);
    auto orth = BasisSet::make(BasisFamily::H2Orthonormal, 1, 7, -1.0, 3.0);
    CHECK(mono.gram_condition(0) < 1e12);
    CHECK(orth.gram_condition(0) < 1e12);
}

TEST_CASE("per-mode domains are honored") {
    std::vector<std::pair<double, double>> domains = {{-1.0, 1.0}, {0.0, 10.0}};
    auto basis = BasisSet::make(BasisFamily::H2Orthonormal, 2, 2, domains);
    CHECK(basis.in_domain(0, 0.5));
    CHECK(!basis.in_domain(0, 5.0));
    CHECK(basis.in_domain(1, 5.0));
    Matrix g0 = basis.h2_gram(0);
    Matrix g1 = basis.h2_gram(1);
    CHECK((g0 - Matrix::Identity(3, 3)).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((g1 - Matrix::Identity(3, 3)).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("inverse normal CDF inverts the CDF") {
    for (double p : {1e-12, 1e-6, 0.01, 0.3, 0.5, 0.9, 1.0 - 1e-9}) {
        const double z = inverse_normal_cdf(p);
        CHECK(normal_cdf(z) == doctest::Approx(p).epsilon(1e-12));
    }
    CHECK(inverse_normal_cdf(0.5) == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("counter rng is deterministic and key-sensitive") {
    const double a = counter_normal(7, RngStream::PathIncrements, 3, 5, 2);
    const double b = counter_normal(7, RngStream::PathIncrements, 3, 5, 2);
    CHECK(a == b);
    CHECK(a != counter_normal(7, RngStream::PathIncrements, 3, 5, 3));
    CHECK(a != counter_normal(8, RngStream::PathIncrements, 3, 5, 2));
    CHECK(a != counter_normal(7, RngStream::TensorInit, 3, 5, 2));
}

TEST_CASE("counter normals have standard moments") {
    const int n = 200000;
    double sum = 0.0, sq = 0.0;
    for (int i = 0; i < n; ++i) {
        const double z = counter_normal(11, RngStream::TestData, 0, 0, static_cast<std::uint64_t>(i));
        sum += z;
        sq += z * z;
    }
    const double mean = sum / n;
    const double var = sq / n - mean * mean;
    CHECK(std::abs(mean) < 4.0 / std::sqrt(static_cast<double>(n)));
    CHECK(var == doctest::Approx(1.0).epsilon(0.02));
}
