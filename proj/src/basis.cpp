#include "ttbsde/basis.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <cmath>
#include <limits>

namespace ttbsde {

void gauss_legendre(int n, std::vector<double>& nodes, std::vector<double>& weights) {
    static const double pi = std::acos(-1.0);
    nodes.assign(static_cast<std::size_t>(n), 0.0);
    weights.assign(static_cast<std::size_t>(n), 0.0);
    for (int i = 0; i < (n + 1) / 2; ++i) {
        // Chebyshev initial guess, then Newton on P_n.
        double x = std::cos(pi * (i + 0.75) / (n + 0.5));
        double pp = 0.0;
        for (int it = 0; it < 100; ++it) {
            double p0 = 1.0, p1 = 0.0;
            for (int j = 0; j < n; ++j) {
                const double p2 = p1;
                p1 = p0;
                p0 = ((2.0 * j + 1.0) * x * p1 - j * p2) / (j + 1.0);
            }
            pp = n * (x * p0 - p1) / (x * x - 1.0);
            const double dx = p0 / pp;
            x -= dx;
            if (std::abs(dx) < 1e-15) break;
        }
        nodes[static_cast<std::size_t>(i)] = -x;
        nodes[static_cast<std::size_t>(n - 1 - i)] = x;
        const double w = 2.0 / ((1.0 - x * x) * pp * pp);
        weights[static_cast<std::size_t>(i)] = w;
        weights[static_cast<std::size_t>(n - 1 - i)] = w;
    }
}

namespace {

// Monomial coefficient matrices for value/first/second derivative in s.
void monomial_powers(int m, double s, int deriv, double* out) {
    for (int p = 0; p < m; ++p) out[p] = 0.0;
    switch (deriv) {
        case 0: {
            double sp = 1.0;
            for (int p = 0; p < m; ++p, sp *= s) out[p] = sp;
            break;
        }
        case 1: {
            double sp = 1.0;
            for (int p = 1; p < m; ++p, sp *= s) out[p] = p * sp;
            break;
        }
        default: {
            double sp = 1.0;
            for (int p = 2; p < m; ++p, sp *= s) out[p] = static_cast<double>(p) * (p - 1) * sp;
            break;
        }
    }
}

// H^2([a,b]) Gram of the scaled monomials s^p via Gauss-Legendre quadrature
// (exact for these polynomial integrands). The measure is normalized by the
// interval length so the constant has unit norm; without this the tensor
// product of the per-mode normalizations decays exponentially in the
// dimension and swamps the coefficient-norm penalty.
Matrix monomial_h2_gram(int m, double a, double b) {
    const double slope = 2.0 / (b - a);  // ds/dx
    std::vector<double> nodes, weights;
    gauss_legendre(2 * m + 2, nodes, weights);
    Matrix g = Matrix::Zero(m, m);
    std::vector<double> v0(static_cast<std::size_t>(m)), v1(static_cast<std::size_t>(m)),
        v2(static_cast<std::size_t>(m));
    for (std::size_t q = 0; q < nodes.size(); ++q) {
        const double s = nodes[q];
        const double w = weights[q] * 0.5;  // dx/(b-a) = 0.5 ds
        monomial_powers(m, s, 0, v0.data());
        monomial_powers(m, s, 1, v1.data());
        monomial_powers(m, s, 2, v2.data());
        for (int i = 0; i < m; ++i) {
            for (int j = i; j < m; ++j) {
                const double term = v0[static_cast<std::size_t>(i)] * v0[static_cast<std::size_t>(j)] +
                                    slope * slope * v1[static_cast<std::size_t>(i)] * v1[static_cast<std::size_t>(j)] +
                                    slope * slope * slope * slope * v2[static_cast<std::size_t>(i)] * v2[static_cast<std::size_t>(j)];
                g(i, j) += w * term;
            }
        }
    }
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < i; ++j) g(i, j) = g(j, i);
    return g;
}

}  // namespace

BasisSet BasisSet::make(BasisFamily family, int dim, int degree,
                        std::vector<std::pair<double, double>> domains) {
    if (dim < 1 || degree < 0 || degree > 63)
        throw ConfigError("basis needs dim >= 1 and degree in [0, 63]");
    if (static_cast<int>(domains.size()) != dim) throw ConfigError("one domain per dimension required");
    for (auto& [a, b] : domains)
        if (!(a < b)) throw ConfigError("basis domain must satisfy a < b");

    BasisSet out;
    out.family_ = family;
    out.dim_ = dim;
    out.degree_ = degree;
    out.domains_ = std::move(domains);
    out.coeffs_.reserve(static_cast<std::size_t>(dim));

    const int m = degree + 1;
    for (int mode = 0; mode < dim; ++mode) {
        if (family == BasisFamily::Monomial) {
            out.coeffs_.push_back(Matrix::Identity(m, m));
        } else {
            const auto [a, b] = out.domains_[static_cast<std::size_t>(mode)];
            Matrix gram = monomial_h2_gram(m, a, b);
            Eigen::LLT<Matrix> llt(gram);
            if (llt.info() != Eigen::Success)
                throw ConfigError("H2 Gram matrix is not positive definite");
            // phi = monomials * L^{-T}  =>  Gram(phi) = I.
            Matrix linv_t = llt.matrixL()
                                .solve(Matrix::Identity(m, m))
                                .transpose();
            out.coeffs_.push_back(std::move(linv_t));
        }
    }
    return out;
}

BasisSet BasisSet::make(BasisFamily family, int dim, int degree, double a, double b) {
    return make(family, dim, degree,
                std::vector<std::pair<double, double>>(static_cast<std::size_t>(dim), {a, b}));
}

bool BasisSet::in_domain(int mode, double x) const {
    const auto [a, b] = domains_[static_cast<std::size_t>(mode)];
    return x >= a && x <= b;
}

void BasisSet::eval(int mode, double x, int deriv, double* out) const {
    const auto [a, b] = domains_[static_cast<std::size_t>(mode)];
    const double s = (2.0 * x - a - b) / (b - a);
    const double slope = 2.0 / (b - a);
    const int m = size();
    double pows[64];
    monomial_powers(m, s, deriv, pows);
    const double scale = deriv == 0 ? 1.0 : (deriv == 1 ? slope : slope * slope);
    const Matrix& c = coeffs_[static_cast<std::size_t>(mode)];
    Eigen::Map<Vector>(out, m).noalias() =
        scale * (c.transpose() * Eigen::Map<const Vector>(pows, m));
}

Vector BasisSet::values(int mode, double x) const {
    Vector v(size());
    eval(mode, x, 0, v.data());
    return v;
}

Vector BasisSet::derivatives(int mode, double x) const {
    Vector v(size());
    eval(mode, x, 1, v.data());
    return v;
}

Vector BasisSet::second_derivatives(int mode, double x) const {
    Vector v(size());
    eval(mode, x, 2, v.data());
    return v;
}

Matrix BasisSet::h2_gram(int mode) const {
    const auto [a, b] = domains_[static_cast<std::size_t>(mode)];
    const Matrix& c = coeffs_[static_cast<std::size_t>(mode)];
    return c.transpose() * monomial_h2_gram(size(), a, b) * c;
}

double BasisSet::gram_condition(int mode) const {
    const auto [a, b] = domains_[static_cast<std::size_t>(mode)];
    const int m = size();
    std::vector<double> nodes, weights;
    gauss_legendre(2 * m + 2, nodes, weights);
    Matrix g = Matrix::Zero(m, m);
    Vector phi(m);
    for (std::size_t q = 0; q < nodes.size(); ++q) {
        const double x = 0.5 * (a + b) + 0.5 * (b - a) * nodes[q];
        eval(mode, x, 0, phi.data());
        g.noalias() += (0.5 * (b - a) * weights[q]) * phi * phi.transpose();
    }
    Eigen::SelfAdjointEigenSolver<Matrix> es(g);
    const double lo = es.eigenvalues().minCoeff();
    const double hi = es.eigenvalues().maxCoeff();
    return lo > 0 ? hi / lo : std::numeric_limits<double>::infinity();
}

}  // namespace ttbsde
