#pragma once

#include <utility>
#include <vector>

#include "ttbsde/common.hpp"

namespace ttbsde {

/// Gauss-Legendre nodes and weights on [-1, 1].
void gauss_legendre(int n, std::vector<double>& nodes, std::vector<double>& weights);

enum class BasisFamily {
    Monomial,       // scaled monomials s^p, s the affine map of [a,b] onto [-1,1]
    H2Orthonormal,  // polynomials orthonormal in H^2([a,b])
};

/// One-dimensional polynomial ansatz functions, one instance per spatial
/// dimension. All modes share the family and degree; domains may differ per
/// mode. Degree p gives m = p + 1 functions.
class BasisSet {
public:
    static BasisSet make(BasisFamily family, int dim, int degree,
                         std::vector<std::pair<double, double>> domains);
    /// Same domain in every dimension.
    static BasisSet make(BasisFamily family, int dim, int degree, double a, double b);

    int size() const { return degree_ + 1; }
    int degree() const { return degree_; }
    int dimension() const { return dim_; }
    BasisFamily family() const { return family_; }
    std::pair<double, double> domain(int mode) const { return domains_[static_cast<std::size_t>(mode)]; }
    bool in_domain(int mode, double x) const;

    /// Writes phi_i^{(deriv)}(x), i = 0..m-1, for deriv in {0, 1, 2}.
    void eval(int mode, double x, int deriv, double* out) const;
    Vector values(int mode, double x) const;
    Vector derivatives(int mode, double x) const;
    Vector second_derivatives(int mode, double x) const;

    /// H^2([a,b]) Gram matrix of the mode's functions (identity for the
    /// orthonormal family, up to round-off).
    Matrix h2_gram(int mode) const;

    /// Condition number of the L^2 Gram on a quadrature grid; the linear
    /// independence check requires this below 1e12.
    double gram_condition(int mode) const;

private:
    BasisSet() = default;

    BasisFamily family_ = BasisFamily::Monomial;
    int dim_ = 0;
    int degree_ = 0;
    std::vector<std::pair<double, double>> domains_;
    // coeffs_[mode](p, i): coefficient of s^p in phi_i.
    std::vector<Matrix> coeffs_;
};

}  // namespace ttbsde
