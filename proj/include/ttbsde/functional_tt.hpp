#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>

#include "ttbsde/basis.hpp"
#include "ttbsde/tensor_train.hpp"

namespace ttbsde {

/// Callable bundle for a smooth scalar field; the hessian entries are only
/// ever needed as quadratic forms or weighted diagonal sums.
struct SmoothFunction {
    std::function<double(const Vector&)> value;
    std::function<Vector(const Vector&)> gradient;
    std::function<double(const Vector&)> laplacian;
    std::function<double(const Vector&, const Vector&)> hess_quadratic;      // v^T H v
    std::function<double(const Vector&, const Vector&)> weighted_laplacian;  // sum_j w_j d^2_j
};

/// Additive model extension V(x) + coeff * fn(x).
struct ExtraTerm {
    SmoothFunction fn;
    double coeff = 0.0;
};

/// Per-sample partial contractions. psi_left[l] (K x r_l) holds the stack
/// strictly left of component l with psi_left[0] = 1, psi_right[l]
/// (K x r_{l+1}) the stack strictly right of it with psi_right[d-1] = 1.
/// theta_* are the directional-derivative stacks, present when directions
/// were supplied.
struct StackSet {
    std::vector<Matrix> psi_left, psi_right;
    std::vector<Matrix> theta_left, theta_right;
    bool has_directions() const { return !theta_left.empty(); }
};

/// Multivariate function built from a tensor train contracted with a
/// one-dimensional basis per mode, optionally augmented by an extra additive
/// function. Immutable after construction; all evaluation paths are pure and
/// thread-safe (the extrapolation counter is atomic).
class FunctionalTT {
public:
    FunctionalTT(TensorTrain tt, BasisSet basis, std::optional<ExtraTerm> extra = std::nullopt);

    FunctionalTT(const FunctionalTT& other);
    FunctionalTT& operator=(const FunctionalTT& other);
    FunctionalTT(FunctionalTT&&) noexcept = default;
    FunctionalTT& operator=(FunctionalTT&&) noexcept = default;

    int dimension() const { return tt_.order(); }
    const TensorTrain& tt() const { return tt_; }
    const BasisSet& basis() const { return basis_; }
    const std::optional<ExtraTerm>& extra() const { return extra_; }

    FunctionalTT with_tt(TensorTrain tt) const;
    FunctionalTT with_extra_coeff(double coeff) const;

    double evaluate(const Vector& x) const;
    Vector gradient(const Vector& x) const;
    double directional_grad(const Vector& x, const Vector& xi) const;
    double laplacian(const Vector& x) const;
    double weighted_laplacian(const Vector& x, const Vector& w) const;
    double hessian_quadratic(const Vector& x, const Vector& v) const;

    /// Columns of `pts` are evaluation points; parallel over samples.
    Vector evaluate_many(const Matrix& pts) const;
    Matrix gradient_many(const Matrix& pts) const;
    Vector directional_grad_many(const Matrix& pts, const Matrix& xi) const;

    StackSet build_stacks(const Matrix& pts, const Matrix* directions = nullptr) const;

    /// Points seen outside the basis box (evaluation extrapolates; counted).
    std::uint64_t extrapolation_count() const { return extrapolation_events_->load(); }

    SmoothFunction as_field() const;

private:
    void note_point(const Vector& x) const;

    TensorTrain tt_;
    BasisSet basis_;
    std::optional<ExtraTerm> extra_;
    std::shared_ptr<std::atomic<std::uint64_t>> extrapolation_events_;
};

/// Gaussian init scaled by 1/sqrt(r*m), then right-orthogonalized (core 0).
FunctionalTT random_functional_tt(const BasisSet& basis, const RankTuple& ranks,
                                  std::uint64_t seed,
                                  std::optional<ExtraTerm> extra = std::nullopt);

}  // namespace ttbsde
