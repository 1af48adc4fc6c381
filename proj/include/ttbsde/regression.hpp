#pragma once

#include <optional>

#include "ttbsde/functional_tt.hpp"

namespace ttbsde {

/// Sample-based least-squares data. Columns of `samples` (and `directions`,
/// when present) are the K points x^(k) in R^d; gradient-augmented fits read
/// the direction Xi^(k) from the matching column.
struct RegressionProblem {
    Matrix samples;                     // d x K
    Vector targets;                     // K
    std::optional<Matrix> directions;   // d x K

    Index count() const { return samples.cols(); }
    int dimension() const { return static_cast<int>(samples.rows()); }
};

struct RankPolicy {
    bool adaptive = false;
    RankTuple fixed;           // used when !adaptive
    Index max_rank = 1;        // cap for adaptive growth
    double growth_threshold = 1e-2;

    static RankPolicy fixed_ranks(RankTuple r) { return {false, std::move(r), 1, 1e-2}; }
    static RankPolicy adaptive_ranks(Index max_rank, double growth_threshold = 1e-2) {
        return {true, {}, max_rank, growth_threshold};
    }
};

struct AlsConfig {
    double delta = 1e-6;            // coefficient-norm penalty weight
    int max_sweeps = 15;
    double sweep_tolerance = 1e-8;  // relative loss decrease over a full sweep
    RankPolicy rank_policy;
    bool include_terminal = false;  // re-optimize the extra-function coefficient
    std::uint64_t seed = 0;
    bool warm_start = true;         // reuse the previous step's train as init
};

struct SweepRecord {
    double loss = 0.0;
    RankTuple ranks;
    double condition_estimate = 0.0;
};

struct FitDiagnostics {
    std::vector<double> micro_losses;  // regularized empirical loss after each micro-step
    std::vector<SweepRecord> sweeps;
    int sweeps_used = 0;
    double final_loss = 0.0;
};

/// Ridge normal-equations solve (A^T A + delta Id)^{-1} A^T y with a Cholesky
/// factorization, falling back to an eigendecomposition that clips eigenvalues
/// below 1e-14. delta = 0 with a rank-deficient A^T A throws
/// SingularSystemError.
Vector solve_local(const Matrix& a, const Vector& y, double delta);

/// ALS for the plain quadratic loss; every micro-step solves the local
/// problem on the space spanned by psi_left (x) basis (x) psi_right (plus the
/// extra function when configured) and the regularized empirical loss never
/// increases across micro-steps.
FunctionalTT als_fit(const RegressionProblem& problem, const FunctionalTT& init,
                     const AlsConfig& config, FitDiagnostics* diagnostics = nullptr);

/// ALS for losses containing the fitted gradient: per-sample predictions are
/// phi(x) + grad phi(x) . Xi, assembled from the psi/theta stacks.
FunctionalTT als_fit_grad(const RegressionProblem& problem, const FunctionalTT& init,
                          const AlsConfig& config, FitDiagnostics* diagnostics = nullptr);

/// Rank-adaptive fit: converge at rank one, then repeatedly grow every bond
/// below max_rank by one (seeded random slice at scale 1e-3 of the component
/// norm) and keep the growth only while the loss improves by more than the
/// growth threshold.
FunctionalTT adapt_rank(const FunctionalTT& model, const RegressionProblem& problem,
                        const AlsConfig& config, FitDiagnostics* diagnostics = nullptr);

/// Regularized empirical loss of the fitted model on the problem data.
double regression_loss(const RegressionProblem& problem, const FunctionalTT& fit, double delta);

/// Requested uniform rank clamped to what the mode extents allow.
RankTuple feasible_ranks(int dim, int basis_size, Index rank);

}  // namespace ttbsde
