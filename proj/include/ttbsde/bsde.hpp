#pragma once

#include <iosfwd>

#include "ttbsde/regression.hpp"
#include "ttbsde/sde.hpp"

namespace ttbsde {

enum class LossKind { ProjExplicit, BsdeExplicit, BsdeImplicit };

const char* to_string(LossKind kind);
LossKind loss_kind_from_string(const std::string& name);

/// Per-sample regression data for one backward step: target y^(k) and
/// direction Xi^(k) = sqrt(dt) sigma(X_n, t_n) xi_{n+1} (zero for the
/// projection loss).
struct StepTargets {
    Vector y;
    Matrix xi;
};

struct ImplicitConfig {
    int max_outer = 20;
    double outer_tol = 1e-8;  // sup-norm change of fitted sample values
};

enum class InitPolicy { WarmStart, Random };

struct SolverConfig {
    AlsConfig als;
    ImplicitConfig implicit;
    BasisFamily family = BasisFamily::H2Orthonormal;
    int degree = 0;
    double quantile_low = 0.001;
    double quantile_high = 0.999;
    double domain_pad = 0.1;  // fraction of the quantile range
};

struct StepDiagnostics {
    int step = 0;
    double final_loss = 0.0;
    int sweeps = 0;
    RankTuple ranks;
    double wall_seconds = 0.0;  // in-memory only; never serialized
    int outer_iterations = 0;
    bool outer_converged = true;
    std::uint64_t extrapolation_events = 0;
};

/// Either a fitted step function or the analytic terminal condition.
class StepFunction {
public:
    explicit StepFunction(const FunctionalTT* fitted) : fitted_(fitted) {}
    explicit StepFunction(const SmoothFunction* terminal) : terminal_(terminal) {}

    double value(const Vector& x) const;
    Vector gradient(const Vector& x) const;
    bool is_fitted() const { return fitted_ != nullptr; }
    const FunctionalTT* fitted() const { return fitted_; }

private:
    const FunctionalTT* fitted_ = nullptr;
    const SmoothFunction* terminal_ = nullptr;
};

/// V_0 ... V_{N-1} plus the terminal condition V_N = g by reference.
class BackwardSolution {
public:
    BackwardSolution(std::vector<FunctionalTT> steps, SmoothFunction terminal, TimeGrid grid,
                     LossKind kind, std::uint64_t seed)
        : steps_(std::move(steps)),
          terminal_(std::move(terminal)),
          grid_(grid),
          kind_(kind),
          seed_(seed) {}

    int step_count() const { return static_cast<int>(steps_.size()); }
    const FunctionalTT& step(int n) const { return steps_[static_cast<std::size_t>(n)]; }
    const SmoothFunction& terminal() const { return terminal_; }
    const TimeGrid& grid() const { return grid_; }
    LossKind kind() const { return kind_; }
    std::uint64_t seed() const { return seed_; }

    /// n in 0..N; V_N = g.
    double value(int n, const Vector& x) const;
    Vector gradient(int n, const Vector& x) const;
    StepFunction at(int n) const;

    std::vector<StepDiagnostics> diagnostics;

private:
    std::vector<FunctionalTT> steps_;
    SmoothFunction terminal_;
    TimeGrid grid_;
    LossKind kind_;
    std::uint64_t seed_;
};

/// Builds y^(k) (and Xi^(k)) for the requested loss at step n. The explicit
/// kinds evaluate h at (X_{n+1}, t_{n+1}) on V_next; the implicit kind
/// evaluates h at (X_n, t_n) on the frozen iterate.
StepTargets assemble_targets(LossKind kind, int n, const StepFunction& v_next,
                             const StepFunction* v_iterate, const PathEnsemble& paths,
                             const TimeGrid& grid, const PdeProblem& problem);

/// One backward step: single fit for the explicit kinds, fixed-point outer
/// loop for the implicit one.
FunctionalTT solve_step(LossKind kind, int n, const StepFunction& v_next,
                        const FunctionalTT* warm_model, const PathEnsemble& paths,
                        const TimeGrid& grid, const PdeProblem& problem,
                        const SolverConfig& config, StepDiagnostics* diag = nullptr);

/// Algorithm: simulate once, set V_N = g, then iterate solve_step backwards.
BackwardSolution backward_solve(LossKind kind, const PdeProblem& problem, const TimeGrid& grid,
                                Index paths, std::uint64_t seed, const SolverConfig& config);

/// Reference solution and gradient as functions of (x, t).
struct TimeField {
    std::function<double(const Vector&, double)> value;
    std::function<Vector(const Vector&, double)> gradient;
};

struct LossStats {
    double mean_residual = 0.0;
    double var_residual = 0.0;
    double mean_sq = 0.0;  // mean of squared per-sample residuals
    double var_sq = 0.0;   // variance of squared per-sample residuals
};

/// Discrete per-sample residual statistics of the chosen loss at
/// phi = reference; at an exact solution the robust residual vanishes
/// pathwise while the projection residual keeps its stochastic-integral
/// variance.
LossStats loss_statistics_at(const TimeField& reference, LossKind kind, int n,
                             const PathEnsemble& paths, const TimeGrid& grid,
                             const PdeProblem& problem);

struct GradientVarStats {
    double per_sample_variance = 0.0;  // Var of the per-sample derivative term
    double estimator_variance = 0.0;   // Var of the full (2/K) sum estimator
};

/// Variance of the Gateaux derivative of the empirical loss at
/// phi = reference in direction psi; the robust variant loses its variance
/// at an exact solution, the projection variant does not.
/// Supported kinds: BsdeExplicit and ProjExplicit.
GradientVarStats gateaux_variance_at(const TimeField& reference, LossKind kind, int n,
                                     const PathEnsemble& paths, const TimeGrid& grid,
                                     const PdeProblem& problem, const SmoothFunction& psi);

/// Functional TT stream format: one JSON header line (basis family, degree,
/// per-dimension domain, extra coefficient) followed by the TTV1 block.
void save_functional_tt(const FunctionalTT& f, std::ostream& out);
/// Rebuilds the function; `extra` re-attaches the non-serializable extra
/// function with the stored coefficient.
FunctionalTT load_functional_tt(std::istream& in, const SmoothFunction* extra = nullptr);

/// Directory layout: manifest.json (problem id, grid, kind, config hash,
/// seed, per-step diagnostics sans timing) plus one step_XXXX.ftt per step.
void save_solution(const BackwardSolution& solution, const std::string& problem_id,
                   const std::string& config_hash, const std::string& dir);
std::vector<FunctionalTT> load_solution_steps(const std::string& dir,
                                              const SmoothFunction* extra = nullptr);

}  // namespace ttbsde
