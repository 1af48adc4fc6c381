#pragma once

#include <atomic>
#include <memory>
#include <optional>

#include "ttbsde/bsde.hpp"

namespace ttbsde {

/// Monte Carlo estimate with a delta-method standard error.
struct ReferenceEstimate {
    double value = 0.0;
    double std_error = 0.0;
};

/// HJB with b = 0, sigma = sqrt(2) Id, h = -(1/2)|z|^2,
/// g = log((1 + |x|^2) / 2), x0 = 0.
PdeProblem make_hjb_log(int dim);

/// HJB with double-well drift b = -grad Psi,
/// Psi = sum_ij C_ij (x_i^2 - 1)(x_j^2 - 1), g = sum nu_i (x_i - 1)^2,
/// sigma = sigma_scale * Id, x0 = (-1, ..., -1).
PdeProblem make_double_well(const Matrix& coupling, const Vector& nu,
                            double sigma_scale = 1.4142135623730951);

/// Coupled matrix C = Id + Normal(0, 0.01) entries, sampled once per seed.
Matrix sample_double_well_coupling(int dim, std::uint64_t seed);

enum class CirDiffusion { RankOneFloor, Diagonal };

struct CirProblem {
    PdeProblem problem;
    Vector a, b, gamma;
    std::shared_ptr<std::atomic<std::uint64_t>> clamp_events;
};

/// Bond-price PDE of the multidimensional CIR model: drift a_i (b_i - x_i),
/// second-order coefficients sqrt(x_i x_j) gamma_i gamma_j, h = -(max_i x_i) y,
/// g = 1. Parameters are sampled uniformly from [0,1] once per seed.
CirProblem make_cir(int dim, std::uint64_t seed, CirDiffusion variant = CirDiffusion::RankOneFloor,
                    double floor_eps = 1e-6, const Vector* x0 = nullptr);

/// V(x,t) = -log E[exp(-g(x + sqrt(T-t) sigma xi))], xi standard normal;
/// log-sum-exp guarded, parallel over samples, deterministic in the seed.
ReferenceEstimate hjb_reference(const Vector& x, double t, double horizon, Index samples,
                                std::uint64_t seed);

/// V(x,t) = -log E[exp(-g(X_T)) | X_t = x] for the double-well dynamics,
/// simulated on an inner Euler grid.
ReferenceEstimate double_well_reference_mc(const Matrix& coupling, const Vector& nu,
                                           const Vector& x, double t, double horizon,
                                           Index samples, std::uint64_t seed, int inner_steps,
                                           double sigma_scale = 1.4142135623730951);

struct FactorizedReferenceConfig {
    double box_half_width = 3.0;
    int space_nodes = 2000;
    int time_steps = 2000;
};

struct FactorizedReference {
    double value = 0.0;
    double richardson_delta = 0.0;  // |value - half-resolution value|
};

/// Finite-difference reference for diagonal C: the solution splits into d
/// one-dimensional problems, each solved by Crank-Nicolson after the
/// exponential transform linearizes the scalar HJB. Throws on non-diagonal C.
FactorizedReference double_well_reference_factorized(
    const Matrix& coupling, const Vector& nu, const Vector& x, double t, double horizon,
    const FactorizedReferenceConfig& config = {}, double sigma_scale = 1.4142135623730951);

/// Same, but returning the full (x, t) callable for one coordinate set so
/// the relative reference loss can be evaluated along paths.
std::function<double(const Vector&, double)> double_well_factorized_field(
    const Matrix& coupling, const Vector& nu, double horizon,
    const FactorizedReferenceConfig& config = {}, double sigma_scale = 1.4142135623730951);

struct ReferenceBundle {
    std::optional<double> origin_value;  // V_ref(x0, 0)
    double origin_std_error = 0.0;
    std::function<double(const Vector&, double)> full;  // optional (x,t) reference
};

struct MetricReport {
    double relative_error = 0.0;
    bool relative_is_absolute = false;  // set when V_ref(x0,0) = 0
    double rmse = 0.0;                  // |V_0(x0) - ref| for a single run
    double pde_loss = 0.0;
    std::optional<double> relative_reference_loss;
    double value_at_origin = 0.0;
    double wall_seconds = 0.0;
    int runs = 1;
};

/// Appendix-style error metrics for one run: relative error and RMSE at the
/// origin, the mean squared PDE residual along paths (time derivative by
/// forward differences, space derivatives analytic, n = 0 excluded), and the
/// relative reference loss when a full reference is supplied.
MetricReport compute_metrics(const BackwardSolution& solution, const PathEnsemble& paths,
                             const PdeProblem& problem, const ReferenceBundle& references);

}  // namespace ttbsde
