#pragma once

#include <functional>
#include <string>

#include "ttbsde/functional_tt.hpp"

namespace ttbsde {

/// Structured diffusion coefficient so hot loops avoid dense d x d products.
/// The rank-one variant is the symmetric square root of v v^T + eps^2 Id.
class DiffusionSpec {
public:
    enum class Kind { ScaledIdentity, Diagonal, RankOneFloor, Dense };

    static DiffusionSpec scaled_identity(double c);
    static DiffusionSpec diagonal(std::function<Vector(const Vector&, double)> entries);
    static DiffusionSpec rank_one_floor(std::function<Vector(const Vector&, double)> direction,
                                        double eps);
    static DiffusionSpec dense(std::function<Matrix(const Vector&, double)> matrix);

    Kind kind() const { return kind_; }
    double scale() const { return scale_; }
    double floor_eps() const { return eps_; }

    Vector apply_sigma(const Vector& x, double t, const Vector& v) const;
    Vector apply_sigma_t(const Vector& x, double t, const Vector& v) const;
    Matrix dense_matrix(const Vector& x, double t) const;

    /// (1/2) sum_ij (sigma sigma^T)_ij d_i d_j f at x, given the field's
    /// second-order callables.
    double half_second_order(const Vector& x, double t, const SmoothFunction& f) const;

private:
    Kind kind_ = Kind::ScaledIdentity;
    double scale_ = 1.0;
    double eps_ = 0.0;
    std::function<Vector(const Vector&, double)> vector_fn_;
    std::function<Matrix(const Vector&, double)> matrix_fn_;
};

/// Terminal-value semilinear problem: (d_t + L) V + h(x, t, V, sigma^T grad V) = 0,
/// V(., T) = g.
struct PdeProblem {
    std::string id;
    int dim = 0;
    double horizon = 1.0;
    Vector x0;
    std::function<Vector(const Vector&, double)> drift;
    DiffusionSpec diffusion;
    std::function<double(const Vector&, double, double, const Vector&)> nonlinearity;
    SmoothFunction terminal;
};

struct TimeGrid {
    double horizon = 1.0;
    int steps = 1;

    double dt() const { return horizon / steps; }
    double node(int n) const { return n * dt(); }
};

/// K Euler-Maruyama trajectories with their driving standard normals.
/// states[n] and increments[n] are d x K; increments[n] holds the xi used in
/// the update from t_n to t_{n+1} (retained, not re-derivable when sigma is
/// state dependent).
struct PathEnsemble {
    int dim = 0;
    int steps = 0;
    Index count = 0;
    std::uint64_t seed = 0;
    std::vector<Matrix> states;      // size steps + 1
    std::vector<Matrix> increments;  // size steps

    const Matrix& state(int n) const { return states[static_cast<std::size_t>(n)]; }
    const Matrix& increment(int n) const { return increments[static_cast<std::size_t>(n)]; }
};

/// X_{n+1} = X_n + b(X_n, t_n) dt + sigma(X_n, t_n) xi_{n+1} sqrt(dt);
/// deterministic in (seed, k, n, coordinate) regardless of scheduling.
/// Throws on non-finite states, naming the step and path.
PathEnsemble simulate(const PdeProblem& problem, const TimeGrid& grid, Index paths,
                      std::uint64_t seed);

/// Raw little-endian doubles in [n][k][coordinate] order plus a JSON sidecar
/// (d, N, K, dt, seed) at <path>.json.
void dump_ensemble(const PathEnsemble& ensemble, const TimeGrid& grid, const std::string& path);

}  // namespace ttbsde
