#include "ttbsde/sde.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "ttbsde/rng.hpp"

namespace ttbsde {

DiffusionSpec DiffusionSpec::scaled_identity(double c) {
    DiffusionSpec s;
    s.kind_ = Kind::ScaledIdentity;
    s.scale_ = c;
    return s;
}

DiffusionSpec DiffusionSpec::diagonal(std::function<Vector(const Vector&, double)> entries) {
    DiffusionSpec s;
    s.kind_ = Kind::Diagonal;
    s.vector_fn_ = std::move(entries);
    return s;
}

DiffusionSpec DiffusionSpec::rank_one_floor(
    std::function<Vector(const Vector&, double)> direction, double eps) {
    DiffusionSpec s;
    s.kind_ = Kind::RankOneFloor;
    s.vector_fn_ = std::move(direction);
    s.eps_ = eps;
    return s;
}

DiffusionSpec DiffusionSpec::dense(std::function<Matrix(const Vector&, double)> matrix) {
    DiffusionSpec s;
    s.kind_ = Kind::Dense;
    s.matrix_fn_ = std::move(matrix);
    return s;
}

Vector DiffusionSpec::apply_sigma(const Vector& x, double t, const Vector& v) const {
    switch (kind_) {
        case Kind::ScaledIdentity:
            return scale_ * v;
        case Kind::Diagonal:
            return vector_fn_(x, t).cwiseProduct(v);
        case Kind::RankOneFloor: {
            // sigma = eps Id + ((sqrt(|w|^2 + eps^2) - eps) / |w|^2) w w^T, symmetric.
            const Vector w = vector_fn_(x, t);
            const double n2 = w.squaredNorm();
            if (n2 <= 0.0) return eps_ * v;
            const double gain = (std::sqrt(n2 + eps_ * eps_) - eps_) / n2;
            return eps_ * v + gain * w.dot(v) * w;
        }
        case Kind::Dense:
            return matrix_fn_(x, t) * v;
    }
    return v;
}

Vector DiffusionSpec::apply_sigma_t(const Vector& x, double t, const Vector& v) const {
    if (kind_ == Kind::Dense) return matrix_fn_(x, t).transpose() * v;
    return apply_sigma(x, t, v);  // the structured variants are symmetric
}

Matrix DiffusionSpec::dense_matrix(const Vector& x, double t) const {
    const Index d = x.size();
    switch (kind_) {
        case Kind::ScaledIdentity:
            return scale_ * Matrix::Identity(d, d);
        case Kind::Diagonal:
            return vector_fn_(x, t).asDiagonal();
        case Kind::RankOneFloor: {
            const Vector w = vector_fn_(x, t);
            const double n2 = w.squaredNorm();
            Matrix m = eps_ * Matrix::Identity(d, d);
            if (n2 > 0.0) m += ((std::sqrt(n2 + eps_ * eps_) - eps_) / n2) * w * w.transpose();
            return m;
        }
        case Kind::Dense:
            return matrix_fn_(x, t);
    }
    return Matrix::Identity(d, d);
}

double DiffusionSpec::half_second_order(const Vector& x, double t,
                                        const SmoothFunction& f) const {
    switch (kind_) {
        case Kind::ScaledIdentity:
            return 0.5 * scale_ * scale_ * f.laplacian(x);
        case Kind::Diagonal: {
            const Vector s = vector_fn_(x, t);
            return 0.5 * f.weighted_laplacian(x, s.cwiseProduct(s));
        }
        case Kind::RankOneFloor: {
            // sigma sigma^T = w w^T + eps^2 Id.
            const Vector w = vector_fn_(x, t);
            return 0.5 * (f.hess_quadratic(x, w) + eps_ * eps_ * f.laplacian(x));
        }
        case Kind::Dense: {
            const Matrix sig = matrix_fn_(x, t);
            const Matrix a = sig * sig.transpose();
            double acc = 0.0;
            // Column-by-column quadratic forms; adequate for test-scale use.
            Eigen::SelfAdjointEigenSolver<Matrix> es(a);
            for (Index i = 0; i < a.rows(); ++i) {
                const Vector v = es.eigenvectors().col(i) * std::sqrt(std::max(0.0, es.eigenvalues()[i]));
                acc += f.hess_quadratic(x, v);
            }
            return 0.5 * acc;
        }
    }
    return 0.0;
}

PathEnsemble simulate(const PdeProblem& problem, const TimeGrid& grid, Index paths,
                      std::uint64_t seed) {
    if (paths < 1) throw ConfigError("simulate needs at least one path");
    const int d = problem.dim;
    const int n_steps = grid.steps;
    const double dt = grid.dt();
    const double sdt = std::sqrt(dt);

    PathEnsemble out;
    out.dim = d;
    out.steps = n_steps;
    out.count = paths;
    out.seed = seed;
    out.states.assign(static_cast<std::size_t>(n_steps) + 1, Matrix(d, paths));
    out.increments.assign(static_cast<std::size_t>(n_steps), Matrix(d, paths));

    out.states[0] = problem.x0.replicate(1, paths);

    int bad_step = -1;
    Index bad_path = -1;
#pragma omp parallel for schedule(static)
    for (Index k = 0; k < paths; ++k) {
        Vector x = problem.x0;
        for (int n = 0; n < n_steps; ++n) {
            Vector xi(d);
            for (int j = 0; j < d; ++j)
                xi[j] = counter_normal(seed, RngStream::PathIncrements,
                                       static_cast<std::uint64_t>(k),
                                       static_cast<std::uint64_t>(n),
                                       static_cast<std::uint64_t>(j));
            out.increments[static_cast<std::size_t>(n)].col(k) = xi;
            const double t = grid.node(n);
            const Vector bterm = problem.drift(x, t) * dt;
            const Vector sterm = problem.diffusion.apply_sigma(x, t, xi) * sdt;
            x = x + bterm + sterm;
            if (!x.allFinite()) {
#pragma omp critical
                {
                    if (bad_step < 0 || n < bad_step) {
                        bad_step = n;
                        bad_path = k;
                    }
                }
                break;
            }
            out.states[static_cast<std::size_t>(n) + 1].col(k) = x;
        }
    }
    if (bad_step >= 0)
        throw std::runtime_error("non-finite state at step " + std::to_string(bad_step + 1) +
                                 ", path " + std::to_string(bad_path));
    return out;
}

void dump_ensemble(const PathEnsemble& ensemble, const TimeGrid& grid, const std::string& path) {
    std::ofstream raw(path, std::ios::binary);
    if (!raw) throw std::runtime_error("cannot open " + path);
    for (int n = 0; n <= ensemble.steps; ++n) {
        const Matrix& s = ensemble.state(n);
        // [n][k][coordinate]: column k is contiguous in a column-major matrix.
        for (Index k = 0; k < ensemble.count; ++k)
            raw.write(reinterpret_cast<const char*>(s.col(k).data()),
                      static_cast<std::streamsize>(ensemble.dim) * 8);
    }
    nlohmann::json sidecar = {
        {"d", ensemble.dim},   {"N", ensemble.steps},  {"K", ensemble.count},
        {"dt", grid.dt()},     {"seed", ensemble.seed},
    };
    std::ofstream meta(path + ".json");
    meta << sidecar.dump(2) << "\n";
}

}  // namespace ttbsde
