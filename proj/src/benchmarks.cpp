#include "ttbsde/benchmarks.hpp"
#include <mutex>

#include <Eigen/Dense>
#include <cmath>

#include "ttbsde/rng.hpp"

namespace ttbsde {

PdeProblem make_hjb_log(int dim) {
    PdeProblem p;
    p.id = "hjb_log";
    p.dim = dim;
    p.horizon = 1.0;
    p.x0 = Vector::Zero(dim);
    p.drift = [dim](const Vector&, double) { return Vector::Zero(dim); };
    p.diffusion = DiffusionSpec::scaled_identity(std::sqrt(2.0));
    p.nonlinearity = [](const Vector&, double, double, const Vector& z) {
        return -0.5 * z.squaredNorm();
    };
    SmoothFunction g;
    g.value = [](const Vector& x) { return std::log(0.5 + 0.5 * x.squaredNorm()); };
    g.gradient = [](const Vector& x) {
        const double u = 0.5 + 0.5 * x.squaredNorm();
        return Vector(x / u);
    };
    g.laplacian = [](const Vector& x) {
        const double u = 0.5 + 0.5 * x.squaredNorm();
        return static_cast<double>(x.size()) / u - x.squaredNorm() / (u * u);
    };
    g.hess_quadratic = [](const Vector& x, const Vector& v) {
        const double u = 0.5 + 0.5 * x.squaredNorm();
        const double vx = v.dot(x);
        return v.squaredNorm() / u - vx * vx / (u * u);
    };
    g.weighted_laplacian = [](const Vector& x, const Vector& w) {
        const double u = 0.5 + 0.5 * x.squaredNorm();
        return w.sum() / u - w.dot(x.cwiseProduct(x)) / (u * u);
    };
    p.terminal = std::move(g);
    return p;
}

PdeProblem make_double_well(const Matrix& coupling, const Vector& nu, double sigma_scale) {
    const int dim = static_cast<int>(coupling.rows());
    if (coupling.cols() != dim || nu.size() != dim)
        throw ConfigError("double well needs a square C and matching nu");
    PdeProblem p;
    p.id = "hjb_double_well";
    p.dim = dim;
    p.horizon = 0.5;
    p.x0 = Vector::Constant(dim, -1.0);
    const Matrix sym = coupling + coupling.transpose();
    p.drift = [sym](const Vector& x, double) {
        const Vector w = x.array().square() - 1.0;
        return Vector(-2.0 * x.cwiseProduct(sym * w));
    };
    p.diffusion = DiffusionSpec::scaled_identity(sigma_scale);
    p.nonlinearity = [](const Vector&, double, double, const Vector& z) {
        return -0.5 * z.squaredNorm();
    };
    SmoothFunction g;
    g.value = [nu](const Vector& x) {
        return (nu.array() * (x.array() - 1.0).square()).sum();
    };
    g.gradient = [nu](const Vector& x) { return Vector(2.0 * nu.array() * (x.array() - 1.0)); };
    g.laplacian = [nu](const Vector&) { return 2.0 * nu.sum(); };
    g.hess_quadratic = [nu](const Vector&, const Vector& v) {
        return 2.0 * (nu.array() * v.array().square()).sum();
    };
    g.weighted_laplacian = [nu](const Vector&, const Vector& w) {
        return 2.0 * nu.dot(w);
    };
    p.terminal = std::move(g);
    return p;
}

Matrix sample_double_well_coupling(int dim, std::uint64_t seed) {
    Matrix c = Matrix::Identity(dim, dim);
    for (int i = 0; i < dim; ++i)
        for (int j = 0; j < dim; ++j)
            c(i, j) += 0.01 * counter_normal(seed, RngStream::ProblemParams,
                                            static_cast<std::uint64_t>(i),
                                            static_cast<std::uint64_t>(j), 0);
    return c;
}

CirProblem make_cir(int dim, std::uint64_t seed, CirDiffusion variant, double floor_eps,
                    const Vector* x0) {
    CirProblem out;
    out.a.resize(dim);
    out.b.resize(dim);
    out.gamma.resize(dim);
    for (int i = 0; i < dim; ++i) {
        out.a[i] = counter_uniform(seed, RngStream::ProblemParams, static_cast<std::uint64_t>(i), 1, 0);
        out.b[i] = counter_uniform(seed, RngStream::ProblemParams, static_cast<std::uint64_t>(i), 1, 1);
        out.gamma[i] =
            counter_uniform(seed, RngStream::ProblemParams, static_cast<std::uint64_t>(i), 1, 2);
    }
    out.clamp_events = std::make_shared<std::atomic<std::uint64_t>>(0);

    PdeProblem p;
    p.id = "cir";
    p.dim = dim;
    p.horizon = 1.0;
    p.x0 = x0 ? *x0 : Vector::Constant(dim, 1.0);
    const Vector a = out.a, b = out.b, gamma = out.gamma;
    p.drift = [a, b](const Vector& x, double) { return Vector(a.array() * (b - x).array()); };

    auto clamp_counter = out.clamp_events;
    auto clamped_sqrt = [clamp_counter](const Vector& x) {
        Vector r(x.size());
        std::uint64_t clamped = 0;
        for (Index i = 0; i < x.size(); ++i) {
            if (x[i] < 0.0) ++clamped;
            r[i] = std::sqrt(std::max(x[i], 0.0));
        }
        if (clamped) clamp_counter->fetch_add(clamped, std::memory_order_relaxed);
        return r;
    };
    if (variant == CirDiffusion::RankOneFloor) {
        p.diffusion = DiffusionSpec::rank_one_floor(
            [gamma, clamped_sqrt](const Vector& x, double) {
                return Vector(gamma.cwiseProduct(clamped_sqrt(x)));
            },
            floor_eps);
    } else {
        p.diffusion = DiffusionSpec::diagonal(
            [gamma, clamped_sqrt, floor_eps](const Vector& x, double) {
                return Vector((gamma.cwiseProduct(clamped_sqrt(x))).array() + floor_eps);
            });
    }
    p.nonlinearity = [](const Vector& x, double, double y, const Vector&) {
        return -x.maxCoeff() * y;
    };
    SmoothFunction g;
    g.value = [](const Vector&) { return 1.0; };
    g.gradient = [](const Vector& x) { return Vector::Zero(x.size()); };
    g.laplacian = [](const Vector&) { return 0.0; };
    g.hess_quadratic = [](const Vector&, const Vector&) { return 0.0; };
    g.weighted_laplacian = [](const Vector&, const Vector&) { return 0.0; };
    p.terminal = std::move(g);
    out.problem = std::move(p);
    return out;
}

namespace {

// Deterministic chunked accumulation: per-chunk serial sums combined in a
// fixed order, independent of the thread count.
constexpr Index kChunk = 16384;

}  // namespace

ReferenceEstimate hjb_reference(const Vector& x, double t, double horizon, Index samples,
                                std::uint64_t seed) {
    if (t > horizon) throw ConfigError("reference time beyond the horizon");
    const int d = static_cast<int>(x.size());
    const double scale = std::sqrt(horizon - t) * std::sqrt(2.0);

    // exponents e_k = -g(x + scale * xi_k)
    Vector exponents(samples);
#pragma omp parallel for schedule(static)
    for (Index k = 0; k < samples; ++k) {
        double norm_sq = 0.0;
        for (int j = 0; j < d; ++j) {
            const double z = x[j] + scale * counter_normal(seed, RngStream::ReferenceMc,
                                                           static_cast<std::uint64_t>(k), 0,
                                                           static_cast<std::uint64_t>(j));
            norm_sq += z * z;
        }
        exponents[k] = -std::log(0.5 + 0.5 * norm_sq);
    }

    const double shift = exponents.maxCoeff();
    const Index chunks = (samples + kChunk - 1) / kChunk;
    std::vector<double> sum1(static_cast<std::size_t>(chunks), 0.0);
    std::vector<double> sum2(static_cast<std::size_t>(chunks), 0.0);
#pragma omp parallel for schedule(static)
    for (Index c = 0; c < chunks; ++c) {
        double s1 = 0.0, s2 = 0.0;
        const Index hi = std::min(samples, (c + 1) * kChunk);
        for (Index k = c * kChunk; k < hi; ++k) {
            const double e = std::exp(exponents[k] - shift);
            s1 += e;
            s2 += e * e;
        }
        sum1[static_cast<std::size_t>(c)] = s1;
        sum2[static_cast<std::size_t>(c)] = s2;
    }
    double s1 = 0.0, s2 = 0.0;
    for (Index c = 0; c < chunks; ++c) {
        s1 += sum1[static_cast<std::size_t>(c)];
        s2 += sum2[static_cast<std::size_t>(c)];
    }
    const double n = static_cast<double>(samples);
    const double mean = s1 / n;
    const double var = std::max(0.0, s2 / n - mean * mean);
    ReferenceEstimate est;
    est.value = -(shift + std::log(mean));
    est.std_error = std::sqrt(var / n) / mean;  // delta method for -log(mean)
    return est;
}

ReferenceEstimate double_well_reference_mc(const Matrix& coupling, const Vector& nu,
                                           const Vector& x, double t, double horizon,
                                           Index samples, std::uint64_t seed, int inner_steps,
                                           double sigma_scale) {
    if (t > horizon) throw ConfigError("reference time beyond the horizon");
    const int d = static_cast<int>(x.size());
    const double dt = (horizon - t) / inner_steps;
    const double sdt = std::sqrt(dt);
    const double noise = sigma_scale * sdt;
    const Matrix sym = coupling + coupling.transpose();

    Vector exponents(samples);
    const Index blocks = (samples + kChunk - 1) / kChunk;
#pragma omp parallel
    {
        Matrix xs, w, drift, xi;
#pragma omp for schedule(static)
        for (Index blk = 0; blk < blocks; ++blk) {
            const Index lo = blk * kChunk;
            const Index hi = std::min(samples, lo + kChunk);
            const Index bs = hi - lo;
            xs = x.replicate(1, bs);
            xi.resize(d, bs);
            for (int step = 0; step < inner_steps; ++step) {
                for (Index k = 0; k < bs; ++k)
                    for (int j = 0; j < d; ++j)
                        xi(j, k) = counter_normal(seed, RngStream::ReferenceMc,
                                                  static_cast<std::uint64_t>(lo + k),
                                                  static_cast<std::uint64_t>(step),
                                                  static_cast<std::uint64_t>(j));
                w = xs.array().square() - 1.0;
                drift = -2.0 * xs.cwiseProduct(sym * w);
                xs += drift * dt + noise * xi;
            }
            for (Index k = 0; k < bs; ++k)
                exponents[lo + k] =
                    -(nu.array() * (xs.col(k).array() - 1.0).square()).sum();
        }
    }

    const double shift = exponents.maxCoeff();
    double s1 = 0.0, s2 = 0.0;
    for (Index c = 0; c < blocks; ++c) {
        double c1 = 0.0, c2 = 0.0;
        const Index hi = std::min(samples, (c + 1) * kChunk);
        for (Index k = c * kChunk; k < hi; ++k) {
            const double e = std::exp(exponents[k] - shift);
            c1 += e;
            c2 += e * e;
        }
        s1 += c1;
        s2 += c2;
    }
    const double n = static_cast<double>(samples);
    const double mean = s1 / n;
    const double var = std::max(0.0, s2 / n - mean * mean);
    ReferenceEstimate est;
    est.value = -(shift + std::log(mean));
    est.std_error = std::sqrt(var / n) / mean;
    return est;
}

namespace {

// Crank-Nicolson solve of the transformed scalar equation
// d_tau w = w'' + b(x) w' with Neumann ends; returns the grid values of w at
// tau = horizon - t. The exponential transform w = exp(-v) linearizes the
// scalar HJB with sigma = sqrt(2).
struct Scalar1dSolution {
    std::vector<double> grid;
    std::vector<double> w;
};

Scalar1dSolution solve_scalar_double_well(double c_diag, double nu, double tau,
                                          const FactorizedReferenceConfig& cfg, int steps,
                                          double c2) {
    const int n = cfg.space_nodes;
    const double a = -cfg.box_half_width, b = cfg.box_half_width;
    const double h = (b - a) / (n - 1);
    steps = std::max(1, steps);
    const double dtau = tau / steps;

    Scalar1dSolution out;
    out.grid.resize(static_cast<std::size_t>(n));
    out.w.resize(static_cast<std::size_t>(n));
    Vector w(n), drift(n);
    for (int i = 0; i < n; ++i) {
        const double xi = a + i * h;
        out.grid[static_cast<std::size_t>(i)] = xi;
        w[i] = std::exp(-nu * (xi - 1.0) * (xi - 1.0));
        drift[i] = -4.0 * c_diag * xi * (xi * xi - 1.0);
    }
    if (tau <= 0.0) {
        for (int i = 0; i < n; ++i) out.w[static_cast<std::size_t>(i)] = w[i];
        return out;
    }

    // Tridiagonal operator L w = w'' + b w' with one-sided Neumann closure.
    Vector lower(n), diag(n), upper(n);
    for (int i = 0; i < n; ++i) {
        if (i == 0 || i == n - 1) {
            // Mirror ghost node: w' = 0 at the boundary.
            diag[i] = -2.0 * c2 / (h * h);
            if (i == 0)
                upper[i] = 2.0 * c2 / (h * h);
            else
                lower[i] = 2.0 * c2 / (h * h);
            continue;
        }
        lower[i] = c2 / (h * h) - drift[i] / (2.0 * h);
        diag[i] = -2.0 * c2 / (h * h);
        upper[i] = c2 / (h * h) + drift[i] / (2.0 * h);
    }

    // (I - dtau/2 L) w_new = (I + dtau/2 L) w_old, Thomas solve per step.
    Vector al(n), ad(n), au(n);
    for (int i = 0; i < n; ++i) {
        al[i] = -0.5 * dtau * lower[i];
        ad[i] = 1.0 - 0.5 * dtau * diag[i];
        au[i] = -0.5 * dtau * upper[i];
    }
    Vector rhs(n), cp(n), dp(n);
    for (int s = 0; s < steps; ++s) {
        for (int i = 0; i < n; ++i) {
            double v = w[i] + 0.5 * dtau * diag[i] * w[i];
            if (i > 0) v += 0.5 * dtau * lower[i] * w[i - 1];
            if (i + 1 < n) v += 0.5 * dtau * upper[i] * w[i + 1];
            rhs[i] = v;
        }
        cp[0] = au[0] / ad[0];
        dp[0] = rhs[0] / ad[0];
        for (int i = 1; i < n; ++i) {
            const double m = ad[i] - al[i] * cp[i - 1];
            cp[i] = au[i] / m;
            dp[i] = (rhs[i] - al[i] * dp[i - 1]) / m;
        }
        w[n - 1] = dp[n - 1];
        for (int i = n - 2; i >= 0; --i) w[i] = dp[i] - cp[i] * w[i + 1];
    }
    for (int i = 0; i < n; ++i) out.w[static_cast<std::size_t>(i)] = w[i];
    return out;
}

double interp_log(const Scalar1dSolution& sol, double x) {
    const auto& g = sol.grid;
    const int n = static_cast<int>(g.size());
    const double a = g.front(), b = g.back();
    const double clamped = std::clamp(x, a, b);
    const double pos = (clamped - a) / (b - a) * (n - 1);
    const int i = std::min(n - 2, static_cast<int>(pos));
    const double frac = pos - i;
    const double w = (1.0 - frac) * sol.w[static_cast<std::size_t>(i)] +
                     frac * sol.w[static_cast<std::size_t>(i) + 1];
    return -std::log(std::max(w, 1e-300));
}

void require_diagonal(const Matrix& coupling) {
    for (Index i = 0; i < coupling.rows(); ++i)
        for (Index j = 0; j < coupling.cols(); ++j)
            if (i != j && coupling(i, j) != 0.0)
                throw ConfigError("factorized reference needs a diagonal C");
}

}  // namespace

FactorizedReference double_well_reference_factorized(const Matrix& coupling, const Vector& nu,
                                                     const Vector& x, double t, double horizon,
                                                     const FactorizedReferenceConfig& config,
                                                     double sigma_scale) {
    require_diagonal(coupling);
    const int d = static_cast<int>(x.size());
    const double tau = horizon - t;
    const double c2 = 0.5 * sigma_scale * sigma_scale;

    auto total_at = [&](const FactorizedReferenceConfig& cfg) {
        double total = 0.0;
        // Identical (c, nu) coordinates share one scalar solve.
        std::vector<std::pair<double, double>> seen;
        std::vector<Scalar1dSolution> solutions;
        for (int i = 0; i < d; ++i) {
            const double c = coupling(i, i);
            const double v = nu[i];
            int found = -1;
            for (std::size_t s = 0; s < seen.size(); ++s)
                if (seen[s].first == c && seen[s].second == v) found = static_cast<int>(s);
            if (found < 0) {
                seen.emplace_back(c, v);
                solutions.push_back(
                    solve_scalar_double_well(c, v, tau, cfg, cfg.time_steps, c2));
                found = static_cast<int>(solutions.size()) - 1;
            }
            total += interp_log(solutions[static_cast<std::size_t>(found)], x[i]);
        }
        return total;
    };

    FactorizedReference out;
    out.value = total_at(config);
    FactorizedReferenceConfig half = config;
    half.space_nodes = config.space_nodes / 2;
    half.time_steps = config.time_steps / 2;
    out.richardson_delta = std::abs(out.value - total_at(half));
    return out;
}

std::function<double(const Vector&, double)> double_well_factorized_field(
    const Matrix& coupling, const Vector& nu, double horizon,
    const FactorizedReferenceConfig& config, double sigma_scale) {
    require_diagonal(coupling);
    const double c2 = 0.5 * sigma_scale * sigma_scale;
    // Scalar solutions cached per (c, nu, tau); the step count scales with
    // tau so the time resolution matches the t = 0 reference.
    struct Entry {
        double c, nu, tau;
        Scalar1dSolution sol;
    };
    struct Cache {
        std::mutex mutex;
        std::vector<std::unique_ptr<Entry>> entries;
    };
    auto cache = std::make_shared<Cache>();
    auto cfg = config;
    return [coupling, nu, horizon, cfg, cache, c2](const Vector& x, double t) {
        const double tau = horizon - t;
        double total = 0.0;
        for (Index i = 0; i < x.size(); ++i) {
            const double c = coupling(i, i);
            const double v = nu[i];
            const Scalar1dSolution* found = nullptr;
            {
                std::lock_guard<std::mutex> lock(cache->mutex);
                for (const auto& e : cache->entries)
                    if (e->c == c && e->nu == v && std::abs(e->tau - tau) < 1e-12) {
                        found = &e->sol;
                        break;
                    }
                if (!found) {
                    const int steps = std::max(
                        1, static_cast<int>(std::lround(cfg.time_steps * tau / horizon)));
                    cache->entries.push_back(std::make_unique<Entry>(
                        Entry{c, v, tau, solve_scalar_double_well(c, v, tau, cfg, steps, c2)}));
                    found = &cache->entries.back()->sol;
                }
            }
            total += interp_log(*found, x[i]);
        }
        return total;
    };
}

MetricReport compute_metrics(const BackwardSolution& solution, const PathEnsemble& paths,
                             const PdeProblem& problem, const ReferenceBundle& references) {
    MetricReport report;
    const TimeGrid& grid = solution.grid();
    const int n_steps = grid.steps;
    const Index K = paths.count;
    const double dt = grid.dt();

    report.value_at_origin = solution.value(0, problem.x0);
    for (const auto& d : solution.diagnostics) report.wall_seconds += d.wall_seconds;

    if (references.origin_value) {
        const double ref = *references.origin_value;
        const double err = std::abs(report.value_at_origin - ref);
        report.rmse = err;
        if (ref != 0.0) {
            report.relative_error = err / std::abs(ref);
        } else {
            report.relative_error = err;
            report.relative_is_absolute = true;
        }
    } else {
        report.rmse = std::numeric_limits<double>::quiet_NaN();
        report.relative_error = std::numeric_limits<double>::quiet_NaN();
    }

    // PDE loss over n = 1..N (n = 0 excluded: the fit there is the
    // regularized minimum-norm solution on identical samples).
    std::vector<double> residual_sums(static_cast<std::size_t>(n_steps), 0.0);
    for (int n = 1; n <= n_steps; ++n) {
        const Matrix& xs = paths.state(n);
        const double t_n = grid.node(n);
        const SmoothFunction field =
            n < n_steps ? solution.step(n).as_field() : solution.terminal();
        Vector sq(K);
#pragma omp parallel for schedule(static)
        for (Index k = 0; k < K; ++k) {
            const Vector x = xs.col(k);
            double dt_v;
            if (n < n_steps)
                dt_v = (solution.value(n + 1, x) - solution.value(n, x)) / dt;
            else
                dt_v = (solution.value(n, x) - solution.value(n - 1, x)) / dt;

            const double value = field.value(x);
            const Vector grad = field.gradient(x);
            const double lap_part = problem.diffusion.half_second_order(x, t_n, field);
            const Vector z = problem.diffusion.apply_sigma_t(x, t_n, grad);
            const double drift_part = problem.drift(x, t_n).dot(grad);
            const double h = problem.nonlinearity(x, t_n, value, z);
            const double residual = dt_v + lap_part + drift_part + h;
            sq[k] = residual * residual;
        }
        residual_sums[static_cast<std::size_t>(n) - 1] = sq.sum();
    }
    double total = 0.0;
    for (double s : residual_sums) total += s;
    report.pde_loss = total / (static_cast<double>(K) * n_steps);

    if (references.full) {
        double acc = 0.0;
        bool ok = true;
        for (int n = 0; n <= n_steps && ok; ++n) {
            const Matrix& xs = paths.state(n);
            const double t_n = grid.node(n);
            Vector vals(K);
#pragma omp parallel for schedule(static)
            for (Index k = 0; k < K; ++k) {
                const double ref = references.full(xs.col(k), t_n);
                vals[k] = ref != 0.0
                              ? std::abs((solution.value(n, xs.col(k)) - ref) / ref)
                              : std::numeric_limits<double>::infinity();
            }
            const double s = vals.sum();
            if (!std::isfinite(s)) ok = false;
            acc += s;
        }
        if (ok)
            report.relative_reference_loss = acc / (static_cast<double>(K) * (n_steps + 1));
    }
    return report;
}

}  // namespace ttbsde
