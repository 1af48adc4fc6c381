#include "ttbsde/bsde.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace ttbsde {

const char* to_string(LossKind kind) {
    switch (kind) {
        case LossKind::ProjExplicit: return "proj_explicit";
        case LossKind::BsdeExplicit: return "bsde_explicit";
        case LossKind::BsdeImplicit: return "bsde_implicit";
    }
    return "?";
}

LossKind loss_kind_from_string(const std::string& name) {
    if (name == "proj_explicit") return LossKind::ProjExplicit;
    if (name == "bsde_explicit") return LossKind::BsdeExplicit;
    if (name == "bsde_implicit") return LossKind::BsdeImplicit;
    throw ConfigError("unknown loss kind: " + name);
}

double StepFunction::value(const Vector& x) const {
    return fitted_ ? fitted_->evaluate(x) : terminal_->value(x);
}

Vector StepFunction::gradient(const Vector& x) const {
    return fitted_ ? fitted_->gradient(x) : terminal_->gradient(x);
}

double BackwardSolution::value(int n, const Vector& x) const {
    return n >= step_count() ? terminal_.value(x) : steps_[static_cast<std::size_t>(n)].evaluate(x);
}

Vector BackwardSolution::gradient(int n, const Vector& x) const {
    return n >= step_count() ? terminal_.gradient(x)
                             : steps_[static_cast<std::size_t>(n)].gradient(x);
}

StepFunction BackwardSolution::at(int n) const {
    if (n >= step_count()) return StepFunction(&terminal_);
    return StepFunction(&steps_[static_cast<std::size_t>(n)]);
}

StepTargets assemble_targets(LossKind kind, int n, const StepFunction& v_next,
                             const StepFunction* v_iterate, const PathEnsemble& paths,
                             const TimeGrid& grid, const PdeProblem& problem) {
    const Index K = paths.count;
    const int d = paths.dim;
    const double dt = grid.dt();
    const double sdt = std::sqrt(dt);
    const double t_n = grid.node(n);
    const double t_next = grid.node(n + 1);
    const Matrix& x_cur = paths.state(n);
    const Matrix& x_next = paths.state(n + 1);
    const Matrix& xi = paths.increment(n);

    if (kind == LossKind::BsdeImplicit && v_iterate == nullptr)
        throw ConfigError("implicit targets need a frozen iterate");

    StepTargets out;
    out.y.resize(K);
    out.xi = Matrix::Zero(d, K);
    const bool bsde = kind != LossKind::ProjExplicit;

#pragma omp parallel for schedule(static)
    for (Index k = 0; k < K; ++k) {
        const Vector xn1 = x_next.col(k);
        const double v1 = v_next.value(xn1);
        double h;
        if (kind == LossKind::BsdeImplicit) {
            const Vector xn = x_cur.col(k);
            const double vi = v_iterate->value(xn);
            const Vector z = problem.diffusion.apply_sigma_t(xn, t_n, v_iterate->gradient(xn));
            h = problem.nonlinearity(xn, t_n, vi, z);
        } else {
            const Vector z = problem.diffusion.apply_sigma_t(xn1, t_next, v_next.gradient(xn1));
            h = problem.nonlinearity(xn1, t_next, v1, z);
        }
        out.y[k] = h * dt + v1;
        if (bsde) {
            const Vector xn = x_cur.col(k);
            out.xi.col(k) = sdt * problem.diffusion.apply_sigma(xn, t_n, xi.col(k));
        }
    }
    return out;
}

namespace {

// Basis domains from per-dimension sample quantiles, padded; a collapsed
// range (all samples equal, the n = 0 case) falls back to a unit pad.
std::vector<std::pair<double, double>> step_domains(const Matrix& samples,
                                                    const SolverConfig& config) {
    const int d = static_cast<int>(samples.rows());
    const Index K = samples.cols();
    std::vector<std::pair<double, double>> domains;
    domains.reserve(static_cast<std::size_t>(d));
    std::vector<double> buf(static_cast<std::size_t>(K));
    for (int j = 0; j < d; ++j) {
        for (Index k = 0; k < K; ++k) buf[static_cast<std::size_t>(k)] = samples(j, k);
        std::sort(buf.begin(), buf.end());
        const auto pick = [&](double q) {
            const auto idx = static_cast<std::size_t>(
                std::clamp<double>(std::floor(q * static_cast<double>(K - 1)), 0.0,
                                   static_cast<double>(K - 1)));
            return buf[idx];
        };
        const double lo = pick(config.quantile_low);
        const double hi = pick(config.quantile_high);
        double pad = config.domain_pad * (hi - lo);
        if (hi - lo < 1e-8) pad = 1.0;
        domains.emplace_back(lo - pad, hi + pad);
    }
    return domains;
}

RankTuple clamp_ranks(const RankTuple& requested, int dim, int basis_size) {
    if (static_cast<int>(requested.size()) != dim - 1)
        throw ConfigError("fixed rank tuple must have d-1 entries");
    Index top = 1;
    for (Index r : requested) top = std::max(top, r);
    const RankTuple cap = feasible_ranks(dim, basis_size, top);
    RankTuple out(requested.size());
    for (std::size_t i = 0; i < requested.size(); ++i) out[i] = std::min(requested[i], cap[i]);
    return out;
}

}  // namespace

FunctionalTT solve_step(LossKind kind, int n, const StepFunction& v_next,
                        const FunctionalTT* warm_model, const PathEnsemble& paths,
                        const TimeGrid& grid, const PdeProblem& problem,
                        const SolverConfig& config, StepDiagnostics* diag) {
    const auto t_start = std::chrono::steady_clock::now();
    const Matrix& samples = paths.state(n);

    BasisSet basis =
        BasisSet::make(config.family, problem.dim, config.degree, step_domains(samples, config));

    std::optional<ExtraTerm> extra;
    if (config.als.include_terminal) {
        double coeff = 0.0;
        if (config.als.warm_start && warm_model && warm_model->extra())
            coeff = warm_model->extra()->coeff;
        extra = ExtraTerm{problem.terminal, coeff};
    }

    AlsConfig als = config.als;
    if (!als.rank_policy.adaptive)
        als.rank_policy.fixed = clamp_ranks(als.rank_policy.fixed, problem.dim, basis.size());

    const std::uint64_t step_seed =
        paths.seed ^ (0x517cc1b727220a95ULL * static_cast<std::uint64_t>(n + 1));
    FunctionalTT init = [&]() {
        if (!als.rank_policy.adaptive && als.warm_start && warm_model &&
            warm_model->tt().ranks() == als.rank_policy.fixed)
            return FunctionalTT(warm_model->tt(), basis, extra);
        const RankTuple ranks = als.rank_policy.adaptive
                                    ? feasible_ranks(problem.dim, basis.size(), 1)
                                    : als.rank_policy.fixed;
        return random_functional_tt(basis, ranks, step_seed, extra);
    }();

    FitDiagnostics fit_diag;
    auto fit_with_policy = [&](const RegressionProblem& reg, const FunctionalTT& start,
                               bool gradient) {
        if (als.rank_policy.adaptive) return adapt_rank(start, reg, als, &fit_diag);
        return gradient ? als_fit_grad(reg, start, als, &fit_diag)
                        : als_fit(reg, start, als, &fit_diag);
    };

    FunctionalTT result = init;
    int outer_used = 1;
    bool outer_converged = true;

    if (kind == LossKind::BsdeImplicit) {
        StepTargets targets = assemble_targets(kind, n, v_next, &v_next, paths, grid, problem);
        Vector prev_vals;
        bool have_prev = false;
        for (int outer = 0; outer < config.implicit.max_outer; ++outer) {
            outer_used = outer + 1;
            RegressionProblem reg{samples, targets.y, targets.xi};
            result = outer == 0 ? fit_with_policy(reg, init, /*gradient=*/true)
                                : als_fit_grad(reg, result, als, &fit_diag);
            StepFunction iterate(&result);
            StepTargets next_targets =
                assemble_targets(kind, n, v_next, &iterate, paths, grid, problem);
            if ((next_targets.y - targets.y).lpNorm<Eigen::Infinity>() <
                config.implicit.outer_tol)
                break;  // target fixed point; nothing can change

            Vector vals = result.evaluate_many(samples);
            if (have_prev &&
                (vals - prev_vals).lpNorm<Eigen::Infinity>() < config.implicit.outer_tol)
                break;
            prev_vals = std::move(vals);
            have_prev = true;
            targets = std::move(next_targets);
            if (outer + 1 == config.implicit.max_outer) outer_converged = false;
        }
    } else {
        StepTargets targets = assemble_targets(kind, n, v_next, nullptr, paths, grid, problem);
        RegressionProblem reg{samples, targets.y, {}};
        if (kind == LossKind::BsdeExplicit) reg.directions = std::move(targets.xi);
        result = fit_with_policy(reg, init, kind == LossKind::BsdeExplicit);
    }

    if (diag) {
        diag->step = n;
        diag->final_loss = fit_diag.final_loss;
        diag->sweeps = fit_diag.sweeps_used;
        diag->ranks = result.tt().ranks();
        diag->outer_iterations = outer_used;
        diag->outer_converged = outer_converged;
        diag->extrapolation_events = result.extrapolation_count();
        diag->wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    }
    return result;
}

BackwardSolution backward_solve(LossKind kind, const PdeProblem& problem, const TimeGrid& grid,
                                Index paths_count, std::uint64_t seed,
                                const SolverConfig& config) {
    PathEnsemble paths = simulate(problem, grid, paths_count, seed);
    const int n_steps = grid.steps;

    std::vector<StepDiagnostics> diags(static_cast<std::size_t>(n_steps));
    std::vector<FunctionalTT> reversed;
    reversed.reserve(static_cast<std::size_t>(n_steps));
    const FunctionalTT* warm = nullptr;
    for (int n = n_steps - 1; n >= 0; --n) {
        StepFunction v_next =
            reversed.empty() ? StepFunction(&problem.terminal) : StepFunction(&reversed.back());
        try {
            reversed.push_back(solve_step(kind, n, v_next, warm, paths, grid, problem, config,
                                          &diags[static_cast<std::size_t>(n)]));
        } catch (const std::exception& e) {
            throw std::runtime_error("backward step " + std::to_string(n) + ": " + e.what());
        }
        warm = &reversed.back();
    }

    std::vector<FunctionalTT> fitted;
    fitted.reserve(static_cast<std::size_t>(n_steps));
    for (int n = n_steps - 1; n >= 0; --n)
        fitted.push_back(std::move(reversed[static_cast<std::size_t>(n)]));

    BackwardSolution solution(std::move(fitted), problem.terminal, grid, kind, seed);
    solution.diagnostics = std::move(diags);
    return solution;
}

LossStats loss_statistics_at(const TimeField& reference, LossKind kind, int n,
                             const PathEnsemble& paths, const TimeGrid& grid,
                             const PdeProblem& problem) {
    const Index K = paths.count;
    const double dt = grid.dt();
    const double sdt = std::sqrt(dt);
    const double t_n = grid.node(n);
    const double t_next = grid.node(n + 1);
    const Matrix& x_cur = paths.state(n);
    const Matrix& x_next = paths.state(n + 1);
    const Matrix& xi = paths.increment(n);

    Vector residuals(K);
#pragma omp parallel for schedule(static)
    for (Index k = 0; k < K; ++k) {
        const Vector xn = x_cur.col(k);
        const Vector xn1 = x_next.col(k);
        const double v0 = reference.value(xn, t_n);
        const double v1 = reference.value(xn1, t_next);
        double h;
        if (kind == LossKind::BsdeImplicit) {
            const Vector z = problem.diffusion.apply_sigma_t(xn, t_n, reference.gradient(xn, t_n));
            h = problem.nonlinearity(xn, t_n, v0, z);
        } else {
            const Vector z =
                problem.diffusion.apply_sigma_t(xn1, t_next, reference.gradient(xn1, t_next));
            h = problem.nonlinearity(xn1, t_next, v1, z);
        }
        double r = v0 - h * dt - v1;
        if (kind != LossKind::ProjExplicit) {
            // sigma^T grad V . xi = grad V . sigma xi
            const Vector sig_xi = problem.diffusion.apply_sigma(xn, t_n, xi.col(k));
            r += reference.gradient(xn, t_n).dot(sig_xi) * sdt;
        }
        residuals[k] = r;
    }

    LossStats stats;
    stats.mean_residual = residuals.mean();
    stats.var_residual =
        (residuals.array() - stats.mean_residual).square().sum() / static_cast<double>(K - 1);
    const Vector sq = residuals.array().square();
    stats.mean_sq = sq.mean();
    stats.var_sq = (sq.array() - stats.mean_sq).square().sum() / static_cast<double>(K - 1);
    return stats;
}

GradientVarStats gateaux_variance_at(const TimeField& reference, LossKind kind, int n,
                                     const PathEnsemble& paths, const TimeGrid& grid,
                                     const PdeProblem& problem, const SmoothFunction& psi) {
    if (kind == LossKind::BsdeImplicit)
        throw ConfigError("gateaux_variance_at supports the explicit kinds");
    const Index K = paths.count;
    const double dt = grid.dt();
    const double sdt = std::sqrt(dt);
    const double t_n = grid.node(n);
    const double t_next = grid.node(n + 1);
    const Matrix& x_cur = paths.state(n);
    const Matrix& x_next = paths.state(n + 1);
    const Matrix& xi = paths.increment(n);

    Vector terms(K);
#pragma omp parallel for schedule(static)
    for (Index k = 0; k < K; ++k) {
        const Vector xn = x_cur.col(k);
        const Vector xn1 = x_next.col(k);
        const double v0 = reference.value(xn, t_n);
        const double v1 = reference.value(xn1, t_next);
        const Vector z1 =
            problem.diffusion.apply_sigma_t(xn1, t_next, reference.gradient(xn1, t_next));
        const double h = problem.nonlinearity(xn1, t_next, v1, z1);
        double r = v0 - h * dt - v1;
        double deriv = psi.value(xn);
        if (kind == LossKind::BsdeExplicit) {
            const Vector sig_xi = problem.diffusion.apply_sigma(xn, t_n, xi.col(k));
            r += reference.gradient(xn, t_n).dot(sig_xi) * sdt;
            deriv += psi.gradient(xn).dot(sig_xi) * sdt;
        }
        terms[k] = r * deriv;
    }

    GradientVarStats stats;
    const double mean = terms.mean();
    stats.per_sample_variance =
        (terms.array() - mean).square().sum() / static_cast<double>(K - 1);
    stats.estimator_variance = 4.0 * stats.per_sample_variance / static_cast<double>(K);
    return stats;
}

void save_functional_tt(const FunctionalTT& f, std::ostream& out) {
    nlohmann::json header;
    header["family"] =
        f.basis().family() == BasisFamily::Monomial ? "monomial" : "h2_orthonormal";
    header["degree"] = f.basis().degree();
    std::vector<std::vector<double>> domains;
    for (int j = 0; j < f.dimension(); ++j) {
        const auto [a, b] = f.basis().domain(j);
        domains.push_back({a, b});
    }
    header["domains"] = domains;
    header["extra_coeff"] = f.extra() ? f.extra()->coeff : 0.0;
    header["has_extra"] = f.extra().has_value();
    out << header.dump() << "\n";
    save_tensor_train(f.tt(), out);
}

FunctionalTT load_functional_tt(std::istream& in, const SmoothFunction* extra) {
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("missing functional TT header");
    const auto header = nlohmann::json::parse(line);
    TensorTrain tt = load_tensor_train(in);

    const std::string family_name = header.at("family").get<std::string>();
    const BasisFamily family =
        family_name == "monomial" ? BasisFamily::Monomial : BasisFamily::H2Orthonormal;
    std::vector<std::pair<double, double>> domains;
    for (const auto& pair : header.at("domains"))
        domains.emplace_back(pair.at(0).get<double>(), pair.at(1).get<double>());
    BasisSet basis = BasisSet::make(family, tt.order(), header.at("degree").get<int>(), domains);

    std::optional<ExtraTerm> extra_term;
    if (header.value("has_extra", false)) {
        if (!extra)
            throw std::runtime_error("stored model has an extra term; supply its function");
        extra_term = ExtraTerm{*extra, header.at("extra_coeff").get<double>()};
    }
    return FunctionalTT(std::move(tt), std::move(basis), std::move(extra_term));
}

void save_solution(const BackwardSolution& solution, const std::string& problem_id,
                   const std::string& config_hash, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json manifest;
    manifest["problem"] = problem_id;
    manifest["kind"] = to_string(solution.kind());
    manifest["config_hash"] = config_hash;
    manifest["seed"] = solution.seed();
    manifest["grid"] = {{"T", solution.grid().horizon}, {"N", solution.grid().steps}};
    nlohmann::json steps = nlohmann::json::array();
    // Wall times stay out of the manifest so identical runs serialize
    // identically.
    for (const auto& d : solution.diagnostics) {
        steps.push_back({{"step", d.step},
                         {"final_loss", d.final_loss},
                         {"sweeps", d.sweeps},
                         {"ranks", d.ranks},
                         {"outer_iterations", d.outer_iterations},
                         {"outer_converged", d.outer_converged},
                         {"extrapolation_events", d.extrapolation_events}});
    }
    manifest["steps"] = steps;
    std::ofstream mf(fs::path(dir) / "manifest.json");
    mf << manifest.dump(2) << "\n";

    char name[32];
    for (int n = 0; n < solution.step_count(); ++n) {
        std::snprintf(name, sizeof(name), "step_%04d.ftt", n);
        std::ofstream out(fs::path(dir) / name, std::ios::binary);
        save_functional_tt(solution.step(n), out);
    }
}

std::vector<FunctionalTT> load_solution_steps(const std::string& dir,
                                              const SmoothFunction* extra) {
    namespace fs = std::filesystem;
    std::ifstream mf(fs::path(dir) / "manifest.json");
    if (!mf) throw std::runtime_error("no manifest.json in " + dir);
    nlohmann::json manifest;
    mf >> manifest;
    const int n_steps = manifest.at("grid").at("N").get<int>();

    std::vector<FunctionalTT> steps;
    steps.reserve(static_cast<std::size_t>(n_steps));
    char name[32];
    for (int n = 0; n < n_steps; ++n) {
        std::snprintf(name, sizeof(name), "step_%04d.ftt", n);
        std::ifstream in(fs::path(dir) / name, std::ios::binary);
        if (!in) throw std::runtime_error(std::string("missing ") + name + " in " + dir);
        steps.push_back(load_functional_tt(in, extra));
    }
    return steps;
}

}  // namespace ttbsde
