#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "ttbsde/experiment.hpp"

namespace fs = std::filesystem;
using namespace ttbsde;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitRun = 3;
constexpr int kExitReference = 4;

int resolve_threads(int cli_threads) {
    if (const char* env = std::getenv("TTBSDE_THREADS")) {
        const int n = std::atoi(env);
        if (n > 0) return n;
    }
    return cli_threads;
}

int cmd_run(const std::string& config_path, std::uint64_t seed_override, int runs_override,
            const std::string& loss_override, const std::string& out_override, int threads) {
    ExperimentConfig config;
    try {
        config = load_experiment_config(config_path);
        if (seed_override) config.benchmark.seed = seed_override;
        if (runs_override > 0) config.runs = runs_override;
        if (!loss_override.empty()) config.kinds = {loss_kind_from_string(loss_override)};
        if (!out_override.empty()) config.out_dir = out_override;
        if (config.out_dir.empty()) config.out_dir = "ttbsde_out";
        const int t = resolve_threads(threads);
        if (t > 0) config.threads = t;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    }

    ExperimentResult result;
    try {
        result = run_experiment(config);
        emit_report(result, ReportFormat::Csv);
        emit_report(result, ReportFormat::Json);
        emit_report(result, ReportFormat::MarkdownTable);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "run failed: " << e.what() << "\n";
        return kExitRun;
    }

    for (const auto& a : result.aggregates) {
        std::cout << to_string(a.kind) << ": E_rel mean " << a.rel_mean << ", E_PDE mean "
                  << a.pde_mean << ", successes " << a.successes << "/" << config.runs << "\n";
    }
    for (const auto& r : result.runs)
        if (!r.ok)
            std::cerr << "run " << r.run_index << " (" << to_string(r.kind)
                      << ") failed: " << r.error << "\n";
    std::cout << "reports written to " << config.out_dir << "\n";
    return result.all_ok ? kExitOk : kExitRun;
}

int cmd_reference(const std::string& problem, int dim, Index samples, std::uint64_t seed,
                  double horizon, int inner_steps, bool coupled, double coupling_scale,
                  double nu, double sigma, const std::string& out_file,
                  const std::string& key) {
    try {
        ReferenceEstimate est;
        if (problem == "hjb_log") {
            est = hjb_reference(Vector::Zero(dim), 0.0, horizon, samples, seed);
        } else if (problem == "hjb_double_well") {
            const Vector x0 = Vector::Constant(dim, -1.0);
            const Vector nus = Vector::Constant(dim, nu);
            if (coupled) {
                const Matrix c = sample_double_well_coupling(dim, seed);
                est = double_well_reference_mc(c, nus, x0, 0.0, horizon, samples, seed,
                                               inner_steps, sigma);
            } else {
                const Matrix c = coupling_scale * Matrix::Identity(dim, dim);
                auto fd = double_well_reference_factorized(c, nus, x0, 0.0, horizon, {}, sigma);
                est.value = fd.value;
                est.std_error = fd.richardson_delta;
            }
        } else {
            std::cerr << "no reference oracle for problem '" << problem << "'\n";
            return kExitReference;
        }
        std::cout << problem << " d=" << dim << " t=0: " << est.value << " +/- "
                  << est.std_error << " (M=" << samples << ", seed=" << seed << ")\n";
        if (!out_file.empty()) {
            nlohmann::json j = nlohmann::json::object();
            if (fs::exists(out_file)) {
                std::ifstream in(out_file);
                in >> j;
            }
            const std::string entry_key =
                key.empty() ? problem + "_d" + std::to_string(dim) : key;
            j[entry_key] = {{"value", est.value},
                            {"std_error", est.std_error},
                            {"M", samples},
                            {"seed", seed},
                            {"horizon", horizon}};
            std::ofstream out(out_file);
            out << j.dump(2) << "\n";
            std::cout << "frozen as '" << entry_key << "' in " << out_file << "\n";
        }
        return kExitOk;
    } catch (const std::exception& e) {
        std::cerr << "reference oracle failed: " << e.what() << "\n";
        return kExitReference;
    }
}

// Variance sweep on the closed-form heat diagnostic: V(x,t) =
// x^2 + 2(T - t) solves the 1-d problem with sigma = sqrt(2), h = 0.
int cmd_diagnose(const std::string& config_path, int threads) {
    nlohmann::json j;
    try {
        std::ifstream in(config_path);
        if (!in) throw ConfigError("cannot open config file: " + config_path);
        in >> j;
    } catch (const std::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    }
    const int t = resolve_threads(threads);
    if (t > 0) set_threads(t);

    const auto diag = j.value("diagnostics", nlohmann::json::object());
    std::vector<double> dts = diag.value("dts", std::vector<double>{1e-1, 1e-2, 1e-3});
    const Index paths = diag.value("paths", Index(10000));
    const std::uint64_t seed = diag.value("seed", std::uint64_t(1));
    const double x0 = diag.value("x0", 1.0);
    const double horizon = diag.value("horizon", 1.0);

    PdeProblem p;
    p.id = "heat1d";
    p.dim = 1;
    p.horizon = horizon;
    p.x0 = Vector::Constant(1, x0);
    p.drift = [](const Vector&, double) { return Vector::Zero(1); };
    p.diffusion = DiffusionSpec::scaled_identity(std::sqrt(2.0));
    p.nonlinearity = [](const Vector&, double, double, const Vector&) { return 0.0; };
    SmoothFunction g;
    g.value = [](const Vector& x) { return x[0] * x[0]; };
    g.gradient = [](const Vector& x) { return Vector(2.0 * x); };
    g.laplacian = [](const Vector&) { return 2.0; };
    g.hess_quadratic = [](const Vector&, const Vector& v) { return 2.0 * v.squaredNorm(); };
    g.weighted_laplacian = [](const Vector&, const Vector& w) { return 2.0 * w.sum(); };
    p.terminal = g;

    TimeField exact;
    exact.value = [horizon](const Vector& x, double tt) {
        return x[0] * x[0] + 2.0 * (horizon - tt);
    };
    exact.gradient = [](const Vector& x, double) { return Vector(2.0 * x); };
    SmoothFunction psi;
    psi.value = [](const Vector& x) { return x[0]; };
    psi.gradient = [](const Vector&) { return Vector::Ones(1); };

    std::cout << "dt,kind,mean_residual_sq,var_residual,grad_estimator_variance\n";
    try {
        for (double dt : dts) {
            const int steps = std::max(1, static_cast<int>(std::lround(horizon / dt)));
            TimeGrid grid{horizon, steps};
            auto paths_ens = simulate(p, grid, paths, seed);
            const int n = steps / 2;
            for (auto kind :
                 {LossKind::ProjExplicit, LossKind::BsdeExplicit, LossKind::BsdeImplicit}) {
                auto stats = loss_statistics_at(exact, kind, n, paths_ens, grid, p);
                std::cout << dt << "," << to_string(kind) << "," << stats.mean_sq << ","
                          << stats.var_residual << ",";
                if (kind == LossKind::BsdeImplicit) {
                    std::cout << "\n";
                    continue;
                }
                auto grad = gateaux_variance_at(exact, kind, n, paths_ens, grid, p, psi);
                std::cout << grad.estimator_variance << "\n";
            }
        }
    } catch (const std::exception& e) {
        std::cerr << "diagnostics failed: " << e.what() << "\n";
        return kExitRun;
    }
    return kExitOk;
}

int cmd_inspect(const std::string& dir) {
    try {
        std::ifstream mf(fs::path(dir) / "manifest.json");
        if (!mf) throw std::runtime_error("no manifest.json in " + dir);
        nlohmann::json manifest;
        mf >> manifest;
        std::cout << "problem:     " << manifest.value("problem", std::string("?")) << "\n";
        std::cout << "loss kind:   " << manifest.value("kind", std::string("?")) << "\n";
        std::cout << "seed:        " << manifest.value("seed", 0) << "\n";
        std::cout << "config hash: " << manifest.value("config_hash", std::string("?")) << "\n";
        const auto grid = manifest.at("grid");
        std::cout << "grid:        T = " << grid.at("T").get<double>()
                  << ", N = " << grid.at("N").get<int>() << "\n";
        std::cout << "steps:\n";
        for (const auto& s : manifest.at("steps")) {
            std::cout << "  n=" << s.at("step").get<int>()
                      << " loss=" << s.at("final_loss").get<double>()
                      << " sweeps=" << s.at("sweeps").get<int>() << " ranks=[";
            bool first = true;
            for (const auto& r : s.at("ranks")) {
                std::cout << (first ? "" : ",") << r.get<int>();
                first = false;
            }
            std::cout << "] outer=" << s.at("outer_iterations").get<int>()
                      << (s.at("outer_converged").get<bool>() ? "" : " (not converged)")
                      << "\n";
        }
        return kExitOk;
    } catch (const std::exception& e) {
        std::cerr << "inspect failed: " << e.what() << "\n";
        return kExitRun;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Backward BSDE solver with functional tensor trains"};
    app.require_subcommand(1);

    std::string config_path, out_dir, loss_name;
    std::uint64_t seed = 0;
    int runs = 0, threads = 0;

    auto* run = app.add_subcommand("run", "Run a benchmark experiment from a JSON config");
    run->add_option("config", config_path, "experiment config file")->required();
    run->add_option("--seed", seed, "override the base seed");
    run->add_option("--runs", runs, "override the run count");
    run->add_option("--loss", loss_name,
                    "restrict to one loss kind (proj_explicit | bsde_explicit | bsde_implicit)");
    run->add_option("--out", out_dir, "output directory");
    run->add_option("--threads", threads, "worker threads (TTBSDE_THREADS overrides)");

    std::string ref_problem = "hjb_log", ref_out, ref_key;
    int ref_dim = 10, ref_inner = 120;
    Index ref_samples = 1000000;
    std::uint64_t ref_seed = 1;
    double ref_horizon = 1.0, ref_scale = 0.1, ref_nu = 0.05, ref_sigma = 1.4142135623730951;
    bool ref_coupled = false;
    auto* ref = app.add_subcommand("reference", "Evaluate a reference oracle at (x0, 0)");
    ref->add_option("problem", ref_problem, "hjb_log | hjb_double_well")->required();
    ref->add_option("--dimension", ref_dim, "spatial dimension");
    ref->add_option("--samples", ref_samples, "Monte Carlo sample count");
    ref->add_option("--seed", ref_seed, "oracle seed");
    ref->add_option("--horizon", ref_horizon, "time horizon T");
    ref->add_option("--inner-steps", ref_inner, "Euler steps for the double-well oracle");
    ref->add_flag("--coupled", ref_coupled, "coupled double-well matrix C = Id + noise");
    ref->add_option("--coupling-scale", ref_scale, "diagonal C scale");
    ref->add_option("--nu", ref_nu, "terminal weight nu");
    ref->add_option("--sigma", ref_sigma, "diffusion scale (sigma = sigma * Id)");
    ref->add_option("--out", ref_out, "freeze the estimate into this JSON file");
    ref->add_option("--key", ref_key, "entry name in the frozen file");
    ref->add_option("--threads", threads, "worker threads");

    std::string diag_config;
    auto* diag = app.add_subcommand("diagnose-variance",
                                    "Loss and gradient variance sweeps at a known solution");
    diag->add_option("config", diag_config, "config with a diagnostics section")->required();
    diag->add_option("--threads", threads, "worker threads");

    std::string inspect_dir;
    auto* ins = app.add_subcommand("inspect", "Summarize a stored solution directory");
    ins->add_option("dir", inspect_dir, "solution directory")->required();

    CLI11_PARSE(app, argc, argv);

    if (run->parsed()) return cmd_run(config_path, seed, runs, loss_name, out_dir, threads);
    if (ref->parsed()) {
        const int t = resolve_threads(threads);
        if (t > 0) set_threads(t);
        return cmd_reference(ref_problem, ref_dim, ref_samples, ref_seed, ref_horizon,
                             ref_inner, ref_coupled, ref_scale, ref_nu, ref_sigma, ref_out,
                             ref_key);
    }
    if (diag->parsed()) return cmd_diagnose(diag_config, threads);
    if (ins->parsed()) return cmd_inspect(inspect_dir);
    return kExitConfig;
}
