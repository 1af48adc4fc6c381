#include "ttbsde/experiment.hpp"

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace ttbsde {

namespace fs = std::filesystem;
using nlohmann::json;

BuiltProblem build_problem(const BenchmarkSpec& spec) {
    BuiltProblem out;
    if (spec.problem_id == "hjb_log") {
        out.problem = make_hjb_log(spec.dim);
    } else if (spec.problem_id == "hjb_double_well") {
        out.dw_coupling = spec.dw_coupled
                              ? sample_double_well_coupling(spec.dim, spec.seed)
                              : Matrix(spec.dw_coupling_scale *
                                       Matrix::Identity(spec.dim, spec.dim));
        out.dw_nu = Vector::Constant(spec.dim, spec.dw_nu);
        out.problem = make_double_well(out.dw_coupling, out.dw_nu, spec.dw_sigma);
    } else if (spec.problem_id == "cir") {
        const Vector x0 = Vector::Constant(spec.dim, spec.cir_x0);
        auto cir = make_cir(spec.dim, spec.seed, spec.cir_diffusion, spec.cir_floor, &x0);
        out.problem = std::move(cir.problem);
        out.cir_clamps = std::move(cir.clamp_events);
    } else {
        throw ConfigError("unknown problem id: " + spec.problem_id);
    }
    out.problem.horizon = spec.grid.horizon;
    return out;
}

namespace {

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
    if (!j.contains(key)) return fallback;
    return j.at(key).get<T>();
}

SolverConfig parse_solver(const json& j) {
    SolverConfig s;
    const std::string family = get_or<std::string>(j, "family", "h2_orthonormal");
    if (family == "monomial")
        s.family = BasisFamily::Monomial;
    else if (family == "h2_orthonormal")
        s.family = BasisFamily::H2Orthonormal;
    else
        throw ConfigError("unknown basis family: " + family);
    s.degree = get_or<int>(j, "degree", 0);
    if (s.degree < 0) throw ConfigError("degree must be >= 0");

    s.als.delta = get_or<double>(j, "delta", 1e-6);
    s.als.max_sweeps = get_or<int>(j, "max_sweeps", 15);
    s.als.sweep_tolerance = get_or<double>(j, "sweep_tolerance", 1e-8);
    s.als.include_terminal = get_or<bool>(j, "include_terminal", false);
    s.als.warm_start = get_or<bool>(j, "warm_start", true);
    if (s.als.delta < 0 || s.als.max_sweeps < 1)
        throw ConfigError("solver needs delta >= 0 and max_sweeps >= 1");

    if (get_or<bool>(j, "adaptive", false)) {
        s.als.rank_policy = RankPolicy::adaptive_ranks(
            get_or<Index>(j, "max_rank", 6), get_or<double>(j, "growth_threshold", 1e-2));
    } else {
        s.als.rank_policy.adaptive = false;
        // fixed ranks resolved per dimension at run time
        s.als.rank_policy.max_rank = get_or<Index>(j, "rank", 1);
    }
    s.implicit.max_outer = get_or<int>(j, "implicit_max_outer", 20);
    s.implicit.outer_tol = get_or<double>(j, "implicit_outer_tol", 1e-8);
    return s;
}

}  // namespace

namespace {
ExperimentConfig parse_config_impl(const json& j, const std::string& base_dir);
}

ExperimentConfig parse_experiment_config(const std::string& json_text,
                                         const std::string& base_dir) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    try {
        return parse_config_impl(j, base_dir);
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config field error: ") + e.what());
    }
}

namespace {
ExperimentConfig parse_config_impl(const json& j, const std::string& base_dir) {
    ExperimentConfig c;
    auto& b = c.benchmark;
    b.problem_id = j.at("problem").get<std::string>();
    b.dim = j.at("dimension").get<int>();
    b.grid.horizon = j.at("horizon").get<double>();
    b.grid.steps = j.at("steps").get<int>();
    b.paths = j.at("paths").get<Index>();
    b.seed = get_or<std::uint64_t>(j, "base_seed", 1);
    if (b.dim < 1 || b.grid.steps < 1 || b.paths < 1 || b.grid.horizon <= 0)
        throw ConfigError("dimension, steps, paths must be >= 1 and horizon > 0");

    b.solver = parse_solver(j.value("solver", json::object()));
    if (!b.solver.als.rank_policy.adaptive) {
        b.solver.als.rank_policy.fixed =
            RankTuple(static_cast<std::size_t>(std::max(0, b.dim - 1)),
                      b.solver.als.rank_policy.max_rank);
    }

    if (j.contains("problem_params")) {
        const auto& pp = j.at("problem_params");
        b.dw_coupled = get_or<bool>(pp, "coupled", false);
        b.dw_coupling_scale = get_or<double>(pp, "coupling_scale", 0.1);
        b.dw_nu = get_or<double>(pp, "nu", 0.05);
        b.dw_sigma = get_or<double>(pp, "sigma", 1.4142135623730951);
        const std::string cd = get_or<std::string>(pp, "cir_diffusion", "rank_one_floor");
        if (cd == "rank_one_floor")
            b.cir_diffusion = CirDiffusion::RankOneFloor;
        else if (cd == "diagonal")
            b.cir_diffusion = CirDiffusion::Diagonal;
        else
            throw ConfigError("unknown cir_diffusion: " + cd);
        b.cir_floor = get_or<double>(pp, "cir_floor", 1e-6);
        b.cir_x0 = get_or<double>(pp, "x0", 1.0);
    }

    c.runs = get_or<int>(j, "runs", 1);
    if (c.runs < 1) throw ConfigError("runs must be >= 1");
    if (!j.contains("loss_kinds") || !j.at("loss_kinds").is_array() ||
        j.at("loss_kinds").empty())
        throw ConfigError("loss_kinds must be a non-empty array");
    for (const auto& name : j.at("loss_kinds"))
        c.kinds.push_back(loss_kind_from_string(name.get<std::string>()));

    if (j.contains("reference")) {
        const auto& r = j.at("reference");
        const std::string mode = get_or<std::string>(r, "policy", "none");
        if (mode == "frozen")
            c.reference.mode = ReferencePolicy::Mode::Frozen;
        else if (mode == "recompute")
            c.reference.mode = ReferencePolicy::Mode::Recompute;
        else if (mode == "none")
            c.reference.mode = ReferencePolicy::Mode::None;
        else
            throw ConfigError("unknown reference policy: " + mode);
        c.reference.samples = get_or<Index>(r, "samples", 1000000);
        c.reference.inner_steps = get_or<int>(r, "inner_steps", 120);
        c.reference.frozen_key = get_or<std::string>(r, "frozen_key", "");
        c.reference.attach_full = get_or<bool>(r, "attach_full", false);
        c.reference.seed = get_or<std::uint64_t>(r, "seed", 1);
        std::string file = get_or<std::string>(r, "frozen_file", "");
        if (!file.empty() && fs::path(file).is_relative() && !base_dir.empty())
            file = (fs::path(base_dir) / file).lexically_normal().string();
        c.reference.frozen_file = file;
    }

    if (j.contains("output")) {
        const auto& o = j.at("output");
        c.timing_in_csv = get_or<bool>(o, "timing_in_csv", false);
        c.save_solutions = get_or<bool>(o, "save_solutions", false);
        c.out_dir = get_or<std::string>(o, "directory", "");
    }
    c.threads = get_or<int>(j, "threads", 0);
    return c;
}
}  // namespace

ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_experiment_config(buf.str(), fs::path(path).parent_path().string());
}

namespace {

json config_to_json(const ExperimentConfig& c) {
    json j;
    j["problem"] = c.benchmark.problem_id;
    j["dimension"] = c.benchmark.dim;
    j["horizon"] = c.benchmark.grid.horizon;
    j["steps"] = c.benchmark.grid.steps;
    j["paths"] = c.benchmark.paths;
    j["base_seed"] = c.benchmark.seed;
    j["runs"] = c.runs;
    json kinds = json::array();
    for (auto k : c.kinds) kinds.push_back(to_string(k));
    j["loss_kinds"] = kinds;
    const auto& s = c.benchmark.solver;
    j["solver"] = {
        {"family", s.family == BasisFamily::Monomial ? "monomial" : "h2_orthonormal"},
        {"degree", s.degree},
        {"adaptive", s.als.rank_policy.adaptive},
        {"rank", s.als.rank_policy.adaptive ? Index(0)
                                            : (s.als.rank_policy.fixed.empty()
                                                   ? Index(1)
                                                   : s.als.rank_policy.fixed.front())},
        {"max_rank", s.als.rank_policy.max_rank},
        {"growth_threshold", s.als.rank_policy.growth_threshold},
        {"delta", s.als.delta},
        {"max_sweeps", s.als.max_sweeps},
        {"sweep_tolerance", s.als.sweep_tolerance},
        {"include_terminal", s.als.include_terminal},
        {"warm_start", s.als.warm_start},
        {"implicit_max_outer", s.implicit.max_outer},
        {"implicit_outer_tol", s.implicit.outer_tol},
    };
    j["problem_params"] = {
        {"coupled", c.benchmark.dw_coupled},
        {"coupling_scale", c.benchmark.dw_coupling_scale},
        {"nu", c.benchmark.dw_nu},
        {"sigma", c.benchmark.dw_sigma},
        {"cir_diffusion",
         c.benchmark.cir_diffusion == CirDiffusion::RankOneFloor ? "rank_one_floor" : "diagonal"},
        {"cir_floor", c.benchmark.cir_floor},
        {"x0", c.benchmark.cir_x0},
    };
    return j;
}

}  // namespace

std::string config_hash(const ExperimentConfig& config) {
    const std::string dump = config_to_json(config).dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : dump) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016" PRIx64, h);
    return buf;
}

ReferenceBundle resolve_reference(const ExperimentConfig& config) {
    ReferenceBundle refs;
    const auto& rp = config.reference;
    const auto& b = config.benchmark;

    if (rp.attach_full) {
        if (b.problem_id != "hjb_double_well" || b.dw_coupled)
            throw ConfigError("a full reference field needs the diagonal double well");
        refs.full = double_well_factorized_field(
            Matrix(b.dw_coupling_scale * Matrix::Identity(b.dim, b.dim)),
            Vector::Constant(b.dim, b.dw_nu), b.grid.horizon, {}, b.dw_sigma);
    }

    switch (rp.mode) {
        case ReferencePolicy::Mode::None:
            return refs;
        case ReferencePolicy::Mode::Frozen: {
            if (rp.frozen_file.empty() || rp.frozen_key.empty())
                throw ConfigError("frozen reference needs frozen_file and frozen_key");
            std::ifstream in(rp.frozen_file);
            if (!in) throw ConfigError("cannot open frozen oracle file: " + rp.frozen_file);
            json j;
            in >> j;
            if (!j.contains(rp.frozen_key))
                throw ConfigError("frozen oracle file has no entry " + rp.frozen_key);
            const auto& e = j.at(rp.frozen_key);
            refs.origin_value = e.at("value").get<double>();
            refs.origin_std_error = e.value("std_error", 0.0);
            return refs;
        }
        case ReferencePolicy::Mode::Recompute: {
            auto built = build_problem(b);
            if (b.problem_id == "hjb_log") {
                auto est = hjb_reference(built.problem.x0, 0.0, b.grid.horizon, rp.samples,
                                         rp.seed);
                refs.origin_value = est.value;
                refs.origin_std_error = est.std_error;
            } else if (b.problem_id == "hjb_double_well") {
                if (b.dw_coupled) {
                    auto est = double_well_reference_mc(
                        built.dw_coupling, built.dw_nu, built.problem.x0, 0.0, b.grid.horizon,
                        rp.samples, rp.seed, rp.inner_steps, b.dw_sigma);
                    refs.origin_value = est.value;
                    refs.origin_std_error = est.std_error;
                } else {
                    auto est = double_well_reference_factorized(
                        built.dw_coupling, built.dw_nu, built.problem.x0, 0.0, b.grid.horizon,
                        {}, b.dw_sigma);
                    refs.origin_value = est.value;
                    refs.origin_std_error = est.richardson_delta;
                }
            } else {
                throw ConfigError("no reference oracle for problem " + b.problem_id);
            }
            return refs;
        }
    }
    return refs;
}

ExperimentResult run_experiment(const ExperimentConfig& config) {
    if (config.threads > 0) set_threads(config.threads);
    ExperimentResult result;
    result.config = config;
    result.references = resolve_reference(config);

    auto built = build_problem(config.benchmark);
    const std::string hash = config_hash(config);

    for (LossKind kind : config.kinds) {
        for (int run = 0; run < config.runs; ++run) {
            RunRecord record;
            record.kind = kind;
            record.run_index = run;
            record.seed = config.benchmark.seed + static_cast<std::uint64_t>(run);
            try {
                auto solution =
                    backward_solve(kind, built.problem, config.benchmark.grid,
                                   config.benchmark.paths, record.seed,
                                   config.benchmark.solver);
                auto paths = simulate(built.problem, config.benchmark.grid,
                                      config.benchmark.paths, record.seed);
                record.metrics =
                    compute_metrics(solution, paths, built.problem, result.references);
                record.ok = true;
                if (config.save_solutions && !config.out_dir.empty()) {
                    const std::string dir =
                        (fs::path(config.out_dir) /
                         ("solution_" + std::string(to_string(kind)) + "_" +
                          std::to_string(run)))
                            .string();
                    save_solution(solution, config.benchmark.problem_id, hash, dir);
                }
            } catch (const std::exception& e) {
                record.ok = false;
                record.error = e.what();
                result.all_ok = false;
            }
            result.runs.push_back(std::move(record));
        }
    }

    // Aggregates over successful runs per kind.
    for (LossKind kind : config.kinds) {
        KindAggregate agg;
        agg.kind = kind;
        std::vector<const MetricReport*> ok_runs;
        for (const auto& r : result.runs)
            if (r.kind == kind && r.ok) ok_runs.push_back(&r.metrics);
        agg.successes = static_cast<int>(ok_runs.size());
        if (!ok_runs.empty()) {
            auto mean_std = [&](auto getter, double& mean, double& stdev) {
                double s = 0.0;
                for (auto* m : ok_runs) s += getter(*m);
                mean = s / static_cast<double>(ok_runs.size());
                double v = 0.0;
                for (auto* m : ok_runs) v += (getter(*m) - mean) * (getter(*m) - mean);
                stdev = ok_runs.size() > 1
                            ? std::sqrt(v / static_cast<double>(ok_runs.size() - 1))
                            : 0.0;
            };
            mean_std([](const MetricReport& m) { return m.relative_error; }, agg.rel_mean,
                     agg.rel_std);
            mean_std([](const MetricReport& m) { return m.pde_loss; }, agg.pde_mean,
                     agg.pde_std);
            mean_std([](const MetricReport& m) { return m.wall_seconds; }, agg.time_mean,
                     agg.time_std);
            agg.has_ref_loss = true;
            for (auto* m : ok_runs)
                if (!m->relative_reference_loss) agg.has_ref_loss = false;
            if (agg.has_ref_loss)
                mean_std([](const MetricReport& m) { return *m.relative_reference_loss; },
                         agg.ref_mean, agg.ref_std);
            if (result.references.origin_value) {
                double sq = 0.0;
                for (auto* m : ok_runs) {
                    const double e = m->value_at_origin - *result.references.origin_value;
                    sq += e * e;
                }
                agg.rmse_across_runs = std::sqrt(sq / static_cast<double>(ok_runs.size()));
            } else {
                agg.rmse_across_runs = std::numeric_limits<double>::quiet_NaN();
            }
        }
        result.aggregates.push_back(agg);
    }
    return result;
}

namespace {

std::string format_value(double v) {
    if (std::isnan(v)) return "nan";
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

const std::vector<std::string> kRunColumns = {"problem", "d",     "loss_kind", "E_rel",
                                              "E_RMSE",  "E_PDE", "E_ref",     "time_s",
                                              "M",       "seed"};

std::string run_row(const ExperimentResult& result, const RunRecord& r) {
    const auto& c = result.config;
    std::ostringstream row;
    row << c.benchmark.problem_id << "," << c.benchmark.dim << "," << to_string(r.kind) << ",";
    if (r.ok) {
        row << format_value(r.metrics.relative_error) << "," << format_value(r.metrics.rmse)
            << "," << format_value(r.metrics.pde_loss) << ",";
        row << (r.metrics.relative_reference_loss
                    ? format_value(*r.metrics.relative_reference_loss)
                    : "");
        row << ",";
        row << (c.timing_in_csv ? format_value(r.metrics.wall_seconds) : format_value(0.0));
    } else {
        row << "nan,nan,nan,,";
        row << format_value(0.0);
    }
    row << "," << 1 << "," << r.seed;
    return row.str();
}

}  // namespace

const std::vector<std::string>& run_csv_columns() { return kRunColumns; }

std::vector<std::string> emit_report(const ExperimentResult& result, ReportFormat format) {
    const auto& c = result.config;
    if (c.out_dir.empty()) throw ConfigError("output directory not set");
    fs::create_directories(c.out_dir);
    std::vector<std::string> written;

    auto open = [&](const std::string& name) {
        std::ofstream out(fs::path(c.out_dir) / name, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write " + name + " under " + c.out_dir);
        return out;
    };

    if (format == ReportFormat::Csv) {
        {
            auto out = open("runs.csv");
            for (std::size_t i = 0; i < kRunColumns.size(); ++i)
                out << (i ? "," : "") << kRunColumns[i];
            out << "\n";
            for (const auto& r : result.runs) out << run_row(result, r) << "\n";
            written.push_back((fs::path(c.out_dir) / "runs.csv").string());
        }
        {
            auto out = open("aggregate.csv");
            out << "problem,d,loss_kind,E_rel_mean,E_rel_std,E_RMSE,E_PDE_mean,E_PDE_std,"
                   "E_ref_mean,E_ref_std,time_s_mean,runs\n";
            for (const auto& a : result.aggregates) {
                out << c.benchmark.problem_id << "," << c.benchmark.dim << ","
                    << to_string(a.kind) << "," << format_value(a.rel_mean) << ","
                    << format_value(a.rel_std) << "," << format_value(a.rmse_across_runs) << ","
                    << format_value(a.pde_mean) << "," << format_value(a.pde_std) << ",";
                if (a.has_ref_loss)
                    out << format_value(a.ref_mean) << "," << format_value(a.ref_std);
                else
                    out << ",";
                out << "," << (c.timing_in_csv ? format_value(a.time_mean) : format_value(0.0))
                    << "," << a.successes << "\n";
            }
            written.push_back((fs::path(c.out_dir) / "aggregate.csv").string());
        }
        {
            auto out = open("timing.log");
            for (const auto& r : result.runs)
                out << to_string(r.kind) << " run " << r.run_index << " seed " << r.seed << " "
                    << (r.ok ? format_value(r.metrics.wall_seconds) : "failed") << " s\n";
            written.push_back((fs::path(c.out_dir) / "timing.log").string());
        }
        return written;
    }

    if (format == ReportFormat::Json) {
        json j;
        j["config"] = config_to_json(c);
        j["config_hash"] = config_hash(c);
        if (result.references.origin_value) {
            j["reference"] = {{"value", *result.references.origin_value},
                              {"std_error", result.references.origin_std_error}};
        }
        json runs = json::array();
        for (const auto& r : result.runs) {
            json row;
            row["problem"] = c.benchmark.problem_id;
            row["d"] = c.benchmark.dim;
            row["loss_kind"] = to_string(r.kind);
            row["seed"] = r.seed;
            row["M"] = 1;
            row["ok"] = r.ok;
            if (r.ok) {
                row["E_rel"] = r.metrics.relative_error;
                row["E_RMSE"] = r.metrics.rmse;
                row["E_PDE"] = r.metrics.pde_loss;
                if (r.metrics.relative_reference_loss)
                    row["E_ref"] = *r.metrics.relative_reference_loss;
                else
                    row["E_ref"] = nullptr;
                row["time_s"] = c.timing_in_csv ? r.metrics.wall_seconds : 0.0;
            } else {
                row["error"] = r.error;
            }
            runs.push_back(row);
        }
        j["runs"] = runs;
        json aggs = json::array();
        for (const auto& a : result.aggregates) {
            aggs.push_back({{"loss_kind", to_string(a.kind)},
                            {"E_rel_mean", a.rel_mean},
                            {"E_rel_std", a.rel_std},
                            {"E_RMSE", a.rmse_across_runs},
                            {"E_PDE_mean", a.pde_mean},
                            {"E_PDE_std", a.pde_std},
                            {"runs", a.successes}});
        }
        j["aggregates"] = aggs;
        auto out = open("report.json");
        out << j.dump(2) << "\n";
        written.push_back((fs::path(c.out_dir) / "report.json").string());
        return written;
    }

    // Markdown: loss kind x metric comparison table.
    auto out = open("report.md");
    out << "# " << c.benchmark.problem_id << " (d = " << c.benchmark.dim
        << ", runs = " << c.runs << ")\n\n";
    if (result.references.origin_value)
        out << "Reference value at (x0, 0): " << format_value(*result.references.origin_value)
            << " +/- " << format_value(result.references.origin_std_error) << "\n\n";
    out << "| loss kind | E_rel (mean +/- std) | E_RMSE | E_PDE (mean +/- std) | E_ref | runs |\n";
    out << "|---|---|---|---|---|---|\n";
    for (const auto& a : result.aggregates) {
        out << "| " << to_string(a.kind) << " | " << format_value(a.rel_mean) << " +/- "
            << format_value(a.rel_std) << " | " << format_value(a.rmse_across_runs) << " | "
            << format_value(a.pde_mean) << " +/- " << format_value(a.pde_std) << " | ";
        if (a.has_ref_loss)
            out << format_value(a.ref_mean);
        else
            out << "-";
        out << " | " << a.successes << " |\n";
    }
    written.push_back((fs::path(c.out_dir) / "report.md").string());
    return written;
}

}  // namespace ttbsde
