#pragma once

#include <map>

#include "ttbsde/benchmarks.hpp"

namespace ttbsde {

struct BenchmarkSpec {
    std::string problem_id;  // hjb_log | hjb_double_well | cir
    int dim = 1;
    TimeGrid grid{1.0, 100};
    Index paths = 2000;
    SolverConfig solver;
    std::uint64_t seed = 1;  // experiment seed: problem parameters sample from it

    // double-well parameters
    bool dw_coupled = false;       // C = Id + noise when true, C = scale * Id otherwise
    double dw_coupling_scale = 0.1;
    double dw_nu = 0.05;
    double dw_sigma = 1.4142135623730951;

    // CIR parameters
    CirDiffusion cir_diffusion = CirDiffusion::RankOneFloor;
    double cir_floor = 1e-6;
    double cir_x0 = 1.0;
};

struct BuiltProblem {
    PdeProblem problem;
    Matrix dw_coupling;  // double-well only
    Vector dw_nu;
    std::shared_ptr<std::atomic<std::uint64_t>> cir_clamps;  // CIR only
};

BuiltProblem build_problem(const BenchmarkSpec& spec);

struct ReferencePolicy {
    enum class Mode { Frozen, Recompute, None };
    Mode mode = Mode::None;
    Index samples = 1000000;
    int inner_steps = 120;       // double-well MC inner grid
    std::string frozen_key;     // entry in the frozen-oracle file
    std::string frozen_file;    // resolved path
    bool attach_full = false;   // factorized field for the reference loss
    std::uint64_t seed = 1;
};

struct ExperimentConfig {
    BenchmarkSpec benchmark;
    int runs = 1;
    std::vector<LossKind> kinds;
    std::string out_dir;
    ReferencePolicy reference;
    bool timing_in_csv = false;
    bool save_solutions = false;
    int threads = 0;
};

ExperimentConfig parse_experiment_config(const std::string& json_text,
                                         const std::string& base_dir);
ExperimentConfig load_experiment_config(const std::string& path);

/// FNV-1a over the canonical JSON dump; identifies the configuration in
/// manifests and reports.
std::string config_hash(const ExperimentConfig& config);

struct RunRecord {
    LossKind kind = LossKind::ProjExplicit;
    int run_index = 0;
    std::uint64_t seed = 0;
    bool ok = false;
    std::string error;
    MetricReport metrics;
};

struct KindAggregate {
    LossKind kind = LossKind::ProjExplicit;
    int successes = 0;
    double rel_mean = 0.0, rel_std = 0.0;
    double rmse_across_runs = 0.0;  // sqrt(mean (V0 - ref)^2) over runs
    double pde_mean = 0.0, pde_std = 0.0;
    double ref_mean = 0.0, ref_std = 0.0;
    bool has_ref_loss = false;
    double time_mean = 0.0, time_std = 0.0;
};

struct ExperimentResult {
    ExperimentConfig config;
    ReferenceBundle references;
    std::vector<RunRecord> runs;
    std::vector<KindAggregate> aggregates;
    bool all_ok = true;
};

/// Runs backward_solve for every (loss kind, run index) with seed =
/// base seed + run index, computes the metrics, and aggregates means and
/// standard deviations per kind over the successful runs.
ExperimentResult run_experiment(const ExperimentConfig& config);

enum class ReportFormat { Csv, Json, MarkdownTable };

/// Writes runs.csv / aggregate.csv, report.json, or report.md (plus
/// timing.log) under the result's output directory; deterministic column
/// order and number formatting.
std::vector<std::string> emit_report(const ExperimentResult& result, ReportFormat format);

/// Column order of the per-run CSV schema.
const std::vector<std::string>& run_csv_columns();

/// Resolves the origin reference for the configured problem.
ReferenceBundle resolve_reference(const ExperimentConfig& config);

}  // namespace ttbsde
