#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "ttbsde/experiment.hpp"

namespace py = pybind11;
using namespace ttbsde;

namespace {

DenseTensor tensor_from_array(const py::array_t<double, py::array::c_style | py::array::forcecast>& arr) {
    std::vector<Index> shape;
    for (py::ssize_t i = 0; i < arr.ndim(); ++i) shape.push_back(arr.shape(i));
    std::vector<double> data(arr.data(), arr.data() + arr.size());
    return DenseTensor(std::move(shape), std::move(data));
}

py::array_t<double> array_from_tensor(const DenseTensor& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    py::array_t<double> out(shape);
    std::copy(t.data(), t.data() + t.size(), out.mutable_data());
    return out;
}

BasisFamily family_from_string(const std::string& name) {
    if (name == "monomial") return BasisFamily::Monomial;
    if (name == "h2_orthonormal") return BasisFamily::H2Orthonormal;
    throw ConfigError("unknown basis family: " + name);
}

AlsConfig als_config_from_kwargs(double delta, int max_sweeps, double sweep_tolerance,
                                 std::uint64_t seed) {
    AlsConfig c;
    c.delta = delta;
    c.max_sweeps = max_sweeps;
    c.sweep_tolerance = sweep_tolerance;
    c.seed = seed;
    return c;
}

PdeProblem problem_from_id(const std::string& id, int dim, std::uint64_t seed) {
    if (id == "hjb_log") return make_hjb_log(dim);
    if (id == "hjb_double_well") {
        return make_double_well(Matrix(0.1 * Matrix::Identity(dim, dim)),
                                Vector::Constant(dim, 0.05));
    }
    if (id == "cir") return make_cir(dim, seed).problem;
    throw ConfigError("unknown problem id: " + id);
}

}  // namespace

PYBIND11_MODULE(_ttbsde, m) {
    m.doc() = "Tensor-train regression solver for backward SDEs and parabolic PDEs";

    py::register_exception<ShapeError>(m, "ShapeError");
    py::register_exception<ConfigError>(m, "ConfigError");
    py::register_exception<SingularSystemError>(m, "SingularSystemError");

    m.def("set_threads", &set_threads, py::arg("n"));

    m.def(
        "contract",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& a,
           const py::array_t<double, py::array::c_style | py::array::forcecast>& b) {
            return array_from_tensor(contract(tensor_from_array(a), tensor_from_array(b)));
        },
        py::arg("w1"), py::arg("w2"),
        "Contract the last index of w1 with the first index of w2");

    py::class_<TensorTrain>(m, "TensorTrain")
        .def_property_readonly("order", &TensorTrain::order)
        .def_property_readonly("ranks", &TensorTrain::ranks)
        .def_property_readonly("core_position",
                               [](const TensorTrain& tt) -> py::object {
                                   if (tt.core_position()) return py::int_(*tt.core_position());
                                   return py::none();
                               })
        .def_property_readonly("parameter_count", &TensorTrain::parameter_count)
        .def("contract",
             [](const TensorTrain& tt) { return array_from_tensor(tt_contract(tt)); })
        .def("move_core", [](const TensorTrain& tt, int target) { return move_core(tt, target); })
        .def("minimal_ranks",
             [](const TensorTrain& tt, double tol) { return tt_rank(tt, tol); },
             py::arg("tolerance") = 1e-13)
        .def("to_bytes",
             [](const TensorTrain& tt) {
                 std::ostringstream out;
                 save_tensor_train(tt, out);
                 return py::bytes(out.str());
             })
        .def_static("from_bytes", [](const py::bytes& data) {
            const std::string blob(data);
            std::istringstream in(blob);
            return load_tensor_train(in);
        });

    m.def(
        "tt_decompose",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& c,
           double tolerance, py::object max_rank) {
            if (max_rank.is_none()) return tt_decompose(tensor_from_array(c), tolerance);
            auto ranks = max_rank.cast<RankTuple>();
            return tt_decompose(tensor_from_array(c), tolerance, &ranks);
        },
        py::arg("tensor"), py::arg("tolerance") = 0.0, py::arg("max_rank") = py::none());

    py::class_<BasisSet>(m, "BasisSet")
        .def_static(
            "make",
            [](const std::string& family, int dim, int degree, double a, double b) {
                return BasisSet::make(family_from_string(family), dim, degree, a, b);
            },
            py::arg("family"), py::arg("dim"), py::arg("degree"), py::arg("a"), py::arg("b"))
        .def_property_readonly("size", &BasisSet::size)
        .def_property_readonly("dimension", &BasisSet::dimension)
        .def("values", &BasisSet::values, py::arg("mode"), py::arg("x"))
        .def("derivatives", &BasisSet::derivatives, py::arg("mode"), py::arg("x"));

    py::class_<FunctionalTT>(m, "FunctionalTT")
        .def_static(
            "random",
            [](const BasisSet& basis, const RankTuple& ranks, std::uint64_t seed) {
                return random_functional_tt(basis, ranks, seed);
            },
            py::arg("basis"), py::arg("ranks"), py::arg("seed"))
        .def_property_readonly("dimension", &FunctionalTT::dimension)
        .def_property_readonly("tt", [](const FunctionalTT& f) { return f.tt(); })
        .def("evaluate", &FunctionalTT::evaluate, py::arg("x"))
        .def("gradient", &FunctionalTT::gradient, py::arg("x"))
        .def("laplacian", &FunctionalTT::laplacian, py::arg("x"))
        .def("directional_grad", &FunctionalTT::directional_grad, py::arg("x"), py::arg("xi"))
        .def("evaluate_many", &FunctionalTT::evaluate_many, py::arg("points"))
        .def("gradient_many", &FunctionalTT::gradient_many, py::arg("points"));

    m.def(
        "als_fit",
        [](const Matrix& samples, const Vector& targets, const FunctionalTT& init, double delta,
           int max_sweeps, double sweep_tolerance, std::uint64_t seed) {
            RegressionProblem problem{samples, targets, {}};
            auto config = als_config_from_kwargs(delta, max_sweeps, sweep_tolerance, seed);
            return als_fit(problem, init, config);
        },
        py::arg("samples"), py::arg("targets"), py::arg("init"), py::arg("delta") = 1e-6,
        py::arg("max_sweeps") = 15, py::arg("sweep_tolerance") = 1e-8, py::arg("seed") = 0,
        "Alternating least squares over the tensor-train manifold (columns of "
        "`samples` are points)");

    m.def(
        "als_fit_grad",
        [](const Matrix& samples, const Vector& targets, const Matrix& directions,
           const FunctionalTT& init, double delta, int max_sweeps, double sweep_tolerance,
           std::uint64_t seed) {
            RegressionProblem problem{samples, targets, directions};
            auto config = als_config_from_kwargs(delta, max_sweeps, sweep_tolerance, seed);
            return als_fit_grad(problem, init, config);
        },
        py::arg("samples"), py::arg("targets"), py::arg("directions"), py::arg("init"),
        py::arg("delta") = 1e-6, py::arg("max_sweeps") = 15, py::arg("sweep_tolerance") = 1e-8,
        py::arg("seed") = 0,
        "ALS for losses with per-sample gradient directions");

    py::class_<PathEnsemble>(m, "PathEnsemble")
        .def_property_readonly("dim", [](const PathEnsemble& p) { return p.dim; })
        .def_property_readonly("steps", [](const PathEnsemble& p) { return p.steps; })
        .def_property_readonly("count", [](const PathEnsemble& p) { return p.count; })
        .def("state", [](const PathEnsemble& p, int n) { return p.state(n); }, py::arg("n"))
        .def("increment", [](const PathEnsemble& p, int n) { return p.increment(n); },
             py::arg("n"));

    m.def(
        "simulate",
        [](const std::string& problem_id, int dim, double horizon, int steps, Index paths,
           std::uint64_t seed) {
            auto p = problem_from_id(problem_id, dim, seed);
            p.horizon = horizon;
            return simulate(p, TimeGrid{horizon, steps}, paths, seed);
        },
        py::arg("problem"), py::arg("dim"), py::arg("horizon"), py::arg("steps"),
        py::arg("paths"), py::arg("seed"),
        "Euler-Maruyama ensemble for a named benchmark problem");

    py::class_<BackwardSolution>(m, "BackwardSolution")
        .def_property_readonly("steps", &BackwardSolution::step_count)
        .def("value", &BackwardSolution::value, py::arg("n"), py::arg("x"))
        .def("gradient", &BackwardSolution::gradient, py::arg("n"), py::arg("x"))
        .def_property_readonly("final_losses", [](const BackwardSolution& s) {
            std::vector<double> out;
            for (const auto& d : s.diagnostics) out.push_back(d.final_loss);
            return out;
        });

    m.def(
        "backward_solve",
        [](const std::string& problem_id, int dim, double horizon, int steps, Index paths,
           std::uint64_t seed, const std::string& loss, int degree, Index rank, double delta,
           const std::string& family) {
            auto p = problem_from_id(problem_id, dim, seed);
            p.horizon = horizon;
            SolverConfig config;
            config.degree = degree;
            config.family = family_from_string(family);
            config.als.delta = delta;
            config.als.rank_policy =
                RankPolicy::fixed_ranks(feasible_ranks(dim, degree + 1, rank));
            return backward_solve(loss_kind_from_string(loss), p, TimeGrid{horizon, steps},
                                  paths, seed, config);
        },
        py::arg("problem"), py::arg("dim"), py::arg("horizon"), py::arg("steps"),
        py::arg("paths"), py::arg("seed"), py::arg("loss") = "bsde_explicit",
        py::arg("degree") = 0, py::arg("rank") = 1, py::arg("delta") = 1e-6,
        py::arg("family") = "h2_orthonormal",
        "Backward iteration over a named benchmark problem");

    m.def(
        "hjb_reference",
        [](const Vector& x, double t, double horizon, Index samples, std::uint64_t seed) {
            auto est = hjb_reference(x, t, horizon, samples, seed);
            return py::make_tuple(est.value, est.std_error);
        },
        py::arg("x"), py::arg("t"), py::arg("horizon"), py::arg("samples"), py::arg("seed"));
}
