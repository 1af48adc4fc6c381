#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace ttbsde {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using RowMajorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

/// Thrown when tensor extents do not conform for the requested operation.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Thrown when a dense reconstruction would exceed the entry cap.
class SizeCapError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Thrown when a delta = 0 normal-equations system is rank deficient.
class SingularSystemError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Thrown on malformed experiment configuration (CLI exit code 2).
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Sets the worker count for parallel loops (simulation, assembly, references).
void set_threads(int n);
int thread_count();

}  // namespace ttbsde
