#pragma once

#include <initializer_list>
#include <vector>

#include "ttbsde/common.hpp"

namespace ttbsde {

/// Dense real tensor with row-major storage. Order >= 1; an extent list of
/// {n} is a plain vector, {n, m} a matrix.
class DenseTensor {
public:
    DenseTensor() = default;
    explicit DenseTensor(std::vector<Index> shape);
    DenseTensor(std::vector<Index> shape, std::vector<double> data);

    const std::vector<Index>& shape() const { return shape_; }
    int order() const { return static_cast<int>(shape_.size()); }
    Index size() const { return static_cast<Index>(data_.size()); }
    Index extent(int axis) const { return shape_[static_cast<std::size_t>(axis)]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double& operator[](Index flat) { return data_[static_cast<std::size_t>(flat)]; }
    double operator[](Index flat) const { return data_[static_cast<std::size_t>(flat)]; }

    /// Row-major flat offset of a multi-index.
    Index offset(std::initializer_list<Index> idx) const;
    double at(std::initializer_list<Index> idx) const { return data_[static_cast<std::size_t>(offset(idx))]; }
    double& at(std::initializer_list<Index> idx) { return data_[static_cast<std::size_t>(offset(idx))]; }

    double frobenius_norm() const;

    /// View of the data as a matrix splitting the axes at `split`:
    /// rows run over the first `split` axes, columns over the rest.
    Eigen::Map<const RowMajorMatrix> unfold(int split) const;
    Eigen::Map<RowMajorMatrix> unfold(int split);

    DenseTensor reshaped(std::vector<Index> shape) const;

    static DenseTensor zeros(std::vector<Index> shape) { return DenseTensor(std::move(shape)); }

private:
    std::vector<Index> shape_;
    std::vector<double> data_;
};

/// Contraction of the last index of w1 with the first index of w2; for
/// matrices this is the ordinary matrix product. Throws ShapeError when the
/// contracted extents differ.
DenseTensor contract(const DenseTensor& w1, const DenseTensor& w2);

}  // namespace ttbsde
