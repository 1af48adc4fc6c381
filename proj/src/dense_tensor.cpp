#include "ttbsde/dense_tensor.hpp"

#include <numeric>

namespace ttbsde {

namespace {

Index checked_size(const std::vector<Index>& shape) {
    if (shape.empty()) throw ShapeError("tensor order must be >= 1");
    Index n = 1;
    for (Index e : shape) {
        if (e <= 0) throw ShapeError("tensor extents must be positive");
        n *= e;
    }
    return n;
}

}  // namespace

DenseTensor::DenseTensor(std::vector<Index> shape)
    : shape_(std::move(shape)), data_(static_cast<std::size_t>(checked_size(shape_)), 0.0) {}

DenseTensor::DenseTensor(std::vector<Index> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (checked_size(shape_) != static_cast<Index>(data_.size()))
        throw ShapeError("data length does not match the product of extents");
}

Index DenseTensor::offset(std::initializer_list<Index> idx) const {
    if (static_cast<int>(idx.size()) != order()) throw ShapeError("multi-index order mismatch");
    Index flat = 0;
    int axis = 0;
    for (Index i : idx) {
        flat = flat * shape_[static_cast<std::size_t>(axis)] + i;
        ++axis;
    }
    return flat;
}

double DenseTensor::frobenius_norm() const {
    return Eigen::Map<const Vector>(data_.data(), static_cast<Index>(data_.size())).norm();
}

Eigen::Map<const RowMajorMatrix> DenseTensor::unfold(int split) const {
    Index rows = 1, cols = 1;
    for (int a = 0; a < split; ++a) rows *= shape_[static_cast<std::size_t>(a)];
    for (int a = split; a < order(); ++a) cols *= shape_[static_cast<std::size_t>(a)];
    return {data_.data(), rows, cols};
}

Eigen::Map<RowMajorMatrix> DenseTensor::unfold(int split) {
    Index rows = 1, cols = 1;
    for (int a = 0; a < split; ++a) rows *= shape_[static_cast<std::size_t>(a)];
    for (int a = split; a < order(); ++a) cols *= shape_[static_cast<std::size_t>(a)];
    return {data_.data(), rows, cols};
}

DenseTensor DenseTensor::reshaped(std::vector<Index> shape) const {
    DenseTensor out(std::move(shape), data_);
    return out;
}

DenseTensor contract(const DenseTensor& w1, const DenseTensor& w2) {
    const Index k1 = w1.shape().back();
    const Index k2 = w2.shape().front();
    if (k1 != k2) throw ShapeError("contracted extents differ");

    std::vector<Index> shape;
    shape.insert(shape.end(), w1.shape().begin(), w1.shape().end() - 1);
    shape.insert(shape.end(), w2.shape().begin() + 1, w2.shape().end());
    if (shape.empty()) shape = {1};  // full contraction of two vectors

    DenseTensor out(std::move(shape));
    auto lhs = w1.unfold(w1.order() - 1);  // (prod front) x k
    auto rhs = w2.unfold(1);               // k x (prod back)
    out.unfold(w1.order() - 1).noalias() = lhs * rhs;
    return out;
}

}  // namespace ttbsde
