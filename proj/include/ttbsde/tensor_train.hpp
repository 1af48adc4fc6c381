#pragma once

#include <iosfwd>
#include <optional>
#include <vector>

#include "ttbsde/dense_tensor.hpp"

namespace ttbsde {

/// Interior bond dimensions (r_1, ..., r_{d-1}); componentwise partial order.
using RankTuple = std::vector<Index>;

bool rank_leq(const RankTuple& s, const RankTuple& t);

/// Train of order-3 components u_l with shapes (r_{l-1}, m_l, r_l) and unit
/// boundary ranks r_0 = r_d = 1. When a core position is set, components left
/// of it are left-orthogonal and components right of it right-orthogonal.
class TensorTrain {
public:
    TensorTrain() = default;
    explicit TensorTrain(std::vector<DenseTensor> components,
                         std::optional<int> core = std::nullopt);

    int order() const { return static_cast<int>(components_.size()); }
    Index mode_extent(int l) const { return components_[static_cast<std::size_t>(l)].extent(1); }
    std::vector<Index> mode_extents() const;

    /// r[bond] for bond in 0..d; r[0] = r[d] = 1.
    Index bond_rank(int bond) const;
    RankTuple ranks() const;

    const DenseTensor& component(int l) const { return components_[static_cast<std::size_t>(l)]; }
    std::optional<int> core_position() const { return core_; }

    /// Total scalar count sum_l r_{l-1} * m_l * r_l.
    Index parameter_count() const;

    /// Frobenius norm of the represented tensor (via a canonical copy when
    /// no core is set).
    double norm() const;

    /// Replaces component l; clears the orthogonality bookkeeping unless the
    /// caller re-states the core.
    void set_component(int l, DenseTensor u, std::optional<int> core = std::nullopt);

    /// Largest deviation of the unfolded Gram matrices from identity over all
    /// components the core position claims orthogonal.
    double orthogonality_defect() const;

private:
    std::vector<DenseTensor> components_;
    std::optional<int> core_;
};

/// TT-SVD of a dense tensor: reconstruction error <= tolerance * |c|_F, ranks
/// minimal subject to that bound and capped by max_rank when given.
TensorTrain tt_decompose(const DenseTensor& c, double tolerance,
                         const RankTuple* max_rank = nullptr);

/// Dense reconstruction; testing aid only, throws SizeCapError above the cap.
DenseTensor tt_contract(const TensorTrain& tt, Index entry_cap = 10'000'000);

/// Moves the core to `target` (0-based) by QR steps, orthogonalizing first if
/// the train has no core. The represented tensor is unchanged.
TensorTrain move_core(const TensorTrain& tt, int target);

/// SVD rounding at the given relative tolerance; core ends at position 0.
TensorTrain tt_round(const TensorTrain& tt, double tolerance,
                     const RankTuple* max_rank = nullptr);

/// Minimal rank tuple of the represented tensor at truncation tolerance.
RankTuple tt_rank(const TensorTrain& tt, double tolerance = 1e-13);

/// Block-diagonal sum; representation ranks add.
TensorTrain tt_add(const TensorTrain& a, const TensorTrain& b);

TensorTrain tt_scale(const TensorTrain& a, double factor);

/// Binary format "TTV1": header of little-endian int32 (d, mode extents,
/// interior ranks, core position with 0 = none, 1..d otherwise) followed by
/// the component data as little-endian doubles in component order.
void save_tensor_train(const TensorTrain& tt, std::ostream& out);
TensorTrain load_tensor_train(std::istream& in);

}  // namespace ttbsde
