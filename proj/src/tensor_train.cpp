#include "ttbsde/tensor_train.hpp"

#include <Eigen/Dense>
#include <Eigen/QR>
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>

namespace ttbsde {

namespace {

Eigen::Map<const RowMajorMatrix> left_unfold(const DenseTensor& u) {
    return u.unfold(2);  // (r_{l-1} m) x r_l
}

Eigen::Map<const RowMajorMatrix> right_unfold(const DenseTensor& u) {
    return u.unfold(1);  // r_{l-1} x (m r_l)
}

DenseTensor from_matrix(const Matrix& m, std::vector<Index> shape) {
    DenseTensor out(std::move(shape));
    RowMajorMatrix rm = m;
    std::memcpy(out.data(), rm.data(), sizeof(double) * static_cast<std::size_t>(rm.size()));
    return out;
}

// Regroups a (p x m*q) matrix into (p*m x q), pairing each row with the m
// leading column blocks; the row-major analogue of a mode split.
Matrix regroup_rows(const Matrix& a, Index m, Index q) {
    Matrix out(a.rows() * m, q);
    Eigen::RowVectorXd row(a.cols());
    for (Index r = 0; r < a.rows(); ++r) {
        row = a.row(r);
        out.middleRows(r * m, m) = Eigen::Map<const RowMajorMatrix>(row.data(), m, q);
    }
    return out;
}

struct ThinQr {
    Matrix q;  // p x k, orthonormal columns
    Matrix r;  // k x n, upper triangular
};

ThinQr thin_qr(const Matrix& a) {
    Eigen::HouseholderQR<Matrix> qr(a);
    const Index k = std::min(a.rows(), a.cols());
    ThinQr out;
    out.q = qr.householderQ() * Matrix::Identity(a.rows(), k);
    out.r = qr.matrixQR().topRows(k).triangularView<Eigen::Upper>();
    return out;
}

// Pushes the core from position l to l+1 in place.
void push_core_right(std::vector<DenseTensor>& u, int l) {
    auto& cur = u[static_cast<std::size_t>(l)];
    auto& nxt = u[static_cast<std::size_t>(l) + 1];
    const Index r0 = cur.extent(0), m = cur.extent(1);
    auto qr = thin_qr(Matrix(left_unfold(cur)));
    const Index k = qr.q.cols();
    cur = from_matrix(qr.q, {r0, m, k});
    Matrix merged = qr.r * Matrix(right_unfold(nxt));
    nxt = from_matrix(merged, {k, nxt.extent(1), nxt.extent(2)});
}

// Pushes the core from position l to l-1 in place.
void push_core_left(std::vector<DenseTensor>& u, int l) {
    auto& cur = u[static_cast<std::size_t>(l)];
    auto& prv = u[static_cast<std::size_t>(l) - 1];
    const Index m = cur.extent(1), r1 = cur.extent(2);
    auto qr = thin_qr(Matrix(right_unfold(cur)).transpose());
    const Index k = qr.q.cols();
    cur = from_matrix(qr.q.transpose(), {k, m, r1});
    Matrix merged = Matrix(left_unfold(prv)) * qr.r.transpose();
    prv = from_matrix(merged, {prv.extent(0), prv.extent(1), k});
}

}  // namespace

bool rank_leq(const RankTuple& s, const RankTuple& t) {
    if (s.size() != t.size()) return false;
    for (std::size_t i = 0; i < s.size(); ++i)
        if (s[i] > t[i]) return false;
    return true;
}

TensorTrain::TensorTrain(std::vector<DenseTensor> components, std::optional<int> core)
    : components_(std::move(components)), core_(core) {
    if (components_.empty()) throw ShapeError("tensor train needs at least one component");
    Index prev = 1;
    for (const auto& u : components_) {
        if (u.order() != 3) throw ShapeError("components must be order-3 (r, m, r')");
        if (u.extent(0) != prev) throw ShapeError("adjacent bond dimensions do not match");
        prev = u.extent(2);
    }
    if (prev != 1) throw ShapeError("last bond rank must be 1");
    if (core_ && (*core_ < 0 || *core_ >= order())) throw ShapeError("core position out of range");
}

std::vector<Index> TensorTrain::mode_extents() const {
    std::vector<Index> m;
    m.reserve(components_.size());
    for (const auto& u : components_) m.push_back(u.extent(1));
    return m;
}

Index TensorTrain::bond_rank(int bond) const {
    if (bond <= 0 || bond >= order()) return 1;
    return components_[static_cast<std::size_t>(bond) - 1].extent(2);
}

RankTuple TensorTrain::ranks() const {
    RankTuple r;
    for (int bond = 1; bond < order(); ++bond) r.push_back(bond_rank(bond));
    return r;
}

Index TensorTrain::parameter_count() const {
    Index n = 0;
    for (const auto& u : components_) n += u.size();
    return n;
}

double TensorTrain::norm() const {
    if (core_) return components_[static_cast<std::size_t>(*core_)].frobenius_norm();
    return move_core(*this, 0).component(0).frobenius_norm();
}

void TensorTrain::set_component(int l, DenseTensor u, std::optional<int> core) {
    components_[static_cast<std::size_t>(l)] = std::move(u);
    core_ = core;
}

double TensorTrain::orthogonality_defect() const {
    if (!core_) return 0.0;
    double worst = 0.0;
    for (int l = 0; l < order(); ++l) {
        if (l == *core_) continue;
        const auto& u = components_[static_cast<std::size_t>(l)];
        if (l < *core_) {
            Matrix a = left_unfold(u);
            worst = std::max(worst, (a.transpose() * a - Matrix::Identity(a.cols(), a.cols()))
                                        .cwiseAbs()
                                        .maxCoeff());
        } else {
            Matrix a = right_unfold(u);
            worst = std::max(worst, (a * a.transpose() - Matrix::Identity(a.rows(), a.rows()))
                                        .cwiseAbs()
                                        .maxCoeff());
        }
    }
    return worst;
}

TensorTrain tt_decompose(const DenseTensor& c, double tolerance, const RankTuple* max_rank) {
    const int d = c.order();
    if (d < 2) throw ShapeError("tt_decompose needs order >= 2");
    if (max_rank && static_cast<int>(max_rank->size()) != d - 1)
        throw ShapeError("max_rank must have d-1 entries");

    const double budget =
        tolerance > 0 ? tolerance * c.frobenius_norm() / std::sqrt(static_cast<double>(d - 1)) : 0.0;

    std::vector<DenseTensor> comps;
    comps.reserve(static_cast<std::size_t>(d));

    Index rest = c.size() / c.extent(0);
    Matrix cur = c.unfold(1);  // m_0 x rest
    Index r_prev = 1;

    for (int l = 0; l + 1 < d; ++l) {
        const Index m = c.extent(l);
        Eigen::BDCSVD<Matrix> svd(cur, Eigen::ComputeThinU | Eigen::ComputeThinV);
        const auto& sv = svd.singularValues();

        Index k = sv.size();
        double tail = 0.0;
        while (k > 1) {
            const double next = tail + sv[k - 1] * sv[k - 1];
            if (std::sqrt(next) > budget) break;
            tail = next;
            --k;
        }
        if (max_rank) k = std::min<Index>(k, std::max<Index>((*max_rank)[static_cast<std::size_t>(l)], 1));

        comps.push_back(from_matrix(svd.matrixU().leftCols(k), {r_prev, m, k}));

        Matrix next = sv.head(k).asDiagonal() * svd.matrixV().leftCols(k).transpose();  // k x rest
        const Index m_next = c.extent(l + 1);
        rest /= m_next;
        cur = regroup_rows(next, m_next, rest);
        r_prev = k;
    }

    comps.push_back(from_matrix(cur, {r_prev, c.extent(d - 1), 1}));
    return TensorTrain(std::move(comps), d - 1);
}

DenseTensor tt_contract(const TensorTrain& tt, Index entry_cap) {
    Index total = 1;
    for (int l = 0; l < tt.order(); ++l) {
        total *= tt.mode_extent(l);
        if (total > entry_cap) throw SizeCapError("dense reconstruction exceeds the entry cap");
    }
    Matrix acc = Eigen::Map<const RowMajorMatrix>(tt.component(0).data(), tt.mode_extent(0),
                                                  tt.bond_rank(1));
    for (int l = 1; l < tt.order(); ++l) {
        Matrix next = acc * Matrix(right_unfold(tt.component(l)));
        acc = regroup_rows(next, tt.mode_extent(l), tt.bond_rank(l + 1));
    }
    return from_matrix(acc, tt.mode_extents());
}

TensorTrain move_core(const TensorTrain& tt, int target) {
    if (target < 0 || target >= tt.order()) throw ShapeError("core target out of range");
    std::vector<DenseTensor> comps;
    comps.reserve(static_cast<std::size_t>(tt.order()));
    for (int l = 0; l < tt.order(); ++l) comps.push_back(tt.component(l));

    int core;
    if (tt.core_position()) {
        core = *tt.core_position();
    } else {
        for (int l = tt.order() - 1; l > 0; --l) push_core_left(comps, l);
        core = 0;
    }
    while (core < target) push_core_right(comps, core++);
    while (core > target) push_core_left(comps, core--);
    return TensorTrain(std::move(comps), core);
}

TensorTrain tt_round(const TensorTrain& tt, double tolerance, const RankTuple* max_rank) {
    if (max_rank && static_cast<int>(max_rank->size()) != tt.order() - 1)
        throw ShapeError("max_rank must have d-1 entries");
    TensorTrain canon = move_core(tt, tt.order() - 1);
    std::vector<DenseTensor> comps;
    comps.reserve(static_cast<std::size_t>(tt.order()));
    for (int l = 0; l < tt.order(); ++l) comps.push_back(canon.component(l));

    const int d = tt.order();
    const double norm = comps[static_cast<std::size_t>(d) - 1].frobenius_norm();
    const double budget = d > 1 ? tolerance * norm / std::sqrt(static_cast<double>(d - 1)) : 0.0;

    for (int l = d - 1; l > 0; --l) {
        auto& cur = comps[static_cast<std::size_t>(l)];
        const Index m = cur.extent(1), r1 = cur.extent(2);
        Matrix unfolding = right_unfold(cur);  // r_{l-1} x (m r_l)
        Eigen::BDCSVD<Matrix> svd(unfolding, Eigen::ComputeThinU | Eigen::ComputeThinV);
        const auto& sv = svd.singularValues();
        Index k = sv.size();
        double tail = 0.0;
        while (k > 1) {
            const double next = tail + sv[k - 1] * sv[k - 1];
            if (std::sqrt(next) > budget) break;
            tail = next;
            --k;
        }
        if (max_rank)
            k = std::min<Index>(k, std::max<Index>((*max_rank)[static_cast<std::size_t>(l) - 1], 1));

        cur = from_matrix(svd.matrixV().leftCols(k).transpose(), {k, m, r1});
        Matrix carry = svd.matrixU().leftCols(k) * sv.head(k).asDiagonal();
        auto& prv = comps[static_cast<std::size_t>(l) - 1];
        Matrix merged = Matrix(left_unfold(prv)) * carry;
        prv = from_matrix(merged, {prv.extent(0), prv.extent(1), k});
    }
    return TensorTrain(std::move(comps), 0);
}

RankTuple tt_rank(const TensorTrain& tt, double tolerance) {
    return tt_round(tt, tolerance).ranks();
}

TensorTrain tt_add(const TensorTrain& a, const TensorTrain& b) {
    if (a.order() != b.order()) throw ShapeError("tt_add: orders differ");
    const int d = a.order();
    std::vector<DenseTensor> comps;
    comps.reserve(static_cast<std::size_t>(d));
    for (int l = 0; l < d; ++l) {
        const auto& ua = a.component(l);
        const auto& ub = b.component(l);
        if (ua.extent(1) != ub.extent(1)) throw ShapeError("tt_add: mode extents differ");
        const Index ra0 = ua.extent(0), ra1 = ua.extent(2);
        const Index rb0 = ub.extent(0), rb1 = ub.extent(2);
        const Index m = ua.extent(1);
        const Index r0 = (l == 0) ? 1 : ra0 + rb0;
        const Index r1 = (l == d - 1) ? 1 : ra1 + rb1;
        DenseTensor u({r0, m, r1});
        for (Index i = 0; i < m; ++i) {
            for (Index p = 0; p < ra0; ++p)
                for (Index q = 0; q < ra1; ++q)
                    u.at({p, i, q}) = ua.at({p, i, q});
            for (Index p = 0; p < rb0; ++p)
                for (Index q = 0; q < rb1; ++q)
                    u.at({(l == 0) ? p : ra0 + p, i, (l == d - 1) ? q : ra1 + q}) += ub.at({p, i, q});
        }
        comps.push_back(std::move(u));
    }
    return TensorTrain(std::move(comps));
}

TensorTrain tt_scale(const TensorTrain& a, double factor) {
    std::vector<DenseTensor> comps;
    comps.reserve(static_cast<std::size_t>(a.order()));
    for (int l = 0; l < a.order(); ++l) comps.push_back(a.component(l));
    // Scale the core so any orthogonality pattern survives.
    const int target = a.core_position() ? *a.core_position() : 0;
    auto& u = comps[static_cast<std::size_t>(target)];
    for (Index i = 0; i < u.size(); ++i) u[i] *= factor;
    return TensorTrain(std::move(comps), a.core_position());
}

namespace {

void write_i32(std::ostream& out, std::int32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i)
        b[i] = static_cast<unsigned char>((static_cast<std::uint32_t>(v) >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::int32_t read_i32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw std::runtime_error("truncated tensor train stream");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return static_cast<std::int32_t>(v);
}

void write_f64(std::ostream& out, const double* p, Index n) {
    static_assert(sizeof(double) == 8);
    out.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n) * 8);
}

void read_f64(std::istream& in, double* p, Index n) {
    in.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n) * 8);
    if (!in) throw std::runtime_error("truncated tensor train stream");
}

}  // namespace

void save_tensor_train(const TensorTrain& tt, std::ostream& out) {
    out.write("TTV1", 4);
    write_i32(out, tt.order());
    for (int l = 0; l < tt.order(); ++l) write_i32(out, static_cast<std::int32_t>(tt.mode_extent(l)));
    for (int bond = 1; bond < tt.order(); ++bond)
        write_i32(out, static_cast<std::int32_t>(tt.bond_rank(bond)));
    write_i32(out, tt.core_position() ? static_cast<std::int32_t>(*tt.core_position()) + 1 : 0);
    for (int l = 0; l < tt.order(); ++l)
        write_f64(out, tt.component(l).data(), tt.component(l).size());
}

TensorTrain load_tensor_train(std::istream& in) {
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "TTV1", 4) != 0)
        throw std::runtime_error("not a TTV1 tensor train stream");
    const int d = read_i32(in);
    if (d < 1 || d > 100000) throw std::runtime_error("corrupt tensor train header");
    std::vector<Index> modes(static_cast<std::size_t>(d));
    for (auto& m : modes) m = read_i32(in);
    std::vector<Index> ranks(static_cast<std::size_t>(d) + 1, 1);
    for (int bond = 1; bond < d; ++bond) ranks[static_cast<std::size_t>(bond)] = read_i32(in);
    const std::int32_t core = read_i32(in);
    std::vector<DenseTensor> comps;
    comps.reserve(static_cast<std::size_t>(d));
    for (int l = 0; l < d; ++l) {
        DenseTensor u({ranks[static_cast<std::size_t>(l)], modes[static_cast<std::size_t>(l)],
                       ranks[static_cast<std::size_t>(l) + 1]});
        read_f64(in, u.data(), u.size());
        comps.push_back(std::move(u));
    }
    return TensorTrain(std::move(comps), core == 0 ? std::nullopt : std::optional<int>(core - 1));
}

}  // namespace ttbsde
