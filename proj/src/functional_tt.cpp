#include "ttbsde/functional_tt.hpp"

#include <cmath>

#include "ttbsde/rng.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace ttbsde {

namespace {

// Per-thread scratch so the hot evaluation paths allocate nothing in the
// steady state.
struct EvalScratch {
    Vector phi, dphi, ddphi;
    Vector s1, s2, s3, s4, s5, s6, s7;
    std::vector<Vector> rights;
};

EvalScratch& scratch() {
    static thread_local EvalScratch ws;
    return ws;
}

// out(r1) = sum_{a,i} left(a) phi(i) u(a,i,b)
void step_left(const DenseTensor& u, const double* left, const double* phi, double* out) {
    const Index r0 = u.extent(0), m = u.extent(1), r1 = u.extent(2);
    Eigen::Map<const RowMajorMatrix> ru(u.data(), r0, m * r1);
    Eigen::RowVectorXd tmp = Eigen::Map<const Eigen::RowVectorXd>(left, r0) * ru;  // (m r1)
    Eigen::Map<Vector>(out, r1).noalias() =
        Eigen::Map<const RowMajorMatrix>(tmp.data(), m, r1).transpose() *
        Eigen::Map<const Vector>(phi, m);
}

// out(r0) = sum_{i,b} u(a,i,b) phi(i) right(b)
void step_right(const DenseTensor& u, const double* right, const double* phi, double* out) {
    const Index r0 = u.extent(0), m = u.extent(1), r1 = u.extent(2);
    Eigen::Map<const RowMajorMatrix> lu(u.data(), r0 * m, r1);
    Vector tmp = lu * Eigen::Map<const Vector>(right, r1);  // (r0 m)
    Eigen::Map<Vector>(out, r0).noalias() =
        Eigen::Map<const RowMajorMatrix>(tmp.data(), r0, m) * Eigen::Map<const Vector>(phi, m);
}

}  // namespace

FunctionalTT::FunctionalTT(TensorTrain tt, BasisSet basis, std::optional<ExtraTerm> extra)
    : tt_(std::move(tt)),
      basis_(std::move(basis)),
      extra_(std::move(extra)),
      extrapolation_events_(std::make_shared<std::atomic<std::uint64_t>>(0)) {
    if (tt_.order() != basis_.dimension())
        throw ShapeError("tensor train order must equal the spatial dimension");
    for (int l = 0; l < tt_.order(); ++l)
        if (tt_.mode_extent(l) != basis_.size())
            throw ShapeError("every mode extent must equal the basis size");
}

FunctionalTT::FunctionalTT(const FunctionalTT& other)
    : tt_(other.tt_),
      basis_(other.basis_),
      extra_(other.extra_),
      extrapolation_events_(std::make_shared<std::atomic<std::uint64_t>>(
          other.extrapolation_events_->load())) {}

FunctionalTT& FunctionalTT::operator=(const FunctionalTT& other) {
    if (this != &other) {
        tt_ = other.tt_;
        basis_ = other.basis_;
        extra_ = other.extra_;
        extrapolation_events_ =
            std::make_shared<std::atomic<std::uint64_t>>(other.extrapolation_events_->load());
    }
    return *this;
}

FunctionalTT FunctionalTT::with_tt(TensorTrain tt) const {
    return FunctionalTT(std::move(tt), basis_, extra_);
}

FunctionalTT FunctionalTT::with_extra_coeff(double coeff) const {
    auto extra = extra_;
    if (extra) extra->coeff = coeff;
    return FunctionalTT(tt_, basis_, std::move(extra));
}

void FunctionalTT::note_point(const Vector& x) const {
    for (int j = 0; j < dimension(); ++j) {
        if (!basis_.in_domain(j, x[j])) {
            extrapolation_events_->fetch_add(1, std::memory_order_relaxed);
            return;
        }
    }
}

double FunctionalTT::evaluate(const Vector& x) const {
    note_point(x);
    const int d = dimension();
    const int m = basis_.size();
    auto& ws = scratch();
    ws.phi.resize(m);
    Vector& right = ws.s1;
    Vector& next = ws.s2;
    right.resize(1);
    right[0] = 1.0;
    for (int l = d - 1; l >= 0; --l) {
        basis_.eval(l, x[l], 0, ws.phi.data());
        next.resize(tt_.bond_rank(l));
        step_right(tt_.component(l), right.data(), ws.phi.data(), next.data());
        right.swap(next);
    }
    double v = right[0];
    if (extra_ && extra_->coeff != 0.0) v += extra_->coeff * extra_->fn.value(x);
    return v;
}

Vector FunctionalTT::gradient(const Vector& x) const {
    note_point(x);
    const int d = dimension();
    const int m = basis_.size();
    auto& ws = scratch();
    ws.phi.resize(m);
    ws.dphi.resize(m);
    auto& right = ws.rights;
    if (static_cast<int>(right.size()) < d) right.resize(static_cast<std::size_t>(d));

    right[static_cast<std::size_t>(d) - 1].resize(1);
    right[static_cast<std::size_t>(d) - 1][0] = 1.0;
    for (int l = d - 1; l > 0; --l) {
        basis_.eval(l, x[l], 0, ws.phi.data());
        auto& dst = right[static_cast<std::size_t>(l) - 1];
        dst.resize(tt_.bond_rank(l));
        step_right(tt_.component(l), right[static_cast<std::size_t>(l)].data(), ws.phi.data(),
                   dst.data());
    }

    Vector grad(d);
    Vector& left = ws.s1;
    Vector& tmp = ws.s2;
    Vector& next = ws.s3;
    left.resize(1);
    left[0] = 1.0;
    for (int l = 0; l < d; ++l) {
        basis_.eval(l, x[l], 1, ws.dphi.data());
        tmp.resize(tt_.bond_rank(l + 1));
        step_left(tt_.component(l), left.data(), ws.dphi.data(), tmp.data());
        grad[l] = tmp.dot(right[static_cast<std::size_t>(l)]);
        if (l + 1 < d) {
            basis_.eval(l, x[l], 0, ws.phi.data());
            next.resize(tt_.bond_rank(l + 1));
            step_left(tt_.component(l), left.data(), ws.phi.data(), next.data());
            left.swap(next);
        }
    }
    if (extra_ && extra_->coeff != 0.0) grad += extra_->coeff * extra_->fn.gradient(x);
    return grad;
}

double FunctionalTT::directional_grad(const Vector& x, const Vector& xi) const {
    note_point(x);
    const int d = dimension();
    const int m = basis_.size();
    auto& ws = scratch();
    ws.phi.resize(m);
    ws.dphi.resize(m);
    Vector& phi = ws.phi;
    Vector& dphi = ws.dphi;
    // Theta recursion right-to-left; one pass gives the fused contraction.
    Vector& psi = ws.s1;
    Vector& theta = ws.s2;
    Vector& psi_next = ws.s3;
    Vector& theta_next = ws.s4;
    Vector& tmp = ws.s5;
    psi.resize(1);
    psi[0] = 1.0;
    theta.resize(1);
    theta[0] = 0.0;
    for (int l = d - 1; l >= 0; --l) {
        const auto& u = tt_.component(l);
        basis_.eval(l, x[l], 0, phi.data());
        basis_.eval(l, x[l], 1, dphi.data());
        const Index r0 = tt_.bond_rank(l);
        psi_next.resize(r0);
        theta_next.resize(r0);
        tmp.resize(r0);
        step_right(u, theta.data(), phi.data(), theta_next.data());
        step_right(u, psi.data(), dphi.data(), tmp.data());
        theta_next += xi[l] * tmp;
        step_right(u, psi.data(), phi.data(), psi_next.data());
        psi.swap(psi_next);
        theta.swap(theta_next);
    }
    double v = theta[0];
    if (extra_ && extra_->coeff != 0.0) v += extra_->coeff * extra_->fn.gradient(x).dot(xi);
    return v;
}

double FunctionalTT::laplacian(const Vector& x) const {
    return weighted_laplacian(x, Vector::Ones(dimension()));
}

double FunctionalTT::weighted_laplacian(const Vector& x, const Vector& w) const {
    note_point(x);
    const int d = dimension();
    const int m = basis_.size();
    auto& ws = scratch();
    ws.phi.resize(m);
    ws.ddphi.resize(m);
    Vector& phi = ws.phi;
    Vector& ddphi = ws.ddphi;
    Vector& psi = ws.s1;
    Vector& acc = ws.s2;
    Vector& psi_next = ws.s3;
    Vector& acc_next = ws.s4;
    Vector& tmp = ws.s5;
    psi.resize(1);
    psi[0] = 1.0;
    acc.resize(1);
    acc[0] = 0.0;
    for (int l = d - 1; l >= 0; --l) {
        const auto& u = tt_.component(l);
        basis_.eval(l, x[l], 0, phi.data());
        basis_.eval(l, x[l], 2, ddphi.data());
        const Index r0 = tt_.bond_rank(l);
        psi_next.resize(r0);
        acc_next.resize(r0);
        tmp.resize(r0);
        step_right(u, acc.data(), phi.data(), acc_next.data());
        step_right(u, psi.data(), ddphi.data(), tmp.data());
        acc_next += w[l] * tmp;
        step_right(u, psi.data(), phi.data(), psi_next.data());
        psi.swap(psi_next);
        acc.swap(acc_next);
    }
    double v = acc[0];
    if (extra_ && extra_->coeff != 0.0) {
        if (!extra_->fn.weighted_laplacian)
            throw std::runtime_error("extra term lacks a weighted_laplacian");
        v += extra_->coeff * extra_->fn.weighted_laplacian(x, w);
    }
    return v;
}

double FunctionalTT::hessian_quadratic(const Vector& x, const Vector& v) const {
    note_point(x);
    const int d = dimension();
    const int m = basis_.size();
    auto& ws = scratch();
    ws.phi.resize(m);
    ws.dphi.resize(m);
    ws.ddphi.resize(m);
    Vector& phi = ws.phi;
    Vector& dphi = ws.dphi;
    Vector& ddphi = ws.ddphi;
    Vector& psi = ws.s1;
    Vector& dir = ws.s2;   // one directional derivative applied
    Vector& quad = ws.s3;  // two applied (v^T H v over the suffix)
    Vector& psi_n = ws.s4;
    Vector& dir_n = ws.s5;
    Vector& quad_n = ws.s6;
    Vector& tmp = ws.s7;
    psi.resize(1);
    psi[0] = 1.0;
    dir.resize(1);
    dir[0] = 0.0;
    quad.resize(1);
    quad[0] = 0.0;
    for (int l = d - 1; l >= 0; --l) {
        const auto& u = tt_.component(l);
        basis_.eval(l, x[l], 0, phi.data());
        basis_.eval(l, x[l], 1, dphi.data());
        basis_.eval(l, x[l], 2, ddphi.data());
        const Index r0 = tt_.bond_rank(l);
        psi_n.resize(r0);
        dir_n.resize(r0);
        quad_n.resize(r0);
        tmp.resize(r0);

        step_right(u, quad.data(), phi.data(), quad_n.data());
        step_right(u, dir.data(), dphi.data(), tmp.data());
        quad_n += 2.0 * v[l] * tmp;
        step_right(u, psi.data(), ddphi.data(), tmp.data());
        quad_n += v[l] * v[l] * tmp;

        step_right(u, dir.data(), phi.data(), dir_n.data());
        step_right(u, psi.data(), dphi.data(), tmp.data());
        dir_n += v[l] * tmp;

        step_right(u, psi.data(), phi.data(), psi_n.data());
        psi.swap(psi_n);
        dir.swap(dir_n);
        quad.swap(quad_n);
    }
    double out = quad[0];
    if (extra_ && extra_->coeff != 0.0) {
        if (!extra_->fn.hess_quadratic)
            throw std::runtime_error("extra term lacks a hess_quadratic");
        out += extra_->coeff * extra_->fn.hess_quadratic(x, v);
    }
    return out;
}

Vector FunctionalTT::evaluate_many(const Matrix& pts) const {
    const Index K = pts.cols();
    Vector out(K);
#pragma omp parallel for schedule(static)
    for (Index k = 0; k < K; ++k) out[k] = evaluate(pts.col(k));
    return out;
}

Matrix FunctionalTT::gradient_many(const Matrix& pts) const {
    const Index K = pts.cols();
    Matrix out(dimension(), K);
#pragma omp parallel for schedule(static)
    for (Index k = 0; k < K; ++k) out.col(k) = gradient(pts.col(k));
    return out;
}

Vector FunctionalTT::directional_grad_many(const Matrix& pts, const Matrix& xi) const {
    const Index K = pts.cols();
    Vector out(K);
#pragma omp parallel for schedule(static)
    for (Index k = 0; k < K; ++k) out[k] = directional_grad(pts.col(k), xi.col(k));
    return out;
}

StackSet FunctionalTT::build_stacks(const Matrix& pts, const Matrix* directions) const {
    const int d = dimension();
    const int m = basis_.size();
    const Index K = pts.cols();
    StackSet s;
    s.psi_left.resize(static_cast<std::size_t>(d));
    s.psi_right.resize(static_cast<std::size_t>(d));
    if (directions) {
        s.theta_left.resize(static_cast<std::size_t>(d));
        s.theta_right.resize(static_cast<std::size_t>(d));
    }
    for (int l = 0; l < d; ++l) {
        s.psi_left[static_cast<std::size_t>(l)].resize(K, tt_.bond_rank(l));
        s.psi_right[static_cast<std::size_t>(l)].resize(K, tt_.bond_rank(l + 1));
        if (directions) {
            s.theta_left[static_cast<std::size_t>(l)].resize(K, tt_.bond_rank(l));
            s.theta_right[static_cast<std::size_t>(l)].resize(K, tt_.bond_rank(l + 1));
        }
    }
    s.psi_left[0].setOnes();
    s.psi_right[static_cast<std::size_t>(d) - 1].setOnes();
    if (directions) {
        s.theta_left[0].setZero();
        s.theta_right[static_cast<std::size_t>(d) - 1].setZero();
    }

#pragma omp parallel
    {
        Vector phi(m), dphi(m), tmp;
#pragma omp for schedule(static)
        for (Index k = 0; k < K; ++k) {
            for (int l = 0; l + 1 < d; ++l) {
                const auto& u = tt_.component(l);
                basis_.eval(l, pts(l, k), 0, phi.data());
                const Index r1 = tt_.bond_rank(l + 1);
                Eigen::RowVectorXd left = s.psi_left[static_cast<std::size_t>(l)].row(k);
                Vector next(r1);
                step_left(u, left.data(), phi.data(), next.data());
                s.psi_left[static_cast<std::size_t>(l) + 1].row(k) = next;
                if (directions) {
                    basis_.eval(l, pts(l, k), 1, dphi.data());
                    Eigen::RowVectorXd th = s.theta_left[static_cast<std::size_t>(l)].row(k);
                    Vector tnext(r1);
                    step_left(u, th.data(), phi.data(), tnext.data());
                    tmp.resize(r1);
                    step_left(u, left.data(), dphi.data(), tmp.data());
                    tnext += (*directions)(l, k) * tmp;
                    s.theta_left[static_cast<std::size_t>(l) + 1].row(k) = tnext;
                }
            }
            for (int l = d - 1; l > 0; --l) {
                const auto& u = tt_.component(l);
                basis_.eval(l, pts(l, k), 0, phi.data());
                const Index r0 = tt_.bond_rank(l);
                Eigen::RowVectorXd right = s.psi_right[static_cast<std::size_t>(l)].row(k);
                Vector next(r0);
                step_right(u, right.data(), phi.data(), next.data());
                s.psi_right[static_cast<std::size_t>(l) - 1].row(k) = next;
                if (directions) {
                    basis_.eval(l, pts(l, k), 1, dphi.data());
                    Eigen::RowVectorXd th = s.theta_right[static_cast<std::size_t>(l)].row(k);
                    Vector tnext(r0);
                    step_right(u, th.data(), phi.data(), tnext.data());
                    tmp.resize(r0);
                    step_right(u, right.data(), dphi.data(), tmp.data());
                    tnext += (*directions)(l, k) * tmp;
                    s.theta_right[static_cast<std::size_t>(l) - 1].row(k) = tnext;
                }
            }
        }
    }
    return s;
}

SmoothFunction FunctionalTT::as_field() const {
    auto self = std::make_shared<const FunctionalTT>(*this);
    SmoothFunction f;
    f.value = [self](const Vector& x) { return self->evaluate(x); };
    f.gradient = [self](const Vector& x) { return self->gradient(x); };
    f.laplacian = [self](const Vector& x) { return self->laplacian(x); };
    f.hess_quadratic = [self](const Vector& x, const Vector& v) {
        return self->hessian_quadratic(x, v);
    };
    f.weighted_laplacian = [self](const Vector& x, const Vector& w) {
        return self->weighted_laplacian(x, w);
    };
    return f;
}

FunctionalTT random_functional_tt(const BasisSet& basis, const RankTuple& ranks,
                                  std::uint64_t seed, std::optional<ExtraTerm> extra) {
    const int d = basis.dimension();
    const int m = basis.size();
    if (static_cast<int>(ranks.size()) != d - 1) throw ShapeError("ranks must have d-1 entries");
    std::vector<DenseTensor> comps;
    comps.reserve(static_cast<std::size_t>(d));
    std::uint64_t counter = 0;
    for (int l = 0; l < d; ++l) {
        const Index r0 = l == 0 ? 1 : ranks[static_cast<std::size_t>(l) - 1];
        const Index r1 = l == d - 1 ? 1 : ranks[static_cast<std::size_t>(l)];
        DenseTensor u({r0, m, r1});
        const double scale = 1.0 / std::sqrt(static_cast<double>(std::max<Index>(r0, r1)) * m);
        for (Index i = 0; i < u.size(); ++i)
            u[i] = scale * counter_normal(seed, RngStream::TensorInit,
                                          static_cast<std::uint64_t>(l), 0, counter++);
        comps.push_back(std::move(u));
    }
    TensorTrain tt(std::move(comps));
    return FunctionalTT(move_core(tt, 0), basis, std::move(extra));
}

}  // namespace ttbsde
