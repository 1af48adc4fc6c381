#include "ttbsde/regression.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <Eigen/QR>
#include <cmath>

#include "ttbsde/rng.hpp"

namespace ttbsde {

namespace {

struct ThinQr {
    Matrix q;
    Matrix r;
};

ThinQr thin_qr(const Matrix& a) {
    Eigen::HouseholderQR<Matrix> qr(a);
    const Index k = std::min(a.rows(), a.cols());
    ThinQr out;
    out.q = qr.householderQ() * Matrix::Identity(a.rows(), k);
    out.r = qr.matrixQR().topRows(k).triangularView<Eigen::Upper>();
    return out;
}

Eigen::Map<const RowMajorMatrix> left_unfold(const DenseTensor& u) { return u.unfold(2); }
Eigen::Map<const RowMajorMatrix> right_unfold(const DenseTensor& u) { return u.unfold(1); }

DenseTensor from_matrix(const Matrix& m, std::vector<Index> shape) {
    DenseTensor out(std::move(shape));
    RowMajorMatrix rm = m;
    std::copy(rm.data(), rm.data() + rm.size(), out.data());
    return out;
}

// State of one ALS run over fixed samples; per-mode basis values and the
// psi/theta stacks are cached across sweeps.
class AlsRun {
public:
    AlsRun(const RegressionProblem& problem, const FunctionalTT& init, const AlsConfig& config,
           bool use_gradient)
        : problem_(problem),
          config_(config),
          use_gradient_(use_gradient),
          basis_(init.basis()),
          extra_(init.extra()),
          d_(init.dimension()),
          m_(init.basis().size()),
          K_(problem.samples.cols()) {
        if (use_gradient_ && !problem_.directions)
            throw ConfigError("gradient fit needs directions");
        if (problem_.samples.rows() != d_) throw ShapeError("sample dimension mismatch");
        if (problem_.targets.size() != K_) throw ShapeError("target count mismatch");

        components_.reserve(static_cast<std::size_t>(d_));
        TensorTrain canonical = move_core(init.tt(), 0);
        for (int l = 0; l < d_; ++l) components_.push_back(canonical.component(l));
        c_extra_ = extra_ ? extra_->coeff : 0.0;

        phi_.resize(static_cast<std::size_t>(d_));
        dphi_.resize(static_cast<std::size_t>(d_));
        for (int l = 0; l < d_; ++l) {
            auto& p = phi_[static_cast<std::size_t>(l)];
            p.resize(m_, K_);
            Matrix* dp = nullptr;
            if (use_gradient_) {
                dphi_[static_cast<std::size_t>(l)].resize(m_, K_);
                dp = &dphi_[static_cast<std::size_t>(l)];
            }
            for (Index k = 0; k < K_; ++k) {
                basis_.eval(l, problem_.samples(l, k), 0, p.col(k).data());
                if (dp) basis_.eval(l, problem_.samples(l, k), 1, dp->col(k).data());
            }
        }

        if (extra_) {
            extra_col_.resize(K_);
            for (Index k = 0; k < K_; ++k) {
                const Vector x = problem_.samples.col(k);
                double v = extra_->fn.value(x);
                if (use_gradient_) v += extra_->fn.gradient(x).dot(problem_.directions->col(k));
                extra_col_[k] = v;
            }
        }

        psi_left_.resize(static_cast<std::size_t>(d_));
        psi_right_.resize(static_cast<std::size_t>(d_));
        theta_left_.resize(static_cast<std::size_t>(d_));
        theta_right_.resize(static_cast<std::size_t>(d_));
    }

    FunctionalTT run(FitDiagnostics* diagnostics) {
        FitDiagnostics local;
        FitDiagnostics& diag = diagnostics ? *diagnostics : local;
        double prev_sweep_loss = std::numeric_limits<double>::infinity();
        for (int sweep = 0; sweep < config_.max_sweeps; ++sweep) {
            const double loss = run_sweep(diag);
            diag.sweeps.push_back({loss, ranks(), last_condition_});
            diag.sweeps_used = sweep + 1;
            diag.final_loss = loss;
            if (std::isfinite(prev_sweep_loss) &&
                prev_sweep_loss - loss <= config_.sweep_tolerance * std::max(prev_sweep_loss, 1e-300))
                break;
            prev_sweep_loss = loss;
        }
        TensorTrain tt(std::move(components_), d_ - 1);
        auto extra = extra_;
        if (extra) extra->coeff = c_extra_;
        return FunctionalTT(std::move(tt), basis_, std::move(extra));
    }

private:
    RankTuple ranks() const {
        RankTuple r;
        for (int l = 0; l + 1 < d_; ++l)
            r.push_back(components_[static_cast<std::size_t>(l)].extent(2));
        return r;
    }

    double run_sweep(FitDiagnostics& diag) {
        right_orthogonalize();
        build_right_stacks();

        psi_left_[0] = Matrix::Ones(K_, 1);
        if (use_gradient_) theta_left_[0] = Matrix::Zero(K_, 1);

        double loss = std::numeric_limits<double>::quiet_NaN();
        for (int l = 0; l < d_; ++l) {
            loss = solve_at(l);
            diag.micro_losses.push_back(loss);
            if (l + 1 < d_) {
                move_core_right(l);
                update_left_stacks(l);
            }
        }
        return loss;
    }

    void right_orthogonalize() {
        for (int l = d_ - 1; l > 0; --l) {
            auto& cur = components_[static_cast<std::size_t>(l)];
            auto& prv = components_[static_cast<std::size_t>(l) - 1];
            const Index m = cur.extent(1), r1 = cur.extent(2);
            auto qr = thin_qr(Matrix(right_unfold(cur)).transpose());
            const Index k = qr.q.cols();
            cur = from_matrix(qr.q.transpose(), {k, m, r1});
            Matrix merged = Matrix(left_unfold(prv)) * qr.r.transpose();
            prv = from_matrix(merged, {prv.extent(0), prv.extent(1), k});
        }
    }

    void move_core_right(int l) {
        auto& cur = components_[static_cast<std::size_t>(l)];
        auto& nxt = components_[static_cast<std::size_t>(l) + 1];
        const Index r0 = cur.extent(0), m = cur.extent(1);
        auto qr = thin_qr(Matrix(left_unfold(cur)));
        const Index k = qr.q.cols();
        cur = from_matrix(qr.q, {r0, m, k});
        Matrix merged = qr.r * Matrix(right_unfold(nxt));
        nxt = from_matrix(merged, {k, nxt.extent(1), nxt.extent(2)});
    }

    void build_right_stacks() {
        psi_right_[static_cast<std::size_t>(d_) - 1] = Matrix::Ones(K_, 1);
        if (use_gradient_) theta_right_[static_cast<std::size_t>(d_) - 1] = Matrix::Zero(K_, 1);
        for (int l = d_ - 1; l > 0; --l) {
            const auto& u = components_[static_cast<std::size_t>(l)];
            const Index r0 = u.extent(0);
            auto lu = left_unfold(u);  // (r0 m) x r1
            const auto& src = psi_right_[static_cast<std::size_t>(l)];
            auto& dst = psi_right_[static_cast<std::size_t>(l) - 1];
            dst.resize(K_, r0);
            const auto& p = phi_[static_cast<std::size_t>(l)];
            if (!use_gradient_) {
#pragma omp parallel
                {
                    Vector row(src.cols()), tmp(r0 * m_);
#pragma omp for schedule(static)
                    for (Index k = 0; k < K_; ++k) {
                        row = src.row(k);
                        tmp.noalias() = lu * row;  // (r0 m)
                        dst.row(k).noalias() =
                            (Eigen::Map<const RowMajorMatrix>(tmp.data(), r0, m_) * p.col(k))
                                .transpose();
                    }
                }
            } else {
                const auto& tsrc = theta_right_[static_cast<std::size_t>(l)];
                auto& tdst = theta_right_[static_cast<std::size_t>(l) - 1];
                tdst.resize(K_, r0);
                const auto& dp = dphi_[static_cast<std::size_t>(l)];
                const auto& xi = *problem_.directions;
#pragma omp parallel
                {
                    Vector row(src.cols()), tmp(r0 * m_), ttheta(r0 * m_);
#pragma omp for schedule(static)
                    for (Index k = 0; k < K_; ++k) {
                        row = src.row(k);
                        tmp.noalias() = lu * row;
                        Eigen::Map<const RowMajorMatrix> tmat(tmp.data(), r0, m_);
                        dst.row(k).noalias() = (tmat * p.col(k)).transpose();
                        row = tsrc.row(k);
                        ttheta.noalias() = lu * row;
                        tdst.row(k).noalias() =
                            (Eigen::Map<const RowMajorMatrix>(ttheta.data(), r0, m_) * p.col(k) +
                             xi(l, k) * (tmat * dp.col(k)))
                                .transpose();
                    }
                }
            }
        }
    }

    void update_left_stacks(int l) {
        const auto& u = components_[static_cast<std::size_t>(l)];
        const Index r1 = u.extent(2);
        auto ru = right_unfold(u);  // r0 x (m r1)
        const auto& p = phi_[static_cast<std::size_t>(l)];
        const auto& src = psi_left_[static_cast<std::size_t>(l)];
        auto& dst = psi_left_[static_cast<std::size_t>(l) + 1];
        dst.resize(K_, r1);
        if (!use_gradient_) {
#pragma omp parallel
            {
                Eigen::RowVectorXd tmp(m_ * r1);
#pragma omp for schedule(static)
                for (Index k = 0; k < K_; ++k) {
                    tmp.noalias() = src.row(k) * ru;  // (m r1)
                    dst.row(k).noalias() =
                        (Eigen::Map<const RowMajorMatrix>(tmp.data(), m_, r1).transpose() *
                         p.col(k))
                            .transpose();
                }
            }
        } else {
            const auto& dp = dphi_[static_cast<std::size_t>(l)];
            const auto& xi = *problem_.directions;
            const auto& tsrc = theta_left_[static_cast<std::size_t>(l)];
            auto& tdst = theta_left_[static_cast<std::size_t>(l) + 1];
            tdst.resize(K_, r1);
#pragma omp parallel
            {
                Eigen::RowVectorXd tmp(m_ * r1), ttheta(m_ * r1);
#pragma omp for schedule(static)
                for (Index k = 0; k < K_; ++k) {
                    tmp.noalias() = src.row(k) * ru;
                    Eigen::Map<const RowMajorMatrix> tmat(tmp.data(), m_, r1);
                    dst.row(k).noalias() = (tmat.transpose() * p.col(k)).transpose();
                    ttheta.noalias() = tsrc.row(k) * ru;
                    tdst.row(k).noalias() =
                        (Eigen::Map<const RowMajorMatrix>(ttheta.data(), m_, r1).transpose() *
                             p.col(k) +
                         xi(l, k) * (tmat.transpose() * dp.col(k)))
                            .transpose();
                }
            }
        }
    }

    // Solves the local problem at mode l (the core sits there, so the local
    // coefficient norm is the full coefficient norm) and returns the
    // regularized empirical loss at the minimizer.
    double solve_at(int l) {
        auto& u = components_[static_cast<std::size_t>(l)];
        const Index r0 = u.extent(0), r1 = u.extent(2);
        const Index n_tt = r0 * m_ * r1;
        const bool with_extra_col = extra_.has_value() && config_.include_terminal;
        const Index n = n_tt + (with_extra_col ? 1 : 0);

        Matrix a(K_, n);
        const auto& p = phi_[static_cast<std::size_t>(l)];
        const auto& pl = psi_left_[static_cast<std::size_t>(l)];
        const auto& pr = psi_right_[static_cast<std::size_t>(l)];
#pragma omp parallel for schedule(static)
        for (Index k = 0; k < K_; ++k) {
            Index idx = 0;
            if (!use_gradient_) {
                for (Index al = 0; al < r0; ++al)
                    for (Index i = 0; i < m_; ++i) {
                        const double lp = pl(k, al) * p(i, k);
                        for (Index b = 0; b < r1; ++b) a(k, idx++) = lp * pr(k, b);
                    }
            } else {
                const auto& dp = dphi_[static_cast<std::size_t>(l)];
                const auto& tl = theta_left_[static_cast<std::size_t>(l)];
                const auto& tr = theta_right_[static_cast<std::size_t>(l)];
                const double xil = (*problem_.directions)(l, k);
                for (Index al = 0; al < r0; ++al)
                    for (Index i = 0; i < m_; ++i) {
                        const double base = pl(k, al) * p(i, k);
                        const double dir = tl(k, al) * p(i, k) + pl(k, al) * dp(i, k) * xil;
                        for (Index b = 0; b < r1; ++b)
                            a(k, idx++) = base * pr(k, b) + dir * pr(k, b) + base * tr(k, b);
                    }
            }
            if (with_extra_col) a(k, idx) = extra_col_[k];
        }

        Vector rhs = problem_.targets;
        if (extra_ && !with_extra_col && c_extra_ != 0.0) rhs -= c_extra_ * extra_col_;

        const Vector c = solve_local(a, rhs, config_.delta * static_cast<double>(K_));
        last_condition_ = estimate_condition(a, config_.delta * static_cast<double>(K_));

        u = DenseTensor({r0, m_, r1}, std::vector<double>(c.data(), c.data() + n_tt));
        if (with_extra_col) c_extra_ = c[n_tt];

        const Vector residual = a * c - rhs;
        double penalty = c.squaredNorm();
        if (extra_ && !with_extra_col) penalty += c_extra_ * c_extra_;
        return residual.squaredNorm() / static_cast<double>(K_) + config_.delta * penalty;
    }

    double estimate_condition(const Matrix& a, double delta) const {
        Matrix gram = a.transpose() * a;
        gram.diagonal().array() += delta;
        Eigen::SelfAdjointEigenSolver<Matrix> es(gram);
        const double lo = es.eigenvalues().minCoeff();
        const double hi = es.eigenvalues().maxCoeff();
        return lo > 0 ? hi / lo : std::numeric_limits<double>::infinity();
    }

    const RegressionProblem& problem_;
    const AlsConfig& config_;
    bool use_gradient_;
    BasisSet basis_;
    std::optional<ExtraTerm> extra_;
    int d_;
    Index m_;
    Index K_;

    std::vector<DenseTensor> components_;
    double c_extra_ = 0.0;
    Vector extra_col_;
    std::vector<Matrix> phi_, dphi_;
    std::vector<Matrix> psi_left_, psi_right_, theta_left_, theta_right_;
    double last_condition_ = 0.0;
};

}  // namespace

Vector solve_local(const Matrix& a, const Vector& y, double delta) {
    const Index n = a.cols();
    Matrix gram = a.transpose() * a;
    gram.diagonal().array() += delta;
    const Vector rhs = a.transpose() * y;

    Eigen::LLT<Matrix> llt(gram);
    if (llt.info() == Eigen::Success) {
        const double dmin = llt.matrixLLT().diagonal().minCoeff();
        const double dmax = llt.matrixLLT().diagonal().maxCoeff();
        if (delta > 0.0 || (dmin > 0.0 && dmin > 1e-7 * dmax)) return llt.solve(rhs);
    }
    Eigen::SelfAdjointEigenSolver<Matrix> es(gram);
    if (delta == 0.0 &&
        es.eigenvalues().minCoeff() <= 1e-14 * std::max(1.0, es.eigenvalues().maxCoeff()))
        throw SingularSystemError("normal equations are rank deficient with delta = 0");
    // Eigendecomposition fallback, clipping eigenvalues below 1e-14.
    Vector inv = es.eigenvalues();
    for (Index i = 0; i < n; ++i) inv[i] = inv[i] > 1e-14 ? 1.0 / inv[i] : 0.0;
    return es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose() * rhs;
}

FunctionalTT als_fit(const RegressionProblem& problem, const FunctionalTT& init,
                     const AlsConfig& config, FitDiagnostics* diagnostics) {
    AlsRun run(problem, init, config, /*use_gradient=*/false);
    return run.run(diagnostics);
}

FunctionalTT als_fit_grad(const RegressionProblem& problem, const FunctionalTT& init,
                          const AlsConfig& config, FitDiagnostics* diagnostics) {
    AlsRun run(problem, init, config, /*use_gradient=*/true);
    return run.run(diagnostics);
}

double regression_loss(const RegressionProblem& problem, const FunctionalTT& fit, double delta) {
    Vector pred = fit.evaluate_many(problem.samples);
    if (problem.directions)
        pred += fit.directional_grad_many(problem.samples, *problem.directions);
    const double mse =
        (pred - problem.targets).squaredNorm() / static_cast<double>(problem.count());
    double penalty = fit.tt().norm();
    penalty *= penalty;
    if (fit.extra()) penalty += fit.extra()->coeff * fit.extra()->coeff;
    return mse + delta * penalty;
}

RankTuple feasible_ranks(int dim, int basis_size, Index rank) {
    RankTuple out;
    for (int bond = 1; bond < dim; ++bond) {
        const int e = std::min(bond, dim - bond);
        double cap = 1.0;
        for (int i = 0; i < e && cap < static_cast<double>(rank); ++i)
            cap *= static_cast<double>(basis_size);
        out.push_back(std::min<Index>(rank, static_cast<Index>(std::min(cap, 1e9))));
    }
    return out;
}

namespace {

// Appends one random slice at bond `bond` (scale 1e-3 of the component norm).
void grow_bond(std::vector<DenseTensor>& comps, int bond, std::uint64_t seed,
               std::uint64_t& counter) {
    auto& lft = comps[static_cast<std::size_t>(bond)];
    auto& rgt = comps[static_cast<std::size_t>(bond) + 1];
    const Index r0 = lft.extent(0), m = lft.extent(1), r1 = lft.extent(2);
    const Index s0 = rgt.extent(0), mn = rgt.extent(1), s1 = rgt.extent(2);

    DenseTensor nl({r0, m, r1 + 1});
    const double scale_l = 1e-3 * std::max(lft.frobenius_norm(), 1e-12) /
                           std::sqrt(static_cast<double>(r0 * m));
    for (Index a = 0; a < r0; ++a)
        for (Index i = 0; i < m; ++i) {
            for (Index b = 0; b < r1; ++b) nl.at({a, i, b}) = lft.at({a, i, b});
            nl.at({a, i, r1}) =
                scale_l * counter_normal(seed, RngStream::TensorInit, 17, 0, counter++);
        }
    DenseTensor nr({s0 + 1, mn, s1});
    const double scale_r = 1e-3 * std::max(rgt.frobenius_norm(), 1e-12) /
                           std::sqrt(static_cast<double>(mn * s1));
    for (Index a = 0; a < s0; ++a)
        for (Index i = 0; i < mn; ++i)
            for (Index b = 0; b < s1; ++b) nr.at({a, i, b}) = rgt.at({a, i, b});
    for (Index i = 0; i < mn; ++i)
        for (Index b = 0; b < s1; ++b)
            nr.at({s0, i, b}) =
                scale_r * counter_normal(seed, RngStream::TensorInit, 18, 0, counter++);
    lft = std::move(nl);
    rgt = std::move(nr);
}

}  // namespace

FunctionalTT adapt_rank(const FunctionalTT& model, const RegressionProblem& problem,
                        const AlsConfig& config, FitDiagnostics* diagnostics) {
    if (!config.rank_policy.adaptive) throw ConfigError("adapt_rank needs an adaptive rank policy");
    const bool grad = problem.directions.has_value();
    auto fit_once = [&](const FunctionalTT& init, FitDiagnostics* d) {
        return grad ? als_fit_grad(problem, init, config, d) : als_fit(problem, init, config, d);
    };

    RankTuple ones(static_cast<std::size_t>(model.dimension()) - 1, 1);
    FunctionalTT init = rank_leq(model.tt().ranks(), ones)
                            ? model
                            : random_functional_tt(model.basis(), ones, config.seed, model.extra());

    FitDiagnostics scratch;
    FitDiagnostics& diag = diagnostics ? *diagnostics : scratch;
    FunctionalTT best = fit_once(init, &diag);
    double best_loss = regression_loss(problem, best, config.delta);

    const RankTuple cap =
        feasible_ranks(model.dimension(), model.basis().size(), config.rank_policy.max_rank);
    std::uint64_t counter = 0;
    while (true) {
        const RankTuple current = best.tt().ranks();
        std::vector<DenseTensor> comps;
        for (int l = 0; l < best.dimension(); ++l) comps.push_back(best.tt().component(l));
        bool grew = false;
        for (int bond = 0; bond + 1 < best.dimension(); ++bond) {
            if (current[static_cast<std::size_t>(bond)] < cap[static_cast<std::size_t>(bond)]) {
                grow_bond(comps, bond, config.seed, counter);
                grew = true;
            }
        }
        if (!grew) break;

        FunctionalTT candidate_init(TensorTrain(std::move(comps)), best.basis(), best.extra());
        FunctionalTT candidate = fit_once(candidate_init, &diag);
        const double loss = regression_loss(problem, candidate, config.delta);
        if (best_loss - loss > config.rank_policy.growth_threshold * std::max(best_loss, 1e-300)) {
            best = std::move(candidate);
            best_loss = loss;
        } else {
            break;  // plateau: keep the smaller ranks
        }
    }
    diag.final_loss = best_loss;
    return best;
}

}  // namespace ttbsde
