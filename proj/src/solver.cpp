#include "anm/solver.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>

namespace anm {

Eigen::VectorXd series_eval(const std::vector<Eigen::VectorXd>& c, real_t a) {
    Eigen::VectorXd r = c.back();
    for (size_t i = c.size() - 1; i-- > 0;)
        r = c[i] + a * r;
    return r;
}

real_t series_eval(const std::vector<real_t>& c, real_t a) {
    real_t r = c.back();
    for (size_t i = c.size() - 1; i-- > 0;)
        r = c[i] + a * r;
    return r;
}

/* =================== BorderedSystem =================== */

void BorderedSystem::factorize(SpMat P, Eigen::VectorXd v) {
    check<SolverError>(P.rows() == P.cols(), "slope matrix must be square");
    p_ = std::move(P);
    v_ = std::move(v);
    p_.makeCompressed();
    lu_.compute(p_);
    check<SolverError>(lu_.info() == Eigen::Success,
                       "sparse factorization of the slope matrix failed");
    y_ = lu_.solve(-v_);
    check<SolverError>(lu_.info() == Eigen::Success,
                       "sparse solve for the homotopy direction failed");
    factorized_ = true;
    lambda1_ = 0.0;
    x1_.resize(0);
}

std::pair<Eigen::VectorXd, real_t> BorderedSystem::solve_order(
        const Eigen::VectorXd& q, size_t k) {
    check<SolverError>(factorized_, "bordered system is not factorized");
    if (k == 1) {
        lambda1_ = 1.0 / std::sqrt(y_.squaredNorm() + 1.0);
        x1_ = lambda1_ * y_;
        return {x1_, lambda1_};
    }
    check<SolverError>(x1_.size() > 0, "tangent must be solved first");
    Eigen::VectorXd z = lu_.solve(-q);
    check<SolverError>(lu_.info() == Eigen::Success, "sparse solve failed");
    real_t denom = x1_.dot(y_) + lambda1_;
    real_t lambda_k = -x1_.dot(z) / denom;
    Eigen::VectorXd x_k = z + lambda_k * y_;
    return {x_k, lambda_k};
}

/* =================== coefficient solve =================== */

SeriesState solve_coefficients(const HomotopySystem& sys,
                               const Eigen::VectorXd& x0, real_t lambda0,
                               int order, real_t start_rms_tol) {
    check<SolverError>(order >= 1, "truncation order must be >= 1");
    const Graph& g = *sys.graph;
    const size_t n = sys.n();

    JacobianResult jr = jacobian(sys, x0, lambda0);

    Eigen::VectorXd h0 =
            sys.output.to_vector(jr.values[g.output_var()], lambda0);
    real_t start_tol = start_rms_tol >= 0
                               ? start_rms_tol
                               : 1e-6 * (1.0 + x0.norm() /
                                                   std::sqrt(real_t(n)));
    check<SolverError>(
            rms(h0) <= start_tol,
            "starting point is not a solution: residual RMS ", rms(h0),
            " exceeds ", start_tol);

    BorderedSystem bordered;
    bordered.factorize(std::move(jr.P), std::move(jr.v));

    const auto& vars = g.vars();
    const auto& nodes = g.nodes();

    // per-variable coefficient series; constants keep only order 0
    std::vector<std::vector<BatchedTensor>> series(vars.size());
    for (size_t vi = 0; vi < vars.size(); ++vi)
        series[vi].push_back(jr.values[vi]);

    std::vector<BatchedTensor> delta(vars.size());

    SeriesState out;
    out.x.push_back(x0);
    out.lam.push_back(lambda0);
    out.order_residual.assign(size_t(order) + 1, 0.0);
    out.q_norm.assign(size_t(order) + 1, 0.0);

    std::vector<BatchedTensor> coeffs, din;
    for (size_t k = 1; k <= size_t(order); ++k) {
        // bias pass: order-k coefficients with x_k = 0, lambda_k = 0
        series[g.input_var()].push_back(
                BatchedTensor::zeros(vars[g.input_var()].shape));
        for (size_t ni = 0; ni < nodes.size(); ++ni) {
            const GraphNode& nd = nodes[ni];
            NodeSeries ns;
            for (VarId vi : nd.inputs)
                ns.in.push_back(taylor::Series(
                        series[vi].data(),
                        std::min(series[vi].size(), k + 1)));
            for (VarId vi : nd.outputs)
                ns.out.push_back(taylor::Series(series[vi].data(), k));
            coeffs.assign(nd.outputs.size(), {});
            try {
                nd.op->series_coeff(nd, ns, jr.caches[ni], k, coeffs);
            } catch (const DomainError& e) {
                throw DomainError{e.bare, nd.name, e.batch_index};
            }
            for (size_t oi = 0; oi < nd.outputs.size(); ++oi)
                series[nd.outputs[oi]].push_back(std::move(coeffs[oi]));
        }

        Eigen::VectorXd qk = sys.output.to_vector_delta(
                series[g.output_var()][k], 0.0);
        out.q_norm[k] = qk.norm();

        auto [xk, lambda_k] = bordered.solve_order(qk, k);

        // delta pass: add the slope action of the solved coefficients
        delta[g.input_var()] = sys.input.to_tensor_delta(xk, lambda_k);
        series[g.input_var()][k] = delta[g.input_var()];
        for (size_t ni = 0; ni < nodes.size(); ++ni) {
            const GraphNode& nd = nodes[ni];
            din.assign(nd.inputs.size(), {});
            for (size_t ii = 0; ii < nd.inputs.size(); ++ii) {
                VarId vi = nd.inputs[ii];
                din[ii] = vars[vi].is_const || delta[vi].shape().total() == 0
                                  ? BatchedTensor::zeros(vars[vi].shape)
                                  : delta[vi];
            }
            coeffs.assign(nd.outputs.size(), {});
            nd.op->jvp(nd, jr.values, jr.caches[ni], din, coeffs);
            for (size_t oi = 0; oi < nd.outputs.size(); ++oi) {
                VarId vi = nd.outputs[oi];
                delta[vi] = coeffs[oi];
                series[vi][k] = ew_add(series[vi][k], coeffs[oi]);
            }
        }

        out.order_residual[k] = sys.output
                                        .to_vector_delta(
                                                series[g.output_var()][k],
                                                lambda_k)
                                        .norm();
        out.x.push_back(std::move(xk));
        out.lam.push_back(lambda_k);
    }
    return out;
}

/* =================== range of validity =================== */

real_t rov_taylor(const SeriesState& s, real_t eps_rov) {
    // drop trailing coefficients that sit at the float noise floor; they
    // carry no range information and would blow the estimate up
    real_t n1 = s.x[1].norm();
    size_t n_eff = s.order();
    while (n_eff > 1 && s.x[n_eff].norm() < 1e-14 * n1)
        --n_eff;
    if (n_eff <= 1)  // polynomial of degree <= 1: the series is exact
        return std::numeric_limits<real_t>::infinity();
    check<SolverError>(n1 > 0.0, "vanishing series");
    return std::pow(eps_rov * n1 / s.x[n_eff].norm(),
                    1.0 / real_t(n_eff - 1));
}

/* =================== Pade =================== */

PadeApproximant pade_construct_upto(const SeriesState& s, size_t use_order) {
    PadeApproximant p;
    if (use_order < 3 || s.order() < use_order)
        return p;
    const size_t m = use_order;
    p.m = m;
    p.xi.assign(s.x.begin(), s.x.begin() + m + 1);
    p.lam.assign(s.lam.begin(), s.lam.begin() + m + 1);

    // least squares x_m + sum_l d_l x_(m-l) ~= 0 on norm-scaled columns
    const size_t nu = m - 1;
    Eigen::MatrixXd cols(s.x[0].size(), nu);
    Eigen::VectorXd scale(nu);
    for (size_t l = 1; l <= nu; ++l) {
        real_t sc = s.x[m - l].norm();
        scale[l - 1] = sc;
        cols.col(l - 1) = sc > 0 ? Eigen::VectorXd(s.x[m - l] / sc)
                                 : Eigen::VectorXd::Zero(s.x[0].size());
    }
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(cols);
    Eigen::VectorXd e = qr.solve(-s.x[m]);

    p.d.resize(m);
    p.d[0] = 1.0;
    for (size_t l = 1; l <= nu; ++l)
        p.d[l] = scale[l - 1] > 0 ? e[l - 1] / scale[l - 1] : 0.0;
    if (!p.d.allFinite())
        return p;  // flagged invalid, caller falls back to Taylor
    p.valid = true;
    return p;
}

PadeApproximant pade_construct(const SeriesState& s) {
    return pade_construct_upto(s, s.order());
}

real_t PadeApproximant::denom(real_t a, size_t k) const {
    real_t r = 0.0;
    for (size_t j = std::min(k, size_t(d.size() - 1)) + 1; j-- > 0;)
        r = d[j] + a * r;
    return r;
}

Eigen::VectorXd PadeApproximant::eval_x(real_t a) const {
    Eigen::VectorXd r = xi[0];
    const real_t dn = denom(a, m - 1);
    real_t ai = 1.0;
    for (size_t i = 1; i + 1 <= m; ++i) {
        ai *= a;
        r += denom(a, m - 1 - i) / dn * ai * xi[i];
    }
    return r;
}

real_t PadeApproximant::eval_lambda(real_t a) const {
    real_t r = lam[0];
    const real_t dn = denom(a, m - 1);
    real_t ai = 1.0;
    for (size_t i = 1; i + 1 <= m; ++i) {
        ai *= a;
        r += denom(a, m - 1 - i) / dn * ai * lam[i];
    }
    return r;
}

real_t PadeApproximant::smallest_denominator_root() const {
    // trim trailing coefficients, then companion-matrix eigenvalues
    long deg = long(d.size()) - 1;
    real_t mx = d.cwiseAbs().maxCoeff();
    while (deg > 0 && std::abs(d[deg]) <= 1e-14 * mx)
        --deg;
    if (deg <= 0)
        return 0.0;
    Eigen::MatrixXd comp = Eigen::MatrixXd::Zero(deg, deg);
    for (long i = 1; i < deg; ++i)
        comp(i, i - 1) = 1.0;
    for (long i = 0; i < deg; ++i)
        comp(i, deg - 1) = -d[i] / d[deg];
    Eigen::EigenSolver<Eigen::MatrixXd> es(comp, false);
    real_t best = 0.0;
    for (long i = 0; i < deg; ++i) {
        auto ev = es.eigenvalues()[i];
        if (std::abs(ev.imag()) <= 1e-9 * (1.0 + std::abs(ev.real())) &&
            ev.real() > 1e-14) {
            if (best == 0.0 || ev.real() < best)
                best = ev.real();
        }
    }
    return best;
}

real_t rov_pade(const PadeApproximant& full, const PadeApproximant& lower,
                real_t a_r, real_t eps_rov) {
    if (!full.valid || !lower.valid || !std::isfinite(a_r))
        return a_r;
    real_t r = full.smallest_denominator_root();
    if (r <= 0.0)
        r = 100.0 * a_r;
    if (r <= a_r)
        return a_r;

    auto criterion = [&](real_t a) {
        Eigen::VectorXd pn = full.eval_x(a);
        Eigen::VectorXd pl = lower.eval_x(a);
        real_t ref = (pn - full.xi[0]).norm();
        if (ref == 0.0)
            return std::numeric_limits<real_t>::infinity();
        return (pn - pl).norm() / ref;
    };

    if (!(criterion(a_r) < eps_rov))
        return a_r;
    real_t hi = r * (1.0 - 1e-6);
    if (criterion(hi) < eps_rov)
        return hi;
    real_t lo = a_r;
    for (int it = 0; it < 100 && hi - lo > 1e-14 * hi; ++it) {
        real_t mid = 0.5 * (lo + hi);
        (criterion(mid) < eps_rov ? lo : hi) = mid;
    }
    return lo;
}

/* =================== continuation =================== */

namespace {

// first crossing of target by a bracketed increasing-at-zero scalar
// function; bisection with a secant refinement
template <typename F>
real_t solve_bracketed(F&& f, real_t lo, real_t hi, real_t target,
                       real_t tol) {
    real_t flo = f(lo) - target, fhi = f(hi) - target;
    if (flo > 0.0)
        return lo;
    if (fhi < 0.0)
        return hi;
    for (int it = 0; it < 200 && hi - lo > tol; ++it) {
        real_t mid;
        if (fhi - flo > 0.0) {
            mid = lo - flo * (hi - lo) / (fhi - flo);  // secant
            if (!(mid > lo && mid < hi))
                mid = 0.5 * (lo + hi);
        } else {
            mid = 0.5 * (lo + hi);
        }
        // alternate with bisection to guarantee progress
        if (it % 2)
            mid = 0.5 * (lo + hi);
        real_t fm = f(mid) - target;
        if (fm < 0.0) {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
            fhi = fm;
        }
    }
    return 0.5 * (lo + hi);
}

struct StepOutcome {
    Eigen::VectorXd x;
    real_t lambda;
    StepRecord record;
};

// One ANM step: solve the series at (x0, lambda0), pick the approximant
// with the larger range of validity, advance to min(lambda(a_m), lambda_t).
StepOutcome anm_step(const HomotopySystem& sys, const Eigen::VectorXd& x0,
                     real_t lambda0, real_t lambda_t,
                     const SolverOptions& opts, real_t start_rms_tol) {
    StepOutcome so;
    StepRecord& rec = so.record;
    rec.lambda_start = lambda0;
    rec.series =
            solve_coefficients(sys, x0, lambda0, opts.order, start_rms_tol);

    real_t a_r = rov_taylor(rec.series, opts.eps_rov);
    rec.a_r = a_r;
    rec.kind = ApproximantKind::Taylor;
    real_t a_m = a_r;

    if (opts.use_pade && opts.order >= 3 && std::isfinite(a_r)) {
        rec.pade = pade_construct(rec.series);
        PadeApproximant lower =
                pade_construct_upto(rec.series, rec.series.order() - 1);
        real_t a_p = rov_pade(rec.pade, lower, a_r, opts.eps_rov);
        rec.a_p = a_p;
        if (rec.pade.valid && a_p > a_r) {
            rec.kind = ApproximantKind::Pade;
            a_m = a_p;
        }
    }

    if (std::isinf(a_m)) {
        // polynomial solution: expand the step until the target is covered
        a_m = 1.0;
        for (int it = 0; it < 200 && series_eval(rec.series.lam, a_m) <
                                             lambda_t;
             ++it)
            a_m *= 2.0;
        rec.kind = ApproximantKind::Taylor;
    }
    rec.a_m = a_m;
    check<SolverError>(a_m >= 1e-12,
                       "continuation stagnated: step size ", a_m);

    auto lam_at = [&](real_t a) {
        return rec.kind == ApproximantKind::Pade
                       ? rec.pade.eval_lambda(a)
                       : series_eval(rec.series.lam, a);
    };
    real_t lam_am = lam_at(a_m);
    real_t target = std::min(lam_am, lambda_t);
    check<SolverError>(target > lambda0 + 1e-15,
                       "continuation stagnated: no progress in lambda (",
                       lambda0, " -> ", target, ")");

    real_t a_used = lam_am <= lambda_t
                            ? a_m
                            : solve_bracketed(lam_at, 0.0, a_m, target,
                                              1e-12);
    rec.a_used = a_used;
    so.x = rec.kind == ApproximantKind::Pade
                   ? rec.pade.eval_x(a_used)
                   : series_eval(rec.series.x, a_used);
    so.lambda = lam_at(a_used);
    rec.lambda_end = so.lambda;
    return so;
}

}  // namespace

Eigen::VectorXd StepRecord::eval_x(real_t a) const {
    return kind == ApproximantKind::Pade ? pade.eval_x(a)
                                         : series_eval(series.x, a);
}

real_t StepRecord::eval_lambda(real_t a) const {
    return kind == ApproximantKind::Pade ? pade.eval_lambda(a)
                                         : series_eval(series.lam, a);
}

Eigen::VectorXd StepRecord::state_at_lambda(real_t lambda_i) const {
    auto lam = [&](real_t a) { return eval_lambda(a); };
    real_t a = solve_bracketed(lam, 0.0, a_used, lambda_i, 1e-12);
    return eval_x(a);
}

ContinuationResult continuation(const HomotopySystem& sys,
                                const Eigen::VectorXd& x0, real_t lambda0,
                                real_t lambda_t, const SolverOptions& opts,
                                const AcceptCallback& on_accept) {
    ContinuationResult res;
    res.x = x0;
    res.lambda = lambda0;
    int iter = 0;
    while (res.lambda < lambda_t - 1e-12) {
        check<SolverError>(iter < opts.max_iter,
                           "continuation exceeded the iteration cap ",
                           opts.max_iter);
        // only the user-supplied starting point gets the strict residual
        // check; later steps begin at our own approximate states
        real_t start_tol =
                iter == 0 ? -1.0 : std::numeric_limits<real_t>::infinity();
        StepOutcome so =
                anm_step(sys, res.x, res.lambda, lambda_t, opts, start_tol);
        check<SolverError>(so.lambda > res.lambda,
                           "lambda did not increase in an accepted step");
        res.x = std::move(so.x);
        res.lambda = so.lambda;
        so.record.residual_rms = rms(evaluate(sys, res.x, res.lambda));
        res.trace.steps.push_back(std::move(so.record));
        if (on_accept)
            on_accept(res.x, res.lambda);
        ++iter;
    }
    return res;
}

ContinuationResult equational_continuation(const HomotopySystem& f_sys,
                                           const Eigen::VectorXd& v,
                                           const Eigen::VectorXd& x0,
                                           const SolverOptions& opts,
                                           const AcceptCallback& on_accept) {
    check<SolverError>(f_sys.input.offset_lambda.size() == 0 &&
                               f_sys.output.offset_lambda.size() == 0,
                       "equational form requires a lambda-free system");
    ContinuationResult res;
    res.x = x0;
    res.lambda = 0.0;

    Eigen::VectorXd f_x = evaluate(f_sys, res.x, 0.0);
    Eigen::VectorXd r = f_x + v;
    int iter = 0;
    while (rms(r) >= opts.eps_res) {
        check<SolverError>(iter < opts.max_iter,
                           "equational continuation exceeded the iteration "
                           "cap ",
                           opts.max_iter, " (residual RMS ", rms(r), ")");
        // redefine the homotopy around the current iterate:
        // H(x, t) = f(x) + t (v + f(x_k)) - f(x_k), solved from t=0 to 1
        HomotopySystem sys = f_sys;
        sys.output.offset0 = f_sys.output.offset0.size()
                                     ? Eigen::VectorXd(f_sys.output.offset0 -
                                                       f_x)
                                     : Eigen::VectorXd(-f_x);
        sys.output.offset_lambda = r;

        StepOutcome so = anm_step(sys, res.x, 0.0, 1.0, opts, -1.0);
        res.x = std::move(so.x);

        f_x = evaluate(f_sys, res.x, 0.0);
        r = f_x + v;
        so.record.residual_rms = rms(r);
        res.lambda += so.lambda;
        res.trace.steps.push_back(std::move(so.record));
        if (on_accept)
            on_accept(res.x, res.lambda);
        ++iter;
    }
    return res;
}

}  // namespace anm
