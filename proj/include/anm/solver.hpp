#pragma once

#include "anm/graph.hpp"

#include <Eigen/SparseLU>

#include <functional>

namespace anm {

struct SolverOptions {
    int order = 20;          // truncation order N
    real_t eps_rov = 1e-4;   // range-of-validity threshold
    real_t eps_res = 1e-10;  // target residual RMS (equational form)
    int max_iter = 200;
    bool use_pade = true;
};

inline real_t rms(const Eigen::VectorXd& v) {
    return v.size() ? std::sqrt(v.squaredNorm() / real_t(v.size())) : 0.0;
}

Eigen::VectorXd series_eval(const std::vector<Eigen::VectorXd>& c, real_t a);
real_t series_eval(const std::vector<real_t>& c, real_t a);

/* =================== bordered pseudo-arclength system =================== */

// P x_k + lambda_k v = -q_k together with the arclength row
// x1^T x_k + lambda1 lambda_k = [k == 1]. Factorized once per step and
// reused for all orders via block elimination.
class BorderedSystem {
public:
    void factorize(SpMat P, Eigen::VectorXd v);

    // k = 1 solves the tangent (q ignored, must be zero) and fixes the
    // normalization x1^T x1 + lambda1^2 = 1 with lambda1 > 0
    std::pair<Eigen::VectorXd, real_t> solve_order(const Eigen::VectorXd& q,
                                                   size_t k);

    const Eigen::VectorXd& tangent_x() const { return x1_; }
    real_t tangent_lambda() const { return lambda1_; }

private:
    SpMat p_;
    Eigen::VectorXd v_, y_, x1_;
    real_t lambda1_ = 0.0;
    Eigen::SparseLU<SpMat> lu_;
    bool factorized_ = false;
};

/* =================== Taylor coefficient solve =================== */

struct SeriesState {
    std::vector<Eigen::VectorXd> x;  // coefficients 0..N
    std::vector<real_t> lam;
    // diagnostics from re-propagating the solved coefficients
    std::vector<real_t> order_residual;  // ||order-k coefficient of H||
    std::vector<real_t> q_norm;          // ||q_k||

    size_t order() const { return x.size() - 1; }
};

// Order-by-order coefficient solve at a point with H(x0, lambda0) ~= 0.
// start_rms_tol < 0 selects the default starting tolerance
// 1e-6 (1 + |x0| / sqrt(n)); +inf skips the check (used by the
// continuation driver on its own accepted states, which carry the
// approximation error of the previous step).
SeriesState solve_coefficients(const HomotopySystem& sys,
                               const Eigen::VectorXd& x0, real_t lambda0,
                               int order, real_t start_rms_tol = -1.0);

/* =================== range of validity =================== */

// a_r = (eps * ||x1|| / ||xN||)^(1/(N-1)); returns +inf when the series is
// polynomial (||xN|| vanishes) so the caller can overshoot the target.
real_t rov_taylor(const SeriesState& s, real_t eps_rov);

/* =================== Pade approximation =================== */

// Rational approximant sharing denominators across components:
//   P(a) = x0 + sum_i (D_{M-1-i}(a) / D_{M-1}(a)) x_i a^i,
//   D_k(a) = sum_{j<=k} d_j a^j, d_0 = 1.
// The free coefficients d_1..d_{M-1} are the least-squares solution of the
// order-M re-expansion match, solved on norm-scaled coefficient columns by
// rank-revealing QR.
struct PadeApproximant {
    bool valid = false;
    size_t m = 0;  // uses coefficients 0..m
    std::vector<Eigen::VectorXd> xi;
    std::vector<real_t> lam;
    Eigen::VectorXd d;

    Eigen::VectorXd eval_x(real_t a) const;
    real_t eval_lambda(real_t a) const;
    real_t denom(real_t a, size_t k) const;
    // smallest positive real root of D_{m-1}, or 0 when none exists
    real_t smallest_denominator_root() const;
};

PadeApproximant pade_construct(const SeriesState& s);
// approximant built from the leading `use_order`+1 coefficients
PadeApproximant pade_construct_upto(const SeriesState& s, size_t use_order);

// Range of validity of the Pade form: the largest a in (a_r, r) where the
// relative difference between consecutive-order approximants stays below
// eps, found by bisection; returns a_r when the criterion already fails
// there.
real_t rov_pade(const PadeApproximant& full, const PadeApproximant& lower,
                real_t a_r, real_t eps_rov);

/* =================== continuation =================== */

enum class ApproximantKind { Taylor, Pade };

struct StepRecord {
    real_t lambda_start = 0, lambda_end = 0;
    real_t a_r = 0, a_p = 0, a_m = 0, a_used = 0;
    ApproximantKind kind = ApproximantKind::Taylor;
    real_t residual_rms = 0;
    SeriesState series;
    PadeApproximant pade;

    Eigen::VectorXd eval_x(real_t a) const;
    real_t eval_lambda(real_t a) const;
    // state with lambda(a) = lambda_i for lambda_i inside the step's range
    Eigen::VectorXd state_at_lambda(real_t lambda_i) const;
};

struct ContinuationTrace {
    std::vector<StepRecord> steps;
};

struct ContinuationResult {
    Eigen::VectorXd x;
    real_t lambda = 0;
    ContinuationTrace trace;
};

using AcceptCallback =
        std::function<void(const Eigen::VectorXd&, real_t lambda)>;

// Path following of H(x, lambda) = 0 from (x0, lambda0) until
// lambda reaches lambda_t; each step keeps the approximant with the larger
// range of validity.
ContinuationResult continuation(const HomotopySystem& sys,
                                const Eigen::VectorXd& x0, real_t lambda0,
                                real_t lambda_t, const SolverOptions& opts,
                                const AcceptCallback& on_accept = {});

// Residual-driven solve of f(x) + v = 0: the homotopy is redefined around
// the current iterate each iteration, absorbing numerical and approximation
// error, and the loop runs on the residual itself. f_sys must not depend on
// lambda; its output offsets define f.
ContinuationResult equational_continuation(const HomotopySystem& f_sys,
                                           const Eigen::VectorXd& v,
                                           const Eigen::VectorXd& x0,
                                           const SolverOptions& opts,
                                           const AcceptCallback& on_accept =
                                                   {});

}  // namespace anm
