#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "anm/solver.hpp"
#include "anm/toy.hpp"

#include "oracle.hpp"

using namespace anm;

namespace {

SpMat to_sparse(const Eigen::MatrixXd& m) {
    return m.sparseView(0.0, 0.0);
}

// Taylor re-expansion of the rational form by polynomial long division:
// coefficients of (sum_i D_{m-1-i}(a) x_i a^i) / D_{m-1}(a) up to `orders`
std::vector<Eigen::VectorXd> pade_reexpand(const PadeApproximant& p,
                                           size_t orders) {
    const size_t n = p.xi[0].size();
    std::vector<Eigen::VectorXd> num(orders + 1, Eigen::VectorXd::Zero(n));
    for (size_t j = 0; j < size_t(p.d.size()) && j <= orders; ++j)
        num[j] += p.d[j] * p.xi[0];  // D_{m-1}(a) x0
    for (size_t i = 1; i + 1 <= p.m; ++i)
        for (size_t j = 0; j <= p.m - 1 - i && i + j <= orders; ++j)
            num[i + j] += p.d[j] * p.xi[i];  // D_{m-1-i}(a) x_i a^i
    std::vector<Eigen::VectorXd> q(orders + 1, Eigen::VectorXd::Zero(n));
    for (size_t k = 0; k <= orders; ++k) {
        Eigen::VectorXd acc = num[k];
        for (size_t j = 1; j <= k && j < size_t(p.d.size()); ++j)
            acc -= p.d[j] * q[k - j];
        q[k] = acc / p.d[0];
    }
    return q;
}

SeriesState geometric_series_state(size_t orders) {
    // scalar series of 1/(1-a): all coefficients one
    SeriesState s;
    for (size_t i = 0; i <= orders; ++i) {
        s.x.push_back(Eigen::VectorXd::Ones(1));
        s.lam.push_back(0.0);
    }
    return s;
}

}  // namespace

TEST_CASE("bordered solve: defining equations hold on a random SPD system") {
    oracle::Rng rng(3);
    const int n = 12;
    Eigen::MatrixXd a = rng.matrix(n, n);
    Eigen::MatrixXd spd =
            a * a.transpose() + 3.0 * Eigen::MatrixXd::Identity(n, n);
    Eigen::VectorXd v = Eigen::VectorXd::Random(n);

    BorderedSystem bs;
    bs.factorize(to_sparse(spd), v);
    auto [x1, l1] = bs.solve_order(Eigen::VectorXd::Zero(n), 1);
    CHECK(l1 > 0.0);
    CHECK(std::abs(x1.squaredNorm() + l1 * l1 - 1.0) < 1e-12);
    CHECK((spd * x1 + l1 * v).norm() < 1e-10);

    for (int k = 2; k <= 5; ++k) {
        Eigen::VectorXd q = Eigen::VectorXd::Random(n);
        auto [xk, lk] = bs.solve_order(q, size_t(k));
        CHECK((spd * xk + lk * v + q).norm() < 1e-10);
        CHECK(std::abs(x1.dot(xk) + l1 * lk) < 1e-10);
    }
}

TEST_CASE("toy system order-1 coefficients match the closed form") {
    HomotopySystem sys = toy::build_system(true);
    SeriesState s = solve_coefficients(sys, toy::start_point(), 0.0, 20);
    const real_t r6 = std::sqrt(6.0);
    CHECK(s.x[1][0] == doctest::Approx(2.0 / r6));
    CHECK(s.x[1][1] == doctest::Approx(-1.0 / r6));
    CHECK(s.lam[1] == doctest::Approx(1.0 / r6));

    // tangent orthogonality and per-order residuals
    for (size_t k = 2; k <= s.order(); ++k) {
        CHECK(std::abs(s.x[1].dot(s.x[k]) + s.lam[1] * s.lam[k]) < 1e-10);
        CHECK(s.order_residual[k] <= 1e-8 * (1.0 + s.q_norm[k]));
    }

    // substitute the truncated series into H at a modest step
    real_t a = 0.05;
    Eigen::VectorXd xa = series_eval(s.x, a);
    real_t la = series_eval(s.lam, a);
    CHECK(rms(evaluate(sys, xa, la)) < 1e-10);
}

TEST_CASE("solve_coefficients rejects invalid starting points") {
    HomotopySystem sys = toy::build_system(true);
    Eigen::Vector2d bad{1.0, 1.0};
    CHECK_THROWS_AS((void)solve_coefficients(sys, bad, 0.0, 5), SolverError);
}

TEST_CASE("linear system yields a polynomial series") {
    // H = x - lambda v': x1 proportional to v', all higher orders vanish
    auto g = std::make_shared<Graph>();
    VarId x = g->add_input({1, 3, 1});
    g->set_output(x);
    g->finalize();
    HomotopySystem sys{SparseAffineMap::identity_to_tensor(3, {1, 3, 1}), g,
                       SparseAffineMap::identity_from_tensor({1, 3, 1})};
    Eigen::Vector3d vdir{1.0, -2.0, 0.5};
    sys.output.offset_lambda = -vdir;

    SeriesState s = solve_coefficients(sys, Eigen::Vector3d::Zero(), 0.0, 8);
    CHECK(s.x[1].normalized().isApprox(vdir.normalized(), 1e-12));
    for (size_t k = 2; k <= 8; ++k)
        CHECK(s.x[k].norm() < 1e-12 * s.x[1].norm());
    CHECK(std::isinf(rov_taylor(s, 1e-4)));

    // the continuation overshoots the target in one exact step
    SolverOptions opts;
    opts.order = 8;
    ContinuationResult cr =
            continuation(sys, Eigen::Vector3d::Zero(), 0.0, 1.0, opts);
    CHECK(cr.trace.steps.size() == 1);
    CHECK((cr.x - vdir).norm() < 1e-10);
}

TEST_CASE("rov_taylor formula and invariances") {
    SeriesState s;
    s.x.assign(21, Eigen::VectorXd::Zero(2));
    s.lam.assign(21, 0.0);
    s.x[1] = Eigen::Vector2d(1.0, 0.0);
    s.x[20] = Eigen::Vector2d(1e6, 0.0);
    real_t ar = rov_taylor(s, 1e-6);
    CHECK(ar == doctest::Approx(std::pow(1e-12, 1.0 / 19.0)));
    CHECK(ar == doctest::Approx(0.23357).epsilon(1e-4));

    // equal norms with eps 1 gives exactly 1
    s.x[20] = s.x[1];
    CHECK(rov_taylor(s, 1.0) == doctest::Approx(1.0));

    // scaling every coefficient leaves the estimate unchanged
    s.x[1] *= 3.7;
    s.x[20] *= 3.7;
    CHECK(rov_taylor(s, 1.0) == doctest::Approx(1.0));
}

TEST_CASE("pade reproduces a geometric series far beyond Taylor") {
    const size_t orders = 8;
    SeriesState s = geometric_series_state(orders);
    PadeApproximant p = pade_construct(s);
    REQUIRE(p.valid);

    real_t taylor_at = series_eval(s.x, 0.9)[0];
    real_t pade_at = p.eval_x(0.9)[0];
    CHECK(std::abs(pade_at - 10.0) <= 1e-3);
    CHECK(std::abs(taylor_at - 10.0) > 0.5);
}

TEST_CASE("pade of a linear series equals the Taylor form") {
    SeriesState s;
    s.x.assign(7, Eigen::VectorXd::Zero(3));
    s.lam.assign(7, 0.0);
    s.x[0] = Eigen::Vector3d(1, 2, 3);
    s.x[1] = Eigen::Vector3d(0.5, -0.5, 0.25);
    PadeApproximant p = pade_construct(s);
    REQUIRE(p.valid);
    CHECK(p.d.tail(p.d.size() - 1).norm() < 1e-12);  // constant denominator
    for (real_t a : {0.3, 1.1, 2.5})
        CHECK((p.eval_x(a) - series_eval(s.x, a)).norm() < 1e-10);
}

TEST_CASE("pade re-expansion matches the series coefficients") {
    oracle::Rng rng(17);
    const size_t orders = 9;
    SeriesState s;
    for (size_t i = 0; i <= orders; ++i) {
        Eigen::VectorXd c(4);
        for (int q = 0; q < 4; ++q)
            c[q] = rng.uniform(-1, 1) * std::pow(2.0, real_t(i));
        s.x.push_back(c);
        s.lam.push_back(rng.uniform(-1, 1));
    }
    PadeApproximant p = pade_construct(s);
    REQUIRE(p.valid);
    auto re = pade_reexpand(p, orders - 1);
    real_t scale = 0;
    for (size_t k = 0; k + 1 <= orders; ++k)
        scale = std::max(scale, s.x[k].norm());
    for (size_t k = 0; k + 1 <= orders; ++k)
        CHECK((re[k] - s.x[k]).norm() / scale < 1e-8);
}

TEST_CASE("rov_pade stays above the Taylor range and respects poles") {
    const size_t orders = 8;
    SeriesState s = geometric_series_state(orders);
    PadeApproximant full = pade_construct(s);
    PadeApproximant lower = pade_construct_upto(s, orders - 1);
    REQUIRE(full.valid);
    REQUIRE(lower.valid);

    // denominator 1 - a has its root at 1
    CHECK(full.smallest_denominator_root() == doctest::Approx(1.0));

    real_t a_r = rov_taylor(s, 1e-4);
    real_t a_p = rov_pade(full, lower, a_r, 1e-4);
    CHECK(a_p >= a_r);
    CHECK(a_p < 1.0);

    // huge tolerance: the criterion never trips, a_p approaches the pole
    real_t a_loose = rov_pade(full, lower, a_r, 1e9);
    CHECK(a_loose == doctest::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("toy continuation matches the reported behavior") {
    toy::ToyResult r = toy::run(toy::default_options(), false);
    CHECK(r.iterations <= 3);
    CHECK(r.residual_rms <= 1e-5);

    // the trace's lambda values strictly increase
    real_t prev = 0.0;
    for (const auto& st : r.trace.steps) {
        CHECK(st.lambda_end > prev);
        prev = st.lambda_end;
    }
    // the solution sits on both curves
    real_t x = r.solution[0], y = r.solution[1];
    real_t fe = 2 * x * x - 5 * x + y * y - 4 * y - 2 * x * y - 5;
    real_t fc = (x + 1) * (x + 1) + y * y - 8;
    CHECK(std::abs(fe) <= 10 * std::max<real_t>(r.residual_rms, 1e-12));
    CHECK(std::abs(fc) <= 10 * std::max<real_t>(r.residual_rms, 1e-12));
}

TEST_CASE("toy equational continuation reaches tight residuals") {
    toy::ToyResult r = toy::run(toy::default_options(), true);
    CHECK(r.residual_rms <= 1e-8);

    // residual RMS never increases (with slack)
    real_t prev = std::numeric_limits<real_t>::infinity();
    for (const auto& st : r.trace.steps) {
        CHECK(st.residual_rms <= prev * (1 + 1e-6));
        prev = st.residual_rms;
    }
}

TEST_CASE("intermediate states along the toy trace satisfy H") {
    SolverOptions opts;
    opts.order = 20;
    HomotopySystem sys = toy::build_system(true);
    ContinuationResult cr =
            continuation(sys, toy::start_point(), 0.0, 1.0, opts);
    for (const auto& st : cr.trace.steps) {
        CHECK(st.residual_rms <= 1e-4);
        // extract a state in the middle of the step's range
        real_t mid = 0.5 * (st.lambda_start + st.lambda_end);
        if (mid > st.lambda_start) {
            Eigen::VectorXd xm = st.state_at_lambda(mid);
            CHECK(rms(evaluate(sys, xm, mid)) <= 1e-3);
        }
    }
}

TEST_CASE("continuation with lambda_t == lambda_0 returns immediately") {
    SolverOptions opts;
    HomotopySystem sys = toy::build_system(true);
    ContinuationResult cr =
            continuation(sys, toy::start_point(), 0.0, 0.0, opts);
    CHECK(cr.trace.steps.empty());
    CHECK((cr.x - toy::start_point()).norm() == 0.0);
}

TEST_CASE("equational continuation with a solved start does nothing") {
    SolverOptions opts;
    HomotopySystem f_sys = toy::build_system(false);
    // v = -f(x0) means x0 already solves f(x) + v = 0
    Eigen::VectorXd v = -evaluate(f_sys, toy::start_point(), 0.0);
    ContinuationResult cr =
            equational_continuation(f_sys, v, toy::start_point(), opts);
    CHECK(cr.trace.steps.empty());
}

TEST_CASE("pade-enabled runs use no more toy iterations than Taylor-only") {
    SolverOptions taylor_only;
    taylor_only.order = 12;
    taylor_only.use_pade = false;
    SolverOptions with_pade = taylor_only;
    with_pade.use_pade = true;

    toy::ToyResult rt = toy::run(taylor_only, false);
    toy::ToyResult rp = toy::run(with_pade, false);
    CHECK(rp.iterations <= rt.iterations);
}

TEST_CASE("coefficient solve through a full SVD-W graph") {
    // consumes U, Sigma and W so the node cannot take the polar fast path
    oracle::Rng rng(71);
    auto g = std::make_shared<Graph>();
    VarId x = g->add_input({1, 3, 3});
    auto sv = g->svd_w(x);
    VarId uss = g->matmul(sv.u, g->matmul(sv.sigma, g->transpose(sv.sigma)));
    g->set_output(g->add(uss, sv.w));
    g->finalize();
    bool polar = false;
    for (const auto& n : g->nodes())
        if (n.op->name() == "svd_w")
            polar = n.polar_path;
    REQUIRE_FALSE(polar);

    // H(x, lambda) = out(x) - out(x0) - lambda * d
    Eigen::HouseholderQR<Eigen::Matrix3d> q1(rng.matrix(3, 3)),
            q2(rng.matrix(3, 3));
    Eigen::Matrix3d r1 = q1.householderQ(), r2 = q2.householderQ();
    Eigen::Matrix3d x0m = r1 * Eigen::Vector3d(3.0, 2.0, 1.0).asDiagonal() *
                          r2.transpose();
    Eigen::VectorXd x0(9);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            x0[3 * i + j] = x0m(i, j);

    HomotopySystem sys{SparseAffineMap::identity_to_tensor(9, {1, 3, 3}), g,
                       SparseAffineMap::identity_from_tensor({1, 3, 3})};
    sys.output.offset0 = -evaluate(sys, x0, 0.0);
    Eigen::VectorXd d(9);
    for (int i = 0; i < 9; ++i)
        d[i] = rng.uniform(-0.5, 0.5);
    sys.output.offset_lambda = -d;

    SeriesState s = solve_coefficients(sys, x0, 0.0, 8);
    for (size_t k = 1; k <= 8; ++k)
        CHECK(s.order_residual[k] <= 1e-8 * (1.0 + s.q_norm[k]));

    real_t a = 0.05;
    CHECK(rms(evaluate(sys, series_eval(s.x, a), series_eval(s.lam, a))) <
          1e-8);
}

TEST_CASE("rov_pade with no positive denominator root searches to the cap") {
    // alternating geometric series 1/(1+a): denominator root at -1
    const size_t orders = 8;
    SeriesState s;
    for (size_t i = 0; i <= orders; ++i) {
        s.x.push_back((i % 2 ? -1.0 : 1.0) * Eigen::VectorXd::Ones(1));
        s.lam.push_back(0.0);
    }
    PadeApproximant full = pade_construct(s);
    PadeApproximant lower = pade_construct_upto(s, orders - 1);
    REQUIRE(full.valid);
    CHECK(full.smallest_denominator_root() == 0.0);  // none exists

    real_t a_r = rov_taylor(s, 1e-4);
    // a huge tolerance drives the search to the 100 a_r cap
    real_t a_p = rov_pade(full, lower, a_r, 1e9);
    CHECK(a_p == doctest::Approx(100.0 * a_r).epsilon(1e-4));
    // and the rational form tracks 1/(1+a) far outside the Taylor range
    CHECK(full.eval_x(3.0)[0] == doctest::Approx(0.25).epsilon(1e-6));
}
