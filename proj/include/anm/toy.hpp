#pragma once

#include "anm/solver.hpp"

namespace anm::toy {

// Circle-ellipse intersection smoke problem. Both curves are quadratic
// forms in u = (x, y), batched as two 1x1 outputs:
//   H_e = u^T Qe u + be^T u - 5          (ellipse)
//   H_c = u^T Qc u + bc^T u - 1 - 6 lam  (growing circle)
// The intersection with the full circle is reached at lam = 1 starting
// from (0, -1) on both curves at lam = 0.
inline HomotopySystem build_system(bool with_lambda_offsets) {
    auto g = std::make_shared<Graph>();
    VarId u = g->add_input({2, 2, 1}, "u");

    BatchedTensor q = BatchedTensor::from_data(
            {2, 2, 2}, {2, -1, -1, 1, /* ellipse */
                        1, 0, 0, 1 /* circle */});
    BatchedTensor b = BatchedTensor::from_data({2, 1, 2}, {-5, -4, 2, 0});
    VarId quad = g->matmul(g->transpose(u), g->matmul(g->add_constant(q, "Q"), u));
    VarId lin = g->matmul(g->add_constant(b, "b"), u);
    g->set_output(g->add(quad, lin));
    g->finalize();

    SparseAffineMap in;
    in.tensor_shape = {2, 2, 1};
    in.matrix.resize(4, 2);
    std::vector<Eigen::Triplet<real_t>> trip{
            {0, 0, 1.0}, {1, 1, 1.0}, {2, 0, 1.0}, {3, 1, 1.0}};
    in.matrix.setFromTriplets(trip.begin(), trip.end());

    SparseAffineMap out = SparseAffineMap::identity_from_tensor({2, 1, 1});
    out.offset0 = Eigen::Vector2d(-5.0, -1.0);
    if (with_lambda_offsets)
        out.offset_lambda = Eigen::Vector2d(0.0, -6.0);

    return HomotopySystem{std::move(in), std::move(g), std::move(out)};
}

inline Eigen::Vector2d start_point() {
    return {0.0, -1.0};
}

// residual sqrt((fe^2 + fc^2) / 2) at the full circle radius
inline real_t residual(const Eigen::Vector2d& u) {
    real_t x = u[0], y = u[1];
    real_t fe = 2 * x * x - 5 * x + y * y - 4 * y - 2 * x * y - 5;
    real_t fc = (x + 1) * (x + 1) + y * y - 8;
    return std::sqrt((fe * fe + fc * fc) / 2.0);
}

struct ToyResult {
    Eigen::Vector2d solution;
    real_t residual_rms = 0;
    size_t iterations = 0;
    ContinuationTrace trace;
};

// The toy is tiny, so a tight range-of-validity threshold costs nothing
// and lands within ~2e-6 of the intersection in two steps.
inline SolverOptions default_options() {
    SolverOptions o;
    o.order = 20;
    o.eps_rov = 1e-6;
    o.eps_res = 1e-8;
    return o;
}

inline ToyResult run(const SolverOptions& opts, bool equational) {
    ToyResult r;
    if (equational) {
        HomotopySystem f_sys = build_system(false);
        Eigen::VectorXd v(2);
        v << 0.0, -6.0;
        ContinuationResult cr = equational_continuation(
                f_sys, v, start_point(), opts);
        r.solution = cr.x;
        r.trace = std::move(cr.trace);
    } else {
        HomotopySystem sys = build_system(true);
        ContinuationResult cr =
                continuation(sys, start_point(), 0.0, 1.0, opts);
        r.solution = cr.x;
        r.trace = std::move(cr.trace);
    }
    r.iterations = r.trace.steps.size();
    r.residual_rms = residual(r.solution);
    return r;
}

}  // namespace anm::toy
