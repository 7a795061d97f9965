#include "anm/fem.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <set>

namespace anm::fem {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

Eigen::Matrix3d shape_matrix(const MatrixX3d& coords, const TetMesh& mesh,
                             size_t t) {
    Eigen::Matrix3d d;
    Eigen::Vector3d p0 = coords.row(mesh.tets(t, 0));
    for (int c = 0; c < 3; ++c)
        d.col(c) = coords.row(mesh.tets(t, c + 1)).transpose() - p0;
    return d;
}

}  // namespace

/* =================== mesh =================== */

real_t TetMesh::bbox_diagonal() const {
    Eigen::Vector3d lo = nodes.colwise().minCoeff();
    Eigen::Vector3d hi = nodes.colwise().maxCoeff();
    return (hi - lo).norm();
}

void TetMesh::validate() const {
    real_t scale = bbox_diagonal();
    for (size_t t = 0; t < n_tets(); ++t) {
        for (int j = 0; j < 4; ++j)
            check<IoError>(tets(t, j) >= 0 && size_t(tets(t, j)) < n_nodes(),
                           "tet ", t, " references node ", tets(t, j),
                           " out of range");
        real_t det = shape_matrix(nodes, *this, t).determinant();
        check<DomainError>(det > 1e-12 * scale * scale * scale,
                           str_concat("degenerate or inverted rest tet ", t,
                                      " (det ", det, ")"));
    }
}

TetMesh TetMesh::bar_grid(size_t nx, size_t ny, size_t nz, real_t dx,
                          real_t dy, real_t dz) {
    TetMesh m;
    const size_t px = nx + 1, py = ny + 1, pz = nz + 1;
    m.nodes.resize(px * py * pz, 3);
    auto id = [&](size_t i, size_t j, size_t k) {
        return int((i * py + j) * pz + k);
    };
    for (size_t i = 0; i < px; ++i)
        for (size_t j = 0; j < py; ++j)
            for (size_t k = 0; k < pz; ++k)
                m.nodes.row(id(i, j, k)) =
                        Eigen::RowVector3d(i * dx, j * dy, k * dz);

    static const int kTets[6][4] = {{0, 1, 3, 7}, {0, 3, 2, 7}, {0, 2, 6, 7},
                                    {0, 6, 4, 7}, {0, 4, 5, 7}, {0, 5, 1, 7}};
    m.tets.resize(nx * ny * nz * 6, 4);
    size_t row = 0;
    for (size_t i = 0; i < nx; ++i)
        for (size_t j = 0; j < ny; ++j)
            for (size_t k = 0; k < nz; ++k) {
                int corner[8];
                for (int c = 0; c < 8; ++c)
                    corner[c] = id(i + ((c >> 2) & 1), j + ((c >> 1) & 1),
                                   k + (c & 1));
                for (auto& tet : kTets) {
                    for (int q = 0; q < 4; ++q)
                        m.tets(row, q) = corner[tet[q]];
                    if (shape_matrix(m.nodes, m, row).determinant() < 0)
                        std::swap(m.tets(row, 2), m.tets(row, 3));
                    ++row;
                }
            }
    m.validate();
    return m;
}

TetGeometry tet_geometry(const TetMesh& mesh, const MatrixX3d& coords) {
    const size_t t = mesh.n_tets();
    TetGeometry g;
    g.dm = BatchedTensor::zeros({t, 3, 3});
    g.dm_inv = BatchedTensor::zeros({t, 3, 3});
    g.volume.resize(t);
    g.normals.resize(4 * t, 3);
    real_t* dmp = g.dm.mut();
    real_t* dip = g.dm_inv.mut();
    const Shape sq{t, 3, 3};
    for (size_t i = 0; i < t; ++i) {
        Eigen::Matrix3d d = shape_matrix(coords, mesh, i);
        real_t det = d.determinant();
        check<DomainError>(
                det > 0, str_concat("non-positive tet volume at tet ", i));
        item_view_mut(dmp, sq, i) = d;
        Eigen::Matrix3d dinv = d.inverse();
        item_view_mut(dip, sq, i) = dinv;
        g.volume[i] = det / 6.0;
        // n_{t,j} = -V * (Dm^-T) column j for the nodes spanning Dm; the
        // base node closes the sum to zero
        Eigen::Matrix3d nt = -g.volume[i] * dinv.transpose();
        Eigen::Vector3d n0 = Eigen::Vector3d::Zero();
        for (int c = 0; c < 3; ++c) {
            g.normals.row(4 * i + 1 + c) = nt.col(c).transpose();
            n0 -= nt.col(c);
        }
        g.normals.row(4 * i) = n0.transpose();
    }
    return g;
}

/* =================== materials =================== */

void MaterialSpec::validate() const {
    check<IoError>(mu > 0, "material mu must be positive");
    check<IoError>(lambda >= 0, "material lambda must be nonnegative");
    check<IoError>(kappa > 0, "material kappa must be positive");
}

void ProblemConfig::validate(const TetMesh& mesh) const {
    material.validate();
    std::set<int> fixed(fixed_nodes.begin(), fixed_nodes.end());
    for (int v : fixed_nodes)
        check<IoError>(v >= 0 && size_t(v) < mesh.n_nodes(),
                       "fixed node ", v, " out of range");
    for (int v : handle_nodes) {
        check<IoError>(v >= 0 && size_t(v) < mesh.n_nodes(), "handle node ",
                       v, " out of range");
        check<IoError>(!fixed.count(v),
                       "node ", v, " is both fixed and a handle");
    }
    for (const auto& wp : handle_waypoints)
        check<IoError>(size_t(wp.rows()) == handle_nodes.size(),
                       "waypoint size does not match handle count");
    if (kind == ProblemKind::Deform)
        check<IoError>(!handle_nodes.empty(),
                       "deform problem requires a handle set");
    if (external_force)
        check<IoError>(size_t(external_force->rows()) == mesh.n_nodes(),
                       "external force row count must match node count");
}

MatrixX3d lumped_gravity(const TetMesh& mesh, const MatrixX3d& coords,
                         real_t density, const Eigen::Vector3d& gravity) {
    MatrixX3d f = MatrixX3d::Zero(mesh.n_nodes(), 3);
    for (size_t t = 0; t < mesh.n_tets(); ++t) {
        real_t vol = shape_matrix(coords, mesh, t).determinant() / 6.0;
        Eigen::RowVector3d df = (density * vol / 4.0) * gravity.transpose();
        for (int j = 0; j < 4; ++j)
            f.row(mesh.tets(t, j)) += df;
    }
    return f;
}

/* =================== stress graphs =================== */

namespace {

VarId scalar_const(Graph& g, size_t batch, real_t v, std::string name) {
    return g.add_constant(BatchedTensor::filled({batch, 1, 1}, v),
                          std::move(name));
}

}  // namespace

VarId build_pk1(Graph& g, const MaterialSpec& mat, VarId f) {
    const size_t t = g.var_shape(f).batch;
    VarId mu = scalar_const(g, t, mat.mu, "mu");
    switch (mat.model) {
        case MaterialModel::NC: {
            VarId finv_t = g.transpose(g.inverse(f));
            VarId logj = g.log(g.det(f));
            VarId lam = scalar_const(g, t, mat.lambda, "lambda");
            VarId term1 = g.mul(mu, g.sub(f, finv_t));
            VarId term2 = g.mul(g.mul(lam, logj), finv_t);
            return g.add(term1, term2);
        }
        case MaterialModel::NI: {
            VarId j = g.det(f);
            VarId jm23 = g.pow(j, -2.0 / 3.0);
            VarId tr_f2 = g.reduce_sum(g.mul(f, f));
            VarId finv_t = g.transpose(g.inverse(f));
            VarId third = scalar_const(g, t, 1.0 / 3.0, "third");
            VarId dev = g.sub(f, g.mul(g.mul(third, tr_f2), finv_t));
            VarId term1 = g.mul(g.mul(mu, jm23), dev);
            VarId one = scalar_const(g, t, 1.0, "one");
            VarId kap = scalar_const(g, t, mat.kappa, "kappa");
            VarId term2 = g.mul(g.mul(kap, g.mul(j, g.sub(j, one))), finv_t);
            return g.add(term1, term2);
        }
        case MaterialModel::ARAP: {
            Graph::SvdWOut sv = g.svd_w(f, /*rotation_variant=*/true);
            return g.mul(mu, g.sub(f, sv.w));
        }
    }
    throw Error{"unknown material model"};
}

VarId build_cauchy(Graph& g, const MaterialSpec& mat, VarId f) {
    const size_t t = g.var_shape(f).batch;
    VarId p = build_pk1(g, mat, f);
    VarId one = scalar_const(g, t, 1.0, "one_sigma");
    VarId jinv = g.div(one, g.det(f));
    return g.mul(jinv, g.matmul(p, g.transpose(f)));
}

/* =================== force system assembly =================== */

Eigen::VectorXd ForceSystem::gather(const MatrixX3d& coords) const {
    Eigen::VectorXd x(free_nodes.size() * 3);
    for (size_t i = 0; i < free_nodes.size(); ++i)
        x.segment<3>(3 * i) = coords.row(free_nodes[i]).transpose();
    return x;
}

MatrixX3d ForceSystem::scatter(const Eigen::VectorXd& x,
                               const MatrixX3d& base) const {
    MatrixX3d out = base;
    for (size_t i = 0; i < free_nodes.size(); ++i)
        out.row(free_nodes[i]) = x.segment<3>(3 * i).transpose();
    return out;
}

MatrixX3d ForceSystem::scatter_state(const Eigen::VectorXd& x, real_t lambda,
                                     const MatrixX3d& base) const {
    MatrixX3d out = scatter(x, base);
    for (size_t h = 0; h < handle_nodes.size(); ++h) {
        Eigen::RowVector3d p = handles_from.row(h);
        if (handles_to.rows())
            p += lambda * (handles_to.row(h) - handles_from.row(h));
        out.row(handle_nodes[h]) = p;
    }
    return out;
}

ForceSystem assemble_force_system(const TetMesh& mesh,
                                  const ProblemConfig& config,
                                  ProblemKind kind,
                                  const MatrixX3d* handles_from,
                                  const MatrixX3d* handles_to) {
    const size_t nn = mesh.n_nodes(), nt = mesh.n_tets();
    ForceSystem fs;

    enum class Role { Free, Fixed, Handle };
    std::vector<Role> role(nn, Role::Free);
    for (int v : config.fixed_nodes)
        role[v] = Role::Fixed;
    std::vector<int> handle_index(nn, -1);
    if (kind == ProblemKind::Deform) {
        fs.handle_nodes = config.handle_nodes;
        for (size_t h = 0; h < config.handle_nodes.size(); ++h) {
            role[config.handle_nodes[h]] = Role::Handle;
            handle_index[config.handle_nodes[h]] = int(h);
        }
        fs.handles_from.resize(config.handle_nodes.size(), 3);
        for (size_t h = 0; h < config.handle_nodes.size(); ++h)
            fs.handles_from.row(h) =
                    handles_from ? handles_from->row(h)
                                 : mesh.nodes.row(config.handle_nodes[h]);
        if (handles_to)
            fs.handles_to = *handles_to;
    }
    fs.node_to_free.assign(nn, -1);
    for (size_t v = 0; v < nn; ++v)
        if (role[v] == Role::Free) {
            fs.node_to_free[v] = int(fs.free_nodes.size());
            fs.free_nodes.push_back(int(v));
        }
    check<SolverError>(!fs.free_nodes.empty(), "no free nodes to solve for");
    const size_t nf = fs.free_nodes.size() * 3;

    // node coordinate sources for the input offsets
    auto node_coord = [&](int v, int r) -> real_t { return mesh.nodes(v, r); };
    auto handle_from = [&](int v, int r) -> real_t {
        return handles_from ? (*handles_from)(handle_index[v], r)
                            : mesh.nodes(v, r);
    };
    auto handle_delta = [&](int v, int r) -> real_t {
        return handles_to ? (*handles_to)(handle_index[v], r) -
                                    handle_from(v, r)
                          : 0.0;
    };

    // input map: free coordinates (+ constants) -> per-tet shape matrices
    SparseAffineMap in;
    in.tensor_shape = {nt, 3, 3};
    in.matrix.resize(nt * 9, nf);
    Eigen::VectorXd c0 = Eigen::VectorXd::Zero(nt * 9);
    Eigen::VectorXd c1 = Eigen::VectorXd::Zero(nt * 9);
    bool any_lambda = false;
    std::vector<Eigen::Triplet<real_t>> trip;
    trip.reserve(nt * 9 * 2);
    for (size_t t = 0; t < nt; ++t)
        for (int c = 0; c < 3; ++c) {
            int va = mesh.tets(t, c + 1), vb = mesh.tets(t, 0);
            for (int r = 0; r < 3; ++r) {
                size_t flat = t * 9 + r * 3 + c;
                for (auto [v, sign] : {std::pair{va, 1.0}, {vb, -1.0}}) {
                    switch (role[v]) {
                        case Role::Free:
                            trip.emplace_back(
                                    flat, 3 * fs.node_to_free[v] + r, sign);
                            break;
                        case Role::Fixed:
                            c0[flat] += sign * node_coord(v, r);
                            break;
                        case Role::Handle:
                            c0[flat] += sign * handle_from(v, r);
                            if (real_t d = handle_delta(v, r); d != 0.0) {
                                c1[flat] += sign * d;
                                any_lambda = true;
                            }
                            break;
                    }
                }
            }
        }
    in.matrix.setFromTriplets(trip.begin(), trip.end());
    if (!c0.isZero(0.0))
        in.offset0 = std::move(c0);
    if (any_lambda)
        in.offset_lambda = std::move(c1);

    // stress graph; geo is computed from the input mesh, which is the rest
    // configuration for forward/deform and the given deformed state for the
    // inverse problem
    auto graph = std::make_shared<Graph>();
    VarId input = graph->add_input({nt, 3, 3},
                                   kind == ProblemKind::Inverse ? "Dm" : "Ds");
    TetGeometry geo = tet_geometry(mesh);
    VarId stress;
    if (kind == ProblemKind::Inverse) {
        // F = Ds_given * Dm(xbar)^-1; forces use deformed-state normals
        VarId ds = graph->add_constant(geo.dm, "Ds_given");
        fs.f_vertex = graph->matmul(ds, graph->inverse(input));
        stress = build_cauchy(*graph, config.material, fs.f_vertex);
    } else {
        VarId dminv = graph->add_constant(geo.dm_inv, "DmInv");
        fs.f_vertex = graph->matmul(input, dminv);
        stress = build_pk1(*graph, config.material, fs.f_vertex);
    }
    graph->set_output(stress);
    graph->finalize();

    // output map: per-tet stress times area normals, summed per free node
    SparseAffineMap out;
    out.tensor_shape = {nt, 3, 3};
    out.matrix.resize(nf, nt * 9);
    trip.clear();
    for (size_t t = 0; t < nt; ++t)
        for (int j = 0; j < 4; ++j) {
            int v = mesh.tets(t, j);
            if (fs.node_to_free[v] < 0)
                continue;
            for (int r = 0; r < 3; ++r)
                for (int q = 0; q < 3; ++q)
                    trip.emplace_back(3 * fs.node_to_free[v] + r,
                                      t * 9 + r * 3 + q,
                                      geo.normals(4 * t + j, q));
        }
    out.matrix.setFromTriplets(trip.begin(), trip.end());

    fs.sys = HomotopySystem{std::move(in), std::move(graph), std::move(out)};
    return fs;
}

void check_no_inversion(const ForceSystem& fs, const Eigen::VectorXd& x,
                        real_t lambda) {
    BatchedTensor in = fs.sys.input.to_tensor(x, lambda);
    std::vector<BatchedTensor> values = fs.sys.graph->eval_all(in);
    BatchedTensor det = determinant(values[fs.f_vertex]);
    const real_t* d = det.cdata();
    for (size_t t = 0; t < det.shape().batch; ++t)
        check<DomainError>(d[t] > 0,
                           str_concat("tet ", t, " inverted (det(F) = ",
                                      d[t], ") at lambda = ", lambda));
}

/* =================== drivers =================== */

namespace {

Eigen::VectorXd external_force_vector(const TetMesh& mesh,
                                      const ProblemConfig& config,
                                      const ForceSystem& fs) {
    MatrixX3d f = config.external_force
                          ? *config.external_force
                          : lumped_gravity(mesh, mesh.nodes, config.density,
                                           config.gravity);
    return fs.gather(f);
}

SolveResult run_equational(const TetMesh& mesh, const ProblemConfig& config,
                           ProblemKind kind) {
    auto t0 = Clock::now();
    ForceSystem fs = assemble_force_system(mesh, config, kind);
    Eigen::VectorXd f_ext = external_force_vector(mesh, config, fs);
    Eigen::VectorXd x0 = fs.gather(mesh.nodes);

    SolveResult res;
    if (f_ext.norm() == 0.0 &&
        rms(evaluate(fs.sys, x0, 0.0)) < config.solver.eps_res) {
        res.nodes = mesh.nodes;
        res.stats.wall_seconds = seconds_since(t0);
        return res;
    }

    auto guard = [&](const Eigen::VectorXd& x, real_t progress) {
        check_no_inversion(fs, x, 0.0);
        if (config.state_callback)
            config.state_callback(fs.scatter(x, mesh.nodes), progress);
    };
    ContinuationResult cr = equational_continuation(fs.sys, f_ext, x0,
                                                    config.solver, guard);
    res.nodes = fs.scatter(cr.x, mesh.nodes);
    res.stats.iterations = cr.trace.steps.size();
    res.stats.residual_rms = rms(evaluate(fs.sys, cr.x, 0.0) + f_ext);
    res.stats.trace = std::move(cr.trace);
    res.stats.wall_seconds = seconds_since(t0);
    return res;
}

}  // namespace

SolveResult solve_forward(const TetMesh& mesh, const ProblemConfig& config) {
    config.validate(mesh);
    return run_equational(mesh, config, ProblemKind::Forward);
}

SolveResult solve_inverse(const TetMesh& mesh, const ProblemConfig& config) {
    config.validate(mesh);
    return run_equational(mesh, config, ProblemKind::Inverse);
}

SolveResult solve_deform(const TetMesh& mesh, const ProblemConfig& config) {
    config.validate(mesh);
    auto t0 = Clock::now();

    MatrixX3d coords = mesh.nodes;
    MatrixX3d handles_cur(config.handle_nodes.size(), 3);
    for (size_t h = 0; h < config.handle_nodes.size(); ++h)
        handles_cur.row(h) = mesh.nodes.row(config.handle_nodes[h]);

    SolveResult res;
    SolverOptions refine_opts = config.solver;
    refine_opts.order = 6;  // low-order residual polish between segments

    for (size_t seg = 0; seg < config.handle_waypoints.size(); ++seg) {
        const MatrixX3d& target = config.handle_waypoints[seg];
        if ((target - handles_cur).norm() == 0.0)
            continue;

        ForceSystem fs = assemble_force_system(mesh, config,
                                               ProblemKind::Deform,
                                               &handles_cur, &target);
        Eigen::VectorXd x0 = fs.gather(coords);
        auto guard = [&](const Eigen::VectorXd& x, real_t lam) {
            try {
                check_no_inversion(fs, x, lam);
            } catch (const DomainError& e) {
                throw DomainError{e.bare,
                                  str_concat("segment ", seg), e.batch_index};
            }
            if (config.state_callback)
                config.state_callback(fs.scatter_state(x, lam, coords),
                                      real_t(seg) + lam);
        };
        ContinuationResult cr;
        try {
            cr = continuation(fs.sys, x0, 0.0, 1.0, config.solver, guard);
        } catch (const SolverError& e) {
            throw SolverError{str_concat("deform segment ", seg, ": ",
                                         e.what())};
        }
        coords = fs.scatter_state(cr.x, 1.0, coords);
        handles_cur = target;
        res.stats.iterations += cr.trace.steps.size();
        for (auto& st : cr.trace.steps)
            res.stats.trace.steps.push_back(std::move(st));

        // residual refinement with the handles pinned at the new waypoint
        ForceSystem fr = assemble_force_system(mesh, config,
                                               ProblemKind::Deform,
                                               &handles_cur, nullptr);
        Eigen::VectorXd xs = fr.gather(coords);
        auto guard_r = [&](const Eigen::VectorXd& x, real_t) {
            check_no_inversion(fr, x, 0.0);
        };
        ContinuationResult rr = equational_continuation(
                fr.sys, Eigen::VectorXd::Zero(fr.sys.n()), xs, refine_opts,
                guard_r);
        coords = fr.scatter(rr.x, coords);
        res.stats.iterations += rr.trace.steps.size();
        for (auto& st : rr.trace.steps)
            res.stats.trace.steps.push_back(std::move(st));
        res.stats.residual_rms = rms(evaluate(fr.sys, rr.x, 0.0));
    }

    if (res.stats.trace.steps.empty()) {
        // nothing moved: report the residual of the unchanged state
        ForceSystem fr = assemble_force_system(mesh, config,
                                               ProblemKind::Deform,
                                               &handles_cur, nullptr);
        res.stats.residual_rms = rms(evaluate(fr.sys, fr.gather(coords), 0.0));
    }
    res.nodes = coords;
    res.stats.wall_seconds = seconds_since(t0);
    return res;
}

SolveResult solve(const TetMesh& mesh, const ProblemConfig& config) {
    switch (config.kind) {
        case ProblemKind::Forward:
            return solve_forward(mesh, config);
        case ProblemKind::Inverse:
            return solve_inverse(mesh, config);
        case ProblemKind::Deform:
            return solve_deform(mesh, config);
    }
    throw Error{"unknown problem kind"};
}

}  // namespace anm::fem
