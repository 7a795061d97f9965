#include "anm/io.hpp"

#include <json.hpp>

#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>

namespace anm::io {

using nlohmann::json;

namespace {

std::string next_data_line(std::istream& is, const std::string& path) {
    std::string line;
    while (std::getline(is, line)) {
        size_t pos = line.find('#');
        if (pos != std::string::npos)
            line.erase(pos);
        if (line.find_first_not_of(" \t\r\n") != std::string::npos)
            return line;
    }
    throw IoError{str_concat(path, ": unexpected end of file")};
}

fem::TetMesh generate_mesh(const std::string& spec, unsigned seed) {
    // gen:bar:NXxNYxNZ:DX[,DY,DZ]
    std::vector<std::string> parts;
    std::stringstream ss(spec);
    std::string tok;
    while (std::getline(ss, tok, ':'))
        parts.push_back(tok);
    check<IoError>(parts.size() == 4 && parts[1] == "bar",
                   "unsupported mesh spec '", spec,
                   "' (expected gen:bar:NXxNYxNZ:DX[,DY,DZ])");
    size_t nx, ny, nz;
    char sep1, sep2;
    std::stringstream dims(parts[2]);
    check<IoError>(bool(dims >> nx >> sep1 >> ny >> sep2 >> nz),
                   "bad grid size in mesh spec '", spec, "'");
    std::stringstream ds(parts[3]);
    real_t dx, dy, dz;
    char c;
    check<IoError>(bool(ds >> dx), "bad spacing in mesh spec '", spec, "'");
    if (ds >> c >> dy)
        check<IoError>(bool(ds >> c >> dz), "bad spacing in '", spec, "'");
    else
        dy = dz = dx;

    fem::TetMesh m = fem::TetMesh::bar_grid(nx, ny, nz, dx, dy, dz);
    if (seed) {
        // deterministic interior jitter, small enough to keep positivity
        std::mt19937 rng(seed);
        std::uniform_real_distribution<real_t> dist(-0.15, 0.15);
        real_t h = std::min({dx, dy, dz});
        Eigen::Vector3d lo = m.nodes.colwise().minCoeff();
        Eigen::Vector3d hi = m.nodes.colwise().maxCoeff();
        for (Eigen::Index i = 0; i < m.nodes.rows(); ++i) {
            bool interior = true;
            for (int d = 0; d < 3; ++d)
                interior = interior && m.nodes(i, d) > lo[d] + h / 2 &&
                           m.nodes(i, d) < hi[d] - h / 2;
            Eigen::RowVector3d delta{dist(rng), dist(rng), dist(rng)};
            if (interior)
                m.nodes.row(i) += h * delta;
        }
        m.validate();
    }
    return m;
}

}  // namespace

fem::TetMesh read_mesh(const std::string& base, unsigned seed) {
    if (base.rfind("gen:", 0) == 0)
        return generate_mesh(base, seed);

    fem::TetMesh mesh;
    long node_base = 0;  // 0- or 1-based, detected from the first record
    {
        std::ifstream f(base + ".node");
        check<IoError>(f.good(), "cannot open ", base, ".node");
        size_t n, dim, attrs, marks;
        std::stringstream hdr(next_data_line(f, base + ".node"));
        check<IoError>(bool(hdr >> n >> dim >> attrs >> marks),
                       base, ".node: malformed header");
        check<IoError>(dim == 3, base, ".node: expected dimension 3, got ",
                       dim);
        mesh.nodes.resize(n, 3);
        bool first = true;
        for (size_t i = 0; i < n; ++i) {
            std::stringstream ls(next_data_line(f, base + ".node"));
            long idx;
            real_t x, y, z;
            check<IoError>(bool(ls >> idx >> x >> y >> z), base,
                           ".node: malformed line for point ", i);
            if (first) {
                node_base = idx;
                first = false;
            }
            size_t row = size_t(idx - node_base);
            check<IoError>(row < n, base, ".node: index ", idx,
                           " out of range");
            mesh.nodes.row(row) = Eigen::RowVector3d(x, y, z);
        }
    }
    {
        std::ifstream f(base + ".ele");
        check<IoError>(f.good(), "cannot open ", base, ".ele");
        size_t t, per, attrs;
        std::stringstream hdr(next_data_line(f, base + ".ele"));
        check<IoError>(bool(hdr >> t >> per >> attrs), base,
                       ".ele: malformed header");
        check<IoError>(per == 4, base, ".ele: expected 4 nodes per tet, got ",
                       per);
        mesh.tets.resize(t, 4);
        for (size_t i = 0; i < t; ++i) {
            std::stringstream ls(next_data_line(f, base + ".ele"));
            long idx, v[4];
            check<IoError>(bool(ls >> idx >> v[0] >> v[1] >> v[2] >> v[3]),
                           base, ".ele: malformed line for tet ", i);
            (void)idx;
            // vertex references share the node file's index base
            for (int q = 0; q < 4; ++q)
                mesh.tets(i, q) = int(v[q] - node_base);
        }
    }
    mesh.validate();
    return mesh;
}

void write_tetgen_pair(const fem::TetMesh& mesh, const std::string& base) {
    {
        std::ofstream f(base + ".node");
        check<IoError>(f.good(), "cannot write ", base, ".node");
        f << mesh.n_nodes() << " 3 0 0\n" << std::setprecision(17);
        for (size_t i = 0; i < mesh.n_nodes(); ++i)
            f << i << ' ' << mesh.nodes(i, 0) << ' ' << mesh.nodes(i, 1)
              << ' ' << mesh.nodes(i, 2) << '\n';
    }
    {
        std::ofstream f(base + ".ele");
        check<IoError>(f.good(), "cannot write ", base, ".ele");
        f << mesh.n_tets() << " 4 0\n";
        for (size_t i = 0; i < mesh.n_tets(); ++i)
            f << i << ' ' << mesh.tets(i, 0) << ' ' << mesh.tets(i, 1) << ' '
              << mesh.tets(i, 2) << ' ' << mesh.tets(i, 3) << '\n';
    }
}

Eigen::MatrixX3d read_coords(const std::string& path) {
    std::ifstream f(path);
    check<IoError>(f.good(), "cannot open ", path);
    std::vector<Eigen::RowVector3d> rows;
    std::string line;
    while (std::getline(f, line)) {
        if (line.find_first_not_of(" \t\r\n") == std::string::npos)
            continue;
        std::stringstream ls(line);
        real_t x, y, z;
        check<IoError>(bool(ls >> x >> y >> z), path, ": malformed line '",
                       line, "'");
        rows.emplace_back(x, y, z);
    }
    Eigen::MatrixX3d m(rows.size(), 3);
    for (size_t i = 0; i < rows.size(); ++i)
        m.row(i) = rows[i];
    return m;
}

void write_coords(const Eigen::MatrixX3d& coords, const std::string& path) {
    std::ofstream f(path);
    check<IoError>(f.good(), "cannot write ", path);
    f << std::setprecision(17);
    for (Eigen::Index i = 0; i < coords.rows(); ++i)
        f << coords(i, 0) << ' ' << coords(i, 1) << ' ' << coords(i, 2)
          << '\n';
}

void write_vtk(const fem::TetMesh& topology, const Eigen::MatrixX3d& coords,
               const std::string& path, const std::string& title) {
    std::ofstream f(path);
    check<IoError>(f.good(), "cannot write ", path);
    f << "# vtk DataFile Version 3.0\n"
      << title << "\nASCII\nDATASET UNSTRUCTURED_GRID\n";
    f << "POINTS " << coords.rows() << " double\n" << std::setprecision(17);
    for (Eigen::Index i = 0; i < coords.rows(); ++i)
        f << coords(i, 0) << ' ' << coords(i, 1) << ' ' << coords(i, 2)
          << '\n';
    f << "CELLS " << topology.n_tets() << ' ' << topology.n_tets() * 5
      << '\n';
    for (size_t t = 0; t < topology.n_tets(); ++t)
        f << "4 " << topology.tets(t, 0) << ' ' << topology.tets(t, 1) << ' '
          << topology.tets(t, 2) << ' ' << topology.tets(t, 3) << '\n';
    f << "CELL_TYPES " << topology.n_tets() << '\n';
    for (size_t t = 0; t < topology.n_tets(); ++t)
        f << "10\n";
}

/* =================== configuration =================== */

namespace {

std::vector<int> select_nodes(const json& sel, const fem::TetMesh& mesh,
                              const char* what) {
    std::vector<int> out;
    if (sel.contains("nodes")) {
        for (const auto& v : sel.at("nodes"))
            out.push_back(v.get<int>());
        return out;
    }
    check<IoError>(sel.contains("box"), what,
                   " selection needs 'nodes' or 'box'");
    const auto& b = sel.at("box");
    check<IoError>(b.size() == 6, what, " box needs 6 numbers");
    real_t eps = 1e-9 * mesh.bbox_diagonal();
    for (size_t i = 0; i < mesh.n_nodes(); ++i) {
        bool inside = true;
        for (int d = 0; d < 3; ++d)
            inside = inside && mesh.nodes(i, d) >= b[d].get<real_t>() - eps &&
                     mesh.nodes(i, d) <= b[d + 3].get<real_t>() + eps;
        if (inside)
            out.push_back(int(i));
    }
    check<IoError>(!out.empty(), what, " box selected no nodes");
    return out;
}

}  // namespace

fem::ProblemConfig read_config(const std::string& path,
                               const fem::TetMesh& mesh) {
    std::ifstream f(path);
    check<IoError>(f.good(), "cannot open config ", path);
    json j;
    try {
        j = json::parse(f, nullptr, true, /*allow comments*/ true);
    } catch (const json::exception& e) {
        throw IoError{str_concat(path, ": ", e.what())};
    }

    fem::ProblemConfig cfg;
    try {
        if (j.contains("problem")) {
            std::string p = j.at("problem");
            if (p == "forward")
                cfg.kind = fem::ProblemKind::Forward;
            else if (p == "inverse")
                cfg.kind = fem::ProblemKind::Inverse;
            else if (p == "deform")
                cfg.kind = fem::ProblemKind::Deform;
            else
                throw IoError{str_concat(path, ": unknown problem '", p,
                                         "'")};
        }
        const json& m = j.at("material");
        std::string model = m.at("model");
        if (model == "NC")
            cfg.material.model = fem::MaterialModel::NC;
        else if (model == "NI")
            cfg.material.model = fem::MaterialModel::NI;
        else if (model == "ARAP")
            cfg.material.model = fem::MaterialModel::ARAP;
        else
            throw IoError{str_concat(path, ": unknown material '", model,
                                     "'")};
        cfg.material.mu = m.value("mu", 1.0);
        cfg.material.lambda = m.value("lambda", 0.0);
        cfg.material.kappa = m.value("kappa", 1.0);

        cfg.density = j.value("density", 1000.0);
        if (j.contains("gravity")) {
            const auto& g = j.at("gravity");
            check<IoError>(g.size() == 3, path, ": gravity needs 3 numbers");
            for (int d = 0; d < 3; ++d)
                cfg.gravity[d] = g[d].get<real_t>();
        }
        if (j.contains("fixed"))
            cfg.fixed_nodes = select_nodes(j.at("fixed"), mesh, "fixed");
        if (j.contains("handles")) {
            const json& h = j.at("handles");
            cfg.handle_nodes = select_nodes(h, mesh, "handles");
            for (const auto& wp : h.value("waypoints", json::array())) {
                check<IoError>(wp.size() == cfg.handle_nodes.size(), path,
                               ": waypoint entry count must equal handle "
                               "count");
                Eigen::MatrixX3d w(cfg.handle_nodes.size(), 3);
                for (size_t i = 0; i < wp.size(); ++i) {
                    check<IoError>(wp[i].size() == 3, path,
                                   ": waypoint positions need 3 numbers");
                    for (int d = 0; d < 3; ++d)
                        w(i, d) = wp[i][d].get<real_t>();
                }
                cfg.handle_waypoints.push_back(std::move(w));
            }
        }
        if (j.contains("external_force_file")) {
            Eigen::MatrixX3d fext =
                    read_coords(j.at("external_force_file").get<std::string>());
            cfg.external_force = std::move(fext);
        }
        if (j.contains("solver")) {
            const json& s = j.at("solver");
            cfg.solver.order = s.value("order", cfg.solver.order);
            cfg.solver.eps_rov = s.value("eps_rov", cfg.solver.eps_rov);
            cfg.solver.eps_res = s.value("eps_res", cfg.solver.eps_res);
            cfg.solver.max_iter = s.value("max_iter", cfg.solver.max_iter);
            cfg.solver.use_pade = s.value("pade", cfg.solver.use_pade);
        }
    } catch (const json::exception& e) {
        throw IoError{str_concat(path, ": ", e.what())};
    }
    cfg.validate(mesh);
    return cfg;
}

/* =================== reports =================== */

RunReport make_report(const std::string& problem, const fem::SolveStats& s) {
    RunReport r;
    r.problem = problem;
    r.iterations = s.iterations;
    r.wall_seconds = s.wall_seconds;
    r.residual_rms = s.residual_rms;
    for (const StepRecord& st : s.trace.steps) {
        RunReport::Step step;
        step.lambda = st.lambda_end;
        step.a_m = st.a_m;
        step.kind = st.kind == ApproximantKind::Pade ? "pade" : "taylor";
        step.residual = st.residual_rms;
        r.steps.push_back(step);
    }
    return r;
}

void print_report(std::ostream& os, const RunReport& r) {
    os << "problem:       " << r.problem << '\n'
       << "iterations:    " << r.iterations << '\n'
       << "wall_time_s:   " << r.wall_seconds << '\n'
       << "residual_rms:  " << r.residual_rms << '\n';
    if (!r.steps.empty()) {
        os << "step  lambda        a_m           kind     residual\n";
        for (size_t i = 0; i < r.steps.size(); ++i) {
            const auto& s = r.steps[i];
            os << std::left << std::setw(6) << i << std::setw(14) << s.lambda
               << std::setw(14) << s.a_m << std::setw(9) << s.kind
               << s.residual << '\n';
        }
    }
}

void write_report_json(const RunReport& r, const std::string& path) {
    json j;
    j["problem"] = r.problem;
    j["iterations"] = r.iterations;
    j["wall_time_s"] = r.wall_seconds;
    j["residual_rms"] = r.residual_rms;
    j["steps"] = json::array();
    for (const auto& s : r.steps)
        j["steps"].push_back({{"lambda", s.lambda},
                              {"a_m", s.a_m},
                              {"kind", s.kind},
                              {"residual", s.residual}});
    std::ofstream f(path);
    check<IoError>(f.good(), "cannot write ", path);
    f << j.dump(2) << '\n';
}

}  // namespace anm::io
