#include "anm/io.hpp"
#include "anm/toy.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <iomanip>
#include <iostream>

namespace fs = std::filesystem;
using namespace anm;

namespace {

constexpr int kExitInputError = 2;
constexpr int kExitSolverError = 3;

int run_toy(int order, bool no_pade, bool equational, double eps_rov,
            double eps_res) {
    SolverOptions opts;
    opts.order = order;
    opts.use_pade = !no_pade;
    opts.eps_rov = eps_rov;
    opts.eps_res = eps_res;
    check<IoError>(order >= 3, "toy problem needs order >= 3");

    toy::ToyResult r = toy::run(opts, equational);
    std::cout << std::setprecision(12) << "solution:      (" << r.solution[0]
              << ", " << r.solution[1] << ")\n"
              << "iterations:    " << r.iterations << '\n'
              << "residual:      " << r.residual_rms << '\n'
              << "mode:          " << (equational ? "equational" : "plain")
              << '\n';
    for (size_t i = 0; i < r.trace.steps.size(); ++i) {
        const StepRecord& s = r.trace.steps[i];
        std::cout << "step " << i << ": lambda " << s.lambda_end << "  a_m "
                  << s.a_m << "  "
                  << (s.kind == ApproximantKind::Pade ? "pade" : "taylor")
                  << "  residual " << s.residual_rms << '\n';
    }
    return 0;
}

struct SolveArgs {
    std::string problem, mesh_path, config_path, out_dir;
    int order = 0;
    double eps_rov = 0, eps_res = 0;
    bool no_pade = false, dump_steps = false;
    int threads = 1;
    unsigned seed = 0;
};

int run_solve(const SolveArgs& a) {
    set_num_threads(a.threads);

    fem::TetMesh mesh = io::read_mesh(a.mesh_path, a.seed);
    fem::ProblemConfig cfg = io::read_config(a.config_path, mesh);

    fem::ProblemKind kind;
    if (a.problem == "forward")
        kind = fem::ProblemKind::Forward;
    else if (a.problem == "inverse")
        kind = fem::ProblemKind::Inverse;
    else if (a.problem == "deform")
        kind = fem::ProblemKind::Deform;
    else
        throw IoError{str_concat("unknown problem '", a.problem, "'")};
    cfg.kind = kind;  // the subcommand argument is authoritative

    if (a.order)
        cfg.solver.order = a.order;
    if (a.eps_rov)
        cfg.solver.eps_rov = a.eps_rov;
    if (a.eps_res)
        cfg.solver.eps_res = a.eps_res;
    if (a.no_pade)
        cfg.solver.use_pade = false;

    fs::create_directories(a.out_dir);
    size_t step_files = 0;
    if (a.dump_steps) {
        cfg.state_callback = [&](const fem::MatrixX3d& coords, real_t) {
            std::ostringstream name;
            name << "step_" << std::setw(4) << std::setfill('0')
                 << step_files++ << ".vtk";
            io::write_vtk(mesh, coords, (fs::path(a.out_dir) / name.str())
                                                .string());
        };
    }

    fem::SolveResult res = fem::solve(mesh, cfg);

    io::write_vtk(mesh, res.nodes,
                  (fs::path(a.out_dir) / "final.vtk").string());
    io::write_coords(res.nodes,
                     (fs::path(a.out_dir) / "final_coords.txt").string());
    if (kind != fem::ProblemKind::Deform) {
        // record the load vector so inverse/forward runs can be chained
        fem::MatrixX3d fext =
                cfg.external_force
                        ? *cfg.external_force
                        : fem::lumped_gravity(mesh, mesh.nodes, cfg.density,
                                              cfg.gravity);
        io::write_coords(fext, (fs::path(a.out_dir) / "external_force.txt")
                                       .string());
    }

    io::RunReport rep = io::make_report(a.problem, res.stats);
    io::print_report(std::cout, rep);
    io::write_report_json(rep,
                          (fs::path(a.out_dir) / "report.json").string());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"asymptotic numerical continuation solver for tetrahedral "
                 "FEM elasticity"};
    app.require_subcommand(1);

    const SolverOptions toy_defaults = toy::default_options();
    int toy_order = toy_defaults.order;
    bool toy_no_pade = false, toy_equational = false;
    double toy_eps_rov = toy_defaults.eps_rov;
    double toy_eps_res = toy_defaults.eps_res;
    CLI::App* toy_cmd = app.add_subcommand(
            "toy", "solve the built-in circle-ellipse intersection");
    toy_cmd->add_option("--order", toy_order, "truncation order");
    toy_cmd->add_flag("--no-pade", toy_no_pade, "disable Pade steps");
    toy_cmd->add_flag("--equational", toy_equational,
                      "use residual-driven continuation");
    toy_cmd->add_option("--eps-rov", toy_eps_rov,
                        "range-of-validity threshold");
    toy_cmd->add_option("--eps-res", toy_eps_res,
                        "residual target (equational)");

    SolveArgs sa;
    CLI::App* solve_cmd = app.add_subcommand(
            "solve", "solve a mesh problem (forward | inverse | deform)");
    solve_cmd->add_option("problem", sa.problem, "forward, inverse or deform")
            ->required();
    solve_cmd->add_option("--mesh", sa.mesh_path,
                          "tetgen base path or gen:bar:... spec")
            ->required();
    solve_cmd->add_option("--config", sa.config_path, "JSON problem config")
            ->required();
    solve_cmd->add_option("--out", sa.out_dir, "output directory")
            ->required();
    solve_cmd->add_option("--order", sa.order, "truncation order override");
    solve_cmd->add_option("--eps-rov", sa.eps_rov,
                          "range-of-validity threshold override");
    solve_cmd->add_option("--eps-res", sa.eps_res,
                          "residual target override");
    solve_cmd->add_flag("--no-pade", sa.no_pade, "disable Pade steps");
    solve_cmd->add_flag("--dump-steps", sa.dump_steps,
                        "write a VTK file per accepted state");
    solve_cmd->add_option("--threads", sa.threads,
                          "worker threads for batched operators");
    solve_cmd->add_option("--seed", sa.seed, "jitter seed for gen: meshes");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0)
            return app.exit(e);  // --help
        app.exit(e);
        return kExitInputError;
    }

    try {
        if (toy_cmd->parsed())
            return run_toy(toy_order, toy_no_pade, toy_equational,
                           toy_eps_rov, toy_eps_res);
        return run_solve(sa);
    } catch (const IoError& e) {
        std::cerr << "input error: " << e.what() << '\n';
        return kExitInputError;
    } catch (const SolverError& e) {
        std::cerr << "solver error: " << e.what() << '\n';
        return kExitSolverError;
    } catch (const DomainError& e) {
        std::cerr << "solver error: " << e.what() << '\n';
        return kExitSolverError;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitInputError;
    }
}
