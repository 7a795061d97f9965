#pragma once

#include "anm/solver.hpp"

#include <optional>

namespace anm::fem {

using Eigen::MatrixX3d;

/* =================== mesh =================== */

struct TetMesh {
    MatrixX3d nodes;                          // n x 3 coordinates
    Eigen::Matrix<int, Eigen::Dynamic, 4> tets;  // t x 4 node indices

    size_t n_nodes() const { return size_t(nodes.rows()); }
    size_t n_tets() const { return size_t(tets.rows()); }
    real_t bbox_diagonal() const;

    // positive signed volume on every tet, indices in range
    void validate() const;

    // axis-aligned grid bar of nx*ny*nz cells, six tets per cell
    static TetMesh bar_grid(size_t nx, size_t ny, size_t nz, real_t dx,
                            real_t dy, real_t dz);
};

// Per-tet reference quantities of a node configuration: shape matrices,
// inverses, volumes, and the area-weighted normals n_{t,i} satisfying
// sum_i n_{t,i} = 0 and f_i = P n_{t,i} = -dE/dx_i.
struct TetGeometry {
    BatchedTensor dm;      // t x 3 x 3
    BatchedTensor dm_inv;  // t x 3 x 3
    std::vector<real_t> volume;
    Eigen::MatrixXd normals;  // (4t) x 3, row 4t+j = n_{t,j}
};

TetGeometry tet_geometry(const TetMesh& mesh, const MatrixX3d& coords);
inline TetGeometry tet_geometry(const TetMesh& mesh) {
    return tet_geometry(mesh, mesh.nodes);
}

/* =================== materials and problems =================== */

enum class MaterialModel { NC, NI, ARAP };

struct MaterialSpec {
    MaterialModel model = MaterialModel::NC;
    real_t mu = 1.0;      // Lame second parameter
    real_t lambda = 0.0;  // Lame first parameter (NC)
    real_t kappa = 1.0;   // bulk modulus (NI)
    void validate() const;
};

enum class ProblemKind { Forward, Inverse, Deform };

struct ProblemConfig {
    MaterialSpec material;
    real_t density = 1000.0;
    Eigen::Vector3d gravity = Eigen::Vector3d::Zero();
    std::vector<int> fixed_nodes;
    std::vector<int> handle_nodes;
    // successive handle targets; each waypoint has one row per handle node
    std::vector<MatrixX3d> handle_waypoints;
    SolverOptions solver;
    ProblemKind kind = ProblemKind::Forward;
    // per-node external force override (n x 3); defaults to lumped gravity
    std::optional<MatrixX3d> external_force;
    // invoked with the full node coordinates of every accepted state
    std::function<void(const MatrixX3d&, real_t lambda)> state_callback;

    void validate(const TetMesh& mesh) const;
};

// Per-node gravity with mass lumped as density * (incident tet volume) / 4.
MatrixX3d lumped_gravity(const TetMesh& mesh, const MatrixX3d& coords,
                         real_t density, const Eigen::Vector3d& gravity);

/* =================== graph builders =================== */

// First Piola-Kirchhoff stress P(F) of the chosen constitutive model.
VarId build_pk1(Graph& g, const MaterialSpec& mat, VarId f_vertex);

// Cauchy stress sigma(F) = det(F)^-1 P(F) F^T (inverse problem assembly).
VarId build_cauchy(Graph& g, const MaterialSpec& mat, VarId f_vertex);

// The assembled nodal force system f(x) for the free nodes, with all
// constrained coordinates folded into the affine input map. For Deform,
// handle coordinates move linearly with lambda between the given endpoint
// configurations.
struct ForceSystem {
    HomotopySystem sys;         // pure f(x); no external-force offsets
    VarId f_vertex = -1;        // deformation gradient vertex
    std::vector<int> free_nodes;
    std::vector<int> node_to_free;  // -1 for constrained nodes
    // deform problems: handle nodes and their endpoint positions
    std::vector<int> handle_nodes;
    MatrixX3d handles_from, handles_to;

    Eigen::VectorXd gather(const MatrixX3d& coords) const;
    // scatter free coordinates into a copy of `base`
    MatrixX3d scatter(const Eigen::VectorXd& x, const MatrixX3d& base) const;
    // scatter free coordinates and place handles at their lambda position
    MatrixX3d scatter_state(const Eigen::VectorXd& x, real_t lambda,
                            const MatrixX3d& base) const;
};

ForceSystem assemble_force_system(
        const TetMesh& mesh, const ProblemConfig& config, ProblemKind kind,
        const MatrixX3d* handles_from = nullptr,
        const MatrixX3d* handles_to = nullptr);

// throws DomainError when any tet has det(F) <= 0 at the given state
void check_no_inversion(const ForceSystem& fs, const Eigen::VectorXd& x,
                        real_t lambda);

/* =================== drivers =================== */

struct SolveStats {
    size_t iterations = 0;
    real_t residual_rms = 0;
    double wall_seconds = 0;
    ContinuationTrace trace;
};

struct SolveResult {
    MatrixX3d nodes;
    SolveStats stats;
};

// Equilibrium under a ramped external load via residual-driven
// continuation; unknowns are the deformed free-node coordinates.
SolveResult solve_forward(const TetMesh& mesh, const ProblemConfig& config);

// Rest-shape recovery: unknowns are rest coordinates, forces assembled in
// the given deformed configuration through the Cauchy stress.
SolveResult solve_inverse(const TetMesh& mesh, const ProblemConfig& config);

// Handle-controlled deformation: one homotopy per waypoint segment plus a
// low-order residual refinement after each segment.
SolveResult solve_deform(const TetMesh& mesh, const ProblemConfig& config);

SolveResult solve(const TetMesh& mesh, const ProblemConfig& config);

}  // namespace anm::fem
