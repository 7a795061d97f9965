#pragma once

#include "anm/fem.hpp"

#include <iosfwd>
#include <string>

namespace anm::io {

// Tetgen-style ASCII pair <base>.node / <base>.ele. Node and element
// indices may be 0- or 1-based; the base is detected from the first index.
// A base of the form "gen:bar:NXxNYxNZ:DX[,DY,DZ]" produces a grid bar
// instead of reading files; a nonzero seed adds a deterministic interior
// jitter (test meshes).
fem::TetMesh read_mesh(const std::string& base, unsigned seed = 0);
void write_tetgen_pair(const fem::TetMesh& mesh, const std::string& base);

Eigen::MatrixX3d read_coords(const std::string& path);
void write_coords(const Eigen::MatrixX3d& coords, const std::string& path);

// legacy ASCII VTK unstructured grid (tetra cells)
void write_vtk(const fem::TetMesh& topology, const Eigen::MatrixX3d& coords,
               const std::string& path, const std::string& title = "state");

// JSON problem configuration; node selections given as boxes are resolved
// against the mesh coordinates.
fem::ProblemConfig read_config(const std::string& path,
                               const fem::TetMesh& mesh);

struct RunReport {
    std::string problem;
    size_t iterations = 0;
    double wall_seconds = 0;
    real_t residual_rms = 0;
    struct Step {
        real_t lambda = 0;
        real_t a_m = 0;
        std::string kind;
        real_t residual = 0;
    };
    std::vector<Step> steps;
};

RunReport make_report(const std::string& problem, const fem::SolveStats& s);
void print_report(std::ostream& os, const RunReport& r);
void write_report_json(const RunReport& r, const std::string& path);

}  // namespace anm::io
