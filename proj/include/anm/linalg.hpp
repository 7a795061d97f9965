#pragma once

#include "anm/tensor.hpp"

#include <Eigen/Dense>

#include <complex>
#include <vector>

namespace anm {

using RowMat = Eigen::Matrix<real_t, Eigen::Dynamic, Eigen::Dynamic,
                             Eigen::RowMajor>;
using MapRowMat = Eigen::Map<RowMat>;
using MapConstRowMat = Eigen::Map<const RowMat>;

// Read-only view of item b as an Eigen matrix (tensor must be materialized).
inline MapConstRowMat item_view(const BatchedTensor& t, size_t b) {
    const Shape& s = t.shape();
    return MapConstRowMat{t.cdata() + b * s.item_elems(),
                          Eigen::Index(s.rows), Eigen::Index(s.cols)};
}

inline MapRowMat item_view_mut(real_t* base, const Shape& s, size_t b) {
    return MapRowMat{base + b * s.item_elems(), Eigen::Index(s.rows),
                     Eigen::Index(s.cols)};
}

/* ======================= batched linear algebra ======================= */

// Per-item matrix product, (n x r x k) * (n x k x c) -> n x r x c.
BatchedTensor matmul(const BatchedTensor& a, const BatchedTensor& b);

BatchedTensor transpose(const BatchedTensor& x);

// Per-item inverse; a singular item raises DomainError with its batch index.
BatchedTensor inverse(const BatchedTensor& x);

// Per-item determinant, result n x 1 x 1.
BatchedTensor determinant(const BatchedTensor& x);

// SVD-W triple: X = U * diag(sigma) * U^T * W with orthonormal U, W and
// W = U V^T from the standard SVD. sigma is stored as n x m x 1.
// In rotation-variant mode det(W) = +1 per item; when the plain result has
// det(W) = -1, the sign of one odd-sized group of identical singular values
// (the group holding the smallest values) and the matching V columns are
// flipped.
struct SvdWTriple {
    BatchedTensor u;      // n x m x m
    BatchedTensor sigma;  // n x m x 1, descending in plain mode
    BatchedTensor w;      // n x m x m
};

SvdWTriple svd_w(const BatchedTensor& x, bool rotation_variant = false);

// Groups indices of nearly identical values (relative tolerance) in a
// descending singular value list; returns group start offsets plus m.
std::vector<size_t> group_equal_singular_values(const Eigen::VectorXd& sv,
                                                real_t rel_tol = 1e-8);

/* ======================= series DFT ======================= */

// In-place radix-2 DFT along the sequence index of K complex matrices
// (K must be a power of two); entries transform independently. The inverse
// transform applies the 1/K normalization. Forward kernel exp(-2*pi*i/K).
void dft_series(std::vector<Eigen::MatrixXcd>& seq, bool inverse);

}  // namespace anm
