#pragma once

#include "anm/linalg.hpp"

#include <span>

namespace anm::taylor {

// A truncated power series of batched tensors: element i is the coefficient
// of a^i. Missing trailing coefficients read as zero.
using Series = std::span<const BatchedTensor>;

inline BatchedTensor series_coeff(Series s, size_t i, const Shape& shape) {
    return i < s.size() ? s[i] : BatchedTensor::zeros(shape);
}

// Broadened division num/den -> num*den/(den^2 + eps); keeps the Sylvester
// solves finite when singular values coincide or cancel.
constexpr real_t kLorentzEps = 1e-12;
inline real_t lorentz_div(real_t num, real_t den) {
    return num * den / (den * den + kLorentzEps);
}

/* =================== order-k coefficient rules =================== */
//
// Each *_coeff computes the order-k output coefficient from the input
// series through order k (and, for recurrences, the output's own series
// through k-1). All rules are affine in the order-k input coefficients;
// the matching *_jvp applies just the linear (slope) part, which equals
// the operator Jacobian at the order-0 point for every order.

BatchedTensor add_coeff(Series x, Series y, size_t k);
BatchedTensor sub_coeff(Series x, Series y, size_t k);

BatchedTensor mul_coeff(Series x, Series y, size_t k);
// terms of mul_coeff that involve no order-k input
BatchedTensor mul_bias(Series x, Series y, size_t k);

BatchedTensor div_coeff(Series x, Series y, Series f_prev, size_t k);

BatchedTensor log_coeff(Series x, Series f_prev, size_t k);

// Threshold below which an integral exponent switches from the recurrence
// (which divides by x0) to truncated polynomial exponentiation by squaring.
constexpr real_t kPowRecurrenceMinAbsX0 = 1e-3;
BatchedTensor pow_coeff(Series x, Series f_prev, real_t r, size_t k);
bool pow_uses_int_path(const BatchedTensor& x0, real_t r);

BatchedTensor matmul_coeff(Series x, Series y, size_t k);
BatchedTensor matmul_bias(Series x, Series y, size_t k);

BatchedTensor matinv_coeff(Series x, Series f_prev,
                           const BatchedTensor& x0_inv, size_t k);

/* =================== determinant =================== */

// Cofactor matrix C of each item (slope of the determinant): computed from
// the SVD as det(U)det(V) * U * diag(prod_{j != i} sigma_j) * V^T, finite
// for singular inputs.
BatchedTensor det_slope(const BatchedTensor& x0);

enum class DetBiasMethod { Auto, Leibniz, Fft };

// Coefficient of a^k in det(sum_i X_i a^i) for the polynomial matrix given
// by `x` (degree = x.size()-1). Leibniz expansion for small m, DFT-based
// evaluation-interpolation otherwise; the DFT grid is sized past the full
// determinant degree so no coefficient aliases.
BatchedTensor det_poly_coeff(Series x, size_t k,
                             DetBiasMethod method = DetBiasMethod::Auto);

// Determinant order-k coefficient: slope term plus det_poly_coeff of the
// series truncated to order k-1.
BatchedTensor det_coeff(Series x, const BatchedTensor& cofactor, size_t k);

/* =================== SVD-W and polar decomposition =================== */

struct SvdwCoeffs {
    BatchedTensor u, sigma, w;  // sigma as n x m x 1
};

// Order-k coefficients of the SVD-W triple. `x` runs through order k
// (x[k] may be the zero tensor when only the bias part is wanted);
// u/sig/w run through order k-1.
SvdwCoeffs svdw_coeff(Series x, Series u, Series sig, Series w, size_t k);

// Linear part only: directional derivatives of (U, Sigma, W) at the
// order-0 decomposition.
SvdwCoeffs svdw_jvp(const BatchedTensor& u0, const BatchedTensor& sig0,
                    const BatchedTensor& w0, const BatchedTensor& dx);

struct PolarCoeffs {
    BatchedTensor p, w;  // symmetric factor and rotation
};

// Order-k coefficients of the polar decomposition X = P W, written against
// the order-0 SVD factors (u0, sig0). Requires invertible X0.
PolarCoeffs polar_coeff(Series x, Series p, Series w,
                        const BatchedTensor& u0, const BatchedTensor& sig0,
                        size_t k);

PolarCoeffs polar_jvp(const BatchedTensor& x0, const BatchedTensor& u0,
                      const BatchedTensor& sig0, const BatchedTensor& w0,
                      const BatchedTensor& dx);

}  // namespace anm::taylor
