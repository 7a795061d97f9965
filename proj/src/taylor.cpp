#include "anm/taylor.hpp"

#include <Eigen/LU>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>

namespace anm::taylor {

namespace {

Shape series_shape(Series s) {
    check<Error>(!s.empty(), "empty series");
    return s[0].shape();
}

size_t next_pow2(size_t v) {
    size_t k = 1;
    while (k < v)
        k <<= 1;
    return k;
}

// truncated Cauchy product of tensor polynomials, orders 0..max_order
std::vector<BatchedTensor> poly_mul_trunc(const std::vector<BatchedTensor>& a,
                                          const std::vector<BatchedTensor>& b,
                                          size_t max_order) {
    Shape out = broadcast_shape(a[0].shape(), b[0].shape());
    std::vector<BatchedTensor> r(max_order + 1, BatchedTensor::zeros(out));
    for (size_t i = 0; i < a.size() && i <= max_order; ++i) {
        if (a[i].is_zero())
            continue;
        for (size_t j = 0; j < b.size() && i + j <= max_order; ++j)
            r[i + j] = ew_add(r[i + j], ew_mul(a[i], b[j]));
    }
    return r;
}

}  // namespace

/* =================== elementwise rules =================== */

BatchedTensor add_coeff(Series x, Series y, size_t k) {
    return ew_add(series_coeff(x, k, series_shape(x)),
                  series_coeff(y, k, series_shape(y)));
}

BatchedTensor sub_coeff(Series x, Series y, size_t k) {
    return ew_sub(series_coeff(x, k, series_shape(x)),
                  series_coeff(y, k, series_shape(y)));
}

BatchedTensor mul_bias(Series x, Series y, size_t k) {
    Shape sx = series_shape(x), sy = series_shape(y);
    BatchedTensor acc = BatchedTensor::zeros(broadcast_shape(sx, sy));
    for (size_t i = 1; i < k; ++i)
        acc = ew_add(acc, ew_mul(series_coeff(x, i, sx),
                                 series_coeff(y, k - i, sy)));
    return acc;
}

BatchedTensor mul_coeff(Series x, Series y, size_t k) {
    if (k == 0)
        return ew_mul(x[0], y[0]);
    Shape sx = series_shape(x), sy = series_shape(y);
    BatchedTensor acc = mul_bias(x, y, k);
    acc = ew_add(acc, ew_mul(y[0], series_coeff(x, k, sx)));
    acc = ew_add(acc, ew_mul(x[0], series_coeff(y, k, sy)));
    return acc;
}

BatchedTensor div_coeff(Series x, Series y, Series f_prev, size_t k) {
    if (k == 0)
        return ew_div(x[0], y[0]);
    check<Error>(f_prev.size() >= k, "div recurrence needs orders < k");
    Shape sx = series_shape(x), sy = series_shape(y);
    Shape so = broadcast_shape(sx, sy);
    BatchedTensor num = series_coeff(x, k, sx);
    num = ew_sub(num, ew_mul(f_prev[0], series_coeff(y, k, sy)));
    for (size_t i = 1; i < k; ++i)
        num = ew_sub(num, ew_mul(f_prev[i], series_coeff(y, k - i, sy)));
    (void)so;
    return ew_div(num, y[0]);
}

BatchedTensor log_coeff(Series x, Series f_prev, size_t k) {
    if (k == 0)
        return ew_log(x[0]);
    check<Error>(f_prev.size() >= k, "log recurrence needs orders < k");
    Shape sx = series_shape(x);
    BatchedTensor num = series_coeff(x, k, sx);
    for (size_t i = 1; i < k; ++i)
        num = ew_sub(num, ew_scale(ew_mul(series_coeff(x, k - i, sx),
                                          f_prev[i]),
                                   real_t(i) / real_t(k)));
    return ew_div(num, x[0]);
}

bool pow_uses_int_path(const BatchedTensor& x0, real_t r) {
    if (r != std::nearbyint(r))
        return false;
    if (x0.is_zero())
        return true;
    const real_t* p = x0.cdata();
    real_t mn = std::abs(p[0]);
    for (size_t i = 1; i < x0.shape().total(); ++i)
        mn = std::min(mn, std::abs(p[i]));
    return mn < kPowRecurrenceMinAbsX0;
}

BatchedTensor pow_coeff(Series x, Series f_prev, real_t r, size_t k) {
    if (k == 0)
        return ew_pow(x[0], r);
    check<Error>(f_prev.size() >= k, "pow recurrence needs orders < k");
    Shape sx = series_shape(x);
    if (pow_uses_int_path(x[0], r)) {
        long n = std::lround(r);
        if (n < 0)
            throw DomainError{
                    "negative integer power with near-zero base", "pow"};
        // truncated polynomial exponentiation by squaring
        std::vector<BatchedTensor> acc{BatchedTensor::filled(sx, 1.0)};
        std::vector<BatchedTensor> base(x.begin(),
                                        x.begin() + std::min(x.size(), k + 1));
        while (n > 0) {
            if (n & 1)
                acc = poly_mul_trunc(acc, base, k);
            n >>= 1;
            if (n > 0)
                base = poly_mul_trunc(base, base, k);
        }
        return k < acc.size() ? acc[k] : BatchedTensor::zeros(sx);
    }
    BatchedTensor num = ew_scale(ew_mul(f_prev[0], series_coeff(x, k, sx)), r);
    for (size_t i = 1; i < k; ++i) {
        real_t c = (real_t(i) / real_t(k)) * (r + 1.0) - 1.0;
        num = ew_add(num, ew_scale(ew_mul(f_prev[k - i],
                                          series_coeff(x, i, sx)),
                                   c));
    }
    return ew_div(num, x[0]);
}

/* =================== matrix product / inverse =================== */

BatchedTensor matmul_bias(Series x, Series y, size_t k) {
    Shape sx = series_shape(x), sy = series_shape(y);
    BatchedTensor acc = BatchedTensor::zeros({sx.batch, sx.rows, sy.cols});
    for (size_t i = 1; i < k; ++i)
        acc = ew_add(acc, matmul(series_coeff(x, i, sx),
                                 series_coeff(y, k - i, sy)));
    return acc;
}

BatchedTensor matmul_coeff(Series x, Series y, size_t k) {
    if (k == 0)
        return matmul(x[0], y[0]);
    Shape sx = series_shape(x), sy = series_shape(y);
    BatchedTensor acc = matmul_bias(x, y, k);
    acc = ew_add(acc, matmul(series_coeff(x, k, sx), y[0]));
    acc = ew_add(acc, matmul(x[0], series_coeff(y, k, sy)));
    return acc;
}

BatchedTensor matinv_coeff(Series x, Series f_prev,
                           const BatchedTensor& x0_inv, size_t k) {
    if (k == 0)
        return x0_inv;
    check<Error>(f_prev.size() >= k, "matinv recurrence needs orders < k");
    Shape sx = series_shape(x);
    BatchedTensor acc =
            ew_neg(matmul(matmul(x0_inv, series_coeff(x, k, sx)), x0_inv));
    BatchedTensor conv = BatchedTensor::zeros(sx);
    for (size_t i = 1; i < k; ++i)
        conv = ew_add(conv, matmul(f_prev[i], series_coeff(x, k - i, sx)));
    return ew_sub(acc, matmul(conv, x0_inv));
}

/* =================== determinant =================== */

BatchedTensor det_slope(const BatchedTensor& x0) {
    const Shape& s = x0.shape();
    check(s.rows == s.cols, "det_slope requires square items");
    const size_t m = s.rows;
    const BatchedTensor xm = x0.materialized();
    BatchedTensor c = BatchedTensor::zeros(s);
    real_t* cp = c.mut();
    parallel_for(s.batch, [&](size_t b0, size_t b1) {
        for (size_t b = b0; b < b1; ++b) {
            Eigen::MatrixXd mat = item_view(xm, b);
            Eigen::JacobiSVD<Eigen::MatrixXd> svd(
                    mat, Eigen::ComputeFullU | Eigen::ComputeFullV);
            const Eigen::VectorXd& sv = svd.singularValues();
            Eigen::VectorXd d(m);
            for (size_t i = 0; i < m; ++i) {
                real_t prod = 1.0;
                for (size_t j = 0; j < m; ++j)
                    if (j != i)
                        prod *= sv[j];
                d[i] = prod;
            }
            real_t sgn = svd.matrixU().determinant() *
                         svd.matrixV().determinant();
            item_view_mut(cp, s, b) = sgn * svd.matrixU() * d.asDiagonal() *
                                      svd.matrixV().transpose();
        }
    });
    return c;
}

namespace {

// signed permutations of {0..m-1}
std::vector<std::pair<std::vector<size_t>, int>> permutations_signed(
        size_t m) {
    std::vector<size_t> idx(m);
    for (size_t i = 0; i < m; ++i)
        idx[i] = i;
    std::vector<std::pair<std::vector<size_t>, int>> out;
    do {
        // parity by counting inversions
        int inv = 0;
        for (size_t i = 0; i < m; ++i)
            for (size_t j = i + 1; j < m; ++j)
                inv += idx[i] > idx[j];
        out.emplace_back(idx, inv % 2 ? -1 : 1);
    } while (std::next_permutation(idx.begin(), idx.end()));
    return out;
}

BatchedTensor det_poly_leibniz(Series x, size_t k) {
    const Shape s = series_shape(x);
    const size_t m = s.rows, deg = x.size() - 1;
    auto perms = permutations_signed(m);
    BatchedTensor out = BatchedTensor::zeros({s.batch, 1, 1});
    real_t* op = out.mut();

    parallel_for(s.batch, [&](size_t b0, size_t b1) {
        std::vector<real_t> prod(k + 1), next(k + 1), entry(deg + 1);
        for (size_t b = b0; b < b1; ++b) {
            real_t acc = 0.0;
            for (const auto& [perm, sign] : perms) {
                std::fill(prod.begin(), prod.end(), 0.0);
                prod[0] = 1.0;
                for (size_t row = 0; row < m; ++row) {
                    for (size_t l = 0; l <= deg; ++l)
                        entry[l] = x[l].at(b, row, perm[row]);
                    std::fill(next.begin(), next.end(), 0.0);
                    for (size_t i = 0; i <= k; ++i) {
                        if (prod[i] == 0.0)
                            continue;
                        for (size_t l = 0; l <= deg && i + l <= k; ++l)
                            next[i + l] += prod[i] * entry[l];
                    }
                    prod.swap(next);
                }
                acc += sign * prod[k];
            }
            op[b] = acc;
        }
    });
    return out;
}

BatchedTensor det_poly_fft(Series x, size_t k) {
    const Shape s = series_shape(x);
    const size_t m = s.rows, deg = x.size() - 1;
    // grid past the determinant degree m*deg so coefficient k never aliases
    const size_t grid = next_pow2(m * deg + 1);
    BatchedTensor out = BatchedTensor::zeros({s.batch, 1, 1});
    real_t* op = out.mut();

    parallel_for(s.batch, [&](size_t b0, size_t b1) {
        std::vector<Eigen::MatrixXcd> seq(grid);
        for (size_t b = b0; b < b1; ++b) {
            for (size_t l = 0; l < grid; ++l) {
                seq[l].setZero(m, m);
                if (l <= deg && !x[l].is_zero())
                    seq[l].real() = item_view(x[l], b);
            }
            dft_series(seq, false);
            std::vector<Eigen::MatrixXcd> dets(grid);
            for (size_t i = 0; i < grid; ++i) {
                Eigen::MatrixXcd d(1, 1);
                d(0, 0) = seq[i].determinant();
                dets[i] = std::move(d);
            }
            dft_series(dets, true);
            op[b] = dets[k](0, 0).real();
        }
    });
    return out;
}

}  // namespace

BatchedTensor det_poly_coeff(Series x, size_t k, DetBiasMethod method) {
    const Shape s = series_shape(x);
    check(s.rows == s.cols, "det_poly_coeff requires square items");
    const size_t m = s.rows, deg = x.size() - 1;
    if (k == 0)
        return determinant(x[0]);
    if (k > m * deg)
        return BatchedTensor::zeros({s.batch, 1, 1});
    if (method == DetBiasMethod::Auto)
        method = m <= 3 ? DetBiasMethod::Leibniz : DetBiasMethod::Fft;
    return method == DetBiasMethod::Leibniz ? det_poly_leibniz(x, k)
                                            : det_poly_fft(x, k);
}

BatchedTensor det_coeff(Series x, const BatchedTensor& cofactor, size_t k) {
    if (k == 0)
        return determinant(x[0]);
    BatchedTensor slope_term = reduce_sum_item(
            ew_mul(cofactor, series_coeff(x, k, series_shape(x))));
    BatchedTensor bias = det_poly_coeff(x.first(k), k);
    return ew_add(slope_term, bias);
}

/* =================== SVD-W =================== */

namespace {

Eigen::MatrixXd fetch_mat(Series s, size_t i, size_t b, size_t rows,
                          size_t cols) {
    if (i >= s.size() || s[i].is_zero())
        return Eigen::MatrixXd::Zero(rows, cols);
    return item_view(s[i], b);
}

Eigen::VectorXd fetch_vec(Series s, size_t i, size_t b, size_t m) {
    if (i >= s.size() || s[i].is_zero())
        return Eigen::VectorXd::Zero(m);
    Eigen::VectorXd v(m);
    for (size_t q = 0; q < m; ++q)
        v[q] = s[i].at(b, q, 0);
    return v;
}

struct SvdwItemOut {
    Eigen::MatrixXd u, w;
    Eigen::VectorXd sig;
};

// Shared core of svdw_coeff / svdw_jvp for one batch item: solves the
// order-k factors from the total order-k product term `e_term`
// (= X_k minus all lower-order products) and the orthogonality sums.
SvdwItemOut svdw_solve_item(const Eigen::MatrixXd& u0,
                            const Eigen::VectorXd& s0,
                            const Eigen::MatrixXd& w0,
                            const Eigen::MatrixXd& e_term,
                            const Eigen::MatrixXd& bu,
                            const Eigen::MatrixXd& bw) {
    const long m = u0.rows();
    Eigen::MatrixXd f = u0.transpose() * e_term * w0.transpose() * u0;
    Eigen::MatrixXd cw = u0.transpose() * w0 * bw * w0.transpose() * u0;

    Eigen::VectorXd sk(m);
    for (long i = 0; i < m; ++i)
        sk[i] = f(i, i) + s0[i] * bu(i, i) + 0.5 * s0[i] * cw(i, i);

    Eigen::MatrixXd aw = f - f.transpose() - cw * s0.asDiagonal();
    Eigen::MatrixXd mm(m, m);
    for (long i = 0; i < m; ++i)
        for (long j = 0; j < m; ++j)
            mm(i, j) = lorentz_div(aw(i, j), s0[i] + s0[j]);
    Eigen::MatrixXd wk = u0 * mm * u0.transpose() * w0;

    Eigen::MatrixXd au = f - s0.asDiagonal() * mm + s0.asDiagonal() * bu;
    au.diagonal() -= sk;
    Eigen::MatrixXd ss(m, m);
    for (long i = 0; i < m; ++i)
        for (long j = 0; j < m; ++j)
            ss(i, j) = i == j ? -0.5 * bu(i, i)
                              : lorentz_div(au(i, j), s0[j] - s0[i]);
    Eigen::MatrixXd uk = u0 * ss;
    return {std::move(uk), std::move(wk), std::move(sk)};
}

}  // namespace

SvdwCoeffs svdw_coeff(Series x, Series u, Series sig, Series w, size_t k) {
    const Shape s = series_shape(x);
    const size_t m = s.rows;
    check<Error>(k >= 1 && u.size() >= k && sig.size() >= k && w.size() >= k,
                 "svdw_coeff needs factor series through order k-1");

    BatchedTensor uk = BatchedTensor::zeros(s);
    BatchedTensor sk = BatchedTensor::zeros({s.batch, m, 1});
    BatchedTensor wk = BatchedTensor::zeros(s);
    real_t* up = uk.mut();
    real_t* sp = sk.mut();
    real_t* wp = wk.mut();

    parallel_for(s.batch, [&](size_t b0, size_t b1) {
        for (size_t b = b0; b < b1; ++b) {
            Eigen::MatrixXd u0 = fetch_mat(u, 0, b, m, m);
            Eigen::MatrixXd w0 = fetch_mat(w, 0, b, m, m);
            Eigen::VectorXd s0 = fetch_vec(sig, 0, b, m);

            // sum of products U_a S_b U_c^T W_d over a+b+c+d = k with every
            // index <= k-1, accumulated through half-convolutions
            std::vector<Eigen::MatrixXd> left(k + 1), right(k + 1);
            for (size_t t = 0; t <= k; ++t) {
                left[t] = Eigen::MatrixXd::Zero(m, m);
                right[t] = Eigen::MatrixXd::Zero(m, m);
                size_t lo = t < k ? 0 : 1, hi = std::min(t, k - 1);
                for (size_t a = lo; a <= hi; ++a) {
                    size_t bb = t - a;
                    if (bb > k - 1)
                        continue;
                    left[t] += fetch_mat(u, a, b, m, m) *
                               fetch_vec(sig, bb, b, m).asDiagonal();
                    right[t] += fetch_mat(u, a, b, m, m).transpose() *
                                fetch_mat(w, bb, b, m, m);
                }
            }
            Eigen::MatrixXd lower = Eigen::MatrixXd::Zero(m, m);
            for (size_t t = 0; t <= k; ++t)
                lower += left[t] * right[k - t];

            Eigen::MatrixXd e_term = fetch_mat(x, k, b, m, m) - lower;

            Eigen::MatrixXd bu = Eigen::MatrixXd::Zero(m, m);
            Eigen::MatrixXd bw = Eigen::MatrixXd::Zero(m, m);
            for (size_t i = 1; i < k; ++i) {
                bu += fetch_mat(u, i, b, m, m).transpose() *
                      fetch_mat(u, k - i, b, m, m);
                bw += fetch_mat(w, i, b, m, m).transpose() *
                      fetch_mat(w, k - i, b, m, m);
            }

            SvdwItemOut o = svdw_solve_item(u0, s0, w0, e_term, bu, bw);
            if (!o.u.allFinite() || !o.w.allFinite() || !o.sig.allFinite())
                throw DomainError{"non-finite SVD-W coefficient", "svd_w",
                                  long(b)};
            item_view_mut(up, s, b) = o.u;
            item_view_mut(wp, s, b) = o.w;
            for (size_t q = 0; q < m; ++q)
                sp[b * m + q] = o.sig[q];
        }
    });
    return {std::move(uk), std::move(sk), std::move(wk)};
}

SvdwCoeffs svdw_jvp(const BatchedTensor& u0, const BatchedTensor& sig0,
                    const BatchedTensor& w0, const BatchedTensor& dx) {
    const Shape s = u0.shape();
    const size_t m = s.rows;
    BatchedTensor du = BatchedTensor::zeros(s);
    BatchedTensor ds = BatchedTensor::zeros({s.batch, m, 1});
    BatchedTensor dw = BatchedTensor::zeros(s);
    if (dx.is_zero())
        return {std::move(du), std::move(ds), std::move(dw)};
    real_t* up = du.mut();
    real_t* sp = ds.mut();
    real_t* wp = dw.mut();
    const Eigen::MatrixXd zero = Eigen::MatrixXd::Zero(m, m);
    parallel_for(s.batch, [&](size_t b0, size_t b1) {
        for (size_t b = b0; b < b1; ++b) {
            Eigen::VectorXd s0(m);
            for (size_t q = 0; q < m; ++q)
                s0[q] = sig0.at(b, q, 0);
            SvdwItemOut o = svdw_solve_item(item_view(u0, b), s0,
                                            item_view(w0, b),
                                            item_view(dx, b), zero, zero);
            item_view_mut(up, s, b) = o.u;
            item_view_mut(wp, s, b) = o.w;
            for (size_t q = 0; q < m; ++q)
                sp[b * m + q] = o.sig[q];
        }
    });
    return {std::move(du), std::move(ds), std::move(dw)};
}

/* =================== polar decomposition =================== */

namespace {

Eigen::MatrixXd polar_solve_p(const Eigen::MatrixXd& u0,
                              const Eigen::VectorXd& s0,
                              const Eigen::MatrixXd& rhs) {
    const long m = u0.rows();
    Eigen::MatrixXd ap = u0.transpose() * rhs * u0;
    Eigen::MatrixXd mp(m, m);
    for (long i = 0; i < m; ++i)
        for (long j = 0; j < m; ++j)
            mp(i, j) = lorentz_div(ap(i, j), s0[i] + s0[j]);
    return u0 * mp * u0.transpose();
}

Eigen::MatrixXd polar_p0_inv(const Eigen::MatrixXd& u0,
                             const Eigen::VectorXd& s0, long batch) {
    real_t mx = s0.cwiseAbs().maxCoeff();
    real_t mn = s0.cwiseAbs().minCoeff();
    if (!(mn > 1e-14 * std::max(mx, 1e-300)))
        throw DomainError{"polar propagation needs invertible input",
                          "polar", batch};
    return u0 * s0.cwiseInverse().asDiagonal() * u0.transpose();
}

}  // namespace

PolarCoeffs polar_coeff(Series x, Series p, Series w,
                        const BatchedTensor& u0, const BatchedTensor& sig0,
                        size_t k) {
    const Shape s = series_shape(x);
    const size_t m = s.rows;
    check<Error>(k >= 1 && p.size() >= k && w.size() >= k,
                 "polar_coeff needs factor series through order k-1");
    BatchedTensor pk = BatchedTensor::zeros(s);
    BatchedTensor wk = BatchedTensor::zeros(s);
    real_t* pp = pk.mut();
    real_t* wp = wk.mut();

    parallel_for(s.batch, [&](size_t b0, size_t b1) {
        for (size_t b = b0; b < b1; ++b) {
            Eigen::MatrixXd u0b = item_view(u0, b);
            Eigen::VectorXd s0(m);
            for (size_t q = 0; q < m; ++q)
                s0[q] = sig0.at(b, q, 0);
            Eigen::MatrixXd x0 = fetch_mat(x, 0, b, m, m);
            Eigen::MatrixXd xk = fetch_mat(x, k, b, m, m);

            Eigen::MatrixXd bp = Eigen::MatrixXd::Zero(m, m);
            for (size_t i = 1; i < k; ++i)
                bp += fetch_mat(p, i, b, m, m) * fetch_mat(p, k - i, b, m, m) -
                      fetch_mat(x, i, b, m, m) *
                              fetch_mat(x, k - i, b, m, m).transpose();

            Eigen::MatrixXd rhs =
                    x0 * xk.transpose() + xk * x0.transpose() - bp;
            Eigen::MatrixXd pkb = polar_solve_p(u0b, s0, rhs);

            Eigen::MatrixXd t = xk - pkb * fetch_mat(w, 0, b, m, m);
            for (size_t i = 1; i < k; ++i)
                t -= fetch_mat(p, i, b, m, m) * fetch_mat(w, k - i, b, m, m);
            Eigen::MatrixXd wkb = polar_p0_inv(u0b, s0, long(b)) * t;

            if (!pkb.allFinite() || !wkb.allFinite())
                throw DomainError{"non-finite polar coefficient", "polar",
                                  long(b)};
            item_view_mut(pp, s, b) = pkb;
            item_view_mut(wp, s, b) = wkb;
        }
    });
    return {std::move(pk), std::move(wk)};
}

PolarCoeffs polar_jvp(const BatchedTensor& x0, const BatchedTensor& u0,
                      const BatchedTensor& sig0, const BatchedTensor& w0,
                      const BatchedTensor& dx) {
    const Shape s = x0.shape();
    const size_t m = s.rows;
    BatchedTensor dp = BatchedTensor::zeros(s);
    BatchedTensor dw = BatchedTensor::zeros(s);
    if (dx.is_zero())
        return {std::move(dp), std::move(dw)};
    real_t* pp = dp.mut();
    real_t* wp = dw.mut();
    parallel_for(s.batch, [&](size_t b0, size_t b1) {
        for (size_t b = b0; b < b1; ++b) {
            Eigen::MatrixXd u0b = item_view(u0, b);
            Eigen::VectorXd s0(m);
            for (size_t q = 0; q < m; ++q)
                s0[q] = sig0.at(b, q, 0);
            Eigen::MatrixXd x0b = item_view(x0, b);
            Eigen::MatrixXd dxb = item_view(dx, b);
            Eigen::MatrixXd rhs =
                    x0b * dxb.transpose() + dxb * x0b.transpose();
            Eigen::MatrixXd dpb = polar_solve_p(u0b, s0, rhs);
            Eigen::MatrixXd dwb = polar_p0_inv(u0b, s0, long(b)) *
                                  (dxb - dpb * item_view(w0, b));
            item_view_mut(pp, s, b) = dpb;
            item_view_mut(wp, s, b) = dwb;
        }
    });
    return {std::move(dp), std::move(dw)};
}

}  // namespace anm::taylor
