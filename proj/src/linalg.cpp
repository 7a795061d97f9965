#include "anm/linalg.hpp"

#include <Eigen/SVD>

#include <cmath>
#include <numbers>

namespace anm {

namespace {

void require_square(const Shape& s, const char* who) {
    check(s.rows == s.cols, who, " requires square items, got ", s.str());
}

bool all_finite(const BatchedTensor& t) {
    if (t.is_zero())
        return true;
    const real_t* p = t.cdata();
    for (size_t i = 0; i < t.shape().total(); ++i)
        if (!std::isfinite(p[i]))
            return false;
    return true;
}

}  // namespace

BatchedTensor matmul(const BatchedTensor& a, const BatchedTensor& b) {
    const Shape &sa = a.shape(), &sb = b.shape();
    check(sa.batch == sb.batch, "matmul batch mismatch: ", sa.str(), " vs ",
          sb.str());
    check(sa.cols == sb.rows, "matmul inner dimension mismatch: ", sa.str(),
          " vs ", sb.str());
    Shape out{sa.batch, sa.rows, sb.cols};
    if (a.is_zero() || b.is_zero())
        return BatchedTensor::zeros(out);
    BatchedTensor r = BatchedTensor::zeros(out);
    real_t* dst = r.mut();
    parallel_for(out.batch, [&](size_t b0, size_t b1) {
        for (size_t i = b0; i < b1; ++i)
            item_view_mut(dst, out, i).noalias() =
                    item_view(a, i) * item_view(b, i);
    });
    return r;
}

BatchedTensor transpose(const BatchedTensor& x) {
    const Shape& s = x.shape();
    Shape out{s.batch, s.cols, s.rows};
    if (x.is_zero())
        return BatchedTensor::zeros(out);
    BatchedTensor r = BatchedTensor::zeros(out);
    real_t* dst = r.mut();
    parallel_for(s.batch, [&](size_t b0, size_t b1) {
        for (size_t b = b0; b < b1; ++b)
            item_view_mut(dst, out, b) = item_view(x, b).transpose();
    });
    return r;
}

BatchedTensor inverse(const BatchedTensor& x) {
    const Shape& s = x.shape();
    require_square(s, "inverse");
    check<DomainError>(!x.is_zero(), "inverse of the zero tensor");
    BatchedTensor r = BatchedTensor::zeros(s);
    real_t* dst = r.mut();
    parallel_for(s.batch, [&](size_t b0, size_t b1) {
        for (size_t b = b0; b < b1; ++b) {
            Eigen::MatrixXd m = item_view(x, b);
            Eigen::FullPivLU<Eigen::MatrixXd> lu(m);
            if (!lu.isInvertible())
                throw DomainError{"singular matrix", "inverse", long(b)};
            item_view_mut(dst, s, b) = lu.inverse();
        }
    });
    return r;
}

BatchedTensor determinant(const BatchedTensor& x) {
    const Shape& s = x.shape();
    require_square(s, "determinant");
    Shape out{s.batch, 1, 1};
    if (x.is_zero())
        return BatchedTensor::zeros(out);
    BatchedTensor r = BatchedTensor::zeros(out);
    real_t* dst = r.mut();
    parallel_for(s.batch, [&](size_t b0, size_t b1) {
        for (size_t b = b0; b < b1; ++b) {
            auto m = item_view(x, b);
            if (s.rows == 1) {
                dst[b] = m(0, 0);
            } else if (s.rows == 2) {
                dst[b] = m(0, 0) * m(1, 1) - m(0, 1) * m(1, 0);
            } else if (s.rows == 3) {
                dst[b] = m(0, 0) * (m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1)) -
                         m(0, 1) * (m(1, 0) * m(2, 2) - m(1, 2) * m(2, 0)) +
                         m(0, 2) * (m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0));
            } else {
                dst[b] = Eigen::PartialPivLU<Eigen::MatrixXd>(
                                 Eigen::MatrixXd(m))
                                 .determinant();
            }
        }
    });
    return r;
}

/* ======================= SVD-W ======================= */

std::vector<size_t> group_equal_singular_values(const Eigen::VectorXd& sv,
                                                real_t rel_tol) {
    const size_t m = sv.size();
    real_t scale = std::max(std::abs(sv[0]), 1e-300);
    std::vector<size_t> starts{0};
    for (size_t i = 1; i < m; ++i)
        if (std::abs(sv[i - 1] - sv[i]) > rel_tol * scale)
            starts.push_back(i);
    starts.push_back(m);
    return starts;
}

SvdWTriple svd_w(const BatchedTensor& x, bool rotation_variant) {
    const Shape& s = x.shape();
    require_square(s, "svd_w");
    check<DomainError>(all_finite(x), "non-finite input to svd_w");
    const size_t m = s.rows;
    const BatchedTensor xm = x.materialized();

    BatchedTensor u = BatchedTensor::zeros(s);
    BatchedTensor sig = BatchedTensor::zeros({s.batch, m, 1});
    BatchedTensor w = BatchedTensor::zeros(s);
    real_t* up = u.mut();
    real_t* sp = sig.mut();
    real_t* wp = w.mut();

    parallel_for(s.batch, [&](size_t b0, size_t b1) {
        for (size_t b = b0; b < b1; ++b) {
            Eigen::MatrixXd mat = item_view(xm, b);
            Eigen::JacobiSVD<Eigen::MatrixXd> svd(
                    mat, Eigen::ComputeFullU | Eigen::ComputeFullV);
            Eigen::MatrixXd U = svd.matrixU(), V = svd.matrixV();
            Eigen::VectorXd S = svd.singularValues();

            if (rotation_variant) {
                real_t detw = (U * V.transpose()).determinant();
                if (detw < 0) {
                    // flip one odd-sized group of equal singular values,
                    // preferring the one with the smallest values
                    auto starts = group_equal_singular_values(S);
                    long pick = -1;
                    for (size_t g = 0; g + 1 < starts.size(); ++g)
                        if ((starts[g + 1] - starts[g]) % 2 == 1)
                            pick = long(g);
                    if (pick < 0)
                        throw DomainError{
                                "no odd-sized singular value group to flip",
                                "svd_w", long(b)};
                    for (size_t i = starts[pick]; i < starts[pick + 1]; ++i) {
                        S[i] = -S[i];
                        V.col(i) = -V.col(i);
                    }
                }
            }

            item_view_mut(up, s, b) = U;
            item_view_mut(wp, s, b) = U * V.transpose();
            for (size_t i = 0; i < m; ++i)
                sp[b * m + i] = S[i];
        }
    });
    return {std::move(u), std::move(sig), std::move(w)};
}

/* ======================= series DFT ======================= */

void dft_series(std::vector<Eigen::MatrixXcd>& seq, bool inverse) {
    const size_t k = seq.size();
    check(k > 0 && (k & (k - 1)) == 0, "DFT length must be a power of two, ",
          "got ", k);
    if (k == 1)
        return;

    // bit-reversal permutation
    for (size_t i = 1, j = 0; i < k; ++i) {
        size_t bit = k >> 1;
        for (; j & bit; bit >>= 1)
            j ^= bit;
        j ^= bit;
        if (i < j)
            std::swap(seq[i], seq[j]);
    }

    const real_t sign = inverse ? 1.0 : -1.0;
    for (size_t len = 2; len <= k; len <<= 1) {
        const std::complex<real_t> wl =
                std::polar(1.0, sign * 2.0 * std::numbers::pi / real_t(len));
        for (size_t i = 0; i < k; i += len) {
            std::complex<real_t> w{1.0, 0.0};
            for (size_t j = 0; j < len / 2; ++j) {
                Eigen::MatrixXcd t = seq[i + j + len / 2] * w;
                seq[i + j + len / 2] = seq[i + j] - t;
                seq[i + j] += t;
                w *= wl;
            }
        }
    }
    if (inverse)
        for (auto& mat : seq)
            mat /= real_t(k);
}

}  // namespace anm
