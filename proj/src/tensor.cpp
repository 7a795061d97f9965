#include "anm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

namespace anm {

/* ======================= threading ======================= */

namespace {
int g_num_threads = 1;
constexpr size_t kParallelGrain = 2048;
}  // namespace

void set_num_threads(int nr) {
    check<Error>(nr >= 1, "thread count must be >= 1, got ", nr);
    g_num_threads = nr;
}

int get_num_threads() {
    return g_num_threads;
}

void parallel_for(size_t n, const std::function<void(size_t, size_t)>& fn) {
    if (n == 0)
        return;
    int nt = g_num_threads;
    if (nt <= 1 || n < kParallelGrain) {
        fn(0, n);
        return;
    }
    size_t workers = std::min<size_t>(nt, n);
    size_t chunk = (n + workers - 1) / workers;
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (size_t w = 0; w < workers; ++w) {
        size_t b = w * chunk, e = std::min(n, b + chunk);
        if (b >= e)
            break;
        pool.emplace_back([&fn, b, e] { fn(b, e); });
    }
    for (auto& t : pool)
        t.join();
}

/* ======================= BatchedTensor ======================= */

BatchedTensor BatchedTensor::identity(size_t batch, size_t m, real_t scale) {
    BatchedTensor t = zeros({batch, m, m});
    real_t* p = t.mut();
    for (size_t b = 0; b < batch; ++b)
        for (size_t i = 0; i < m; ++i)
            p[(b * m + i) * m + i] = scale;
    return t;
}

/* ======================= elementwise ======================= */

Shape broadcast_shape(const Shape& a, const Shape& b) {
    check(a.batch == b.batch, "batch mismatch: ", a.str(), " vs ", b.str());
    if (a.rows == b.rows && a.cols == b.cols)
        return a;
    if (a.is_scalar_item())
        return b;
    if (b.is_scalar_item())
        return a;
    throw ShapeError{str_concat("incompatible shapes for elementwise op: ",
                                a.str(), " vs ", b.str())};
}

namespace {

enum class Bcast { None, LeftScalar, RightScalar };

Bcast bcast_kind(const Shape& x, const Shape& y) {
    if (x.rows == y.rows && x.cols == y.cols)
        return Bcast::None;
    return x.is_scalar_item() ? Bcast::LeftScalar : Bcast::RightScalar;
}

template <typename F>
BatchedTensor ew_binary(const BatchedTensor& x, const BatchedTensor& y,
                        F&& f) {
    Shape out = broadcast_shape(x.shape(), y.shape());
    Bcast bc = bcast_kind(x.shape(), y.shape());
    BatchedTensor r = BatchedTensor::zeros(out);
    real_t* dst = r.mut();
    const BatchedTensor xm = x.materialized(), ym = y.materialized();
    const real_t* xp = xm.cdata();
    const real_t* yp = ym.cdata();
    const size_t e = out.item_elems();
    parallel_for(out.batch, [&](size_t b0, size_t b1) {
        for (size_t b = b0; b < b1; ++b) {
            for (size_t q = 0; q < e; ++q) {
                real_t xv = bc == Bcast::LeftScalar ? xp[b] : xp[b * e + q];
                real_t yv = bc == Bcast::RightScalar ? yp[b] : yp[b * e + q];
                dst[b * e + q] = f(xv, yv, b);
            }
        }
    });
    return r;
}

}  // namespace

BatchedTensor ew_add(const BatchedTensor& x, const BatchedTensor& y) {
    Shape out = broadcast_shape(x.shape(), y.shape());
    if (y.is_zero() && x.shape() == out)
        return x;
    if (x.is_zero() && y.shape() == out)
        return y;
    if (x.is_zero() && y.is_zero())
        return BatchedTensor::zeros(out);
    return ew_binary(x, y, [](real_t a, real_t b, size_t) { return a + b; });
}

BatchedTensor ew_sub(const BatchedTensor& x, const BatchedTensor& y) {
    Shape out = broadcast_shape(x.shape(), y.shape());
    if (y.is_zero() && x.shape() == out)
        return x;
    if (x.is_zero() && y.is_zero())
        return BatchedTensor::zeros(out);
    if (x.is_zero())
        return ew_neg(y);
    return ew_binary(x, y, [](real_t a, real_t b, size_t) { return a - b; });
}

BatchedTensor ew_mul(const BatchedTensor& x, const BatchedTensor& y) {
    Shape out = broadcast_shape(x.shape(), y.shape());
    if (x.is_zero() || y.is_zero())
        return BatchedTensor::zeros(out);
    return ew_binary(x, y, [](real_t a, real_t b, size_t) { return a * b; });
}

BatchedTensor ew_div(const BatchedTensor& x, const BatchedTensor& y) {
    Shape out = broadcast_shape(x.shape(), y.shape());
    check<Error>(!y.is_zero(), "division by the zero tensor");
    if (x.is_zero()) {
        // still validate the divisor
        const BatchedTensor ym = y.materialized();
        const real_t* yp = ym.cdata();
        for (size_t i = 0; i < y.shape().total(); ++i)
            if (yp[i] == 0.0)
                throw DomainError{"division by zero", "ew_div",
                                  long(i / y.shape().item_elems())};
        return BatchedTensor::zeros(out);
    }
    return ew_binary(x, y, [](real_t a, real_t b, size_t batch) {
        if (b == 0.0)
            throw DomainError{"division by zero", "ew_div", long(batch)};
        return a / b;
    });
}

BatchedTensor ew_neg(const BatchedTensor& x) {
    if (x.is_zero())
        return x;
    return ew_scale(x, -1.0);
}

BatchedTensor ew_scale(const BatchedTensor& x, real_t s) {
    if (x.is_zero() || s == 0.0)
        return BatchedTensor::zeros(x.shape());
    if (s == 1.0)
        return x;
    BatchedTensor r = BatchedTensor::zeros(x.shape());
    real_t* dst = r.mut();
    const real_t* xp = x.cdata();
    const size_t total = x.shape().total(), e = x.shape().item_elems();
    parallel_for(x.shape().batch, [&](size_t b0, size_t b1) {
        for (size_t i = b0 * e; i < b1 * e && i < total; ++i)
            dst[i] = s * xp[i];
    });
    return r;
}

BatchedTensor ew_log(const BatchedTensor& x) {
    check<Error>(!x.is_zero(), "log of the zero tensor");
    BatchedTensor r = BatchedTensor::zeros(x.shape());
    real_t* dst = r.mut();
    const real_t* xp = x.cdata();
    const size_t e = x.shape().item_elems();
    parallel_for(x.shape().batch, [&](size_t b0, size_t b1) {
        for (size_t b = b0; b < b1; ++b)
            for (size_t q = 0; q < e; ++q) {
                real_t v = xp[b * e + q];
                if (!(v > 0.0))
                    throw DomainError{
                            str_concat("log of nonpositive value ", v),
                            "ew_log", long(b)};
                dst[b * e + q] = std::log(v);
            }
    });
    return r;
}

BatchedTensor ew_pow(const BatchedTensor& x, real_t r) {
    if (r == 0.0)
        return BatchedTensor::filled(x.shape(), 1.0);
    if (r == 1.0)
        return x;
    const bool integral = r == std::nearbyint(r);
    if (x.is_zero()) {
        check<DomainError>(r > 0.0, "0 raised to nonpositive power");
        return x;
    }
    BatchedTensor out = BatchedTensor::zeros(x.shape());
    real_t* dst = out.mut();
    const real_t* xp = x.cdata();
    const size_t e = x.shape().item_elems();
    parallel_for(x.shape().batch, [&](size_t b0, size_t b1) {
        for (size_t b = b0; b < b1; ++b)
            for (size_t q = 0; q < e; ++q) {
                real_t v = xp[b * e + q];
                if (!integral && !(v > 0.0))
                    throw DomainError{
                            str_concat("pow of nonpositive base ", v,
                                       " with non-integer exponent ", r),
                            "ew_pow", long(b)};
                if (integral && v == 0.0 && r < 0.0)
                    throw DomainError{"0 raised to negative power", "ew_pow",
                                      long(b)};
                dst[b * e + q] = std::pow(v, r);
            }
    });
    return out;
}

BatchedTensor reduce_sum_item(const BatchedTensor& x) {
    Shape out{x.shape().batch, 1, 1};
    if (x.is_zero())
        return BatchedTensor::zeros(out);
    BatchedTensor r = BatchedTensor::zeros(out);
    real_t* dst = r.mut();
    const real_t* xp = x.cdata();
    const size_t e = x.shape().item_elems();
    parallel_for(x.shape().batch, [&](size_t b0, size_t b1) {
        for (size_t b = b0; b < b1; ++b) {
            real_t acc = 0.0;
            for (size_t q = 0; q < e; ++q)
                acc += xp[b * e + q];
            dst[b] = acc;
        }
    });
    return r;
}

real_t max_abs(const BatchedTensor& x) {
    if (x.is_zero())
        return 0.0;
    const real_t* p = x.cdata();
    real_t m = 0.0;
    for (size_t i = 0; i < x.shape().total(); ++i)
        m = std::max(m, std::abs(p[i]));
    return m;
}

}  // namespace anm
