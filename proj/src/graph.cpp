#include "anm/graph.hpp"

#include <map>

namespace anm {

namespace {

BatchedTensor bcast_to(const BatchedTensor& c, const Shape& out) {
    const Shape& s = c.shape();
    check(s.batch == out.batch, "broadcast batch mismatch");
    if (s.rows == out.rows && s.cols == out.cols)
        return c;
    check(s.is_scalar_item(), "cannot broadcast ", s.str(), " to ",
          out.str());
    if (c.is_zero())
        return BatchedTensor::zeros(out);
    BatchedTensor r = BatchedTensor::zeros(out);
    real_t* dst = r.mut();
    const real_t* src = c.cdata();
    const size_t e = out.item_elems();
    for (size_t b = 0; b < out.batch; ++b)
        for (size_t q = 0; q < e; ++q)
            dst[b * e + q] = src[b];
    return r;
}

BatchedTensor embed_diag(const BatchedTensor& v) {
    const Shape& s = v.shape();
    check(s.cols == 1, "embed_diag expects n x m x 1");
    BatchedTensor r = BatchedTensor::zeros({s.batch, s.rows, s.rows});
    if (v.is_zero())
        return r;
    real_t* dst = r.mut();
    const real_t* src = v.cdata();
    for (size_t b = 0; b < s.batch; ++b)
        for (size_t i = 0; i < s.rows; ++i)
            dst[(b * s.rows + i) * s.rows + i] = src[b * s.rows + i];
    return r;
}

BatchedTensor one_hot(const Shape& s, size_t elem) {
    BatchedTensor t = BatchedTensor::zeros(s);
    real_t* p = t.mut();
    const size_t e = s.item_elems();
    for (size_t b = 0; b < s.batch; ++b)
        p[b * e + elem] = 1.0;
    return t;
}

// block of d out / d in for out = c .* in + terms independent of in,
// where in may be a per-item scalar broadcast against out
JacBlock ew_coeff_block(const Shape& out, const Shape& in,
                        const BatchedTensor& c) {
    if (in.rows == out.rows && in.cols == out.cols)
        return JacBlock::diag(bcast_to(c, out));
    BatchedTensor col = bcast_to(c, out);
    return JacBlock::dense(col.reshaped({out.batch, out.item_elems(), 1}));
}

}  // namespace

/* =================== JacBlock algebra =================== */

namespace {

BatchedTensor densify_diag(const BatchedTensor& d) {
    const size_t e = d.shape().item_elems(), n = d.shape().batch;
    return embed_diag(d.reshaped({n, e, 1}));
}

BatchedTensor scale_rows(const BatchedTensor& dense, const BatchedTensor& d) {
    // dense: n x eo x ei, d holds eo values per item
    const Shape& s = dense.shape();
    if (dense.is_zero() || d.is_zero())
        return BatchedTensor::zeros(s);
    BatchedTensor r = BatchedTensor::zeros(s);
    real_t* dst = r.mut();
    const real_t* a = dense.cdata();
    const real_t* dd = d.cdata();
    for (size_t b = 0; b < s.batch; ++b)
        for (size_t i = 0; i < s.rows; ++i) {
            real_t f = dd[b * s.rows + i];
            for (size_t j = 0; j < s.cols; ++j) {
                size_t idx = (b * s.rows + i) * s.cols + j;
                dst[idx] = f * a[idx];
            }
        }
    return r;
}

BatchedTensor scale_cols(const BatchedTensor& dense, const BatchedTensor& d) {
    const Shape& s = dense.shape();
    if (dense.is_zero() || d.is_zero())
        return BatchedTensor::zeros(s);
    BatchedTensor r = BatchedTensor::zeros(s);
    real_t* dst = r.mut();
    const real_t* a = dense.cdata();
    const real_t* dd = d.cdata();
    for (size_t b = 0; b < s.batch; ++b)
        for (size_t i = 0; i < s.rows; ++i)
            for (size_t j = 0; j < s.cols; ++j) {
                size_t idx = (b * s.rows + i) * s.cols + j;
                dst[idx] = dd[b * s.cols + j] * a[idx];
            }
    return r;
}

}  // namespace

JacBlock block_compose(const JacBlock& outer, const JacBlock& inner) {
    if (outer.is_zero() || inner.is_zero())
        return JacBlock::zero();
    using K = JacBlock::Kind;
    if (outer.kind == K::Diag && inner.kind == K::Diag)
        return JacBlock::diag(ew_mul(
                outer.t, inner.t.reshaped(outer.t.shape())));
    if (outer.kind == K::Diag && inner.kind == K::Dense) {
        const size_t n = inner.t.shape().batch;
        return JacBlock::dense(scale_rows(
                inner.t,
                outer.t.reshaped({n, outer.t.shape().item_elems(), 1})));
    }
    if (outer.kind == K::Dense && inner.kind == K::Diag) {
        const size_t n = outer.t.shape().batch;
        return JacBlock::dense(scale_cols(
                outer.t,
                inner.t.reshaped({n, inner.t.shape().item_elems(), 1})));
    }
    return JacBlock::dense(matmul(outer.t, inner.t));
}

JacBlock block_add(const JacBlock& a, const JacBlock& b) {
    if (a.is_zero())
        return b;
    if (b.is_zero())
        return a;
    using K = JacBlock::Kind;
    if (a.kind == K::Diag && b.kind == K::Diag)
        return JacBlock::diag(ew_add(a.t, b.t.reshaped(a.t.shape())));
    BatchedTensor da = a.kind == K::Diag ? densify_diag(a.t) : a.t;
    BatchedTensor db = b.kind == K::Diag ? densify_diag(b.t) : b.t;
    return JacBlock::dense(ew_add(da, db));
}

BatchedTensor block_apply(const JacBlock& blk, const BatchedTensor& v,
                          const Shape& out_shape) {
    if (blk.is_zero() || v.is_zero())
        return BatchedTensor::zeros(out_shape);
    if (blk.kind == JacBlock::Kind::Diag)
        return ew_mul(blk.t, v.reshaped(blk.t.shape())).reshaped(out_shape);
    const Shape& bs = blk.t.shape();
    BatchedTensor col = v.reshaped({bs.batch, bs.cols, 1});
    return matmul(blk.t, col).reshaped(out_shape);
}

Eigen::MatrixXd block_item_dense(const JacBlock& blk, size_t b, size_t e_out,
                                 size_t e_in) {
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(e_out, e_in);
    if (blk.is_zero())
        return m;
    if (blk.kind == JacBlock::Kind::Diag) {
        for (size_t q = 0; q < e_out; ++q)
            m(q, q) = blk.t.at(b, q / blk.t.shape().cols,
                               q % blk.t.shape().cols);
        return m;
    }
    for (size_t i = 0; i < e_out; ++i)
        for (size_t j = 0; j < e_in; ++j)
            m(i, j) = blk.t.at(b, i, j);
    return m;
}

/* =================== operators =================== */

namespace {

using taylor::Series;

struct BinaryEwOp : Operator {
    size_t arity() const override { return 2; }
    std::vector<Shape> infer(const GraphNode&,
                             std::span<const Shape> in) const override {
        return {broadcast_shape(in[0], in[1])};
    }
};

struct AddOp final : BinaryEwOp {
    std::string_view name() const override { return "add"; }
    void eval(const GraphNode&, std::span<const BatchedTensor> in,
              std::span<BatchedTensor> out) const override {
        out[0] = ew_add(in[0], in[1]);
    }
    JacBlock local_block(const GraphNode& n, EvalView vals, const OpCache&,
                         size_t, size_t ii) const override {
        Shape out = broadcast_shape(vals[n.inputs[0]].shape(),
                                    vals[n.inputs[1]].shape());
        return ew_coeff_block(out, vals[n.inputs[ii]].shape(),
                              BatchedTensor::filled(out, 1.0));
    }
    void series_coeff(const GraphNode&, const NodeSeries& s, const OpCache&,
                      size_t k, std::span<BatchedTensor> out) const override {
        out[0] = taylor::add_coeff(s.in[0], s.in[1], k);
    }
    void jvp(const GraphNode&, EvalView, const OpCache&,
             std::span<const BatchedTensor> din,
             std::span<BatchedTensor> dout) const override {
        dout[0] = ew_add(din[0], din[1]);
    }
};

struct SubOp final : BinaryEwOp {
    std::string_view name() const override { return "sub"; }
    void eval(const GraphNode&, std::span<const BatchedTensor> in,
              std::span<BatchedTensor> out) const override {
        out[0] = ew_sub(in[0], in[1]);
    }
    JacBlock local_block(const GraphNode& n, EvalView vals, const OpCache&,
                         size_t, size_t ii) const override {
        Shape out = broadcast_shape(vals[n.inputs[0]].shape(),
                                    vals[n.inputs[1]].shape());
        real_t sign = ii == 0 ? 1.0 : -1.0;
        return ew_coeff_block(out, vals[n.inputs[ii]].shape(),
                              BatchedTensor::filled(out, sign));
    }
    void series_coeff(const GraphNode&, const NodeSeries& s, const OpCache&,
                      size_t k, std::span<BatchedTensor> out) const override {
        out[0] = taylor::sub_coeff(s.in[0], s.in[1], k);
    }
    void jvp(const GraphNode&, EvalView, const OpCache&,
             std::span<const BatchedTensor> din,
             std::span<BatchedTensor> dout) const override {
        dout[0] = ew_sub(din[0], din[1]);
    }
};

struct MulOp final : BinaryEwOp {
    std::string_view name() const override { return "mul"; }
    void eval(const GraphNode&, std::span<const BatchedTensor> in,
              std::span<BatchedTensor> out) const override {
        out[0] = ew_mul(in[0], in[1]);
    }
    JacBlock local_block(const GraphNode& n, EvalView vals, const OpCache&,
                         size_t, size_t ii) const override {
        const BatchedTensor& other = vals[n.inputs[1 - ii]];
        Shape out = broadcast_shape(vals[n.inputs[0]].shape(),
                                    vals[n.inputs[1]].shape());
        return ew_coeff_block(out, vals[n.inputs[ii]].shape(),
                              bcast_to(other, out));
    }
    void series_coeff(const GraphNode&, const NodeSeries& s, const OpCache&,
                      size_t k, std::span<BatchedTensor> out) const override {
        out[0] = taylor::mul_coeff(s.in[0], s.in[1], k);
    }
    void jvp(const GraphNode& n, EvalView vals, const OpCache&,
             std::span<const BatchedTensor> din,
             std::span<BatchedTensor> dout) const override {
        dout[0] = ew_add(ew_mul(vals[n.inputs[1]], din[0]),
                         ew_mul(vals[n.inputs[0]], din[1]));
    }
};

struct DivOp final : BinaryEwOp {
    std::string_view name() const override { return "div"; }
    void eval(const GraphNode&, std::span<const BatchedTensor> in,
              std::span<BatchedTensor> out) const override {
        out[0] = ew_div(in[0], in[1]);
    }
    JacBlock local_block(const GraphNode& n, EvalView vals, const OpCache&,
                         size_t, size_t ii) const override {
        const BatchedTensor& y0 = vals[n.inputs[1]];
        Shape out = broadcast_shape(vals[n.inputs[0]].shape(), y0.shape());
        BatchedTensor c;
        if (ii == 0) {
            c = bcast_to(ew_div(BatchedTensor::filled(y0.shape(), 1.0), y0),
                         out);
        } else {
            c = ew_neg(ew_div(vals[n.outputs[0]], bcast_to(y0, out)));
        }
        return ew_coeff_block(out, vals[n.inputs[ii]].shape(), c);
    }
    void series_coeff(const GraphNode&, const NodeSeries& s, const OpCache&,
                      size_t k, std::span<BatchedTensor> out) const override {
        out[0] = taylor::div_coeff(s.in[0], s.in[1], s.out[0], k);
    }
    void jvp(const GraphNode& n, EvalView vals, const OpCache&,
             std::span<const BatchedTensor> din,
             std::span<BatchedTensor> dout) const override {
        BatchedTensor num =
                ew_sub(din[0], ew_mul(vals[n.outputs[0]], din[1]));
        dout[0] = ew_div(num, vals[n.inputs[1]]);
    }
};

struct LogOp final : Operator {
    std::string_view name() const override { return "log"; }
    size_t arity() const override { return 1; }
    std::vector<Shape> infer(const GraphNode&,
                             std::span<const Shape> in) const override {
        return {in[0]};
    }
    void eval(const GraphNode&, std::span<const BatchedTensor> in,
              std::span<BatchedTensor> out) const override {
        out[0] = ew_log(in[0]);
    }
    JacBlock local_block(const GraphNode& n, EvalView vals, const OpCache&,
                         size_t, size_t) const override {
        const BatchedTensor& x0 = vals[n.inputs[0]];
        return JacBlock::diag(
                ew_div(BatchedTensor::filled(x0.shape(), 1.0), x0));
    }
    void series_coeff(const GraphNode&, const NodeSeries& s, const OpCache&,
                      size_t k, std::span<BatchedTensor> out) const override {
        out[0] = taylor::log_coeff(s.in[0], s.out[0], k);
    }
    void jvp(const GraphNode& n, EvalView vals, const OpCache&,
             std::span<const BatchedTensor> din,
             std::span<BatchedTensor> dout) const override {
        dout[0] = ew_div(din[0], vals[n.inputs[0]]);
    }
};

struct PowConstOp final : Operator {
    std::string_view name() const override { return "pow_const"; }
    size_t arity() const override { return 1; }
    std::vector<Shape> infer(const GraphNode&,
                             std::span<const Shape> in) const override {
        return {in[0]};
    }
    void eval(const GraphNode& n, std::span<const BatchedTensor> in,
              std::span<BatchedTensor> out) const override {
        out[0] = ew_pow(in[0], n.params.exponent);
    }
    static BatchedTensor slope(const BatchedTensor& x0, real_t r) {
        return ew_scale(ew_pow(x0, r - 1.0), r);
    }
    JacBlock local_block(const GraphNode& n, EvalView vals, const OpCache&,
                         size_t, size_t) const override {
        real_t r = n.params.exponent;
        if (r == 0.0)
            return JacBlock::zero();
        return JacBlock::diag(slope(vals[n.inputs[0]], r));
    }
    void series_coeff(const GraphNode& n, const NodeSeries& s, const OpCache&,
                      size_t k, std::span<BatchedTensor> out) const override {
        out[0] = taylor::pow_coeff(s.in[0], s.out[0], n.params.exponent, k);
    }
    void jvp(const GraphNode& n, EvalView vals, const OpCache&,
             std::span<const BatchedTensor> din,
             std::span<BatchedTensor> dout) const override {
        real_t r = n.params.exponent;
        if (r == 0.0) {
            dout[0] = BatchedTensor::zeros(din[0].shape());
            return;
        }
        dout[0] = ew_mul(slope(vals[n.inputs[0]], r), din[0]);
    }
};

struct MatMulOp final : Operator {
    std::string_view name() const override { return "matmul"; }
    size_t arity() const override { return 2; }
    std::vector<Shape> infer(const GraphNode&,
                             std::span<const Shape> in) const override {
        check(in[0].batch == in[1].batch, "matmul batch mismatch: ",
              in[0].str(), " vs ", in[1].str());
        check(in[0].cols == in[1].rows, "matmul inner dimension mismatch: ",
              in[0].str(), " vs ", in[1].str());
        return {{in[0].batch, in[0].rows, in[1].cols}};
    }
    void eval(const GraphNode&, std::span<const BatchedTensor> in,
              std::span<BatchedTensor> out) const override {
        out[0] = matmul(in[0], in[1]);
    }
    JacBlock local_block(const GraphNode& n, EvalView vals, const OpCache&,
                         size_t, size_t ii) const override {
        const Shape& sx = vals[n.inputs[0]].shape();
        const Shape& sy = vals[n.inputs[1]].shape();
        const size_t nb = sx.batch, r = sx.rows, kk = sx.cols, c = sy.cols;
        BatchedTensor blk = BatchedTensor::zeros(
                {nb, r * c, ii == 0 ? r * kk : kk * c});
        real_t* p = blk.mut();
        const Shape bs = blk.shape();
        if (ii == 0) {
            const BatchedTensor y = vals[n.inputs[1]].materialized();
            for (size_t b = 0; b < nb; ++b) {
                auto ym = item_view(y, b);
                auto bm = item_view_mut(p, bs, b);
                for (size_t ir = 0; ir < r; ++ir)
                    for (size_t ic = 0; ic < c; ++ic)
                        for (size_t jc = 0; jc < kk; ++jc)
                            bm(ir * c + ic, ir * kk + jc) = ym(jc, ic);
            }
        } else {
            const BatchedTensor x = vals[n.inputs[0]].materialized();
            for (size_t b = 0; b < nb; ++b) {
                auto xm = item_view(x, b);
                auto bm = item_view_mut(p, bs, b);
                for (size_t ir = 0; ir < r; ++ir)
                    for (size_t ic = 0; ic < c; ++ic)
                        for (size_t jr = 0; jr < kk; ++jr)
                            bm(ir * c + ic, jr * c + ic) = xm(ir, jr);
            }
        }
        return JacBlock::dense(std::move(blk));
    }
    void series_coeff(const GraphNode&, const NodeSeries& s, const OpCache&,
                      size_t k, std::span<BatchedTensor> out) const override {
        out[0] = taylor::matmul_coeff(s.in[0], s.in[1], k);
    }
    void jvp(const GraphNode& n, EvalView vals, const OpCache&,
             std::span<const BatchedTensor> din,
             std::span<BatchedTensor> dout) const override {
        dout[0] = ew_add(matmul(din[0], vals[n.inputs[1]]),
                         matmul(vals[n.inputs[0]], din[1]));
    }
};

struct TransposeOp final : Operator {
    std::string_view name() const override { return "transpose"; }
    size_t arity() const override { return 1; }
    std::vector<Shape> infer(const GraphNode&,
                             std::span<const Shape> in) const override {
        return {{in[0].batch, in[0].cols, in[0].rows}};
    }
    void eval(const GraphNode&, std::span<const BatchedTensor> in,
              std::span<BatchedTensor> out) const override {
        out[0] = transpose(in[0]);
    }
    JacBlock local_block(const GraphNode& n, EvalView vals, const OpCache&,
                         size_t, size_t) const override {
        const Shape& s = vals[n.inputs[0]].shape();
        const size_t e = s.item_elems();
        BatchedTensor blk = BatchedTensor::zeros({s.batch, e, e});
        real_t* p = blk.mut();
        for (size_t b = 0; b < s.batch; ++b)
            for (size_t i = 0; i < s.rows; ++i)
                for (size_t j = 0; j < s.cols; ++j)
                    p[(b * e + (j * s.rows + i)) * e + (i * s.cols + j)] =
                            1.0;
        return JacBlock::dense(std::move(blk));
    }
    void series_coeff(const GraphNode&, const NodeSeries& s, const OpCache&,
                      size_t k, std::span<BatchedTensor> out) const override {
        out[0] = transpose(taylor::series_coeff(s.in[0], k,
                                                s.in[0][0].shape()));
    }
    void jvp(const GraphNode&, EvalView, const OpCache&,
             std::span<const BatchedTensor> din,
             std::span<BatchedTensor> dout) const override {
        dout[0] = transpose(din[0]);
    }
};

struct InverseOp final : Operator {
    std::string_view name() const override { return "inverse"; }
    size_t arity() const override { return 1; }
    std::vector<Shape> infer(const GraphNode&,
                             std::span<const Shape> in) const override {
        check(in[0].rows == in[0].cols, "inverse requires square items, got ",
              in[0].str());
        return {in[0]};
    }
    void eval(const GraphNode&, std::span<const BatchedTensor> in,
              std::span<BatchedTensor> out) const override {
        out[0] = inverse(in[0]);
    }
    JacBlock local_block(const GraphNode& n, EvalView vals, const OpCache&,
                         size_t, size_t) const override {
        const BatchedTensor inv = vals[n.outputs[0]].materialized();
        const Shape& s = inv.shape();
        const size_t m = s.rows, e = m * m;
        BatchedTensor blk = BatchedTensor::zeros({s.batch, e, e});
        real_t* p = blk.mut();
        const Shape bs = blk.shape();
        for (size_t b = 0; b < s.batch; ++b) {
            auto iv = item_view(inv, b);
            auto bm = item_view_mut(p, bs, b);
            for (size_t ir = 0; ir < m; ++ir)
                for (size_t ic = 0; ic < m; ++ic)
                    for (size_t jr = 0; jr < m; ++jr)
                        for (size_t jc = 0; jc < m; ++jc)
                            bm(ir * m + ic, jr * m + jc) =
                                    -iv(ir, jr) * iv(jc, ic);
        }
        return JacBlock::dense(std::move(blk));
    }
    void series_coeff(const GraphNode&, const NodeSeries& s, const OpCache&,
                      size_t k, std::span<BatchedTensor> out) const override {
        out[0] = taylor::matinv_coeff(s.in[0], s.out[0], s.out[0][0], k);
    }
    void jvp(const GraphNode& n, EvalView vals, const OpCache&,
             std::span<const BatchedTensor> din,
             std::span<BatchedTensor> dout) const override {
        const BatchedTensor& inv = vals[n.outputs[0]];
        dout[0] = ew_neg(matmul(matmul(inv, din[0]), inv));
    }
};

struct DetCache {
    BatchedTensor cofactor;
};

struct DetOp final : Operator {
    std::string_view name() const override { return "det"; }
    size_t arity() const override { return 1; }
    std::vector<Shape> infer(const GraphNode&,
                             std::span<const Shape> in) const override {
        check(in[0].rows == in[0].cols, "det requires square items, got ",
              in[0].str());
        return {{in[0].batch, 1, 1}};
    }
    void eval(const GraphNode&, std::span<const BatchedTensor> in,
              std::span<BatchedTensor> out) const override {
        out[0] = determinant(in[0]);
    }
    OpCache prepare(const GraphNode& n, EvalView vals) const override {
        auto c = std::make_shared<DetCache>();
        c->cofactor = taylor::det_slope(vals[n.inputs[0]]);
        return c;
    }
    static const DetCache& cof(const OpCache& c) {
        return *static_cast<const DetCache*>(c.get());
    }
    JacBlock local_block(const GraphNode&, EvalView, const OpCache& cache,
                         size_t, size_t) const override {
        const BatchedTensor& c = cof(cache).cofactor;
        const Shape& s = c.shape();
        return JacBlock::dense(
                c.reshaped({s.batch, 1, s.item_elems()}));
    }
    void series_coeff(const GraphNode&, const NodeSeries& s,
                      const OpCache& cache, size_t k,
                      std::span<BatchedTensor> out) const override {
        out[0] = taylor::det_coeff(s.in[0], cof(cache).cofactor, k);
    }
    void jvp(const GraphNode&, EvalView, const OpCache& cache,
             std::span<const BatchedTensor> din,
             std::span<BatchedTensor> dout) const override {
        dout[0] = reduce_sum_item(ew_mul(cof(cache).cofactor, din[0]));
    }
};

struct ReduceSumOp final : Operator {
    std::string_view name() const override { return "reduce_sum"; }
    size_t arity() const override { return 1; }
    std::vector<Shape> infer(const GraphNode&,
                             std::span<const Shape> in) const override {
        return {{in[0].batch, 1, 1}};
    }
    void eval(const GraphNode&, std::span<const BatchedTensor> in,
              std::span<BatchedTensor> out) const override {
        out[0] = reduce_sum_item(in[0]);
    }
    JacBlock local_block(const GraphNode& n, EvalView vals, const OpCache&,
                         size_t, size_t) const override {
        const Shape& s = vals[n.inputs[0]].shape();
        return JacBlock::dense(BatchedTensor::filled(
                {s.batch, 1, s.item_elems()}, 1.0));
    }
    void series_coeff(const GraphNode&, const NodeSeries& s, const OpCache&,
                      size_t k, std::span<BatchedTensor> out) const override {
        out[0] = reduce_sum_item(
                taylor::series_coeff(s.in[0], k, s.in[0][0].shape()));
    }
    void jvp(const GraphNode&, EvalView, const OpCache&,
             std::span<const BatchedTensor> din,
             std::span<BatchedTensor> dout) const override {
        dout[0] = reduce_sum_item(din[0]);
    }
};

// Outputs: U, Sigma (n x m x 1), W, and a hidden symmetric polar factor P
// used by the recurrence when the node runs the polar fast path.
struct SvdWOp final : Operator {
    std::string_view name() const override { return "svd_w"; }
    size_t arity() const override { return 1; }
    size_t n_outputs() const override { return 4; }
    size_t n_public_outputs() const override { return 3; }
    std::vector<Shape> infer(const GraphNode&,
                             std::span<const Shape> in) const override {
        check(in[0].rows == in[0].cols, "svd_w requires square items, got ",
              in[0].str());
        Shape sq = in[0];
        return {sq, {sq.batch, sq.rows, 1}, sq, sq};
    }
    void eval(const GraphNode& n, std::span<const BatchedTensor> in,
              std::span<BatchedTensor> out) const override {
        SvdWTriple t = svd_w(in[0], n.params.rotation_variant);
        out[0] = t.u;
        out[1] = t.sigma;
        out[2] = t.w;
        out[3] = matmul(matmul(t.u, embed_diag(t.sigma)), transpose(t.u));
    }
    void series_coeff(const GraphNode& n, const NodeSeries& s, const OpCache&,
                      size_t k, std::span<BatchedTensor> out) const override {
        const Shape sq = s.in[0][0].shape();
        if (n.polar_path) {
            taylor::PolarCoeffs pc = taylor::polar_coeff(
                    s.in[0], s.out[3], s.out[2], s.out[0][0], s.out[1][0], k);
            out[0] = BatchedTensor::zeros(sq);
            out[1] = BatchedTensor::zeros({sq.batch, sq.rows, 1});
            out[2] = std::move(pc.w);
            out[3] = std::move(pc.p);
        } else {
            taylor::SvdwCoeffs sc =
                    taylor::svdw_coeff(s.in[0], s.out[0], s.out[1], s.out[2],
                                       k);
            out[0] = std::move(sc.u);
            out[1] = std::move(sc.sigma);
            out[2] = std::move(sc.w);
            out[3] = BatchedTensor::zeros(sq);
        }
    }
    void jvp(const GraphNode& n, EvalView vals, const OpCache&,
             std::span<const BatchedTensor> din,
             std::span<BatchedTensor> dout) const override {
        const BatchedTensor& u0 = vals[n.outputs[0]];
        const BatchedTensor& s0 = vals[n.outputs[1]];
        const BatchedTensor& w0 = vals[n.outputs[2]];
        const Shape sq = u0.shape();
        if (n.polar_path) {
            taylor::PolarCoeffs pc = taylor::polar_jvp(
                    vals[n.inputs[0]], u0, s0, w0, din[0]);
            dout[0] = BatchedTensor::zeros(sq);
            dout[1] = BatchedTensor::zeros({sq.batch, sq.rows, 1});
            dout[2] = std::move(pc.w);
            dout[3] = std::move(pc.p);
        } else {
            taylor::SvdwCoeffs sc = taylor::svdw_jvp(u0, s0, w0, din[0]);
            dout[0] = std::move(sc.u);
            dout[1] = std::move(sc.sigma);
            dout[2] = std::move(sc.w);
            dout[3] = BatchedTensor::zeros(sq);
        }
    }
    JacBlock local_block(const GraphNode& n, EvalView vals, const OpCache& c,
                         size_t oi, size_t) const override {
        if (oi == 3 || (n.polar_path && oi != 2))
            return JacBlock::zero();
        const Shape& sx = vals[n.inputs[0]].shape();
        const size_t e_in = sx.item_elems();
        const Shape so = vals[n.outputs[oi]].shape();
        const size_t e_out = so.item_elems();
        BatchedTensor blk = BatchedTensor::zeros({sx.batch, e_out, e_in});
        real_t* p = blk.mut();
        std::array<BatchedTensor, 4> dout;
        std::array<BatchedTensor, 1> din;
        for (size_t q = 0; q < e_in; ++q) {
            din[0] = one_hot(sx, q);
            jvp(n, vals, c, din, dout);
            const BatchedTensor col = dout[oi].materialized();
            const real_t* cp = col.cdata();
            for (size_t b = 0; b < sx.batch; ++b)
                for (size_t i = 0; i < e_out; ++i)
                    p[(b * e_out + i) * e_in + q] = cp[b * e_out + i];
        }
        return JacBlock::dense(std::move(blk));
    }
};

const AddOp g_add;
const SubOp g_sub;
const MulOp g_mul;
const DivOp g_div;
const LogOp g_log;
const PowConstOp g_pow;
const MatMulOp g_matmul;
const TransposeOp g_transpose;
const InverseOp g_inverse;
const DetOp g_det;
const ReduceSumOp g_reduce_sum;
const SvdWOp g_svdw;

const std::map<std::string_view, const Operator*>& registry() {
    static const std::map<std::string_view, const Operator*> reg{
            {"add", &g_add},           {"sub", &g_sub},
            {"mul", &g_mul},           {"div", &g_div},
            {"log", &g_log},           {"pow_const", &g_pow},
            {"matmul", &g_matmul},     {"transpose", &g_transpose},
            {"inverse", &g_inverse},   {"det", &g_det},
            {"reduce_sum", &g_reduce_sum}, {"svd_w", &g_svdw},
    };
    return reg;
}

}  // namespace

const Operator* find_operator(std::string_view name) {
    auto it = registry().find(name);
    return it == registry().end() ? nullptr : it->second;
}

/* =================== Graph =================== */

VarId Graph::new_var(Shape shape, std::string name, int producer,
                     bool is_const, BatchedTensor value) {
    GraphVar v;
    v.shape = shape;
    v.name = std::move(name);
    v.producer = producer;
    v.is_const = is_const;
    v.const_value = std::move(value);
    vars_.push_back(std::move(v));
    return VarId(vars_.size() - 1);
}

VarId Graph::add_input(Shape shape, std::string name) {
    check(!finalized_, "graph is finalized");
    check(input_ < 0, "graph already has an input variable");
    input_ = new_var(shape, std::move(name), -1, false);
    return input_;
}

VarId Graph::add_constant(BatchedTensor value, std::string name) {
    check(!finalized_, "graph is finalized");
    if (name.empty())
        name = str_concat("const", vars_.size());
    Shape s = value.shape();
    return new_var(s, std::move(name), -1, true, std::move(value));
}

std::vector<VarId> Graph::build_op(std::string_view op_name,
                                   const std::vector<VarId>& inputs,
                                   OpParams params) {
    check(!finalized_, "graph is finalized");
    const Operator* op = find_operator(op_name);
    check(op != nullptr, "unknown operator: ", op_name);
    check(inputs.size() == op->arity(), op_name, " expects ", op->arity(),
          " inputs, got ", inputs.size());
    std::vector<Shape> in_shapes;
    for (VarId v : inputs) {
        check(v >= 0 && size_t(v) < vars_.size(), "invalid input vertex ", v);
        in_shapes.push_back(vars_[v].shape);
    }

    GraphNode node;
    node.op = op;
    node.params = params;
    node.inputs = inputs;
    node.name = str_concat(op_name, nodes_.size());
    std::vector<Shape> out_shapes = op->infer(node, in_shapes);
    check(out_shapes.size() == op->n_outputs(), "operator output mismatch");
    for (size_t i = 0; i < out_shapes.size(); ++i)
        node.outputs.push_back(new_var(
                out_shapes[i],
                str_concat(node.name, i ? str_concat(":", i) : std::string{}),
                int(nodes_.size()), false));
    std::vector<VarId> pub(node.outputs.begin(),
                           node.outputs.begin() + op->n_public_outputs());
    nodes_.push_back(std::move(node));
    return pub;
}

void Graph::set_output(VarId v) {
    check(!finalized_, "graph is finalized");
    check(v >= 0 && size_t(v) < vars_.size(), "invalid output vertex");
    output_ = v;
}

void Graph::finalize() {
    check(!finalized_, "graph already finalized");
    check(input_ >= 0, "graph has no input variable");
    check(output_ >= 0, "graph has no output variable");

    std::vector<int> consumers(vars_.size(), 0);
    for (const GraphNode& n : nodes_)
        for (VarId v : n.inputs)
            ++consumers[v];
    ++consumers[output_];

    for (GraphNode& n : nodes_) {
        if (n.op->name() != "svd_w")
            continue;
        // transparently switch to the polar recurrence when only W matters
        n.polar_path =
                consumers[n.outputs[0]] == 0 && consumers[n.outputs[1]] == 0;
    }
    finalized_ = true;
}

std::vector<BatchedTensor> Graph::eval_all(const BatchedTensor& input) const {
    check<Error>(finalized_, "graph must be finalized before evaluation");
    check(input.shape() == vars_[input_].shape, "input shape ",
          input.shape().str(), " does not match graph input ",
          vars_[input_].shape.str());
    std::vector<BatchedTensor> values(vars_.size());
    for (size_t i = 0; i < vars_.size(); ++i)
        if (vars_[i].is_const)
            values[i] = vars_[i].const_value;
    values[input_] = input;

    std::vector<BatchedTensor> in, out;
    for (const GraphNode& n : nodes_) {
        in.assign(n.inputs.size(), {});
        for (size_t i = 0; i < n.inputs.size(); ++i)
            in[i] = values[n.inputs[i]];
        out.assign(n.outputs.size(), {});
        try {
            n.op->eval(n, in, out);
        } catch (const DomainError& e) {
            throw DomainError{e.bare, n.name, e.batch_index};
        }
        for (size_t i = 0; i < n.outputs.size(); ++i)
            values[n.outputs[i]] = std::move(out[i]);
    }
    return values;
}

std::vector<OpCache> Graph::prepare_caches(EvalView values) const {
    std::vector<OpCache> caches(nodes_.size());
    for (size_t i = 0; i < nodes_.size(); ++i)
        caches[i] = nodes_[i].op->prepare(nodes_[i], values);
    return caches;
}

std::vector<JacBlock> Graph::backward_blocks(
        EvalView values, const std::vector<OpCache>& caches) const {
    std::vector<JacBlock> blocks(vars_.size());
    blocks[output_] = JacBlock::diag(
            BatchedTensor::filled(vars_[output_].shape, 1.0));

    for (size_t ni = nodes_.size(); ni-- > 0;) {
        const GraphNode& n = nodes_[ni];
        for (size_t oi = 0; oi < n.outputs.size(); ++oi) {
            const JacBlock& g = blocks[n.outputs[oi]];
            if (g.is_zero())
                continue;
            for (size_t ii = 0; ii < n.inputs.size(); ++ii) {
                if (vars_[n.inputs[ii]].is_const)
                    continue;
                JacBlock local =
                        n.op->local_block(n, values, caches[ni], oi, ii);
                blocks[n.inputs[ii]] = block_add(
                        blocks[n.inputs[ii]], block_compose(g, local));
            }
        }
    }
    return blocks;
}

/* =================== affine maps / homotopy systems =================== */

SparseAffineMap SparseAffineMap::identity_to_tensor(size_t n, Shape shape) {
    check(shape.total() == n, "identity map size mismatch");
    SparseAffineMap m;
    m.matrix = SpMat(n, n);
    m.matrix.setIdentity();
    m.tensor_shape = shape;
    return m;
}

SparseAffineMap SparseAffineMap::identity_from_tensor(Shape shape) {
    SparseAffineMap m;
    m.matrix = SpMat(shape.total(), shape.total());
    m.matrix.setIdentity();
    m.tensor_shape = shape;
    return m;
}

BatchedTensor SparseAffineMap::to_tensor(const Eigen::VectorXd& x,
                                         real_t lambda) const {
    Eigen::VectorXd y = matrix * x;
    if (offset0.size())
        y += offset0;
    if (offset_lambda.size())
        y += lambda * offset_lambda;
    return BatchedTensor::from_data(
            tensor_shape, std::vector<real_t>(y.data(), y.data() + y.size()));
}

BatchedTensor SparseAffineMap::to_tensor_delta(const Eigen::VectorXd& dx,
                                               real_t dlambda) const {
    Eigen::VectorXd y = matrix * dx;
    if (offset_lambda.size())
        y += dlambda * offset_lambda;
    if (y.isZero(0.0))
        return BatchedTensor::zeros(tensor_shape);
    return BatchedTensor::from_data(
            tensor_shape, std::vector<real_t>(y.data(), y.data() + y.size()));
}

Eigen::VectorXd SparseAffineMap::to_vector(const BatchedTensor& t,
                                           real_t lambda) const {
    Eigen::VectorXd y;
    if (t.is_zero()) {
        y = Eigen::VectorXd::Zero(matrix.rows());
    } else {
        Eigen::Map<const Eigen::VectorXd> v(t.cdata(), t.shape().total());
        y = matrix * v;
    }
    if (offset0.size())
        y += offset0;
    if (offset_lambda.size())
        y += lambda * offset_lambda;
    return y;
}

Eigen::VectorXd SparseAffineMap::to_vector_delta(const BatchedTensor& t,
                                                 real_t dlambda) const {
    Eigen::VectorXd y;
    if (t.is_zero()) {
        y = Eigen::VectorXd::Zero(matrix.rows());
    } else {
        Eigen::Map<const Eigen::VectorXd> v(t.cdata(), t.shape().total());
        y = matrix * v;
    }
    if (offset_lambda.size() && dlambda != 0.0)
        y += dlambda * offset_lambda;
    return y;
}

Eigen::VectorXd evaluate(const HomotopySystem& sys, const Eigen::VectorXd& x,
                         real_t lambda) {
    BatchedTensor in = sys.input.to_tensor(x, lambda);
    std::vector<BatchedTensor> values = sys.graph->eval_all(in);
    return sys.output.to_vector(values[sys.graph->output_var()], lambda);
}

JacobianResult jacobian(const HomotopySystem& sys, const Eigen::VectorXd& x,
                        real_t lambda) {
    JacobianResult r;
    BatchedTensor in = sys.input.to_tensor(x, lambda);
    r.values = sys.graph->eval_all(in);
    r.caches = sys.graph->prepare_caches(r.values);
    r.blocks = sys.graph->backward_blocks(r.values, r.caches);

    const JacBlock& g = r.blocks[sys.graph->input_var()];
    const Shape& si = sys.graph->var_shape(sys.graph->input_var());
    const Shape& so = sys.graph->var_shape(sys.graph->output_var());
    const size_t nb = si.batch, ei = si.item_elems(), eo = so.item_elems();

    SpMat gsp(nb * eo, nb * ei);
    if (!g.is_zero()) {
        std::vector<Eigen::Triplet<real_t>> trip;
        if (g.kind == JacBlock::Kind::Diag) {
            trip.reserve(nb * eo);
            const BatchedTensor d = g.t.materialized();
            const real_t* dp = d.cdata();
            for (size_t b = 0; b < nb; ++b)
                for (size_t q = 0; q < eo; ++q)
                    trip.emplace_back(b * eo + q, b * ei + q,
                                      dp[b * eo + q]);
        } else {
            trip.reserve(nb * eo * ei);
            const BatchedTensor d = g.t.materialized();
            const real_t* dp = d.cdata();
            for (size_t b = 0; b < nb; ++b)
                for (size_t i = 0; i < eo; ++i)
                    for (size_t j = 0; j < ei; ++j) {
                        real_t v = dp[(b * eo + i) * ei + j];
                        if (v != 0.0)
                            trip.emplace_back(b * eo + i, b * ei + j, v);
                    }
        }
        gsp.setFromTriplets(trip.begin(), trip.end());
    }

    r.P = sys.output.matrix * gsp * sys.input.matrix;

    // dH/dlambda through the input offset plus the direct output offset
    Eigen::VectorXd zero = Eigen::VectorXd::Zero(sys.n());
    BatchedTensor dc = sys.input.to_tensor_delta(zero, 1.0);
    BatchedTensor dout = block_apply(g, dc, so);
    r.v = sys.output.to_vector_delta(dout, 1.0);
    return r;
}

}  // namespace anm
