#pragma once

#include "anm/common.hpp"

#include <memory>
#include <vector>

namespace anm {

// Canonical rank-3 shape: batch first, then a per-item matrix. Vectors are
// m x 1 items, per-item scalars are 1 x 1.
struct Shape {
    size_t batch = 0, rows = 0, cols = 0;

    size_t item_elems() const { return rows * cols; }
    size_t total() const { return batch * rows * cols; }
    bool operator==(const Shape&) const = default;
    bool is_scalar_item() const { return rows == 1 && cols == 1; }

    std::string str() const {
        return str_concat('[', batch, " x ", rows, " x ", cols, ']');
    }
};

// Dense float64 storage with a distinguished batch dimension. Handles share
// the underlying buffer; mutation goes through mut() which makes a private
// copy when the buffer is shared (copy-on-write). The all-zeros tensor is
// represented by a null buffer shared by every zero handle, so zero checks
// are identity comparisons and zero fast paths never touch element data.
class BatchedTensor {
public:
    BatchedTensor() = default;

    static BatchedTensor zeros(Shape s) { return BatchedTensor{s, nullptr}; }

    static BatchedTensor filled(Shape s, real_t v) {
        if (v == 0.0)
            return zeros(s);
        BatchedTensor t{s, std::make_shared<std::vector<real_t>>(s.total(), v)};
        return t;
    }

    static BatchedTensor from_data(Shape s, std::vector<real_t> data) {
        check(data.size() == s.total(), "data length ", data.size(),
              " does not match shape ", s.str());
        return BatchedTensor{
                s, std::make_shared<std::vector<real_t>>(std::move(data))};
    }

    // batch of m x m identity matrices
    static BatchedTensor identity(size_t batch, size_t m, real_t scale = 1.0);

    const Shape& shape() const { return shape_; }
    bool is_zero() const { return data_ == nullptr; }

    // True when both handles alias the same non-null buffer.
    bool shares_buffer(const BatchedTensor& o) const {
        return data_ != nullptr && data_ == o.data_;
    }

    // Read-only element access; works for the zero representation.
    real_t at(size_t b, size_t i, size_t j) const {
        if (!data_)
            return 0.0;
        return (*data_)[(b * shape_.rows + i) * shape_.cols + j];
    }

    // Raw read pointer; requires a materialized (non-zero-repr) tensor.
    const real_t* cdata() const {
        check<Error>(data_ != nullptr,
                     "cannot take raw pointer of the shared zero tensor");
        return data_->data();
    }

    // Writable pointer: materializes the zero representation and detaches
    // from shared buffers first.
    real_t* mut() {
        if (!data_) {
            data_ = std::make_shared<std::vector<real_t>>(shape_.total(), 0.0);
        } else if (data_.use_count() > 1) {
            data_ = std::make_shared<std::vector<real_t>>(*data_);
        }
        return data_->data();
    }

    // A dense copy-on-write handle; zero tensors get an actual buffer.
    BatchedTensor materialized() const {
        if (!is_zero())
            return *this;
        BatchedTensor t = *this;
        t.mut();
        return t;
    }

    // Same buffer viewed with a different per-item layout.
    BatchedTensor reshaped(Shape s) const {
        check(s.batch == shape_.batch && s.item_elems() == shape_.item_elems(),
              "reshape ", shape_.str(), " -> ", s.str(),
              " changes the element count");
        BatchedTensor t = *this;
        t.shape_ = s;
        return t;
    }

private:
    BatchedTensor(Shape s, std::shared_ptr<std::vector<real_t>> d)
            : shape_{s}, data_{std::move(d)} {}

    Shape shape_{};
    std::shared_ptr<std::vector<real_t>> data_;
};

/* ======================= elementwise operators ======================= */

// Binary elementwise ops accept equal shapes or a per-item scalar
// (n x 1 x 1) against an n x r x c tensor on either side; no other
// broadcasting. The zero representation short-circuits: x + 0 returns x
// itself (shared buffer), x * 0 returns a zero tensor.

Shape broadcast_shape(const Shape& a, const Shape& b);

BatchedTensor ew_add(const BatchedTensor& x, const BatchedTensor& y);
BatchedTensor ew_sub(const BatchedTensor& x, const BatchedTensor& y);
BatchedTensor ew_mul(const BatchedTensor& x, const BatchedTensor& y);
BatchedTensor ew_div(const BatchedTensor& x, const BatchedTensor& y);

BatchedTensor ew_neg(const BatchedTensor& x);
BatchedTensor ew_scale(const BatchedTensor& x, real_t s);

// log requires strictly positive elements; pow_const uses real exponent
// semantics (negative base only for integral r).
BatchedTensor ew_log(const BatchedTensor& x);
BatchedTensor ew_pow(const BatchedTensor& x, real_t r);

// Per-item sum over all matrix entries, result n x 1 x 1.
BatchedTensor reduce_sum_item(const BatchedTensor& x);

real_t max_abs(const BatchedTensor& x);

}  // namespace anm
