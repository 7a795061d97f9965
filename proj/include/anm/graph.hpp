#pragma once

#include "anm/taylor.hpp"

#include <Eigen/Sparse>

#include <memory>
#include <string>
#include <string_view>
#include <vector>

namespace anm {

using SpMat = Eigen::SparseMatrix<real_t>;

/* =================== block-sparse Jacobians =================== */

// Per-batch-item Jacobian block d vec(out) / d vec(in). Items never couple
// across the batch inside the graph, so a block is one of: zero, a
// per-element diagonal (stored with the operand's shape), or a dense
// n x e_out x e_in tensor. vec() flattens items row-major, matching
// BatchedTensor storage.
struct JacBlock {
    enum class Kind { Zero, Diag, Dense };
    Kind kind = Kind::Zero;
    BatchedTensor t;

    static JacBlock zero() { return {}; }
    static JacBlock diag(BatchedTensor d) {
        return {Kind::Diag, std::move(d)};
    }
    static JacBlock dense(BatchedTensor d) {
        return {Kind::Dense, std::move(d)};
    }
    bool is_zero() const { return kind == Kind::Zero; }
};

// chain rule: outer is d out/d mid, inner is d mid/d in
JacBlock block_compose(const JacBlock& outer, const JacBlock& inner);
JacBlock block_add(const JacBlock& a, const JacBlock& b);
// block * vec(v), reshaped to out_shape
BatchedTensor block_apply(const JacBlock& blk, const BatchedTensor& v,
                          const Shape& out_shape);
// dense matrix of one item (for tests and assembly)
Eigen::MatrixXd block_item_dense(const JacBlock& blk, size_t b, size_t e_out,
                                 size_t e_in);

/* =================== graph =================== */

using VarId = int32_t;

struct OpParams {
    real_t exponent = 0.0;       // pow_const
    bool rotation_variant = false;  // svd_w
};

class Operator;

struct GraphNode {
    const Operator* op = nullptr;
    OpParams params;
    std::vector<VarId> inputs;
    std::vector<VarId> outputs;  // includes hidden outputs
    bool polar_path = false;     // svd_w whose U/Sigma are unconsumed
    std::string name;
};

struct GraphVar {
    Shape shape;
    std::string name;
    int producer = -1;  // node index; -1 for the input and constants
    bool is_const = false;
    BatchedTensor const_value;
};

// Coefficient spans handed to an operator when computing order-k output
// coefficients: inputs run through order k, outputs through order k-1.
struct NodeSeries {
    std::vector<taylor::Series> in;
    std::vector<taylor::Series> out;
};

using OpCache = std::shared_ptr<const void>;
using EvalView = std::span<const BatchedTensor>;

// A registered operator: shape inference, forward evaluation, local
// Jacobian blocks at the expansion point, the order-k Taylor rule, and the
// slope action shared by all orders.
class Operator {
public:
    virtual ~Operator() = default;
    virtual std::string_view name() const = 0;
    virtual size_t arity() const = 0;
    virtual size_t n_outputs() const { return 1; }
    virtual size_t n_public_outputs() const { return n_outputs(); }

    virtual std::vector<Shape> infer(const GraphNode& n,
                                     std::span<const Shape> in) const = 0;
    virtual void eval(const GraphNode& n, std::span<const BatchedTensor> in,
                      std::span<BatchedTensor> out) const = 0;

    // step-constant data reused across orders (e.g. the determinant slope)
    virtual OpCache prepare(const GraphNode&, EvalView) const { return {}; }

    virtual JacBlock local_block(const GraphNode& n, EvalView vals,
                                 const OpCache& cache, size_t out_idx,
                                 size_t in_idx) const = 0;

    virtual void series_coeff(const GraphNode& n, const NodeSeries& s,
                              const OpCache& cache, size_t k,
                              std::span<BatchedTensor> out) const = 0;

    virtual void jvp(const GraphNode& n, EvalView vals, const OpCache& cache,
                     std::span<const BatchedTensor> din,
                     std::span<BatchedTensor> dout) const = 0;
};

const Operator* find_operator(std::string_view name);

// Directed acyclic bipartite graph of operator and variable vertices.
// Nodes are stored in insertion order, which is the one topological order
// used by every evaluation. Immutable after finalize().
class Graph {
public:
    VarId add_input(Shape shape, std::string name = "x");
    VarId add_constant(BatchedTensor value, std::string name = {});

    // generic entry point: looks op_name up in the registry, validates
    // arity and shapes, appends the node, returns the public output vars
    std::vector<VarId> build_op(std::string_view op_name,
                                const std::vector<VarId>& inputs,
                                OpParams params = {});

    VarId add(VarId a, VarId b) { return build_op("add", {a, b})[0]; }
    VarId sub(VarId a, VarId b) { return build_op("sub", {a, b})[0]; }
    VarId mul(VarId a, VarId b) { return build_op("mul", {a, b})[0]; }
    VarId div(VarId a, VarId b) { return build_op("div", {a, b})[0]; }
    VarId log(VarId x) { return build_op("log", {x})[0]; }
    VarId pow(VarId x, real_t r) {
        OpParams p;
        p.exponent = r;
        return build_op("pow_const", {x}, p)[0];
    }
    VarId matmul(VarId a, VarId b) { return build_op("matmul", {a, b})[0]; }
    VarId transpose(VarId x) { return build_op("transpose", {x})[0]; }
    VarId inverse(VarId x) { return build_op("inverse", {x})[0]; }
    VarId det(VarId x) { return build_op("det", {x})[0]; }
    VarId reduce_sum(VarId x) { return build_op("reduce_sum", {x})[0]; }

    struct SvdWOut {
        VarId u, sigma, w;
    };
    SvdWOut svd_w(VarId x, bool rotation_variant = false) {
        OpParams p;
        p.rotation_variant = rotation_variant;
        auto o = build_op("svd_w", {x}, p);
        return {o[0], o[1], o[2]};
    }

    void set_output(VarId v);
    // freezes the graph; decides the polar fast path for svd_w nodes whose
    // U/Sigma outputs have no consumers
    void finalize();

    bool finalized() const { return finalized_; }
    VarId input_var() const { return input_; }
    VarId output_var() const { return output_; }
    const std::vector<GraphVar>& vars() const { return vars_; }
    const std::vector<GraphNode>& nodes() const { return nodes_; }
    const Shape& var_shape(VarId v) const { return vars_[v].shape; }

    // forward evaluation in the fixed topological order; returns values of
    // every variable vertex
    std::vector<BatchedTensor> eval_all(const BatchedTensor& input) const;

    std::vector<OpCache> prepare_caches(EvalView values) const;

    // reverse-mode accumulation of d vec(output) / d vec(var) blocks
    std::vector<JacBlock> backward_blocks(
            EvalView values, const std::vector<OpCache>& caches) const;

private:
    VarId new_var(Shape shape, std::string name, int producer, bool is_const,
                  BatchedTensor value = {});

    std::vector<GraphVar> vars_;
    std::vector<GraphNode> nodes_;
    VarId input_ = -1;
    VarId output_ = -1;
    bool finalized_ = false;
};

/* =================== affine maps and homotopy systems =================== */

// Sparse linear map with constant and lambda-proportional offsets. Used in
// both directions: flat unknown vector -> batched tensor (input side) and
// flat tensor values -> residual vector (output side). Offsets may be
// empty, meaning zero.
struct SparseAffineMap {
    SpMat matrix;
    Eigen::VectorXd offset0;
    Eigen::VectorXd offset_lambda;
    Shape tensor_shape;  // input side: shape of the produced tensor

    static SparseAffineMap identity_to_tensor(size_t n, Shape shape);
    static SparseAffineMap identity_from_tensor(Shape shape);

    BatchedTensor to_tensor(const Eigen::VectorXd& x, real_t lambda) const;
    // linear part only: A*dx + dlambda * offset_lambda
    BatchedTensor to_tensor_delta(const Eigen::VectorXd& dx,
                                  real_t dlambda) const;
    Eigen::VectorXd to_vector(const BatchedTensor& t, real_t lambda) const;
    Eigen::VectorXd to_vector_delta(const BatchedTensor& t,
                                    real_t dlambda) const;
};

// H(x, lambda) = out_map(graph(in_map(x, lambda)), lambda). The homotopy
// parameter enters only through the affine offsets, which covers both the
// equational form f(x) + lambda v and handle interpolation homotopies.
struct HomotopySystem {
    SparseAffineMap input;
    std::shared_ptr<const Graph> graph;
    SparseAffineMap output;

    size_t n() const { return input.matrix.cols(); }
    size_t n_out() const { return output.matrix.rows(); }
};

Eigen::VectorXd evaluate(const HomotopySystem& sys, const Eigen::VectorXd& x,
                         real_t lambda);

struct JacobianResult {
    SpMat P;            // dH/dx, n_out x n
    Eigen::VectorXd v;  // dH/dlambda
    std::vector<BatchedTensor> values;
    std::vector<OpCache> caches;
    std::vector<JacBlock> blocks;
};

JacobianResult jacobian(const HomotopySystem& sys, const Eigen::VectorXd& x,
                        real_t lambda);

}  // namespace anm
