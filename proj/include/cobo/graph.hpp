// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cobo/tensor.hpp"

namespace cobo::ad {

class ShapeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class NonFiniteError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class FactorizationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class Op : std::uint8_t {
    Input,
    Param,
    Const,
    Add,
    Sub,
    Mul,
    Div,
    AddScalar,    // x + c
    MulScalar,    // x * c
    ScaleBy,      // matrix * scalar-node
    AddRowVec,    // {N,M} + {M}
    MulRowVec,    // {N,M} .* {M}
    AddColVec,    // {N,M} + {N}
    MatMul,
    Transpose,
    Reshape,
    Tanh,
    Exp,
    Log,
    Sqrt,
    Relu,  // max(0,x), subgradient 0 at the kink
    Abs,   // |x|, subgradient 0 at the kink
    Clamp,
    ReduceSum,
    ReduceMean,
    ReduceSumRows,   // {N,M} -> {N}
    LogSumExpRows,   // {N,M} -> {N}, max-shifted
    Gather,          // flat row-major indices -> {K}
    SliceCols,       // {N,M}[:, b:e) -> {N,e-b}
    PairwiseDist,    // {N,K} -> {N,N} Euclidean, clamped below
    SolveSpd,        // A{M,M} \ B{M,K}
    LogDetSpd,       // {M,M} -> scalar
};

const char* op_name(Op op);

using NodeId = int;

struct SpdCache;  // holds the Cholesky factor between forward and backward

struct Node {
    Op op = Op::Const;
    std::vector<NodeId> inputs;
    Tensor value;
    Tensor grad;
    std::string name;  // inputs/params only

    // op payloads
    double s0 = 0.0;
    double s1 = 0.0;
    std::vector<std::size_t> indices;      // Gather
    std::vector<std::size_t> alt_shape;    // Reshape target
    std::shared_ptr<SpdCache> spd;         // SolveSpd / LogDetSpd
};

struct GradCheckEntry {
    std::string param;
    double max_rel_err = 0.0;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double max_rel_err = 0.0;
    bool pass(double tol) const { return max_rel_err <= tol; }
};

/// Reverse-mode computation graph over Tensors.
///
/// Nodes are appended in topological order as the expression is built; shapes
/// are inferred and checked at construction, values are computed by forward().
/// backward() zeroes every gradient buffer before accumulating, so repeated
/// calls without a new forward() are idempotent.
class Graph {
public:
    NodeId input(const std::string& name, std::vector<std::size_t> shape);
    NodeId param(const std::string& name, Tensor initial);
    NodeId constant(Tensor value);
    NodeId constant_scalar(double v) { return constant(Tensor::scalar(v)); }

    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    NodeId div(NodeId a, NodeId b);
    NodeId add_scalar(NodeId a, double c);
    NodeId mul_scalar(NodeId a, double c);
    NodeId scale_by(NodeId mat, NodeId scalar_node);
    NodeId add_rowvec(NodeId mat, NodeId vec);
    NodeId mul_rowvec(NodeId mat, NodeId vec);
    NodeId add_colvec(NodeId mat, NodeId vec);
    NodeId matmul(NodeId a, NodeId b);
    NodeId transpose(NodeId a);
    NodeId reshape(NodeId a, std::vector<std::size_t> shape);
    NodeId tanh(NodeId a);
    NodeId exp(NodeId a);
    NodeId log(NodeId a);
    NodeId sqrt(NodeId a);
    NodeId relu(NodeId a);
    NodeId abs(NodeId a);
    NodeId clamp(NodeId a, double lo, double hi);
    NodeId reduce_sum(NodeId a);
    NodeId reduce_mean(NodeId a);
    NodeId reduce_sum_rows(NodeId a);
    NodeId logsumexp_rows(NodeId a);
    NodeId gather(NodeId a, std::vector<std::size_t> flat_indices);
    NodeId slice_cols(NodeId a, std::size_t begin, std::size_t end);
    NodeId pairwise_dist(NodeId a);
    NodeId solve_spd(NodeId a, NodeId b);
    NodeId logdet_spd(NodeId a);

    void set_value(NodeId id, Tensor v);
    void set_value(const std::string& name, Tensor v);
    NodeId find(const std::string& name) const;

    const Tensor& value(NodeId id) const { return nodes_[check(id)].value; }
    const Tensor& grad(NodeId id) const { return nodes_[check(id)].grad; }
    Tensor& mutable_value(NodeId id) { return nodes_[check(id)].value; }
    const Node& node(NodeId id) const { return nodes_[check(id)]; }
    std::size_t size() const { return nodes_.size(); }

    /// Recomputes every node in insertion order. Inputs must be bound first.
    void forward();

    /// Seeds d(seed)/d(seed) = seed_value on a scalar node and accumulates
    /// gradients in reverse topological order.
    void backward(NodeId seed, double seed_value = 1.0);

    /// Central-difference check of d(output)/d(param) for each listed param.
    /// Step h perturbs one parameter entry at a time; forward() is rerun.
    GradCheckReport grad_check(NodeId output, const std::vector<NodeId>& params,
                               double h = 1e-5);

    /// Lower clamp applied to pairwise distances before any division.
    static constexpr double kDistFloor = 1e-8;

    bool check_finite = true;

private:
    NodeId push(Node n);
    NodeId check(NodeId id) const;
    void compute(NodeId id);
    void accumulate(NodeId id);
    [[noreturn]] void shape_fail(Op op, const std::string& what) const;

    std::vector<Node> nodes_;
    std::map<std::string, NodeId> named_;
    bool forward_done_ = false;
};

}  // namespace cobo::ad
