// SPDX-License-Identifier: Apache-2.0
#include "cobo/graph.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <algorithm>
#include <cmath>

namespace cobo::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

CMapMat as_mat(const Tensor& t) {
    return CMapMat(t.data().data(), static_cast<Eigen::Index>(t.shape()[0]),
                   static_cast<Eigen::Index>(t.shape()[1]));
}

MapMat as_mat(Tensor& t) {
    return MapMat(t.data().data(), static_cast<Eigen::Index>(t.shape()[0]),
                  static_cast<Eigen::Index>(t.shape()[1]));
}

}  // namespace

struct SpdCache {
    Eigen::LLT<RowMat> llt;
    double jitter = 0.0;
};

const char* op_name(Op op) {
    switch (op) {
        case Op::Input: return "input";
        case Op::Param: return "param";
        case Op::Const: return "const";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Mul: return "mul";
        case Op::Div: return "div";
        case Op::AddScalar: return "add_scalar";
        case Op::MulScalar: return "mul_scalar";
        case Op::ScaleBy: return "scale_by";
        case Op::AddRowVec: return "add_rowvec";
        case Op::MulRowVec: return "mul_rowvec";
        case Op::AddColVec: return "add_colvec";
        case Op::MatMul: return "matmul";
        case Op::Transpose: return "transpose";
        case Op::Reshape: return "reshape";
        case Op::Tanh: return "tanh";
        case Op::Exp: return "exp";
        case Op::Log: return "log";
        case Op::Sqrt: return "sqrt";
        case Op::Relu: return "relu";
        case Op::Abs: return "abs";
        case Op::Clamp: return "clamp";
        case Op::ReduceSum: return "reduce_sum";
        case Op::ReduceMean: return "reduce_mean";
        case Op::ReduceSumRows: return "reduce_sum_rows";
        case Op::LogSumExpRows: return "logsumexp_rows";
        case Op::Gather: return "gather";
        case Op::SliceCols: return "slice_cols";
        case Op::PairwiseDist: return "pairwise_dist";
        case Op::SolveSpd: return "solve_spd";
        case Op::LogDetSpd: return "logdet_spd";
    }
    return "?";
}

NodeId Graph::push(Node n) {
    n.grad = Tensor(n.value.shape());
    nodes_.push_back(std::move(n));
    forward_done_ = false;
    return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Graph::check(NodeId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size())
        throw std::out_of_range("Graph: bad node id " + std::to_string(id));
    return id;
}

void Graph::shape_fail(Op op, const std::string& what) const {
    throw ShapeError("node " + std::to_string(nodes_.size()) + " (" + op_name(op) +
                     "): " + what);
}

NodeId Graph::input(const std::string& name, std::vector<std::size_t> shape) {
    Node n;
    n.op = Op::Input;
    n.name = name;
    n.value = Tensor(std::move(shape));
    NodeId id = push(std::move(n));
    named_[name] = id;
    return id;
}

NodeId Graph::param(const std::string& name, Tensor initial) {
    Node n;
    n.op = Op::Param;
    n.name = name;
    n.value = std::move(initial);
    NodeId id = push(std::move(n));
    named_[name] = id;
    return id;
}

NodeId Graph::constant(Tensor value) {
    Node n;
    n.op = Op::Const;
    n.value = std::move(value);
    return push(std::move(n));
}

NodeId Graph::find(const std::string& name) const {
    auto it = named_.find(name);
    if (it == named_.end()) throw std::out_of_range("Graph: no node named '" + name + "'");
    return it->second;
}

void Graph::set_value(NodeId id, Tensor v) {
    Node& n = nodes_[check(id)];
    if (n.op != Op::Input && n.op != Op::Param && n.op != Op::Const)
        throw std::logic_error("Graph::set_value: node is not a leaf");
    if (v.shape() != n.value.shape())
        throw ShapeError("set_value: shape " + Tensor::shape_str(v.shape()) +
                         " does not match " + Tensor::shape_str(n.value.shape()));
    n.value = std::move(v);
    forward_done_ = false;
}

void Graph::set_value(const std::string& name, Tensor v) { set_value(find(name), std::move(v)); }

#define COBO_BINARY(NAME, OPK)                                                      \
    NodeId Graph::NAME(NodeId a, NodeId b) {                                        \
        check(a);                                                                   \
        check(b);                                                                   \
        if (!nodes_[a].value.same_shape(nodes_[b].value))                           \
            shape_fail(Op::OPK, Tensor::shape_str(nodes_[a].value.shape()) +        \
                                    " vs " + Tensor::shape_str(nodes_[b].value.shape())); \
        Node n;                                                                     \
        n.op = Op::OPK;                                                             \
        n.inputs = {a, b};                                                          \
        n.value = Tensor(nodes_[a].value.shape());                                  \
        return push(std::move(n));                                                  \
    }

COBO_BINARY(add, Add)
COBO_BINARY(sub, Sub)
COBO_BINARY(mul, Mul)
COBO_BINARY(div, Div)
#undef COBO_BINARY

NodeId Graph::add_scalar(NodeId a, double c) {
    check(a);
    Node n;
    n.op = Op::AddScalar;
    n.inputs = {a};
    n.s0 = c;
    n.value = Tensor(nodes_[a].value.shape());
    return push(std::move(n));
}

NodeId Graph::mul_scalar(NodeId a, double c) {
    check(a);
    Node n;
    n.op = Op::MulScalar;
    n.inputs = {a};
    n.s0 = c;
    n.value = Tensor(nodes_[a].value.shape());
    return push(std::move(n));
}

NodeId Graph::scale_by(NodeId mat, NodeId scalar_node) {
    check(mat);
    check(scalar_node);
    if (nodes_[scalar_node].value.numel() != 1)
        shape_fail(Op::ScaleBy, "scale factor must have one element");
    Node n;
    n.op = Op::ScaleBy;
    n.inputs = {mat, scalar_node};
    n.value = Tensor(nodes_[mat].value.shape());
    return push(std::move(n));
}

NodeId Graph::add_rowvec(NodeId mat, NodeId vec) {
    check(mat);
    check(vec);
    const auto& ms = nodes_[mat].value.shape();
    const auto& vs = nodes_[vec].value.shape();
    if (ms.size() != 2 || vs.size() != 1 || vs[0] != ms[1])
        shape_fail(Op::AddRowVec, Tensor::shape_str(ms) + " + " + Tensor::shape_str(vs));
    Node n;
    n.op = Op::AddRowVec;
    n.inputs = {mat, vec};
    n.value = Tensor(ms);
    return push(std::move(n));
}

NodeId Graph::mul_rowvec(NodeId mat, NodeId vec) {
    check(mat);
    check(vec);
    const auto& ms = nodes_[mat].value.shape();
    const auto& vs = nodes_[vec].value.shape();
    if (ms.size() != 2 || vs.size() != 1 || vs[0] != ms[1])
        shape_fail(Op::MulRowVec, Tensor::shape_str(ms) + " .* " + Tensor::shape_str(vs));
    Node n;
    n.op = Op::MulRowVec;
    n.inputs = {mat, vec};
    n.value = Tensor(ms);
    return push(std::move(n));
}

NodeId Graph::add_colvec(NodeId mat, NodeId vec) {
    check(mat);
    check(vec);
    const auto& ms = nodes_[mat].value.shape();
    const auto& vs = nodes_[vec].value.shape();
    if (ms.size() != 2 || vs.size() != 1 || vs[0] != ms[0])
        shape_fail(Op::AddColVec, Tensor::shape_str(ms) + " + col " + Tensor::shape_str(vs));
    Node n;
    n.op = Op::AddColVec;
    n.inputs = {mat, vec};
    n.value = Tensor(ms);
    return push(std::move(n));
}

NodeId Graph::matmul(NodeId a, NodeId b) {
    check(a);
    check(b);
    const auto& as = nodes_[a].value.shape();
    const auto& bs = nodes_[b].value.shape();
    if (as.size() != 2 || bs.size() != 2 || as[1] != bs[0])
        shape_fail(Op::MatMul, Tensor::shape_str(as) + " x " + Tensor::shape_str(bs));
    Node n;
    n.op = Op::MatMul;
    n.inputs = {a, b};
    n.value = Tensor({as[0], bs[1]});
    return push(std::move(n));
}

NodeId Graph::transpose(NodeId a) {
    check(a);
    const auto& as = nodes_[a].value.shape();
    if (as.size() != 2) shape_fail(Op::Transpose, "needs rank 2, got " + Tensor::shape_str(as));
    Node n;
    n.op = Op::Transpose;
    n.inputs = {a};
    n.value = Tensor({as[1], as[0]});
    return push(std::move(n));
}

NodeId Graph::reshape(NodeId a, std::vector<std::size_t> shape) {
    check(a);
    if (Tensor::numel_of(shape) != nodes_[a].value.numel())
        shape_fail(Op::Reshape, "element count changes: " +
                                    Tensor::shape_str(nodes_[a].value.shape()) + " -> " +
                                    Tensor::shape_str(shape));
    Node n;
    n.op = Op::Reshape;
    n.inputs = {a};
    n.alt_shape = shape;
    n.value = Tensor(std::move(shape));
    return push(std::move(n));
}

#define COBO_UNARY(NAME, OPK)                       \
    NodeId Graph::NAME(NodeId a) {                  \
        check(a);                                   \
        Node n;                                     \
        n.op = Op::OPK;                             \
        n.inputs = {a};                             \
        n.value = Tensor(nodes_[a].value.shape());  \
        return push(std::move(n));                  \
    }

COBO_UNARY(tanh, Tanh)
COBO_UNARY(exp, Exp)
COBO_UNARY(log, Log)
COBO_UNARY(sqrt, Sqrt)
COBO_UNARY(relu, Relu)
COBO_UNARY(abs, Abs)
#undef COBO_UNARY

NodeId Graph::clamp(NodeId a, double lo, double hi) {
    check(a);
    Node n;
    n.op = Op::Clamp;
    n.inputs = {a};
    n.s0 = lo;
    n.s1 = hi;
    n.value = Tensor(nodes_[a].value.shape());
    return push(std::move(n));
}

NodeId Graph::reduce_sum(NodeId a) {
    check(a);
    Node n;
    n.op = Op::ReduceSum;
    n.inputs = {a};
    n.value = Tensor::scalar(0.0);
    return push(std::move(n));
}

NodeId Graph::reduce_mean(NodeId a) {
    check(a);
    Node n;
    n.op = Op::ReduceMean;
    n.inputs = {a};
    n.value = Tensor::scalar(0.0);
    return push(std::move(n));
}

NodeId Graph::reduce_sum_rows(NodeId a) {
    check(a);
    const auto& as = nodes_[a].value.shape();
    if (as.size() != 2) shape_fail(Op::ReduceSumRows, "needs rank 2");
    Node n;
    n.op = Op::ReduceSumRows;
    n.inputs = {a};
    n.value = Tensor({as[0]});
    return push(std::move(n));
}

NodeId Graph::logsumexp_rows(NodeId a) {
    check(a);
    const auto& as = nodes_[a].value.shape();
    if (as.size() != 2) shape_fail(Op::LogSumExpRows, "needs rank 2");
    Node n;
    n.op = Op::LogSumExpRows;
    n.inputs = {a};
    n.value = Tensor({as[0]});
    return push(std::move(n));
}

NodeId Graph::gather(NodeId a, std::vector<std::size_t> flat_indices) {
    check(a);
    for (std::size_t idx : flat_indices)
        if (idx >= nodes_[a].value.numel())
            shape_fail(Op::Gather, "index " + std::to_string(idx) + " out of range");
    Node n;
    n.op = Op::Gather;
    n.inputs = {a};
    n.value = Tensor({flat_indices.size()});
    n.indices = std::move(flat_indices);
    return push(std::move(n));
}

NodeId Graph::slice_cols(NodeId a, std::size_t begin, std::size_t end) {
    check(a);
    const auto& as = nodes_[a].value.shape();
    if (as.size() != 2 || begin >= end || end > as[1])
        shape_fail(Op::SliceCols, "bad column range [" + std::to_string(begin) + "," +
                                      std::to_string(end) + ") for " + Tensor::shape_str(as));
    Node n;
    n.op = Op::SliceCols;
    n.inputs = {a};
    n.s0 = static_cast<double>(begin);
    n.s1 = static_cast<double>(end);
    n.value = Tensor({as[0], end - begin});
    return push(std::move(n));
}

NodeId Graph::pairwise_dist(NodeId a) {
    check(a);
    const auto& as = nodes_[a].value.shape();
    if (as.size() != 2) shape_fail(Op::PairwiseDist, "needs rank 2");
    Node n;
    n.op = Op::PairwiseDist;
    n.inputs = {a};
    n.value = Tensor({as[0], as[0]});
    return push(std::move(n));
}

NodeId Graph::solve_spd(NodeId a, NodeId b) {
    check(a);
    check(b);
    const auto& as = nodes_[a].value.shape();
    const auto& bs = nodes_[b].value.shape();
    if (as.size() != 2 || as[0] != as[1] || bs.size() != 2 || bs[0] != as[0])
        shape_fail(Op::SolveSpd, Tensor::shape_str(as) + " \\ " + Tensor::shape_str(bs));
    Node n;
    n.op = Op::SolveSpd;
    n.inputs = {a, b};
    n.value = Tensor(bs);
    n.spd = std::make_shared<SpdCache>();
    return push(std::move(n));
}

NodeId Graph::logdet_spd(NodeId a) {
    check(a);
    const auto& as = nodes_[a].value.shape();
    if (as.size() != 2 || as[0] != as[1]) shape_fail(Op::LogDetSpd, "needs a square matrix");
    Node n;
    n.op = Op::LogDetSpd;
    n.inputs = {a};
    n.value = Tensor::scalar(0.0);
    n.spd = std::make_shared<SpdCache>();
    return push(std::move(n));
}

namespace {

// Factorize sym(A) + jitter*I, escalating jitter from 1e-8 by x10 up to
// 1e-2. The input is symmetrized so the op is well defined on the full
// matrix space; backward symmetrizes accordingly.
void factorize_spd(const Tensor& a, SpdCache& cache, NodeId id) {
    const auto m = static_cast<Eigen::Index>(a.shape()[0]);
    RowMat A = 0.5 * (RowMat(as_mat(a)) + RowMat(as_mat(a)).transpose());
    double jitter = 0.0;
    for (;;) {
        RowMat Aj = A;
        if (jitter > 0.0) Aj.diagonal().array() += jitter;
        cache.llt.compute(Aj);
        if (cache.llt.info() == Eigen::Success) {
            // LLT can "succeed" on a semidefinite matrix with zero/negative
            // pivots on some paths; verify the diagonal of L is positive.
            bool ok = true;
            for (Eigen::Index i = 0; i < m; ++i)
                if (!(cache.llt.matrixLLT()(i, i) > 0.0)) {
                    ok = false;
                    break;
                }
            if (ok) {
                cache.jitter = jitter;
                return;
            }
        }
        if (jitter == 0.0)
            jitter = 1e-8;
        else if (jitter < 1e-2)
            jitter *= 10.0;
        else
            throw FactorizationError("node " + std::to_string(id) +
                                     ": matrix not positive definite at max jitter 1e-2");
    }
}

}  // namespace

void Graph::compute(NodeId id) {
    Node& n = nodes_[id];
    const auto in = [&](std::size_t k) -> const Tensor& { return nodes_[n.inputs[k]].value; };

    switch (n.op) {
        case Op::Input:
        case Op::Param:
        case Op::Const:
            break;
        case Op::Add: {
            const auto& a = in(0).data();
            const auto& b = in(1).data();
            auto& o = n.value.data();
            for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] + b[i];
            break;
        }
        case Op::Sub: {
            const auto& a = in(0).data();
            const auto& b = in(1).data();
            auto& o = n.value.data();
            for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] - b[i];
            break;
        }
        case Op::Mul: {
            const auto& a = in(0).data();
            const auto& b = in(1).data();
            auto& o = n.value.data();
            for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] * b[i];
            break;
        }
        case Op::Div: {
            const auto& a = in(0).data();
            const auto& b = in(1).data();
            auto& o = n.value.data();
            for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] / b[i];
            break;
        }
        case Op::AddScalar: {
            const auto& a = in(0).data();
            auto& o = n.value.data();
            for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] + n.s0;
            break;
        }
        case Op::MulScalar: {
            const auto& a = in(0).data();
            auto& o = n.value.data();
            for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] * n.s0;
            break;
        }
        case Op::ScaleBy: {
            const auto& a = in(0).data();
            const double s = in(1).data()[0];
            auto& o = n.value.data();
            for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] * s;
            break;
        }
        case Op::AddRowVec: {
            const Tensor& m = in(0);
            const auto& v = in(1).data();
            const std::size_t R = m.shape()[0], C = m.shape()[1];
            for (std::size_t r = 0; r < R; ++r)
                for (std::size_t c = 0; c < C; ++c) n.value[r * C + c] = m[r * C + c] + v[c];
            break;
        }
        case Op::MulRowVec: {
            const Tensor& m = in(0);
            const auto& v = in(1).data();
            const std::size_t R = m.shape()[0], C = m.shape()[1];
            for (std::size_t r = 0; r < R; ++r)
                for (std::size_t c = 0; c < C; ++c) n.value[r * C + c] = m[r * C + c] * v[c];
            break;
        }
        case Op::AddColVec: {
            const Tensor& m = in(0);
            const auto& v = in(1).data();
            const std::size_t R = m.shape()[0], C = m.shape()[1];
            for (std::size_t r = 0; r < R; ++r)
                for (std::size_t c = 0; c < C; ++c) n.value[r * C + c] = m[r * C + c] + v[r];
            break;
        }
        case Op::MatMul: {
            as_mat(n.value) = as_mat(in(0)) * as_mat(in(1));
            break;
        }
        case Op::Transpose: {
            as_mat(n.value) = as_mat(in(0)).transpose();
            break;
        }
        case Op::Reshape: {
            n.value = Tensor(n.alt_shape, in(0).data());
            break;
        }
        case Op::Tanh: {
            const auto& a = in(0).data();
            auto& o = n.value.data();
            for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::tanh(a[i]);
            break;
        }
        case Op::Exp: {
            const auto& a = in(0).data();
            auto& o = n.value.data();
            for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::exp(a[i]);
            break;
        }
        case Op::Log: {
            const auto& a = in(0).data();
            auto& o = n.value.data();
            for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::log(a[i]);
            break;
        }
        case Op::Sqrt: {
            const auto& a = in(0).data();
            auto& o = n.value.data();
            for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::sqrt(a[i]);
            break;
        }
        case Op::Relu: {
            const auto& a = in(0).data();
            auto& o = n.value.data();
            for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] > 0.0 ? a[i] : 0.0;
            break;
        }
        case Op::Abs: {
            const auto& a = in(0).data();
            auto& o = n.value.data();
            for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::abs(a[i]);
            break;
        }
        case Op::Clamp: {
            const auto& a = in(0).data();
            auto& o = n.value.data();
            for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::clamp(a[i], n.s0, n.s1);
            break;
        }
        case Op::ReduceSum: {
            double s = 0.0;
            for (double x : in(0).data()) s += x;
            n.value.data()[0] = s;
            break;
        }
        case Op::ReduceMean: {
            double s = 0.0;
            for (double x : in(0).data()) s += x;
            n.value.data()[0] = s / static_cast<double>(in(0).numel());
            break;
        }
        case Op::ReduceSumRows: {
            const Tensor& m = in(0);
            const std::size_t R = m.shape()[0], C = m.shape()[1];
            for (std::size_t r = 0; r < R; ++r) {
                double s = 0.0;
                for (std::size_t c = 0; c < C; ++c) s += m[r * C + c];
                n.value[r] = s;
            }
            break;
        }
        case Op::LogSumExpRows: {
            const Tensor& m = in(0);
            const std::size_t R = m.shape()[0], C = m.shape()[1];
            for (std::size_t r = 0; r < R; ++r) {
                double mx = m[r * C];
                for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, m[r * C + c]);
                double s = 0.0;
                for (std::size_t c = 0; c < C; ++c) s += std::exp(m[r * C + c] - mx);
                n.value[r] = mx + std::log(s);
            }
            break;
        }
        case Op::Gather: {
            const auto& a = in(0).data();
            for (std::size_t k = 0; k < n.indices.size(); ++k) n.value[k] = a[n.indices[k]];
            break;
        }
        case Op::SliceCols: {
            const Tensor& m = in(0);
            const std::size_t C = m.shape()[1];
            const auto b = static_cast<std::size_t>(n.s0);
            const auto e = static_cast<std::size_t>(n.s1);
            const std::size_t R = m.shape()[0], W = e - b;
            for (std::size_t r = 0; r < R; ++r)
                for (std::size_t c = 0; c < W; ++c) n.value[r * W + c] = m[r * C + b + c];
            break;
        }
        case Op::PairwiseDist: {
            const Tensor& z = in(0);
            const std::size_t N = z.shape()[0], K = z.shape()[1];
            for (std::size_t i = 0; i < N; ++i) {
                n.value[i * N + i] = kDistFloor;
                for (std::size_t j = i + 1; j < N; ++j) {
                    double s = 0.0;
                    for (std::size_t d = 0; d < K; ++d) {
                        const double diff = z[i * K + d] - z[j * K + d];
                        s += diff * diff;
                    }
                    const double dist = std::max(std::sqrt(s), kDistFloor);
                    n.value[i * N + j] = dist;
                    n.value[j * N + i] = dist;
                }
            }
            break;
        }
        case Op::SolveSpd: {
            factorize_spd(in(0), *n.spd, id);
            as_mat(n.value) = n.spd->llt.solve(RowMat(as_mat(in(1))));
            break;
        }
        case Op::LogDetSpd: {
            factorize_spd(in(0), *n.spd, id);
            double ld = 0.0;
            const auto& L = n.spd->llt.matrixLLT();
            for (Eigen::Index i = 0; i < L.rows(); ++i) ld += std::log(L(i, i));
            n.value.data()[0] = 2.0 * ld;
            break;
        }
    }

    if (check_finite && !n.value.all_finite())
        throw NonFiniteError("node " + std::to_string(id) + " (" + op_name(n.op) +
                             "): non-finite value in forward pass");
}

void Graph::forward() {
    for (NodeId id = 0; id < static_cast<NodeId>(nodes_.size()); ++id) compute(id);
    forward_done_ = true;
}

void Graph::accumulate(NodeId id) {
    Node& n = nodes_[id];
    const Tensor& G = n.grad;
    const auto in_val = [&](std::size_t k) -> const Tensor& { return nodes_[n.inputs[k]].value; };
    const auto in_grad = [&](std::size_t k) -> Tensor& { return nodes_[n.inputs[k]].grad; };

    switch (n.op) {
        case Op::Input:
        case Op::Param:
        case Op::Const:
            break;
        case Op::Add: {
            auto& ga = in_grad(0).data();
            auto& gb = in_grad(1).data();
            for (std::size_t i = 0; i < G.numel(); ++i) {
                ga[i] += G[i];
                gb[i] += G[i];
            }
            break;
        }
        case Op::Sub: {
            auto& ga = in_grad(0).data();
            auto& gb = in_grad(1).data();
            for (std::size_t i = 0; i < G.numel(); ++i) {
                ga[i] += G[i];
                gb[i] -= G[i];
            }
            break;
        }
        case Op::Mul: {
            const auto& a = in_val(0).data();
            const auto& b = in_val(1).data();
            auto& ga = in_grad(0).data();
            auto& gb = in_grad(1).data();
            for (std::size_t i = 0; i < G.numel(); ++i) {
                ga[i] += G[i] * b[i];
                gb[i] += G[i] * a[i];
            }
            break;
        }
        case Op::Div: {
            const auto& a = in_val(0).data();
            const auto& b = in_val(1).data();
            auto& ga = in_grad(0).data();
            auto& gb = in_grad(1).data();
            for (std::size_t i = 0; i < G.numel(); ++i) {
                ga[i] += G[i] / b[i];
                gb[i] -= G[i] * a[i] / (b[i] * b[i]);
            }
            break;
        }
        case Op::AddScalar: {
            auto& ga = in_grad(0).data();
            for (std::size_t i = 0; i < G.numel(); ++i) ga[i] += G[i];
            break;
        }
        case Op::MulScalar: {
            auto& ga = in_grad(0).data();
            for (std::size_t i = 0; i < G.numel(); ++i) ga[i] += G[i] * n.s0;
            break;
        }
        case Op::ScaleBy: {
            const auto& a = in_val(0).data();
            const double s = in_val(1).data()[0];
            auto& ga = in_grad(0).data();
            double gs = 0.0;
            for (std::size_t i = 0; i < G.numel(); ++i) {
                ga[i] += G[i] * s;
                gs += G[i] * a[i];
            }
            in_grad(1).data()[0] += gs;
            break;
        }
        case Op::AddRowVec: {
            auto& gm = in_grad(0).data();
            auto& gv = in_grad(1).data();
            const std::size_t R = n.value.shape()[0], C = n.value.shape()[1];
            for (std::size_t r = 0; r < R; ++r)
                for (std::size_t c = 0; c < C; ++c) {
                    gm[r * C + c] += G[r * C + c];
                    gv[c] += G[r * C + c];
                }
            break;
        }
        case Op::MulRowVec: {
            const Tensor& m = in_val(0);
            const auto& v = in_val(1).data();
            auto& gm = in_grad(0).data();
            auto& gv = in_grad(1).data();
            const std::size_t R = n.value.shape()[0], C = n.value.shape()[1];
            for (std::size_t r = 0; r < R; ++r)
                for (std::size_t c = 0; c < C; ++c) {
                    gm[r * C + c] += G[r * C + c] * v[c];
                    gv[c] += G[r * C + c] * m[r * C + c];
                }
            break;
        }
        case Op::AddColVec: {
            auto& gm = in_grad(0).data();
            auto& gv = in_grad(1).data();
            const std::size_t R = n.value.shape()[0], C = n.value.shape()[1];
            for (std::size_t r = 0; r < R; ++r)
                for (std::size_t c = 0; c < C; ++c) {
                    gm[r * C + c] += G[r * C + c];
                    gv[r] += G[r * C + c];
                }
            break;
        }
        case Op::MatMul: {
            as_mat(in_grad(0)) += as_mat(G) * as_mat(in_val(1)).transpose();
            as_mat(in_grad(1)) += as_mat(in_val(0)).transpose() * as_mat(G);
            break;
        }
        case Op::Transpose: {
            as_mat(in_grad(0)) += as_mat(G).transpose();
            break;
        }
        case Op::Reshape: {
            auto& ga = in_grad(0).data();
            for (std::size_t i = 0; i < G.numel(); ++i) ga[i] += G[i];
            break;
        }
        case Op::Tanh: {
            const auto& y = n.value.data();
            auto& ga = in_grad(0).data();
            for (std::size_t i = 0; i < G.numel(); ++i) ga[i] += G[i] * (1.0 - y[i] * y[i]);
            break;
        }
        case Op::Exp: {
            const auto& y = n.value.data();
            auto& ga = in_grad(0).data();
            for (std::size_t i = 0; i < G.numel(); ++i) ga[i] += G[i] * y[i];
            break;
        }
        case Op::Log: {
            const auto& x = in_val(0).data();
            auto& ga = in_grad(0).data();
            for (std::size_t i = 0; i < G.numel(); ++i) ga[i] += G[i] / x[i];
            break;
        }
        case Op::Sqrt: {
            const auto& y = n.value.data();
            auto& ga = in_grad(0).data();
            for (std::size_t i = 0; i < G.numel(); ++i) ga[i] += G[i] / (2.0 * y[i]);
            break;
        }
        case Op::Relu: {
            const auto& x = in_val(0).data();
            auto& ga = in_grad(0).data();
            for (std::size_t i = 0; i < G.numel(); ++i)
                if (x[i] > 0.0) ga[i] += G[i];
            break;
        }
        case Op::Abs: {
            const auto& x = in_val(0).data();
            auto& ga = in_grad(0).data();
            for (std::size_t i = 0; i < G.numel(); ++i) {
                if (x[i] > 0.0)
                    ga[i] += G[i];
                else if (x[i] < 0.0)
                    ga[i] -= G[i];
            }
            break;
        }
        case Op::Clamp: {
            const auto& x = in_val(0).data();
            auto& ga = in_grad(0).data();
            for (std::size_t i = 0; i < G.numel(); ++i)
                if (x[i] >= n.s0 && x[i] <= n.s1) ga[i] += G[i];
            break;
        }
        case Op::ReduceSum: {
            auto& ga = in_grad(0).data();
            const double g = G[0];
            for (auto& v : ga) v += g;
            break;
        }
        case Op::ReduceMean: {
            auto& ga = in_grad(0).data();
            const double g = G[0] / static_cast<double>(ga.size());
            for (auto& v : ga) v += g;
            break;
        }
        case Op::ReduceSumRows: {
            auto& ga = in_grad(0).data();
            const std::size_t R = in_val(0).shape()[0], C = in_val(0).shape()[1];
            for (std::size_t r = 0; r < R; ++r)
                for (std::size_t c = 0; c < C; ++c) ga[r * C + c] += G[r];
            break;
        }
        case Op::LogSumExpRows: {
            const Tensor& x = in_val(0);
            auto& ga = in_grad(0).data();
            const std::size_t R = x.shape()[0], C = x.shape()[1];
            for (std::size_t r = 0; r < R; ++r)
                for (std::size_t c = 0; c < C; ++c)
                    ga[r * C + c] += G[r] * std::exp(x[r * C + c] - n.value[r]);
            break;
        }
        case Op::Gather: {
            auto& ga = in_grad(0).data();
            for (std::size_t k = 0; k < n.indices.size(); ++k) ga[n.indices[k]] += G[k];
            break;
        }
        case Op::SliceCols: {
            auto& ga = in_grad(0).data();
            const std::size_t C = in_val(0).shape()[1];
            const auto b = static_cast<std::size_t>(n.s0);
            const std::size_t R = n.value.shape()[0], W = n.value.shape()[1];
            for (std::size_t r = 0; r < R; ++r)
                for (std::size_t c = 0; c < W; ++c) ga[r * C + b + c] += G[r * W + c];
            break;
        }
        case Op::PairwiseDist: {
            const Tensor& z = in_val(0);
            auto& gz = in_grad(0).data();
            const std::size_t N = z.shape()[0], K = z.shape()[1];
            for (std::size_t i = 0; i < N; ++i)
                for (std::size_t j = i + 1; j < N; ++j) {
                    const double d = n.value[i * N + j];
                    if (d <= kDistFloor) continue;  // clamped: no gradient
                    const double w = (G[i * N + j] + G[j * N + i]) / d;
                    for (std::size_t k = 0; k < K; ++k) {
                        const double diff = z[i * K + k] - z[j * K + k];
                        gz[i * K + k] += w * diff;
                        gz[j * K + k] -= w * diff;
                    }
                }
            break;
        }
        case Op::SolveSpd: {
            // X = S^-1 B with S = sym(A):  gB += S^-1 G,
            // gA -= sym((S^-1 G) X^T) since forward reads only sym(A).
            RowMat ginv = n.spd->llt.solve(RowMat(as_mat(G)));
            as_mat(in_grad(1)) += ginv;
            RowMat w = ginv * as_mat(n.value).transpose();
            as_mat(in_grad(0)) -= 0.5 * (w + w.transpose());
            break;
        }
        case Op::LogDetSpd: {
            const auto m = static_cast<Eigen::Index>(in_val(0).shape()[0]);
            RowMat inv = n.spd->llt.solve(RowMat::Identity(m, m));
            as_mat(in_grad(0)) += G[0] * inv;
            break;
        }
    }
}

void Graph::backward(NodeId seed, double seed_value) {
    check(seed);
    if (!forward_done_) throw std::logic_error("Graph::backward: forward() has not run");
    if (nodes_[seed].value.numel() != 1)
        throw std::invalid_argument("Graph::backward: seed output must be scalar, got " +
                                    Tensor::shape_str(nodes_[seed].value.shape()));
    for (auto& n : nodes_) n.grad.fill(0.0);
    nodes_[seed].grad.data()[0] = seed_value;
    for (NodeId id = static_cast<NodeId>(nodes_.size()) - 1; id >= 0; --id) accumulate(id);
}

GradCheckReport Graph::grad_check(NodeId output, const std::vector<NodeId>& params, double h) {
    forward();
    backward(output);

    std::vector<Tensor> analytic;
    analytic.reserve(params.size());
    for (NodeId p : params) analytic.push_back(grad(p));

    GradCheckReport report;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Node& pn = nodes_[check(params[pi])];
        GradCheckEntry entry;
        entry.param = pn.name.empty() ? ("node" + std::to_string(params[pi])) : pn.name;
        for (std::size_t k = 0; k < pn.value.numel(); ++k) {
            const double old = pn.value[k];
            pn.value[k] = old + h;
            forward();
            const double fp = value(output).value();
            pn.value[k] = old - h;
            forward();
            const double fm = value(output).value();
            pn.value[k] = old;
            const double numeric = (fp - fm) / (2.0 * h);
            const double a = analytic[pi][k];
            const double rel =
                std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
            if (rel > entry.max_rel_err) {
                entry.max_rel_err = rel;
                entry.worst_index = k;
                entry.analytic = a;
                entry.numeric = numeric;
            }
        }
        report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
        report.entries.push_back(std::move(entry));
    }
    forward();  // leave values consistent
    return report;
}

}  // namespace cobo::ad
