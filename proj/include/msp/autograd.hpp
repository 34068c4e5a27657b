// SPDX-License-Identifier: Apache-2.0
//
// Minimal reverse-mode differentiation over dense row-major matrices.
//
// A Tape records operations in creation order; backward() walks them in
// reverse and accumulates gradients into the Parameters referenced by leaf
// nodes. Everything runs in double precision.

#pragma once

#include "msp/common.hpp"

#include <functional>
#include <span>
#include <string>
#include <vector>

namespace msp {

struct Parameter {
    std::string name;
    Matrix value;
    Matrix grad;
    bool frozen = false;

    void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

class Tape {
public:
    struct Var {
        int id = -1;
        bool valid() const { return id >= 0; }
    };

    // A non-recording tape evaluates forward only; nothing requires grad.
    explicit Tape(bool record = true) : record_(record) { nodes_.reserve(1024); }
    bool recording() const { return record_; }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    const Matrix& value(Var v) const;
    const Matrix& grad(Var v) const;
    Eigen::Index rows(Var v) const { return value(v).rows(); }
    Eigen::Index cols(Var v) const { return value(v).cols(); }
    std::size_t size() const { return nodes_.size(); }

    Var constant(Matrix m);
    // Leaf bound to a parameter; its value is referenced, not copied.
    Var parameter(Parameter& p);

    Var matmul(Var a, Var b);     // a * b
    Var matmul_nt(Var a, Var b);  // a * b^T
    Var add(Var a, Var b);
    Var add_row(Var a, Var row);  // broadcast a 1 x n row over every row of a
    Var scale(Var a, double s);
    Var mul_const(Var a, const Matrix& m);  // elementwise, m is not differentiated
    Var gelu(Var a);
    Var tanh(Var a);
    // Row-wise normalization with learned gain and bias (both 1 x n).
    Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-12);
    // Row-wise softmax restricted to columns with key_valid != 0; other
    // columns get probability exactly 0.
    Var masked_softmax(Var scores, std::span<const std::uint8_t> key_valid);
    Var slice_cols(Var a, Eigen::Index start, Eigen::Index count);
    Var concat_cols(std::span<const Var> parts);
    Var concat_rows(std::span<const Var> parts);
    Var gather_rows(Var a, std::span<const int> rows);

    // A scalar (1 x 1) node whose value and input gradients were computed
    // externally: d value / d inputs[k] = input_grads[k].
    Var custom_scalar(std::span<const Var> inputs, double value, std::vector<Matrix> input_grads);

    // Seeds d(out)/d(out) = 1 for a 1 x 1 node and accumulates into
    // parameter gradients. A tape can be backpropagated once.
    void backward(Var out);

private:
    struct Node {
        Matrix own;
        const Matrix* ref = nullptr;
        Matrix grad;
        bool requires_grad = false;
        Parameter* param = nullptr;
        std::function<void(Tape&)> back;
    };

    Var push(Matrix value, bool requires_grad, std::function<void(Tape&)> back);
    Node& node(Var v) { return nodes_.at(static_cast<std::size_t>(v.id)); }
    const Node& node(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)); }
    bool needs(Var v) const { return node(v).requires_grad; }
    Matrix& g(Var v) { return node(v).grad; }

    std::vector<Node> nodes_;
    bool record_ = true;
    bool done_ = false;
};

} // namespace msp
