// SPDX-License-Identifier: Apache-2.0

#include "msp/autograd.hpp"

#include <cmath>

namespace msp {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

} // namespace

const Matrix& Tape::value(Var v) const {
    const Node& n = node(v);
    return n.ref ? *n.ref : n.own;
}

const Matrix& Tape::grad(Var v) const { return node(v).grad; }

Tape::Var Tape::push(Matrix value, bool requires_grad, std::function<void(Tape&)> back) {
    Node n;
    n.own = std::move(value);
    n.requires_grad = requires_grad && record_;
    if (n.requires_grad) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size() - 1)};
}

Tape::Var Tape::constant(Matrix m) { return push(std::move(m), false, nullptr); }

Tape::Var Tape::parameter(Parameter& p) {
    Node n;
    n.ref = &p.value;
    n.param = &p;
    n.requires_grad = record_ && !p.frozen;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size() - 1)};
}

Tape::Var Tape::matmul(Var a, Var b) {
    if (cols(a) != rows(b)) throw Error("matmul shape mismatch");
    Matrix out = value(a) * value(b);
    const bool rg = needs(a) || needs(b);
    Var o{static_cast<int>(nodes_.size())};
    return push(std::move(out), rg, [a, b, o](Tape& t) {
        const Matrix& go = t.g(o);
        if (t.needs(a)) t.g(a).noalias() += go * t.value(b).transpose();
        if (t.needs(b)) t.g(b).noalias() += t.value(a).transpose() * go;
    });
}

Tape::Var Tape::matmul_nt(Var a, Var b) {
    if (cols(a) != cols(b)) throw Error("matmul_nt shape mismatch");
    Matrix out = value(a) * value(b).transpose();
    const bool rg = needs(a) || needs(b);
    Var o{static_cast<int>(nodes_.size())};
    return push(std::move(out), rg, [a, b, o](Tape& t) {
        const Matrix& go = t.g(o);
        if (t.needs(a)) t.g(a).noalias() += go * t.value(b);
        if (t.needs(b)) t.g(b).noalias() += go.transpose() * t.value(a);
    });
}

Tape::Var Tape::add(Var a, Var b) {
    if (rows(a) != rows(b) || cols(a) != cols(b)) throw Error("add shape mismatch");
    Matrix out = value(a) + value(b);
    Var o{static_cast<int>(nodes_.size())};
    return push(std::move(out), needs(a) || needs(b), [a, b, o](Tape& t) {
        if (t.needs(a)) t.g(a) += t.g(o);
        if (t.needs(b)) t.g(b) += t.g(o);
    });
}

Tape::Var Tape::add_row(Var a, Var row) {
    if (rows(row) != 1 || cols(row) != cols(a)) throw Error("add_row shape mismatch");
    Matrix out = value(a).rowwise() + value(row).row(0);
    Var o{static_cast<int>(nodes_.size())};
    return push(std::move(out), needs(a) || needs(row), [a, row, o](Tape& t) {
        if (t.needs(a)) t.g(a) += t.g(o);
        if (t.needs(row)) t.g(row) += t.g(o).colwise().sum();
    });
}

Tape::Var Tape::scale(Var a, double s) {
    Matrix out = value(a) * s;
    Var o{static_cast<int>(nodes_.size())};
    return push(std::move(out), needs(a), [a, s, o](Tape& t) { t.g(a) += s * t.g(o); });
}

Tape::Var Tape::mul_const(Var a, const Matrix& m) {
    if (rows(a) != m.rows() || cols(a) != m.cols()) throw Error("mul_const shape mismatch");
    Matrix out = value(a).cwiseProduct(m);
    Var o{static_cast<int>(nodes_.size())};
    return push(std::move(out), needs(a), [a, m, o](Tape& t) { t.g(a) += t.g(o).cwiseProduct(m); });
}

Tape::Var Tape::gelu(Var a) {
    const Matrix& x = value(a);
    Matrix out = x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); });
    Var o{static_cast<int>(nodes_.size())};
    return push(std::move(out), needs(a), [a, o](Tape& t) {
        const Matrix d = t.value(a).unaryExpr([](double v) {
            return 0.5 * (1.0 + std::erf(v * kInvSqrt2)) + v * kInvSqrt2Pi * std::exp(-0.5 * v * v);
        });
        t.g(a) += t.g(o).cwiseProduct(d);
    });
}

Tape::Var Tape::tanh(Var a) {
    Matrix out = value(a).array().tanh().matrix();
    Var o{static_cast<int>(nodes_.size())};
    return push(std::move(out), needs(a), [a, o](Tape& t) {
        const Matrix& y = t.value(o);
        t.g(a) += t.g(o).cwiseProduct((1.0 - y.array().square()).matrix());
    });
}

Tape::Var Tape::layer_norm(Var x, Var gain, Var bias, double eps) {
    const Matrix& in = value(x);
    const Eigen::Index n = in.cols();
    if (rows(gain) != 1 || cols(gain) != n || rows(bias) != 1 || cols(bias) != n)
        throw Error("layer_norm parameter shape mismatch");
    Matrix xhat(in.rows(), n);
    Vector inv_std(in.rows());
    for (Eigen::Index r = 0; r < in.rows(); ++r) {
        const double mean = in.row(r).mean();
        const double var = (in.row(r).array() - mean).square().mean();
        inv_std(r) = 1.0 / std::sqrt(var + eps);
        xhat.row(r) = (in.row(r).array() - mean) * inv_std(r);
    }
    Matrix out = (xhat.array().rowwise() * value(gain).row(0).array()).matrix();
    out.rowwise() += value(bias).row(0);
    Var o{static_cast<int>(nodes_.size())};
    return push(std::move(out), needs(x) || needs(gain) || needs(bias),
                [x, gain, bias, o, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t) {
                    const Matrix& go = t.g(o);
                    if (t.needs(gain)) t.g(gain) += go.cwiseProduct(xhat).colwise().sum();
                    if (t.needs(bias)) t.g(bias) += go.colwise().sum();
                    if (t.needs(x)) {
                        const auto gamma = t.value(gain).row(0).array();
                        Matrix& gx = t.g(x);
                        for (Eigen::Index r = 0; r < go.rows(); ++r) {
                            const Eigen::ArrayXd dxhat = (go.row(r).array() * gamma).transpose();
                            const Eigen::ArrayXd xh = xhat.row(r).array().transpose();
                            const double m1 = dxhat.mean();
                            const double m2 = (dxhat * xh).mean();
                            gx.row(r).array() += (inv_std(r) * (dxhat - m1 - xh * m2)).transpose();
                        }
                    }
                });
}

Tape::Var Tape::masked_softmax(Var scores, std::span<const std::uint8_t> key_valid) {
    const Matrix& s = value(scores);
    if (static_cast<Eigen::Index>(key_valid.size()) != s.cols()) throw Error("masked_softmax key mask length mismatch");
    Matrix p = Matrix::Zero(s.rows(), s.cols());
    for (Eigen::Index r = 0; r < s.rows(); ++r) {
        double mx = -std::numeric_limits<double>::infinity();
        for (Eigen::Index c = 0; c < s.cols(); ++c)
            if (key_valid[static_cast<std::size_t>(c)]) mx = std::max(mx, s(r, c));
        if (!std::isfinite(mx)) throw Error("masked_softmax: row has no valid key");
        double z = 0.0;
        for (Eigen::Index c = 0; c < s.cols(); ++c) {
            if (!key_valid[static_cast<std::size_t>(c)]) continue;
            p(r, c) = std::exp(s(r, c) - mx);
            z += p(r, c);
        }
        p.row(r) /= z;
    }
    Var o{static_cast<int>(nodes_.size())};
    return push(std::move(p), needs(scores), [scores, o](Tape& t) {
        const Matrix& y = t.value(o);
        const Matrix& go = t.g(o);
        const Vector dot = go.cwiseProduct(y).rowwise().sum();
        t.g(scores) += y.cwiseProduct((go.colwise() - dot));
    });
}

Tape::Var Tape::slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
    if (start < 0 || start + count > cols(a)) throw Error("slice_cols out of range");
    Matrix out = value(a).middleCols(start, count);
    Var o{static_cast<int>(nodes_.size())};
    return push(std::move(out), needs(a), [a, start, count, o](Tape& t) { t.g(a).middleCols(start, count) += t.g(o); });
}

Tape::Var Tape::concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw Error("concat_cols of nothing");
    Eigen::Index total = 0;
    bool rg = false;
    for (Var p : parts) {
        if (rows(p) != rows(parts[0])) throw Error("concat_cols row mismatch");
        total += cols(p);
        rg = rg || needs(p);
    }
    Matrix out(rows(parts[0]), total);
    Eigen::Index at = 0;
    for (Var p : parts) {
        out.middleCols(at, cols(p)) = value(p);
        at += cols(p);
    }
    std::vector<Var> ps(parts.begin(), parts.end());
    Var o{static_cast<int>(nodes_.size())};
    return push(std::move(out), rg, [ps = std::move(ps), o](Tape& t) {
        Eigen::Index at = 0;
        for (Var p : ps) {
            if (t.needs(p)) t.g(p) += t.g(o).middleCols(at, t.cols(p));
            at += t.cols(p);
        }
    });
}

Tape::Var Tape::concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw Error("concat_rows of nothing");
    Eigen::Index total = 0;
    bool rg = false;
    for (Var p : parts) {
        if (cols(p) != cols(parts[0])) throw Error("concat_rows column mismatch");
        total += rows(p);
        rg = rg || needs(p);
    }
    Matrix out(total, cols(parts[0]));
    Eigen::Index at = 0;
    for (Var p : parts) {
        out.middleRows(at, rows(p)) = value(p);
        at += rows(p);
    }
    std::vector<Var> ps(parts.begin(), parts.end());
    Var o{static_cast<int>(nodes_.size())};
    return push(std::move(out), rg, [ps = std::move(ps), o](Tape& t) {
        Eigen::Index at = 0;
        for (Var p : ps) {
            if (t.needs(p)) t.g(p) += t.g(o).middleRows(at, t.rows(p));
            at += t.rows(p);
        }
    });
}

Tape::Var Tape::gather_rows(Var a, std::span<const int> idx) {
    const Matrix& in = value(a);
    Matrix out(static_cast<Eigen::Index>(idx.size()), in.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= in.rows()) throw Error("gather_rows index out of range");
        out.row(static_cast<Eigen::Index>(i)) = in.row(idx[i]);
    }
    std::vector<int> rows_copy(idx.begin(), idx.end());
    Var o{static_cast<int>(nodes_.size())};
    return push(std::move(out), needs(a), [a, rows_copy = std::move(rows_copy), o](Tape& t) {
        Matrix& ga = t.g(a);
        const Matrix& go = t.g(o);
        for (std::size_t i = 0; i < rows_copy.size(); ++i) ga.row(rows_copy[i]) += go.row(static_cast<Eigen::Index>(i));
    });
}

Tape::Var Tape::custom_scalar(std::span<const Var> inputs, double v, std::vector<Matrix> input_grads) {
    if (inputs.size() != input_grads.size()) throw Error("custom_scalar input/gradient count mismatch");
    bool rg = false;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        if (input_grads[k].rows() != rows(inputs[k]) || input_grads[k].cols() != cols(inputs[k]))
            throw Error("custom_scalar gradient shape mismatch");
        rg = rg || needs(inputs[k]);
    }
    Matrix out(1, 1);
    out(0, 0) = v;
    std::vector<Var> in(inputs.begin(), inputs.end());
    Var o{static_cast<int>(nodes_.size())};
    return push(std::move(out), rg, [in = std::move(in), grads = std::move(input_grads), o](Tape& t) {
        const double go = t.g(o)(0, 0);
        for (std::size_t k = 0; k < in.size(); ++k)
            if (t.needs(in[k])) t.g(in[k]) += go * grads[k];
    });
}

void Tape::backward(Var out) {
    if (done_) throw Error("tape already backpropagated");
    done_ = true;
    if (rows(out) != 1 || cols(out) != 1) throw Error("backward needs a scalar output");
    if (!needs(out)) return;
    for (auto& n : nodes_)
        if (n.requires_grad) {
            const Matrix& v = n.ref ? *n.ref : n.own;
            n.grad.setZero(v.rows(), v.cols());
        }
    node(out).grad(0, 0) = 1.0;
    for (int i = out.id; i >= 0; --i) {
        Node& n = nodes_[static_cast<std::size_t>(i)];
        if (!n.requires_grad) continue;
        if (n.back) n.back(*this);
        if (n.param) {
            if (n.param->grad.rows() != n.grad.rows() || n.param->grad.cols() != n.grad.cols()) n.param->zero_grad();
            n.param->grad += n.grad;
        }
    }
}

} // namespace msp
