// SPDX-License-Identifier: Apache-2.0

#include "msp/losses.hpp"

#include "msp/util.hpp"

#include <fmt/format.h>

#include <cmath>

namespace msp {

namespace {

void require_rows(std::size_t n, Eigen::Index rows, const char* what) {
    if (static_cast<Eigen::Index>(n) != rows) throw Error(fmt::format("{}: length does not match prediction rows", what));
}

// Adds softmax-minus-onehot for row r into grad and returns -log p(target).
double cross_entropy_row(const Matrix& logits, Eigen::Index r, int target, double scale, Matrix& grad) {
    if (target < 0 || target >= logits.cols()) throw Error("cross-entropy target out of range");
    const double mx = logits.row(r).maxCoeff();
    const Eigen::ArrayXd e = (logits.row(r).array() - mx).exp().transpose();
    const double z = e.sum();
    grad.row(r) += scale * (e / z).matrix().transpose();
    grad(r, target) -= scale;
    return -(logits(r, target) - mx - std::log(z));
}

double bce_with_logits(double x, double y) { return std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x))); }

double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

} // namespace

LossResult loss_mlm(const Matrix& logits, std::span<const std::uint8_t> mask, std::span<const int> targets) {
    require_rows(mask.size(), logits.rows(), "loss_mlm mask");
    require_rows(targets.size(), logits.rows(), "loss_mlm targets");
    LossResult out;
    for (auto m : mask) out.count += m ? 1 : 0;
    if (out.count == 0) throw Error("loss_mlm: no masked positions");
    out.grad = Matrix::Zero(logits.rows(), logits.cols());
    const double scale = 1.0 / out.count;
    for (Eigen::Index r = 0; r < logits.rows(); ++r)
        if (mask[static_cast<std::size_t>(r)])
            out.value += scale * cross_entropy_row(logits, r, targets[static_cast<std::size_t>(r)], scale, out.grad);
    return out;
}

LossResult loss_mrfr(const Matrix& predicted, std::span<const std::uint8_t> mask, const Matrix& targets) {
    require_rows(mask.size(), predicted.rows(), "loss_mrfr mask");
    if (targets.rows() != predicted.rows() || targets.cols() != predicted.cols())
        throw Error("loss_mrfr: prediction and target shapes differ");
    LossResult out;
    for (auto m : mask) out.count += m ? 1 : 0;
    if (out.count == 0) throw Error("loss_mrfr: no masked regions");
    out.grad = Matrix::Zero(predicted.rows(), predicted.cols());
    const double scale = 1.0 / out.count;
    for (Eigen::Index r = 0; r < predicted.rows(); ++r) {
        if (!mask[static_cast<std::size_t>(r)]) continue;
        const RowVector d = predicted.row(r) - targets.row(r);
        out.value += scale * d.squaredNorm();
        out.grad.row(r) = 2.0 * scale * d;
    }
    return out;
}

PairLossResult loss_moc(const Matrix& category_logits, const Matrix& attribute_logits, std::span<const std::uint8_t> mask,
                        std::span<const int> category_targets, std::span<const int> attribute_targets) {
    require_rows(mask.size(), category_logits.rows(), "loss_moc mask");
    require_rows(mask.size(), attribute_logits.rows(), "loss_moc mask");
    require_rows(category_targets.size(), category_logits.rows(), "loss_moc category targets");
    require_rows(attribute_targets.size(), attribute_logits.rows(), "loss_moc attribute targets");
    PairLossResult out;
    for (auto m : mask) out.count += m ? 1 : 0;
    if (out.count == 0) throw Error("loss_moc: no masked regions");
    out.grad_first = Matrix::Zero(category_logits.rows(), category_logits.cols());
    out.grad_second = Matrix::Zero(attribute_logits.rows(), attribute_logits.cols());
    const double scale = 1.0 / out.count;
    for (Eigen::Index r = 0; r < category_logits.rows(); ++r) {
        const auto i = static_cast<std::size_t>(r);
        if (!mask[i]) continue;
        out.value += scale * cross_entropy_row(category_logits, r, category_targets[i], scale, out.grad_first);
        out.value += scale * cross_entropy_row(attribute_logits, r, attribute_targets[i], scale, out.grad_second);
    }
    return out;
}

LossResult loss_ifrs(const Matrix& predicted, std::span<const ShuffledTriplet> shuffled, const Matrix& original) {
    if (original.rows() != predicted.rows() || original.cols() != predicted.cols())
        throw Error("loss_ifrs: prediction and original shapes differ");
    LossResult out;
    out.grad = Matrix::Zero(predicted.rows(), predicted.cols());
    out.count = static_cast<int>(shuffled.size());
    if (shuffled.empty()) return out;
    const double scale = 1.0 / (3.0 * static_cast<double>(shuffled.size()));
    for (const auto& t : shuffled) {
        if (t.start < 0 || t.start + 3 > predicted.rows()) throw Error("loss_ifrs: shuffle map references out-of-range rows");
        for (int k = 0; k < 3; ++k) {
            const int r = t.start + k;
            const RowVector d = predicted.row(r) - original.row(r);
            out.value += scale * d.squaredNorm();
            out.grad.row(r) += 2.0 * scale * d;
        }
    }
    return out;
}

LossResult loss_topic(const Matrix& logits, const Matrix& targets) {
    if (targets.rows() != logits.rows() || targets.cols() != logits.cols())
        throw Error("loss_topic: logits and targets shapes differ");
    LossResult out;
    out.count = static_cast<int>(logits.rows());
    out.grad = Matrix::Zero(logits.rows(), logits.cols());
    if (logits.size() == 0) return out;
    const double scale = 1.0 / static_cast<double>(logits.size());
    for (Eigen::Index r = 0; r < logits.rows(); ++r)
        for (Eigen::Index c = 0; c < logits.cols(); ++c) {
            const double y = targets(r, c);
            if (y != 0.0 && y != 1.0) throw Error("loss_topic: targets must be 0/1");
            out.value += scale * bce_with_logits(logits(r, c), y);
            out.grad(r, c) = scale * (sigmoid(logits(r, c)) - y);
        }
    return out;
}

LossResult loss_itm_hs(const Matrix& logits, std::span<const int> labels) {
    if (logits.cols() != 1) throw Error("loss_itm_hs: expected one logit per example");
    require_rows(labels.size(), logits.rows(), "loss_itm_hs labels");
    LossResult out;
    out.count = static_cast<int>(labels.size());
    out.grad = Matrix::Zero(logits.rows(), 1);
    if (labels.empty()) return out;
    const double scale = 1.0 / static_cast<double>(labels.size());
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        const int y = labels[static_cast<std::size_t>(r)];
        if (y != 0 && y != 1) throw Error("loss_itm_hs: labels must be 0/1");
        out.value += scale * bce_with_logits(logits(r, 0), y);
        out.grad(r, 0) = scale * (sigmoid(logits(r, 0)) - y);
    }
    return out;
}

LossResult loss_cross_entropy(const Matrix& logits, std::span<const int> targets) {
    std::vector<std::uint8_t> all(targets.size(), 1);
    return loss_mlm(logits, all, targets);
}

TaskWeights TaskWeights::parse(const std::map<std::string, double>& by_name) {
    TaskWeights w;
    for (const auto& [name, value] : by_name) w.weights[parse_task(name)] = value;
    return w;
}

std::string LossReport::log_line(long step, Granularity stage) const {
    std::string out = fmt::format("{{\"step\":{},\"stage\":\"{}\"", step, to_string(stage));
    for (const auto& [task, value] : losses) out += fmt::format(",\"{}\":{}", to_string(task), fixed6(value));
    out += fmt::format(",\"aggregate\":{}}}", fixed6(aggregate));
    return out;
}

LossReport aggregate(const std::map<Task, LossResult>& computed, TaskSet active, const TaskWeights& weights) {
    LossReport report;
    report.active = active;
    for (Task t : active.tasks()) {
        auto it = computed.find(t);
        const double value = it == computed.end() ? 0.0 : it->second.value;
        const int count = it == computed.end() ? 0 : it->second.count;
        report.losses[t] = value;
        report.counts[t] = count;
        report.aggregate += weights[t] * value;
    }
    return report;
}

LossReport aggregate(const std::map<std::string, double>& computed, const std::vector<std::string>& active_names,
                     const TaskWeights& weights) {
    TaskSet active;
    for (const auto& n : active_names) active.insert(parse_task(n));
    std::map<Task, LossResult> by_task;
    for (const auto& [name, value] : computed) {
        LossResult r;
        r.value = value;
        r.count = 1;
        by_task[parse_task(name)] = r;
    }
    return aggregate(by_task, active, weights);
}

} // namespace msp
