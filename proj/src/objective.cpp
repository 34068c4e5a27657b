// SPDX-License-Identifier: Apache-2.0

#include "msp/objective.hpp"

#include <cmath>

namespace msp {

namespace {

Tape::Var attach(Tape& tape, std::span<const Tape::Var> inputs, const LossResult& r) {
    return tape.custom_scalar(inputs, r.value, {r.grad});
}

} // namespace

ObjectiveResult pretraining_objective(Model& model, Tape& tape, const BatchInputs& batch, TaskSet active,
                                      const TaskWeights& weights, const ForwardOptions& opts) {
    const auto enc = model.encode_batch(tape, batch, opts);
    const auto B = static_cast<std::size_t>(batch.batch_size);
    std::map<Task, LossResult> computed;
    std::map<Task, Tape::Var> loss_vars;
    ObjectiveResult out;

    if (active.contains(Task::MLM)) {
        std::vector<Tape::Var> rows;
        std::vector<int> targets;
        for (std::size_t i = 0; i < B; ++i) {
            std::vector<int> pos;
            for (std::size_t t = 0; t < batch.text_mask_positions[i].size(); ++t)
                if (batch.text_mask_positions[i][t]) {
                    pos.push_back(static_cast<int>(t));
                    targets.push_back(batch.mlm_targets[i][t]);
                }
            if (!pos.empty()) rows.push_back(tape.gather_rows(enc[i].text, pos));
        }
        if (!rows.empty()) {
            const auto logits = model.head_mlm(tape, tape.concat_rows(rows));
            const std::vector<std::uint8_t> all(targets.size(), 1);
            computed[Task::MLM] = loss_mlm(tape.value(logits), all, targets);
            loss_vars[Task::MLM] = attach(tape, std::span(&logits, 1), computed[Task::MLM]);
            out.heads_used.insert(std::string(kHeadMlm));
        }
    }

    const bool want_mrfr = active.contains(Task::MRFR);
    const bool want_moc = active.contains(Task::MOC);
    if (want_mrfr || want_moc) {
        std::vector<Tape::Var> rows;
        std::vector<RowVector> target_rows;
        std::vector<int> cats, attrs;
        for (std::size_t i = 0; i < B; ++i) {
            if (batch.match_label[i] != 1) continue;
            std::vector<int> pos;
            for (std::size_t r = 0; r < batch.region_mask_positions[i].size(); ++r)
                if (batch.region_mask_positions[i][r]) {
                    pos.push_back(static_cast<int>(r));
                    target_rows.push_back(batch.region_targets[i].row(static_cast<Eigen::Index>(r)));
                    cats.push_back(batch.moc_category_targets[i][r]);
                    attrs.push_back(batch.moc_attribute_targets[i][r]);
                }
            if (!pos.empty()) rows.push_back(tape.gather_rows(enc[i].vision, pos));
        }
        if (!rows.empty()) {
            const auto states = tape.concat_rows(rows);
            const std::vector<std::uint8_t> all(cats.size(), 1);
            if (want_mrfr) {
                Matrix targets(static_cast<Eigen::Index>(target_rows.size()), batch.d_roi);
                for (std::size_t k = 0; k < target_rows.size(); ++k) targets.row(static_cast<Eigen::Index>(k)) = target_rows[k];
                const auto pred = model.head_region_regression(tape, states);
                computed[Task::MRFR] = loss_mrfr(tape.value(pred), all, targets);
                loss_vars[Task::MRFR] = attach(tape, std::span(&pred, 1), computed[Task::MRFR]);
                out.heads_used.insert(std::string(kHeadRegion));
            }
            if (want_moc) {
                const auto [cat_logits, attr_logits] = model.head_moc(tape, states);
                const auto r = loss_moc(tape.value(cat_logits), tape.value(attr_logits), all, cats, attrs);
                const std::array<Tape::Var, 2> ins = {cat_logits, attr_logits};
                loss_vars[Task::MOC] = tape.custom_scalar(ins, r.value, {r.grad_first, r.grad_second});
                computed[Task::MOC] = LossResult{r.value, {}, r.count};
                out.heads_used.insert(std::string(kHeadMoc));
            }
        }
    }

    if (active.contains(Task::IFRS)) {
        std::vector<Tape::Var> rows;
        std::vector<RowVector> originals;
        std::vector<ShuffledTriplet> renumbered;
        for (std::size_t i = 0; i < B; ++i) {
            if (batch.match_label[i] != 1 || batch.shuffle_map[i].empty()) continue;
            std::vector<int> pos;
            for (const auto& t : batch.shuffle_map[i]) {
                renumbered.push_back({static_cast<int>(originals.size()), t.source});
                for (int k = 0; k < 3; ++k) {
                    pos.push_back(t.start + k);
                    originals.push_back(batch.region_targets[i].row(t.start + k));
                }
            }
            rows.push_back(tape.gather_rows(enc[i].vision, pos));
        }
        if (!rows.empty()) {
            Matrix original(static_cast<Eigen::Index>(originals.size()), batch.d_roi);
            for (std::size_t k = 0; k < originals.size(); ++k) original.row(static_cast<Eigen::Index>(k)) = originals[k];
            const auto pred = model.head_region_regression(tape, tape.concat_rows(rows));
            computed[Task::IFRS] = loss_ifrs(tape.value(pred), renumbered, original);
            loss_vars[Task::IFRS] = attach(tape, std::span(&pred, 1), computed[Task::IFRS]);
            out.heads_used.insert(std::string(kHeadRegion));
        }
    }

    for (Task topic : {Task::TITP, Task::TITS}) {
        if (!active.contains(topic)) continue;
        std::vector<Tape::Var> rows;
        std::vector<const RowVector*> targets;
        for (std::size_t i = 0; i < B; ++i) {
            if (batch.match_label[i] != 1) continue;
            rows.push_back(enc[i].pooled);
            targets.push_back(&batch.topic_targets[i]);
        }
        if (rows.empty()) continue;
        Matrix y(static_cast<Eigen::Index>(targets.size()), targets.front()->cols());
        for (std::size_t k = 0; k < targets.size(); ++k) y.row(static_cast<Eigen::Index>(k)) = *targets[k];
        const auto logits = model.head_topic(tape, tape.concat_rows(rows));
        computed[topic] = loss_topic(tape.value(logits), y);
        loss_vars[topic] = attach(tape, std::span(&logits, 1), computed[topic]);
        out.heads_used.insert(std::string(kHeadTopic));
    }

    if (active.contains(Task::ITM_HS)) {
        std::vector<Tape::Var> rows;
        for (std::size_t i = 0; i < B; ++i) rows.push_back(enc[i].pooled);
        const auto logits = model.head_match(tape, tape.concat_rows(rows));
        computed[Task::ITM_HS] = loss_itm_hs(tape.value(logits), batch.match_label);
        loss_vars[Task::ITM_HS] = attach(tape, std::span(&logits, 1), computed[Task::ITM_HS]);
        out.heads_used.insert(std::string(kHeadMatch));
    }

    out.report = aggregate(computed, active, weights);
    Tape::Var total;
    for (const auto& [task, var] : loss_vars) {
        const auto term = tape.scale(var, weights[task]);
        total = total.valid() ? tape.add(total, term) : term;
    }
    out.total = total.valid() ? total : tape.constant(Matrix::Zero(1, 1));
    return out;
}

double objective_value(Model& model, const BatchInputs& batch, TaskSet active, const TaskWeights& weights) {
    Tape tape(false);
    return pretraining_objective(model, tape, batch, active, weights).report.aggregate;
}

std::vector<BlockCheck> gradient_check(Model& model, const BatchInputs& batch, TaskSet active, double step,
                                       double norm_floor) {
    model.zero_grad();
    {
        Tape tape;
        const auto res = pretraining_objective(model, tape, batch, active);
        tape.backward(res.total);
    }
    std::vector<BlockCheck> out;
    for (auto& prm : model.parameters()) {
        if (prm.frozen) continue;
        Matrix numeric(prm.value.rows(), prm.value.cols());
        for (Eigen::Index i = 0; i < prm.value.size(); ++i) {
            double& w = prm.value.data()[i];
            const double saved = w;
            w = saved + step;
            const double up = objective_value(model, batch, active);
            w = saved - step;
            const double down = objective_value(model, batch, active);
            w = saved;
            numeric.data()[i] = (up - down) / (2.0 * step);
        }
        BlockCheck c;
        c.name = prm.name;
        c.analytic_norm = prm.grad.norm();
        c.numeric_norm = numeric.norm();
        c.relative_error = (prm.grad - numeric).norm() / std::max(c.analytic_norm + c.numeric_norm, norm_floor);
        out.push_back(c);
    }
    return out;
}

} // namespace msp
