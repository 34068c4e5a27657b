// SPDX-License-Identifier: Apache-2.0
//
// Pre-training losses. Each returns its value together with the gradient
// with respect to its prediction input(s); all are non-negative.
//
// Inputs are batch-stacked: row r of a prediction matrix is one token or
// region position of some example in the batch.

#pragma once

#include "msp/common.hpp"
#include "msp/transforms.hpp"

#include <map>
#include <span>
#include <string>

namespace msp {

struct LossResult {
    double value = 0.0;
    Matrix grad;  // d value / d prediction
    int count = 0;
};

struct PairLossResult {
    double value = 0.0;
    Matrix grad_first;
    Matrix grad_second;
    int count = 0;
};

// Mean cross-entropy over rows with mask != 0.
LossResult loss_mlm(const Matrix& logits, std::span<const std::uint8_t> mask, std::span<const int> targets);

// Mean over masked rows of the squared L2 distance to the stored features.
LossResult loss_mrfr(const Matrix& predicted, std::span<const std::uint8_t> mask, const Matrix& targets);

// Mean category cross-entropy plus mean attribute cross-entropy over masked rows.
PairLossResult loss_moc(const Matrix& category_logits, const Matrix& attribute_logits, std::span<const std::uint8_t> mask,
                        std::span<const int> category_targets, std::span<const int> attribute_targets);

// Sum over shuffled triplets and their three slots of the squared distance
// between the prediction at a slot and the pre-shuffle feature of that same
// slot, divided by max(3K, 1). Triplet starts index rows of `predicted`.
LossResult loss_ifrs(const Matrix& predicted, std::span<const ShuffledTriplet> shuffled, const Matrix& original);

// Mean binary cross-entropy of sigmoid(logits) against 0/1 targets over all
// entries (classes and batch). Shared by TITP and TITS.
LossResult loss_topic(const Matrix& logits, const Matrix& targets);

// Mean binary cross-entropy of sigmoid(logit) against the match labels.
LossResult loss_itm_hs(const Matrix& logits, std::span<const int> labels);

// Plain cross-entropy for downstream classification heads.
LossResult loss_cross_entropy(const Matrix& logits, std::span<const int> targets);

struct TaskWeights {
    std::map<Task, double> weights;
    double operator[](Task t) const {
        auto it = weights.find(t);
        return it == weights.end() ? 1.0 : it->second;
    }
    static TaskWeights parse(const std::map<std::string, double>& by_name);
};

struct LossReport {
    std::map<Task, double> losses;  // active tasks only
    std::map<Task, int> counts;     // contributing elements per active task
    TaskSet active;
    double aggregate = 0.0;

    // One JSON object per line, six-decimal fixed values.
    std::string log_line(long step, Granularity stage) const;
};

// aggregate = sum of weight * loss over active tasks; inactive tasks are
// ignored and absent from the report. Tasks with no contributing element
// (e.g. image-grounded tasks when every pair in the batch is a negative)
// contribute 0 with count 0.
LossReport aggregate(const std::map<Task, LossResult>& computed, TaskSet active, const TaskWeights& weights = {});
LossReport aggregate(const std::map<std::string, double>& computed, const std::vector<std::string>& active_names,
                     const TaskWeights& weights = {});

} // namespace msp
