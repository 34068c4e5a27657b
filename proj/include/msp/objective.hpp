// SPDX-License-Identifier: Apache-2.0
//
// Composes encoder, heads and losses into the multi-task pre-training
// objective for one batch.

#pragma once

#include "msp/losses.hpp"
#include "msp/model.hpp"

#include <set>

namespace msp {

struct ObjectiveResult {
    Tape::Var total;  // 1 x 1; weighted sum of active task losses
    LossReport report;
    std::set<std::string> heads_used;
};

// Image-grounded tasks (MRFR, MOC, IFRS, TITP, TITS) only see examples whose
// match label is 1; MLM and ITM_HS see every example.
ObjectiveResult pretraining_objective(Model& model, Tape& tape, const BatchInputs& batch, TaskSet active,
                                      const TaskWeights& weights = {}, const ForwardOptions& opts = {});

// Objective value in evaluation mode, without recording gradients.
double objective_value(Model& model, const BatchInputs& batch, TaskSet active, const TaskWeights& weights = {});

struct BlockCheck {
    std::string name;
    double relative_error = 0.0;  // ||analytic - numeric|| / max(||analytic|| + ||numeric||, norm_floor)
    double analytic_norm = 0.0;
    double numeric_norm = 0.0;
};

// Central finite differences over every element of every (non-frozen)
// parameter block, compared with backpropagated gradients. Evaluation mode.
// The norm floor keeps blocks whose gradient is identically zero (attention
// key biases) from comparing rounding noise against rounding noise.
std::vector<BlockCheck> gradient_check(Model& model, const BatchInputs& batch, TaskSet active, double step = 1e-5,
                                       double norm_floor = 1e-5);

} // namespace msp
