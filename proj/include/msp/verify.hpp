// SPDX-License-Identifier: Apache-2.0
//
// Self-verification suite behind the `verify` command: parameter accounting,
// scalar-loop loss references, finite-difference gradient checks on a toy
// model and corruption-rate statistics.

#pragma once

#include "msp/objective.hpp"

#include <functional>

namespace msp {

struct VerifyCheck {
    std::string name;
    bool passed = false;
    std::string detail;
};

struct VerifyOptions {
    int loss_instances = 200;     // random instances per loss
    int mask_candidates = 20000;  // tokens / regions / triplets / pairs per rate check
    bool gradients = true;
    std::uint64_t seed = 0;
};

// Toy model and per-task batches used by the gradient checks.
ModelConfig gradient_check_model_config(const Vocabulary& vocab, int d_roi, int max_regions);
std::vector<ImageTextExample> gradient_check_corpus(std::uint64_t seed);
// Batch of the toy corpus with corruption settings that give `task` a
// non-empty supervision signal.
BatchInputs gradient_check_batch(Task task, std::span<const ImageTextExample> corpus, const Vocabulary& vocab,
                                 std::uint64_t seed);

std::vector<VerifyCheck> verify_parameter_counts();
std::vector<VerifyCheck> verify_loss_references(int instances, std::uint64_t seed);
std::vector<VerifyCheck> verify_gradients(std::uint64_t seed, double tolerance = 1e-4);
std::vector<VerifyCheck> verify_transform_rates(int candidates, std::uint64_t seed);

// Everything above; `progress` (optional) sees each check as it completes.
std::vector<VerifyCheck> run_verification(const VerifyOptions& opts,
                                          const std::function<void(const VerifyCheck&)>& progress = {});

} // namespace msp
