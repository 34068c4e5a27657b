// SPDX-License-Identifier: Apache-2.0
//
// Multi-stage scheduler: stage specifications, the training loop, and
// sequential or joint schedules over the token, phrase and sentence corpora.

#pragma once

#include "msp/losses.hpp"
#include "msp/model.hpp"
#include "msp/optimizer.hpp"

#include <functional>
#include <map>

namespace msp {

enum class ScheduleMode { Sequential, Joint };

std::string_view to_string(ScheduleMode m);
ScheduleMode parse_schedule_mode(std::string_view s);

struct StageSpec {
    Granularity granularity = Granularity::Sentence;
    TaskSet tasks;
    int epochs = 1;
    int batch_size = 32;
    double learning_rate = 1e-5;
    // false: ITM_HS draws uniform negatives (plain ITM).
    bool hard_negatives = true;

    void validate() const;
    bool operator==(const StageSpec&) const = default;
};

struct SchedulePlan {
    ScheduleMode mode = ScheduleMode::Sequential;
    std::vector<StageSpec> stages;
    std::uint64_t seed = 0;

    void validate() const;
    bool operator==(const SchedulePlan&) const = default;
};

// Tasks a stage of the given granularity runs by default.
TaskSet default_stage_tasks(Granularity g);

// TOKEN(IFRS MLM MRFR MOC, 10 epochs, batch 64) -> PHRASE(TITP MLM MRFR MOC,
// 20, 128) -> SENTENCE(TITS ITM_HS MLM MRFR MOC, 20, 128), lr 1e-5.
SchedulePlan default_plan();

struct StepRecord {
    long step = 0;        // global step index within the schedule
    int stage_index = 0;  // index into SchedulePlan::stages
    Granularity granularity = Granularity::Sentence;
    long optimizer_steps_before = 0;  // Adam step counter before this update
    LossReport report;
};

struct TrainingLog {
    std::vector<StepRecord> steps;

    std::string to_jsonl() const;
    void append(const TrainingLog& other);
};

struct TrainerHooks {
    std::function<void(int stage_index, Model&)> on_stage_begin;
    std::function<void(int stage_index, Model&)> on_stage_end;
    std::function<void(const StepRecord&)> on_step;
};

struct TrainingContext {
    const Vocabulary* vocab = nullptr;
    const HardSampleIndex* index = nullptr;
    const RegionBank* bank = nullptr;
    TransformConfig transforms;
    TaskWeights weights;
    std::uint64_t seed = 0;
    TrainerHooks hooks;
};

// Number of optimizer steps a stage takes: epochs * ceil(n / batch_size).
long stage_step_count(const StageSpec& spec, std::size_t n_examples);

// One stage with a fresh Adam optimizer. Per step: transforms, encode, active
// heads, aggregate, backward, update. Deterministic given the context seed
// and stage index.
TrainingLog run_stage(Model& model, const StageSpec& spec, const StageCorpus& corpus, const TrainingContext& ctx,
                      int stage_index = 0);

// SEQUENTIAL: stages in order, weights carried forward, optimizer state reset
// at every boundary. JOINT: one optimizer and one loop that interleaves the
// stages' batches round-robin within every epoch. The plan seed overrides the
// context seed.
TrainingLog run_schedule(Model& model, const SchedulePlan& plan, const std::map<Granularity, StageCorpus>& corpora,
                         TrainingContext ctx);

} // namespace msp
