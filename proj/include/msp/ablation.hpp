// SPDX-License-Identifier: Apache-2.0
//
// Stage-order and task-removal ablation grid at toy scale: each row
// pre-trains per its plan, then reports toy classification accuracy,
// fine-tuned and zero-shot retrieval averages.

#pragma once

#include "msp/curriculum.hpp"
#include "msp/finetune_eval.hpp"

namespace msp {

// Train/test split of one corpus plus everything derived from it.
struct ExperimentData {
    std::vector<ImageTextExample> train;
    std::vector<ImageTextExample> test;
    Vocabulary vocab;  // over both splits plus the question words
    RegionBank bank;   // train images
    HardSampleIndex index;
    std::map<Granularity, StageCorpus> corpora;  // train split
    ClassificationTask classification_train;
    ClassificationTask classification_test;
    RetrievalSplit retrieval_test;
};

// The last `n_test` images form the test split.
ExperimentData prepare_experiment(std::vector<ImageTextExample> corpus, std::size_t n_test, int top_m);

// Copies `base` with vocab_size, n_attr, d_roi and max_regions taken from the data.
ModelConfig fit_model_config(ModelConfig base, const ExperimentData& data);

struct AblationRow {
    std::string label;
    bool vanilla = false;  // no pre-training at all
    ScheduleMode mode = ScheduleMode::Sequential;
    std::vector<Granularity> stages;
    TaskSet removed;

    // Stage specs with the row's tasks. Sequential rows run each stage's
    // default tasks minus `removed`; the joint row runs MLM MRFR MOC at every
    // granularity plus plain ITM (uniform negatives) at the sentence stage.
    SchedulePlan plan(int epochs, int batch_size, double learning_rate, std::uint64_t seed) const;
    // Union of tasks over the row's stages, canonical order.
    TaskSet tasks() const;
};

// "vanilla", or stage letters T/P/S joined by "->" (sequential) or "+"
// (joint), followed by removals such as "-TITP" or "- ITM_HS".
AblationRow parse_ablation_row(std::string_view spec);

// vanilla; S; S -ITM_HS; S -ITM_HS -TITS; T+P+S; T->S; T->S -IFRS; P->S;
// P->S -TITP; T->P->S; T->P->S -TITP; S->P->T; P->T->S.
const std::vector<std::string>& reference_grid();

struct AblationSettings {
    ModelConfig model;  // vocab_size, n_attr and d_roi are filled from the data
    int epochs = 4;
    int batch_size = 16;
    double learning_rate = 3e-3;
    TransformConfig transforms;
    FinetuneConfig classification{6, 3e-3, 16, false, 0};
    FinetuneConfig retrieval{4, 3e-3, 32, false, 0};
    std::uint64_t seed = 0;
};

// Column names of the emitted table, after "config" and "tasks".
const std::vector<std::string>& ablation_columns();

// Runs every row; `progress` (optional) is called after each row.
std::vector<MetricsRow> run_ablation_grid(std::span<const AblationRow> rows, const ExperimentData& data,
                                          const AblationSettings& settings,
                                          const std::function<void(const MetricsRow&)>& progress = {});

} // namespace msp
