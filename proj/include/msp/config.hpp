// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: one JSON document with paths, corpus, model, plan,
// transform, fine-tune and ablation blocks plus a mandatory seed. Dotted
// KEY=VALUE overrides are applied to the document before it is read.

#pragma once

#include "msp/ablation.hpp"

#include <filesystem>

namespace msp {

struct PathsConfig {
    std::filesystem::path corpus;
    std::filesystem::path checkpoint;
    std::filesystem::path logs;
    std::filesystem::path reports;
    std::filesystem::path hard_index;  // optional; built from the corpus when empty
};

struct CorpusSettings {
    SyntheticCorpusConfig synthetic;
    std::size_t n_test = 16;  // held-out images for downstream evaluation
    int top_m = 100;          // hard-sample list length
};

struct FinetuneSettings {
    std::string task = "classification";  // or "retrieval"
    FinetuneConfig config;
};

struct AblationGridSettings {
    std::vector<std::string> rows;  // defaults to reference_grid()
    AblationSettings settings;
};

struct RunConfig {
    std::uint64_t seed = 0;
    PathsConfig paths;
    CorpusSettings corpus;
    ModelConfig model;
    SchedulePlan plan;
    TransformConfig transforms;
    TaskWeights weights;
    FinetuneSettings finetune;
    AblationGridSettings ablation;
};

// Throws Error naming the dotted key for missing required keys, unknown keys
// and type mismatches. Overrides look like "model.hidden_size=64" or
// "plan.stages.0.epochs=2"; values are read as JSON, falling back to a string.
RunConfig parse_run_config(std::string_view json_text, std::span<const std::string> overrides = {});
RunConfig load_run_config(const std::filesystem::path& path, std::span<const std::string> overrides = {});
std::string run_config_to_json(const RunConfig& cfg);

// Plan file: {"mode": ..., "seed": ..., "stages": [{"granularity", "tasks",
// "epochs", "batch_size", "learning_rate", "hard_negatives"}]}.
std::string plan_to_json(const SchedulePlan& plan);
SchedulePlan plan_from_json(std::string_view json_text);

} // namespace msp
