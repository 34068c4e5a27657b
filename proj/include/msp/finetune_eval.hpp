// SPDX-License-Identifier: Apache-2.0
//
// Downstream heads and metrics: toy question-answer classification,
// retrieval fine-tuning with one positive, two random negatives and one hard
// negative per pair, R@k evaluation in both directions, and zero-shot
// retrieval with the pre-trained match head.

#pragma once

#include "msp/model.hpp"

#include <array>
#include <functional>
#include <optional>

namespace msp {

struct FinetuneConfig {
    int epochs = 6;
    double learning_rate = 5e-5;
    int batch_size = 32;
    bool freeze_encoder = false;  // train only the task head
    std::uint64_t seed = 0;
};

// 6 epochs for classification, 8 for retrieval; lr 5e-5, batch 32.
FinetuneConfig default_finetune_config(std::string_view task);

struct FinetuneLog {
    std::vector<double> losses;  // one per optimizer step
};

// ---- classification ----

// Words of the template question "what is the <attribute> object".
const std::vector<std::string>& question_tokens();

struct ClassificationExample {
    std::vector<int> text_ids;
    RegionSet regions;
    int label = 0;
    std::string image_id;
};

struct ClassificationTask {
    std::vector<ClassificationExample> examples;
    int n_classes = 0;
    std::vector<std::string> class_names;  // class id -> category word
};

// One question per image: the first region attribute (in region order) that
// only one present category carries is asked about; the answer is that
// category. Images without such an attribute are skipped. `class_names`
// fixes the answer space; when empty it is the sorted set of categories in
// `examples`.
ClassificationTask build_classification_task(std::span<const ImageTextExample> examples, const Vocabulary& vocab,
                                             std::vector<std::string> class_names = {});

// Adds (or replaces) the affine answer head pooled -> n_classes and trains it
// jointly with the encoder (or alone when freeze_encoder) with cross-entropy.
FinetuneLog finetune_classification(Model& model, const ClassificationTask& task, const Vocabulary& vocab,
                                    const FinetuneConfig& cfg);

double classification_accuracy(Model& model, const ClassificationTask& task, const Vocabulary& vocab);

// ---- retrieval ----

struct RetrievalItem {
    const std::vector<int>* text_ids = nullptr;
    const RegionSet* regions = nullptr;
    std::string image_id;  // image the regions belong to
    int label = 0;
};

// Four items per positive pair, in order: the positive, two distinct uniform
// random negatives, one negative drawn uniformly from the image's hard list
// (uniform over remaining images when the list is empty).
std::vector<RetrievalItem> build_retrieval_items(const StageCorpus& corpus, const HardSampleIndex& index,
                                                 const RegionBank& bank, Rng& rng);

FinetuneLog finetune_retrieval(Model& model, const StageCorpus& corpus, const HardSampleIndex& index,
                               const RegionBank& bank, const Vocabulary& vocab, const FinetuneConfig& cfg);

struct RetrievalSplit {
    std::vector<std::vector<int>> queries;  // caption token ids
    std::vector<std::string> query_ids;     // image id the caption describes
    std::vector<RegionSet> gallery;
    std::vector<std::string> gallery_ids;
    std::vector<int> gold;  // query -> gallery position

    void validate() const;
};

// One caption query per image; the gallery is every image of the split.
RetrievalSplit build_retrieval_split(std::span<const ImageTextExample> examples, const Vocabulary& vocab);

struct RecallResult {
    std::vector<int> ks;
    std::vector<double> recall;  // parallel to ks

    double at(int k) const;
    // Mean over all cutoffs.
    double average() const;
};

// Ranks every gallery column of each query row by descending score, ties by
// ascending tie key; R@k is the fraction of queries whose gold item ranks in
// the top k.
RecallResult evaluate_recall_at_k(const Matrix& scores, std::span<const int> gold,
                                  std::span<const std::string> tie_keys, std::span<const int> ks);

using PairScorer = std::function<double(int query, int image)>;

// scores(q, g) = scorer(q, g).
Matrix score_matrix(const PairScorer& scorer, int n_queries, int n_gallery);

// Match-head logits for every (caption, image) pair, evaluation mode.
Matrix model_score_matrix(Model& model, const RetrievalSplit& split, const Vocabulary& vocab);

struct RetrievalMetrics {
    RecallResult image_retrieval;  // caption query -> image gallery
    RecallResult text_retrieval;   // image query -> caption gallery
};

// IR ranks images per caption (ties by image id); TR ranks captions per
// image (ties by the captions' image ids).
RetrievalMetrics evaluate_retrieval(const Matrix& scores, const RetrievalSplit& split, std::span<const int> ks);

inline constexpr std::array<int, 3> kDefaultRecallKs = {1, 5, 10};

// Uses the pre-trained match head without touching any weight. Throws when
// the model never trained its match head.
RetrievalMetrics zero_shot_retrieval(Model& model, const RetrievalSplit& split, const Vocabulary& vocab,
                                     std::span<const int> ks);

// ---- reports ----

struct MetricsRow {
    std::string name;
    std::string tasks;  // optional free-text column
    std::vector<std::pair<std::string, std::optional<double>>> values;  // empty optional: not applicable
};

// Delimiter-separated table with a header row; missing values print as "-".
// The tasks column appears when any row sets it.
std::string metrics_table(std::span<const MetricsRow> rows, char delimiter = ',');
std::string metrics_json(std::span<const MetricsRow> rows);

} // namespace msp
