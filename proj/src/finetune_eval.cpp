// SPDX-License-Identifier: Apache-2.0

#include "msp/finetune_eval.hpp"

#include "msp/losses.hpp"
#include "msp/optimizer.hpp"

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <numeric>
#include <set>

namespace msp {

namespace {

// Freezes every parameter outside `keep_prefix` for the lifetime of the guard.
class FreezeGuard {
public:
    FreezeGuard(Model& model, bool active, std::string_view keep_prefix) : model_(model) {
        for (auto& prm : model_.parameters()) {
            saved_.push_back(prm.frozen);
            if (active && !prm.name.starts_with(keep_prefix)) prm.frozen = true;
        }
    }
    ~FreezeGuard() {
        std::size_t i = 0;
        for (auto& prm : model_.parameters()) prm.frozen = saved_[i++];
    }

private:
    Model& model_;
    std::vector<bool> saved_;
};

void check_config(const FinetuneConfig& cfg) {
    if (cfg.epochs < 1) throw Error("fine-tune epochs must be >= 1");
    if (cfg.batch_size < 1) throw Error("fine-tune batch_size must be >= 1");
    if (!(cfg.learning_rate > 0.0)) throw Error("fine-tune learning_rate must be positive");
}

BatchInputs pair_batch(std::span<const std::vector<int>* const> texts, std::span<const RegionSet* const> regions,
                       const Vocabulary& vocab) {
    std::vector<std::vector<int>> t;
    std::vector<std::string> ids;
    for (const auto* x : texts) t.push_back(*x);
    ids.resize(t.size());
    return assemble_batch(t, regions, ids, vocab);
}

Tape::Var pooled_rows(Model& model, Tape& tape, const BatchInputs& batch, const ForwardOptions& opts) {
    const auto enc = model.encode_batch(tape, batch, opts);
    std::vector<Tape::Var> rows;
    for (const auto& e : enc) rows.push_back(e.pooled);
    return tape.concat_rows(rows);
}

Vocabulary vocab_for(const Model& model, const Vocabulary& vocab) {
    if (vocab.size() != model.config().vocab_size) throw Error("vocabulary does not match the model");
    return vocab;
}

} // namespace

FinetuneConfig default_finetune_config(std::string_view task) {
    FinetuneConfig c;
    if (task == "retrieval") c.epochs = 8;
    else if (task != "classification") throw Error(fmt::format("unknown fine-tuning task '{}'", task));
    return c;
}

const std::vector<std::string>& question_tokens() {
    static const std::vector<std::string> words = {"what", "is", "the", "object"};
    return words;
}

ClassificationTask build_classification_task(std::span<const ImageTextExample> examples, const Vocabulary& vocab,
                                             std::vector<std::string> class_names) {
    if (class_names.empty()) {
        std::set<std::string> cats;
        for (const auto& ex : examples) cats.insert(ex.categories.begin(), ex.categories.end());
        class_names.assign(cats.begin(), cats.end());
    }
    std::map<std::string, int> class_of;
    for (std::size_t i = 0; i < class_names.size(); ++i) class_of[class_names[i]] = static_cast<int>(i);

    ClassificationTask task;
    task.class_names = class_names;
    task.n_classes = static_cast<int>(class_names.size());
    for (const auto& ex : examples) {
        std::map<std::string, std::set<std::string>> cats_with_attr;
        for (std::size_t r = 0; r < ex.attributes.size(); ++r) cats_with_attr[ex.attributes[r]].insert(ex.categories[r]);
        for (const auto& attr : ex.attributes) {
            const auto& cats = cats_with_attr[attr];
            if (cats.size() != 1) continue;
            auto it = class_of.find(*cats.begin());
            if (it == class_of.end()) break;
            std::vector<std::string> words = {"what", "is", "the", attr, "object"};
            ClassificationExample ce;
            ce.text_ids.push_back(Vocabulary::kCls);
            for (int id : vocab.encode(words)) ce.text_ids.push_back(id);
            ce.text_ids.push_back(Vocabulary::kSep);
            ce.regions = resolve_regions(ex, vocab);
            ce.label = it->second;
            ce.image_id = ex.image_id;
            task.examples.push_back(std::move(ce));
            break;
        }
    }
    return task;
}

FinetuneLog finetune_classification(Model& model, const ClassificationTask& task, const Vocabulary& vocab,
                                    const FinetuneConfig& cfg) {
    if (task.n_classes < 2) throw Error(fmt::format("classification needs at least 2 classes, got {}", task.n_classes));
    if (task.examples.empty()) throw Error("classification task has no examples");
    check_config(cfg);
    if (model.classifier_classes() != task.n_classes) model.add_classifier(task.n_classes, derive_seed(cfg.seed, 0));

    FreezeGuard guard(model, cfg.freeze_encoder, "heads.classifier");
    Adam adam(AdamConfig{cfg.learning_rate});
    Rng order_rng(derive_seed(cfg.seed, 1));
    Rng dropout_rng(derive_seed(cfg.seed, 2));
    const Vocabulary v = vocab_for(model, vocab);
    FinetuneLog log;
    std::vector<std::size_t> order(task.examples.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), order_rng);
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            std::vector<const std::vector<int>*> texts;
            std::vector<const RegionSet*> regions;
            std::vector<int> labels;
            for (std::size_t k = start; k < std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size)); ++k) {
                const auto& ex = task.examples[order[k]];
                texts.push_back(&ex.text_ids);
                regions.push_back(&ex.regions);
                labels.push_back(ex.label);
            }
            const BatchInputs batch = pair_batch(texts, regions, v);
            model.zero_grad();
            Tape tape;
            const auto logits = model.head_classifier(tape, pooled_rows(model, tape, batch, {true, &dropout_rng}));
            const auto loss = loss_cross_entropy(tape.value(logits), labels);
            const auto out = tape.custom_scalar(std::span(&logits, 1), loss.value, {loss.grad});
            tape.backward(out);
            adam.step(model.parameters());
            log.losses.push_back(loss.value);
        }
    }
    model.trained_heads.insert(std::string(kHeadClassifier));
    return log;
}

double classification_accuracy(Model& model, const ClassificationTask& task, const Vocabulary& vocab) {
    if (task.examples.empty()) return 0.0;
    const Vocabulary v = vocab_for(model, vocab);
    int correct = 0;
    constexpr std::size_t kChunk = 64;
    for (std::size_t start = 0; start < task.examples.size(); start += kChunk) {
        std::vector<const std::vector<int>*> texts;
        std::vector<const RegionSet*> regions;
        const std::size_t end = std::min(task.examples.size(), start + kChunk);
        for (std::size_t k = start; k < end; ++k) {
            texts.push_back(&task.examples[k].text_ids);
            regions.push_back(&task.examples[k].regions);
        }
        Tape tape(false);
        const auto logits = tape.value(model.head_classifier(tape, pooled_rows(model, tape, pair_batch(texts, regions, v), {})));
        for (std::size_t k = start; k < end; ++k) {
            Eigen::Index best = 0;
            logits.row(static_cast<Eigen::Index>(k - start)).maxCoeff(&best);
            if (best == task.examples[k].label) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(task.examples.size());
}

std::vector<RetrievalItem> build_retrieval_items(const StageCorpus& corpus, const HardSampleIndex& index,
                                                 const RegionBank& bank, Rng& rng) {
    if (bank.size() < 3) throw Error("retrieval corpus too small: need at least 3 images for 2 distinct random negatives");
    std::vector<RetrievalItem> items;
    items.reserve(corpus.size() * 4);
    std::uniform_int_distribution<int> any(0, static_cast<int>(bank.size()) - 1);
    for (const auto& ex : corpus.examples) {
        const int self = bank.find(ex.image_id);
        if (self < 0) throw Error(fmt::format("image '{}' is not in the region bank", ex.image_id));
        items.push_back({&ex.text_ids, &bank.regions(self), ex.image_id, 1});
        std::vector<int> used = {self};
        for (int k = 0; k < 2; ++k) {
            int j;
            do j = any(rng);
            while (std::find(used.begin(), used.end(), j) != used.end());
            used.push_back(j);
            items.push_back({&ex.text_ids, &bank.regions(j), bank.image_id(j), 0});
        }
        const auto hard = index.neighbors(ex.image_id);
        int h = -1;
        if (!hard.empty()) {
            const auto& n = hard[static_cast<std::size_t>(
                std::uniform_int_distribution<std::size_t>(0, hard.size() - 1)(rng))];
            h = bank.find(index.image_id(n.image));
        }
        if (h < 0) {
            do h = any(rng);
            while (h == self);
        }
        items.push_back({&ex.text_ids, &bank.regions(h), bank.image_id(h), 0});
    }
    return items;
}

FinetuneLog finetune_retrieval(Model& model, const StageCorpus& corpus, const HardSampleIndex& index,
                               const RegionBank& bank, const Vocabulary& vocab, const FinetuneConfig& cfg) {
    if (corpus.empty()) throw Error("retrieval corpus is empty");
    check_config(cfg);
    FreezeGuard guard(model, cfg.freeze_encoder, "heads.match");
    Adam adam(AdamConfig{cfg.learning_rate});
    Rng item_rng(derive_seed(cfg.seed, 0));
    Rng order_rng(derive_seed(cfg.seed, 1));
    Rng dropout_rng(derive_seed(cfg.seed, 2));
    const Vocabulary v = vocab_for(model, vocab);
    FinetuneLog log;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto items = build_retrieval_items(corpus, index, bank, item_rng);
        std::vector<std::size_t> order(items.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), order_rng);
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            std::vector<const std::vector<int>*> texts;
            std::vector<const RegionSet*> regions;
            std::vector<int> labels;
            for (std::size_t k = start; k < std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size)); ++k) {
                const auto& it = items[order[k]];
                texts.push_back(it.text_ids);
                regions.push_back(it.regions);
                labels.push_back(it.label);
            }
            const BatchInputs batch = pair_batch(texts, regions, v);
            model.zero_grad();
            Tape tape;
            const auto logits = model.head_match(tape, pooled_rows(model, tape, batch, {true, &dropout_rng}));
            const auto loss = loss_itm_hs(tape.value(logits), labels);
            const auto out = tape.custom_scalar(std::span(&logits, 1), loss.value, {loss.grad});
            tape.backward(out);
            adam.step(model.parameters());
            log.losses.push_back(loss.value);
        }
    }
    model.trained_heads.insert(std::string(kHeadMatch));
    return log;
}

void RetrievalSplit::validate() const {
    if (queries.size() != query_ids.size() || queries.size() != gold.size())
        throw Error("retrieval split: query fields have different lengths");
    if (gallery.size() != gallery_ids.size()) throw Error("retrieval split: gallery fields have different lengths");
    for (int g : gold)
        if (g < 0 || g >= static_cast<int>(gallery.size())) throw Error("retrieval split: gold image outside the gallery");
}

RetrievalSplit build_retrieval_split(std::span<const ImageTextExample> examples, const Vocabulary& vocab) {
    RetrievalSplit s;
    const StageCorpus sc = build_sentence_stage_corpus(examples, vocab);
    for (const auto& ex : sc.examples) {
        s.gold.push_back(static_cast<int>(s.gallery.size()));
        s.queries.push_back(ex.text_ids);
        s.query_ids.push_back(ex.image_id);
        s.gallery.push_back(ex.regions);
        s.gallery_ids.push_back(ex.image_id);
    }
    return s;
}

double RecallResult::at(int k) const {
    for (std::size_t i = 0; i < ks.size(); ++i)
        if (ks[i] == k) return recall[i];
    throw Error(fmt::format("recall at {} was not computed", k));
}

double RecallResult::average() const {
    if (recall.empty()) return 0.0;
    return std::accumulate(recall.begin(), recall.end(), 0.0) / static_cast<double>(recall.size());
}

RecallResult evaluate_recall_at_k(const Matrix& scores, std::span<const int> gold,
                                  std::span<const std::string> tie_keys, std::span<const int> ks) {
    const auto Q = scores.rows();
    const auto G = scores.cols();
    if (static_cast<Eigen::Index>(gold.size()) != Q) throw Error("recall: one gold index per query is required");
    if (static_cast<Eigen::Index>(tie_keys.size()) != G) throw Error("recall: one tie key per gallery item is required");
    for (int k : ks) {
        if (k < 1) throw Error(fmt::format("recall cutoff {} must be >= 1", k));
        if (k > G) throw Error(fmt::format("recall cutoff {} exceeds gallery size {}", k, G));
    }
    RecallResult out;
    out.ks.assign(ks.begin(), ks.end());
    out.recall.assign(ks.size(), 0.0);
    if (Q == 0) return out;
    for (Eigen::Index q = 0; q < Q; ++q) {
        const int g = gold[static_cast<std::size_t>(q)];
        if (g < 0 || g >= G) throw Error("recall: gold index outside the gallery");
        const double s = scores(q, g);
        const auto& key = tie_keys[static_cast<std::size_t>(g)];
        long rank = 0;
        for (Eigen::Index j = 0; j < G; ++j) {
            if (j == g) continue;
            const double t = scores(q, j);
            if (t > s || (t == s && tie_keys[static_cast<std::size_t>(j)] < key)) ++rank;
        }
        for (std::size_t i = 0; i < ks.size(); ++i)
            if (rank < ks[i]) out.recall[i] += 1.0;
    }
    for (auto& r : out.recall) r /= static_cast<double>(Q);
    return out;
}

Matrix score_matrix(const PairScorer& scorer, int n_queries, int n_gallery) {
    Matrix m(n_queries, n_gallery);
    for (int q = 0; q < n_queries; ++q)
        for (int g = 0; g < n_gallery; ++g) m(q, g) = scorer(q, g);
    return m;
}

Matrix model_score_matrix(Model& model, const RetrievalSplit& split, const Vocabulary& vocab) {
    split.validate();
    const Vocabulary v = vocab_for(model, vocab);
    const auto G = static_cast<int>(split.gallery.size());
    Matrix scores(static_cast<Eigen::Index>(split.queries.size()), G);
    std::vector<const RegionSet*> regions;
    for (const auto& r : split.gallery) regions.push_back(&r);
    for (std::size_t q = 0; q < split.queries.size(); ++q) {
        std::vector<const std::vector<int>*> texts(static_cast<std::size_t>(G), &split.queries[q]);
        Tape tape(false);
        const auto logits = model.head_match(tape, pooled_rows(model, tape, pair_batch(texts, regions, v), {}));
        scores.row(static_cast<Eigen::Index>(q)) = tape.value(logits).col(0).transpose();
    }
    return scores;
}

RetrievalMetrics evaluate_retrieval(const Matrix& scores, const RetrievalSplit& split, std::span<const int> ks) {
    split.validate();
    RetrievalMetrics m;
    m.image_retrieval = evaluate_recall_at_k(scores, split.gold, split.gallery_ids, ks);

    // Text retrieval: each gallery image queries the captions; its gold
    // caption is the one whose gold image it is.
    std::vector<int> caption_of(split.gallery.size(), -1);
    for (std::size_t q = 0; q < split.gold.size(); ++q)
        if (caption_of[static_cast<std::size_t>(split.gold[q])] < 0) caption_of[static_cast<std::size_t>(split.gold[q])] = static_cast<int>(q);
    std::vector<Eigen::Index> rows;
    std::vector<int> gold;
    for (std::size_t g = 0; g < caption_of.size(); ++g)
        if (caption_of[g] >= 0) {
            rows.push_back(static_cast<Eigen::Index>(g));
            gold.push_back(caption_of[g]);
        }
    const Matrix transposed = scores.transpose();
    Matrix tr(static_cast<Eigen::Index>(rows.size()), transposed.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) tr.row(static_cast<Eigen::Index>(i)) = transposed.row(rows[i]);
    m.text_retrieval = evaluate_recall_at_k(tr, gold, split.query_ids, ks);
    return m;
}

RetrievalMetrics zero_shot_retrieval(Model& model, const RetrievalSplit& split, const Vocabulary& vocab,
                                     std::span<const int> ks) {
    if (!model.trained_heads.count(std::string(kHeadMatch)))
        throw Error("zero-shot retrieval needs a pre-trained 'match' head, which this checkpoint never trained");
    return evaluate_retrieval(model_score_matrix(model, split, vocab), split, ks);
}

std::string metrics_table(std::span<const MetricsRow> rows, char delimiter) {
    std::vector<std::string> columns;
    for (const auto& r : rows)
        for (const auto& [name, v] : r.values)
            if (std::find(columns.begin(), columns.end(), name) == columns.end()) columns.push_back(name);
    const bool with_tasks = std::any_of(rows.begin(), rows.end(), [](const MetricsRow& r) { return !r.tasks.empty(); });
    std::string out = "config";
    if (with_tasks) out += delimiter + std::string("tasks");
    for (const auto& c : columns) out += delimiter + c;
    out += '\n';
    for (const auto& r : rows) {
        out += r.name;
        if (with_tasks) out += delimiter + r.tasks;
        for (const auto& c : columns) {
            out += delimiter;
            auto it = std::find_if(r.values.begin(), r.values.end(), [&](const auto& p) { return p.first == c; });
            out += (it == r.values.end() || !it->second) ? std::string("-") : fmt::format("{:.4f}", *it->second);
        }
        out += '\n';
    }
    return out;
}

std::string metrics_json(std::span<const MetricsRow> rows) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& r : rows) {
        nlohmann::json o = {{"config", r.name}};
        if (!r.tasks.empty()) o["tasks"] = r.tasks;
        for (const auto& [name, v] : r.values) o[name] = v ? nlohmann::json(*v) : nlohmann::json(nullptr);
        arr.push_back(o);
    }
    return arr.dump(2);
}

} // namespace msp
