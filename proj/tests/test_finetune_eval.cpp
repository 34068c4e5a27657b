// SPDX-License-Identifier: Apache-2.0

#include "generators.hpp"
#include "oracles.hpp"
#include "msp/ablation.hpp"

#include <doctest.h>

#include <set>

using namespace msp;

namespace {

std::vector<std::string> keys(int n) {
    std::vector<std::string> k;
    for (int i = 0; i < n; ++i) k.push_back(fmt::format("img{:05d}", i));
    return k;
}

std::vector<int> identity_gold(int n) {
    std::vector<int> g(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) g[static_cast<std::size_t>(i)] = i;
    return g;
}

ModelConfig small_model(const ExperimentData& data, int hidden = 16) {
    ModelConfig c;
    c.hidden_size = hidden;
    c.num_heads = 2;
    c.num_xlayers = 1;
    c.ffn_size = 2 * hidden;
    c.dropout = 0.0;
    c.init_std = 0.1;
    return fit_model_config(c, data);
}

ExperimentData small_data(int n_images, std::size_t n_test, std::uint64_t seed = 3) {
    SyntheticCorpusConfig sc;
    sc.n_images = n_images;
    sc.m_regions = 6;
    sc.n_categories = 6;
    sc.d_roi = 6;
    sc.seed = seed;
    return prepare_experiment(generate_synthetic_corpus(sc), n_test, 3);
}

} // namespace

TEST_CASE("recall: planted oracle and anti-oracle") {
    const int n = 12;
    Matrix oracle_scores = Matrix::Zero(n, n), anti = Matrix::Ones(n, n);
    for (int i = 0; i < n; ++i) {
        oracle_scores(i, i) = 1.0;
        anti(i, i) = 0.0;
    }
    const auto k = keys(n);
    const auto gold = identity_gold(n);
    const std::vector<int> ks = {1, 5, 10};
    const auto good = evaluate_recall_at_k(oracle_scores, gold, k, ks);
    for (int c : ks) CHECK(good.at(c) == 1.0);
    const auto bad = evaluate_recall_at_k(anti, gold, k, std::vector<int>{1, 5, 10, 11, 12});
    for (int c : {1, 5, 10, 11}) CHECK(bad.at(c) == 0.0);
    CHECK(bad.at(12) == 1.0);
    CHECK_THROWS_WITH(evaluate_recall_at_k(anti, gold, k, std::vector<int>{13}), doctest::Contains("exceeds gallery size"));
    CHECK(good.average() == 1.0);
}

TEST_CASE("recall: random scorer matches the brute-force ranking oracle on 20x20") {
    gen::Source src(71);
    const int n = 20;
    const auto k = keys(n);
    std::vector<int> ks(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) ks[static_cast<std::size_t>(i)] = i + 1;
    for (int trial = 0; trial < 200; ++trial) {
        Matrix s = src.matrix(n, n);
        // coarse scores create ties that exercise the tie key
        if (trial % 2) s = (s * 3.0).array().round().matrix();
        const auto gold = src.labels(n, n);
        const auto got = evaluate_recall_at_k(s, gold, k, ks);
        const auto grid = oracle::to_grid(s);
        for (int c : ks) REQUIRE(got.at(c) == oracle::recall_at(grid, gold, k, c));
    }
}

TEST_CASE("property: recall is monotone, bounded and invariant to increasing transforms") {
    gen::Source src(72);
    for (int trial = 0; trial < 300; ++trial) {
        const int q = src.integer(1, 15), g = src.integer(1, 15);
        const Matrix s = src.matrix(q, g);
        const auto gold = src.labels(q, g);
        const auto k = keys(g);
        std::vector<int> ks;
        for (int c = 1; c <= g; ++c) ks.push_back(c);
        const auto r = evaluate_recall_at_k(s, gold, k, ks);
        for (std::size_t i = 0; i < ks.size(); ++i) {
            REQUIRE(r.recall[i] >= 0.0);
            REQUIRE(r.recall[i] <= 1.0);
            if (i) REQUIRE(r.recall[i] >= r.recall[i - 1]);
        }
        REQUIRE(r.recall.back() == 1.0);
        const Matrix t = (s.array() * 2.5).exp().matrix() + Matrix::Constant(q, g, 7.0);
        REQUIRE(evaluate_recall_at_k(t, gold, k, ks).recall == r.recall);
    }
}

TEST_CASE("score_matrix and retrieval directions") {
    const auto m = score_matrix([](int q, int i) { return q == i ? 2.0 : -1.0 * (q + i); }, 4, 4);
    CHECK(m(2, 2) == 2.0);
    CHECK(m(1, 3) == -4.0);

    const ExperimentData data = small_data(30, 12);
    const RetrievalSplit& split = data.retrieval_test;
    CHECK_NOTHROW(split.validate());
    CHECK(split.queries.size() == 12);
    for (std::size_t q = 0; q < split.queries.size(); ++q)
        CHECK(split.gallery_ids[static_cast<std::size_t>(split.gold[q])] == split.query_ids[q]);

    Matrix scores = Matrix::Zero(12, 12);
    scores(0, 0) = 1.0;  // caption 0 finds image 0; image 0 finds caption 0
    const auto r = evaluate_retrieval(scores, split, kDefaultRecallKs);
    CHECK(r.image_retrieval.at(1) == doctest::Approx(1.0 / 12));
    CHECK(r.text_retrieval.at(1) == doctest::Approx(1.0 / 12));
}

TEST_CASE("retrieval items: four per positive with correct labels and hard membership") {
    const ExperimentData data = small_data(20, 4);
    const StageCorpus& corpus = data.corpora.at(Granularity::Sentence);
    Rng rng(5);
    const auto items = build_retrieval_items(corpus, data.index, data.bank, rng);
    REQUIRE(items.size() == 4 * corpus.size());
    for (std::size_t p = 0; p < corpus.size(); ++p) {
        const auto& own = corpus.examples[p].image_id;
        const auto* group = &items[4 * p];
        CHECK(group[0].label == 1);
        CHECK(group[0].image_id == own);
        int ones = 0;
        for (int j = 0; j < 4; ++j) ones += group[j].label;
        CHECK(ones == 1);
        CHECK(group[1].image_id != own);
        CHECK(group[2].image_id != own);
        CHECK(group[1].image_id != group[2].image_id);
        std::set<std::string> hard;
        for (const auto& nb : data.index.neighbors(own)) hard.insert(data.index.image_id(nb.image));
        CHECK(hard.count(group[3].image_id) == 1);
    }

    std::vector<ImageTextExample> two(data.train.begin(), data.train.begin() + 2);
    const Vocabulary v = build_vocabulary(two);
    const RegionBank bank(two, v);
    const HardSampleIndex idx = build_hard_sample_index(two, 1);
    CHECK_THROWS_WITH(build_retrieval_items(build_sentence_stage_corpus(two, v), idx, bank, rng),
                      doctest::Contains("too small"));
}

TEST_CASE("retrieval fine-tuning logs one loss per step and trains the match head") {
    const ExperimentData data = small_data(24, 8);
    Model model(small_model(data), 1);
    FinetuneConfig cfg = default_finetune_config("retrieval");
    CHECK(cfg.epochs == 8);
    CHECK(cfg.learning_rate == 5e-5);
    CHECK(cfg.batch_size == 32);
    cfg.epochs = 2;
    cfg.learning_rate = 1e-3;
    const auto& corpus = data.corpora.at(Granularity::Sentence);
    const auto log = finetune_retrieval(model, corpus, data.index, data.bank, data.vocab, cfg);
    const std::size_t items = 4 * corpus.size();
    CHECK(log.losses.size() == 2 * ((items + 31) / 32));
    CHECK(model.trained_heads.count("match") == 1);
    CHECK_THROWS_WITH(default_finetune_config("captioning"), doctest::Contains("unknown fine-tuning task"));
}

TEST_CASE("zero-shot retrieval is pure and needs a trained match head") {
    const ExperimentData data = small_data(24, 10);
    Model model(small_model(data), 2);
    CHECK_THROWS_WITH(zero_shot_retrieval(model, data.retrieval_test, data.vocab, kDefaultRecallKs),
                      doctest::Contains("'match' head"));

    SchedulePlan plan;
    plan.seed = 1;
    plan.stages = {{Granularity::Sentence, default_stage_tasks(Granularity::Sentence), 1, 8, 1e-3, true}};
    TrainingContext ctx;
    ctx.vocab = &data.vocab;
    ctx.index = &data.index;
    ctx.bank = &data.bank;
    run_schedule(model, plan, data.corpora, ctx);

    const std::string before = model.serialize_weights();
    const auto zs = zero_shot_retrieval(model, data.retrieval_test, data.vocab, kDefaultRecallKs);
    CHECK(model.serialize_weights() == before);
    const auto direct = evaluate_retrieval(model_score_matrix(model, data.retrieval_test, data.vocab), data.retrieval_test,
                                           kDefaultRecallKs);
    CHECK(zs.image_retrieval.recall == direct.image_retrieval.recall);
    CHECK(zs.text_retrieval.recall == direct.text_retrieval.recall);
}

TEST_CASE("classification task construction") {
    const ExperimentData data = small_data(30, 10);
    const auto& task = data.classification_train;
    REQUIRE(task.n_classes >= 2);
    CHECK(static_cast<int>(task.class_names.size()) == task.n_classes);
    CHECK(std::is_sorted(task.class_names.begin(), task.class_names.end()));
    for (const auto& ex : task.examples) {
        CHECK(ex.label >= 0);
        CHECK(ex.label < task.n_classes);
        // the answer category is present among the image's regions
        const int id = data.vocab.index(task.class_names[static_cast<std::size_t>(ex.label)]);
        CHECK(std::find(ex.regions.category_ids.begin(), ex.regions.category_ids.end(), id) != ex.regions.category_ids.end());
    }
    CHECK(data.classification_test.class_names == task.class_names);
    CHECK(question_tokens().size() >= 3);
}

TEST_CASE("classification: overfits a 16-example task and honours the frozen encoder") {
    const ExperimentData data = small_data(40, 10, 8);
    ClassificationTask task = data.classification_train;
    REQUIRE(task.examples.size() >= 16);
    task.examples.resize(16);

    Model model(small_model(data, 32), 3);
    FinetuneConfig cfg;
    cfg.epochs = 300;
    cfg.batch_size = 16;
    cfg.learning_rate = 3e-3;
    const auto log = finetune_classification(model, task, data.vocab, cfg);
    CHECK(log.losses.size() == 300);
    CHECK(classification_accuracy(model, task, data.vocab) >= 0.95);

    Model frozen(small_model(data), 4);
    const std::string encoder_before = [&] {
        std::string s;
        for (const auto& p : frozen.parameters()) s += p.name + std::to_string(fnv1a64(std::string_view(
                                                      reinterpret_cast<const char*>(p.value.data()), sizeof(double) * p.value.size())));
        return s;
    }();
    FinetuneConfig fz;
    fz.epochs = 3;
    fz.learning_rate = 1e-2;
    fz.freeze_encoder = true;
    finetune_classification(frozen, task, data.vocab, fz);
    std::size_t checked = 0;
    for (const auto& p : frozen.parameters()) {
        const auto digest = std::to_string(fnv1a64(std::string_view(reinterpret_cast<const char*>(p.value.data()),
                                                                     sizeof(double) * p.value.size())));
        if (p.name.rfind("heads.classifier", 0) == 0) continue;
        CHECK(encoder_before.find(p.name + digest) != std::string::npos);
        ++checked;
    }
    CHECK(checked > 10);

    ClassificationTask one_class = task;
    one_class.n_classes = 1;
    CHECK_THROWS_WITH(finetune_classification(model, one_class, data.vocab, cfg), doctest::Contains("at least 2 classes"));
}

TEST_CASE("metrics table: header, missing cells and json") {
    std::vector<MetricsRow> rows(2);
    rows[0].name = "S";
    rows[0].values = {{"acc", 0.5}, {"ZS-IR avg", std::nullopt}};
    rows[1].name = "T->P->S";
    rows[1].values = {{"acc", 0.25}, {"ZS-IR avg", 0.125}};
    const std::string csv = metrics_table(rows);
    CHECK(csv.rfind("config,acc,ZS-IR avg\n", 0) == 0);
    CHECK(csv.find("S,0.5000,-\n") != std::string::npos);
    CHECK(csv.find("T->P->S,0.2500,0.1250") != std::string::npos);
    const std::string json = metrics_json(rows);
    CHECK(json.find("null") != std::string::npos);
}
