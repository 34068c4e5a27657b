// SPDX-License-Identifier: Apache-2.0

#include "generators.hpp"
#include "oracles.hpp"
#include "msp/transforms.hpp"

#include <doctest.h>

#include <algorithm>
#include <set>

using namespace msp;

namespace {

std::vector<std::vector<double>> sorted_rows(const Matrix& m) {
    auto g = oracle::to_grid(m);
    std::sort(g.begin(), g.end());
    return g;
}

struct Fixture {
    std::vector<ImageTextExample> corpus;
    Vocabulary vocab;
    StageCorpus stage;
    HardSampleIndex index;
    RegionBank bank;

    explicit Fixture(std::uint64_t seed, int n = 12, int m = 9) {
        SyntheticCorpusConfig cfg;
        cfg.n_images = n;
        cfg.m_regions = m;
        cfg.n_categories = 6;
        cfg.d_roi = 4;
        cfg.seed = seed;
        corpus = generate_synthetic_corpus(cfg);
        vocab = build_vocabulary(corpus);
        stage = build_sentence_stage_corpus(corpus, vocab);
        index = build_hard_sample_index(corpus, 3);
        bank = RegionBank(corpus, vocab);
    }

    std::vector<const StageExample*> batch() const {
        std::vector<const StageExample*> out;
        for (const auto& e : stage.examples) out.push_back(&e);
        return out;
    }
};

} // namespace

TEST_CASE("mask_tokens: degenerate rates, targets and errors") {
    const std::vector<int> text = {Vocabulary::kCls, 7, 8, 9, 10, Vocabulary::kSep, Vocabulary::kPad};
    Rng rng(1);
    const auto all = mask_tokens(text, 1.0, 20, rng);
    CHECK(all.masked == std::vector<std::uint8_t>{0, 1, 1, 1, 1, 0, 0});
    for (std::size_t i = 0; i < text.size(); ++i) CHECK(all.targets[i] == (all.masked[i] ? text[i] : -1));
    CHECK(all.ids.size() == text.size());

    const std::vector<int> bare = {Vocabulary::kCls, Vocabulary::kSep};
    CHECK_THROWS_WITH(mask_tokens(bare, 0.15, 20, rng), "nothing to mask");
}

TEST_CASE("mask_tokens: force-one and branch contents") {
    gen::Source src(21);
    int mask_branch = 0, total = 0;
    for (int trial = 0; trial < 2000; ++trial) {
        const auto text = src.text(src.integer(1, 6), 30);
        Rng rng(src.seed());
        const auto r = mask_tokens(text, 0.15, 30, rng);
        const int n = static_cast<int>(std::count(r.masked.begin(), r.masked.end(), 1));
        REQUIRE(n >= 1);
        REQUIRE(r.masked.front() == 0);
        REQUIRE(r.masked.back() == 0);
        for (std::size_t i = 0; i < text.size(); ++i) {
            if (!r.masked[i]) {
                REQUIRE(r.ids[i] == text[i]);
                continue;
            }
            REQUIRE(r.targets[i] == text[i]);
            REQUIRE((r.ids[i] == Vocabulary::kMask || !Vocabulary().is_special(r.ids[i])));
            mask_branch += r.ids[i] == Vocabulary::kMask;
            ++total;
        }
    }
    CHECK(static_cast<double>(mask_branch) / total == doctest::Approx(0.8).epsilon(0.08));
}

TEST_CASE("mask_regions: degenerate rate and locality") {
    gen::Source src(22);
    const Matrix f = src.matrix(7, 4);
    Rng rng(3);
    const auto all = mask_regions(f, 1.0, rng);
    CHECK(all.features.isZero(0.0));
    CHECK(all.targets == f);

    for (int trial = 0; trial < 200; ++trial) {
        Rng r2(src.seed());
        const auto res = mask_regions(f, 0.3, r2);
        REQUIRE(std::count(res.masked.begin(), res.masked.end(), 1) >= 1);
        for (int i = 0; i < 7; ++i) {
            if (res.masked[static_cast<std::size_t>(i)])
                REQUIRE(res.features.row(i).isZero(0.0));
            else
                REQUIRE(res.features.row(i) == f.row(i));
        }
    }
}

TEST_CASE("region exclusion keeps the stream independent of the exclusion set") {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng a(seed), b(seed);
        std::vector<std::uint8_t> excl(12, 0);
        excl[0] = excl[1] = excl[2] = 1;
        const auto plain = draw_region_mask(12, 0.4, a);
        const auto restricted = draw_region_mask(12, 0.4, b, excl);
        for (std::size_t i = 3; i < 12; ++i)
            if (plain[i]) REQUIRE(restricted[i]);
        for (std::size_t i = 0; i < 3; ++i) REQUIRE(restricted[i] == 0);
    }
}

TEST_CASE("shuffle: identity at zero, errors and admissible outcomes") {
    gen::Source src(23);
    const Matrix f = src.matrix(9, 3);
    Rng rng(0);
    const auto none = shuffle_region_triplets(f, 0.0, rng);
    CHECK(none.features == f);
    CHECK(none.shuffled_triplets() == 0);
    CHECK_THROWS_WITH(shuffle_region_triplets(src.matrix(2, 3), 0.5, rng), "too few regions");

    const auto& perms = non_identity_permutations();
    const std::array<int, 3> rotation{1, 2, 0};
    CHECK(std::find(perms.begin(), perms.end(), rotation) != perms.end());
    CHECK(std::find(perms.begin(), perms.end(), std::array<int, 3>{0, 1, 2}) == perms.end());
    CHECK(std::set<std::array<int, 3>>(perms.begin(), perms.end()).size() == 5);

    const auto all = shuffle_region_triplets(f, 1.0, rng);
    CHECK(all.shuffled_triplets() == 3);
    for (const auto& t : all.map)
        for (int k = 0; k < 3; ++k) CHECK(all.features.row(t.start + k) == f.row(t.start + t.source[static_cast<std::size_t>(k)]));
}

TEST_CASE("property: shuffle preserves lengths and row multisets") {
    gen::Source src(24);
    for (int trial = 0; trial < 500; ++trial) {
        const int m = src.integer(3, 20);
        const Matrix f = src.matrix(m, src.integer(1, 5));
        Rng rng(src.seed());
        const auto r = shuffle_region_triplets(f, src.real(0.0, 1.0), rng);
        REQUIRE(r.features.rows() == f.rows());
        REQUIRE(sorted_rows(r.features) == sorted_rows(f));
        for (const auto& t : r.map) {
            REQUIRE(t.start % 3 == 0);
            REQUIRE(t.start + 3 <= m);
        }
        for (int i = 3 * (m / 3); i < m; ++i) REQUIRE(r.features.row(i) == f.row(i));
    }
}

TEST_CASE("property: shuffle and region mask commute on disjoint positions") {
    gen::Source src(25);
    for (int trial = 0; trial < 300; ++trial) {
        const int m = src.integer(3, 15);
        const Matrix f = src.matrix(m, 3);
        Rng sr(src.seed()), mr(src.seed());
        const auto map = draw_triplet_shuffle(m, 0.4, sr);
        std::vector<std::uint8_t> shuffled(static_cast<std::size_t>(m), 0);
        for (const auto& t : map)
            for (int k = 0; k < 3; ++k) shuffled[static_cast<std::size_t>(t.start + k)] = 1;
        const auto masked = draw_region_mask(m, 0.3, mr, shuffled);
        for (int i = 0; i < m; ++i) REQUIRE_FALSE((masked[static_cast<std::size_t>(i)] && shuffled[static_cast<std::size_t>(i)]));
        REQUIRE(apply_shuffle(apply_region_mask(f, masked), map) == apply_region_mask(apply_shuffle(f, map), masked));
    }
}

TEST_CASE("hard sample index: identical images and truncation") {
    std::vector<ImageTextExample> c(3);
    for (int i = 0; i < 3; ++i) {
        c[static_cast<std::size_t>(i)].image_id = "im" + std::to_string(i);
        c[static_cast<std::size_t>(i)].features = Matrix::Constant(3, 2, 1.0);
    }
    c[2].features.col(1).setConstant(-1.0);
    const auto idx = build_hard_sample_index(c, 10);
    CHECK(idx.neighbors(0).size() == 2);
    CHECK(idx.image_id(idx.neighbors(0)[0].image) == "im1");
    CHECK(idx.neighbors(0)[0].similarity == doctest::Approx(1.0));
    CHECK_THROWS(build_hard_sample_index(std::span(c).first(1), 3));
}

TEST_CASE("hard sample index: equals brute-force cosine ranking on 20 images") {
    SyntheticCorpusConfig cfg;
    cfg.n_images = 20;
    cfg.m_regions = 6;
    cfg.seed = 5;
    const auto corpus = generate_synthetic_corpus(cfg);
    const int top_m = 5;
    const auto idx = build_hard_sample_index(corpus, top_m);
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        const auto a = oracle::mean_row(corpus[i].features);
        std::vector<std::pair<double, std::string>> all;
        for (std::size_t j = 0; j < corpus.size(); ++j)
            if (j != i) all.push_back({oracle::cosine(a, oracle::mean_row(corpus[j].features)), corpus[j].image_id});
        std::sort(all.begin(), all.end(), [](const auto& x, const auto& y) {
            return x.first != y.first ? x.first > y.first : x.second < y.second;
        });
        const auto got = idx.neighbors(corpus[i].image_id);
        REQUIRE(got.size() == static_cast<std::size_t>(top_m));
        for (int k = 0; k < top_m; ++k) {
            CHECK(idx.image_id(got[static_cast<std::size_t>(k)].image) == all[static_cast<std::size_t>(k)].second);
            CHECK(got[static_cast<std::size_t>(k)].similarity == doctest::Approx(all[static_cast<std::size_t>(k)].first).epsilon(1e-12));
        }
    }
}

TEST_CASE("hard sample index: file round trip") {
    Fixture fx(31);
    const auto back = HardSampleIndex::parse(fx.index.serialize());
    REQUIRE(back.size() == fx.index.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
        REQUIRE(back.neighbors(static_cast<int>(i)).size() == fx.index.neighbors(static_cast<int>(i)).size());
        for (std::size_t k = 0; k < back.neighbors(static_cast<int>(i)).size(); ++k) {
            CHECK(back.neighbors(static_cast<int>(i))[k].image == fx.index.neighbors(static_cast<int>(i))[k].image);
            CHECK(back.neighbors(static_cast<int>(i))[k].similarity ==
                  doctest::Approx(fx.index.neighbors(static_cast<int>(i))[k].similarity).epsilon(1e-6));
        }
    }
    CHECK(back.serialize() == fx.index.serialize());
}

TEST_CASE("sample_negative_pair: rates, membership and fallback") {
    Fixture fx(32);
    const std::string id = fx.corpus[0].image_id;
    Rng rng(4);
    for (int i = 0; i < 50; ++i) {
        const auto keep = sample_negative_pair(id, &fx.index, fx.bank, 0.0, rng);
        REQUIRE(keep.match_label == 1);
        REQUIRE(keep.image_id == id);
    }
    std::set<std::string> hard;
    for (const auto& n : fx.index.neighbors(id)) hard.insert(fx.index.image_id(n.image));
    for (int i = 0; i < 200; ++i) {
        const auto neg = sample_negative_pair(id, &fx.index, fx.bank, 1.0, rng);
        REQUIRE(neg.match_label == 0);
        REQUIRE(hard.count(neg.image_id) == 1);
        const auto uni = sample_negative_pair(id, nullptr, fx.bank, 1.0, rng);
        REQUIRE(uni.image_id != id);
    }
    const std::vector<ImageTextExample> single(fx.corpus.begin(), fx.corpus.begin() + 1);
    const RegionBank lone(single, fx.vocab);
    CHECK_THROWS_WITH(sample_negative_pair(id, nullptr, lone, 1.0, rng), "no negative available");
}

TEST_CASE("topic targets: intersection semantics") {
    const std::vector<ImageTextExample> ex = {
        {"i", Matrix::Zero(2, 2), Matrix::Zero(2, 4), {"car", "tree"}, {"x", "x"}, {"a", "green", "car"}, {}}};
    const Vocabulary v = build_vocabulary(ex);
    const std::vector<int> text = {Vocabulary::kCls, v.index("a"), v.index("green"), v.index("car"), Vocabulary::kSep};
    const auto y = build_topic_targets(text, std::vector<int>{v.index("car"), v.index("tree")}, v);
    CHECK(y.sum() == 1.0);
    CHECK(y(v.index("car")) == 1.0);
    CHECK(build_topic_targets(text, std::vector<int>{v.index("tree")}, v).sum() == 0.0);
    const auto tok = build_topic_targets(std::vector<int>{2, v.index("car"), v.index("tree"), v.index("car"), 3},
                                         std::vector<int>{v.index("car"), v.index("tree"), v.index("car")}, v);
    CHECK(tok.sum() == 2.0);
}

TEST_CASE("build_batch: configuration errors") {
    Fixture fx(33);
    const auto b = fx.batch();
    CHECK_THROWS_WITH(build_batch(b, TaskSet{Task::ITM_HS}, fx.vocab, {}, nullptr, &fx.bank, 0),
                      doctest::Contains("hard sample index"));
    CHECK_THROWS_WITH(build_batch(b, TaskSet{Task::ITM_HS}, fx.vocab, {}, &fx.index, nullptr, 0),
                      doctest::Contains("region bank"));
    CHECK_THROWS_WITH(build_batch(std::span<const StageExample* const>{}, TaskSet{Task::MLM}, fx.vocab, {}, nullptr,
                                  nullptr, 0),
                      "empty batch");
}

TEST_CASE("property: build_batch invariants") {
    gen::Source src(26);
    for (int trial = 0; trial < 40; ++trial) {
        Fixture fx(src.seed(), src.integer(3, 10), src.integer(3, 10));
        TransformConfig cfg;
        cfg.token_mask_rate = src.real(0.05, 0.6);
        cfg.region_mask_rate = src.real(0.05, 0.6);
        cfg.shuffle_rate = src.real(0.0, 0.8);
        cfg.replace_rate = src.real(0.0, 1.0);
        const TaskSet tasks{Task::MLM, Task::MRFR, Task::MOC, Task::IFRS, Task::TITS, Task::ITM_HS};
        const auto ptrs = fx.batch();
        const std::uint64_t seed = src.seed();
        const BatchInputs b = build_batch(ptrs, tasks, fx.vocab, cfg, &fx.index, &fx.bank, seed);
        const BatchInputs again = build_batch(ptrs, tasks, fx.vocab, cfg, &fx.index, &fx.bank, seed);
        REQUIRE(b.text_ids == again.text_ids);
        REQUIRE(b.match_label == again.match_label);

        for (int i = 0; i < b.batch_size; ++i) {
            const auto ui = static_cast<std::size_t>(i);
            const auto& ex = *ptrs[ui];
            REQUIRE(std::count(b.text_valid[ui].begin(), b.text_valid[ui].end(), 1) ==
                    static_cast<long>(ex.text_ids.size()));
            const RegionSet& paired = fx.bank.at(b.image_ids[ui]);
            REQUIRE(std::count(b.region_valid[ui].begin(), b.region_valid[ui].end(), 1) == paired.size());
            if (b.match_label[ui] == 1) REQUIRE(b.image_ids[ui] == ex.image_id);
            else REQUIRE(b.region_targets[ui].topRows(paired.size()) != ex.regions.features);

            for (const auto& t : b.shuffle_map[ui])
                for (int k = 0; k < 3; ++k) REQUIRE(b.region_mask_positions[ui][static_cast<std::size_t>(t.start + k)] == 0);

            std::set<int> text(ex.text_ids.begin(), ex.text_ids.end()), cats(paired.category_ids.begin(), paired.category_ids.end());
            int expected = 0;
            for (int id : text)
                if (!fx.vocab.is_special(id) && id != fx.vocab.comma() && cats.count(id)) ++expected;
            REQUIRE(b.topic_targets[ui].sum() == expected);
        }
    }
}

TEST_CASE("build_batch: seed changes transforms but not content") {
    Fixture fx(34);
    const auto ptrs = fx.batch();
    const TaskSet tasks{Task::MLM, Task::MRFR};
    const auto a = build_batch(ptrs, tasks, fx.vocab, {}, nullptr, nullptr, 1);
    const auto b = build_batch(ptrs, tasks, fx.vocab, {}, nullptr, nullptr, 2);
    CHECK(a.region_targets == b.region_targets);
    CHECK(a.image_ids == b.image_ids);
    CHECK((a.text_mask_positions != b.text_mask_positions || a.region_mask_positions != b.region_mask_positions));
}
