// SPDX-License-Identifier: Apache-2.0

#include "generators.hpp"
#include "oracles.hpp"
#include "msp/objective.hpp"
#include "msp/verify.hpp"

#include <doctest.h>

#include <cmath>
#include <functional>

using namespace msp;

namespace {

constexpr int kTrials = 1000;
constexpr double kTol = 1e-6;

// Central differences of a scalar function of one matrix.
Matrix numeric_grad(const Matrix& x, const std::function<double(const Matrix&)>& f, double h = 1e-6) {
    Matrix g(x.rows(), x.cols());
    Matrix probe = x;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double keep = probe.data()[i];
        probe.data()[i] = keep + h;
        const double up = f(probe);
        probe.data()[i] = keep - h;
        const double down = f(probe);
        probe.data()[i] = keep;
        g.data()[i] = (up - down) / (2 * h);
    }
    return g;
}

bool close(const Matrix& a, const Matrix& b, double tol) { return (a - b).cwiseAbs().maxCoeff() <= tol; }

} // namespace

TEST_CASE("mlm matches the loop oracle on random instances") {
    gen::Source src(51);
    for (int t = 0; t < kTrials; ++t) {
        const int rows = src.integer(1, 12), v = src.integer(2, 20);
        const Matrix logits = src.matrix(rows, v, 4.0);
        const auto mask = src.mask(rows);
        const auto targets = src.labels(rows, v);
        const auto r = loss_mlm(logits, mask, targets);
        REQUIRE(std::abs(r.value - oracle::mlm(oracle::to_grid(logits), mask, targets)) <= kTol);
        REQUIRE(r.value >= 0.0);
        if (t < 50)
            REQUIRE(close(r.grad, numeric_grad(logits, [&](const Matrix& x) { return oracle::mlm(oracle::to_grid(x), mask, targets); }), 1e-6));
    }
}

TEST_CASE("mrfr matches the loop oracle on random instances") {
    gen::Source src(52);
    for (int t = 0; t < kTrials; ++t) {
        const int rows = src.integer(1, 12), d = src.integer(1, 8);
        const Matrix pred = src.matrix(rows, d), target = src.matrix(rows, d);
        const auto mask = src.mask(rows);
        const auto r = loss_mrfr(pred, mask, target);
        REQUIRE(std::abs(r.value - oracle::mrfr(oracle::to_grid(pred), mask, oracle::to_grid(target))) <= kTol);
        if (t < 50)
            REQUIRE(close(r.grad, numeric_grad(pred, [&](const Matrix& x) {
                              return oracle::mrfr(oracle::to_grid(x), mask, oracle::to_grid(target));
                          }), 1e-6));
    }
}

TEST_CASE("moc matches the loop oracle on random instances") {
    gen::Source src(53);
    for (int t = 0; t < kTrials; ++t) {
        const int rows = src.integer(1, 12), v = src.integer(2, 20), na = src.integer(2, 6);
        const Matrix cat = src.matrix(rows, v, 3.0), attr = src.matrix(rows, na, 3.0);
        const auto mask = src.mask(rows);
        const auto ct = src.labels(rows, v), at = src.labels(rows, na);
        const auto r = loss_moc(cat, attr, mask, ct, at);
        REQUIRE(std::abs(r.value - oracle::moc(oracle::to_grid(cat), oracle::to_grid(attr), mask, ct, at)) <= kTol);
        if (t < 50) {
            REQUIRE(close(r.grad_first, numeric_grad(cat, [&](const Matrix& x) {
                              return oracle::moc(oracle::to_grid(x), oracle::to_grid(attr), mask, ct, at);
                          }), 1e-6));
            REQUIRE(close(r.grad_second, numeric_grad(attr, [&](const Matrix& x) {
                              return oracle::moc(oracle::to_grid(cat), oracle::to_grid(x), mask, ct, at);
                          }), 1e-6));
        }
    }
}

TEST_CASE("ifrs matches the loop oracle on random instances") {
    gen::Source src(54);
    for (int t = 0; t < kTrials; ++t) {
        const int m = src.integer(3, 15), d = src.integer(1, 8);
        const Matrix pred = src.matrix(m, d), original = src.matrix(m, d);
        std::vector<ShuffledTriplet> map;
        std::vector<int> starts;
        for (int s = 0; s + 3 <= m; s += 3)
            if (src.coin(0.4)) {
                map.push_back({s, non_identity_permutations()[static_cast<std::size_t>(src.integer(0, 4))]});
                starts.push_back(s);
            }
        const auto r = loss_ifrs(pred, map, original);
        REQUIRE(std::abs(r.value - oracle::ifrs(oracle::to_grid(pred), starts, oracle::to_grid(original))) <= kTol);
        REQUIRE(r.count == static_cast<int>(map.size()));
        if (t < 50)
            REQUIRE(close(r.grad, numeric_grad(pred, [&](const Matrix& x) {
                              return oracle::ifrs(oracle::to_grid(x), starts, oracle::to_grid(original));
                          }), 1e-6));
    }
}

TEST_CASE("topic matches the loop oracle on random instances") {
    gen::Source src(55);
    for (int t = 0; t < kTrials; ++t) {
        const int rows = src.integer(1, 4), v = src.integer(2, 20);
        const Matrix logits = src.matrix(rows, v, 6.0);
        Matrix y(rows, v);
        for (Eigen::Index i = 0; i < y.size(); ++i) y.data()[i] = src.coin(0.3);
        const auto r = loss_topic(logits, y);
        REQUIRE(std::abs(r.value - oracle::topic(oracle::to_grid(logits), oracle::to_grid(y))) <= kTol);
        if (t < 50)
            REQUIRE(close(r.grad, numeric_grad(logits, [&](const Matrix& x) {
                              return oracle::topic(oracle::to_grid(x), oracle::to_grid(y));
                          }), 1e-6));
    }
}

TEST_CASE("itm matches the loop oracle on random instances") {
    gen::Source src(56);
    for (int t = 0; t < kTrials; ++t) {
        const int n = src.integer(1, 4);
        const Matrix logits = src.matrix(n, 1, 8.0);
        const auto labels = src.labels(n, 2);
        const auto r = loss_itm_hs(logits, labels);
        std::vector<double> l(logits.data(), logits.data() + n);
        REQUIRE(std::abs(r.value - oracle::itm(l, labels)) <= kTol);
        if (t < 50)
            REQUIRE(close(r.grad, numeric_grad(logits, [&](const Matrix& x) {
                              return oracle::itm(std::vector<double>(x.data(), x.data() + n), labels);
                          }), 1e-6));
    }
}

TEST_CASE("analytic values") {
    SUBCASE("mlm") {
        Matrix sharp = Matrix::Zero(2, 5);
        sharp(0, 3) = sharp(1, 1) = 60.0;
        CHECK(loss_mlm(sharp, std::vector<std::uint8_t>{1, 1}, std::vector<int>{3, 1}).value < 1e-20);
        CHECK(loss_mlm(Matrix::Zero(3, 7), std::vector<std::uint8_t>{1, 0, 1}, std::vector<int>{0, 0, 6}).value ==
              doctest::Approx(std::log(7.0)));
        CHECK_THROWS_WITH(loss_mlm(Matrix::Zero(2, 3), std::vector<std::uint8_t>{0, 0}, std::vector<int>{0, 0}),
                          doctest::Contains("no masked"));
    }
    SUBCASE("mrfr") {
        const Matrix target = Matrix::Constant(2, 3, 0.25);
        Matrix pred = target;
        CHECK(loss_mrfr(pred, std::vector<std::uint8_t>{1, 1}, target).value == 0.0);
        pred(0, 2) += 1.0;
        CHECK(loss_mrfr(pred, std::vector<std::uint8_t>{1, 0}, target).value == doctest::Approx(1.0));
    }
    SUBCASE("moc") {
        Matrix cat = Matrix::Zero(1, 4);
        cat(0, 2) = 80.0;
        CHECK(loss_moc(cat, Matrix::Zero(1, 5), std::vector<std::uint8_t>{1}, std::vector<int>{2}, std::vector<int>{0})
                  .value == doctest::Approx(std::log(5.0)));
    }
    SUBCASE("ifrs") {
        CHECK(loss_ifrs(Matrix::Ones(3, 2), std::vector<ShuffledTriplet>{}, Matrix::Zero(3, 2)).value == 0.0);
        Matrix orig(3, 2), pred(3, 2);
        orig << 1, 2, 3, 4, 5, 6;
        pred << 2, 2, 3, 2, 5, 3;
        const std::vector<ShuffledTriplet> map = {{0, {1, 2, 0}}};
        CHECK(loss_ifrs(orig, map, orig).value == 0.0);
        // (1 + 0 + 0 + 4 + 0 + 9) / 3
        CHECK(loss_ifrs(pred, map, orig).value == doctest::Approx(14.0 / 3.0));
        CHECK(loss_ifrs(orig + 3.0 * (pred - orig), map, orig).value == doctest::Approx(9.0 * 14.0 / 3.0));
        CHECK_THROWS_WITH(loss_ifrs(pred, std::vector<ShuffledTriplet>{{2, {1, 2, 0}}}, orig), doctest::Contains("out-of-range"));
    }
    SUBCASE("topic and itm") {
        Matrix y(2, 3);
        y << 1, 0, 1, 0, 0, 1;
        CHECK(loss_topic(Matrix::Zero(2, 3), y).value == doctest::Approx(std::log(2.0)));
        CHECK(loss_topic(80.0 * (2.0 * y.array() - 1.0).matrix(), y).value < 1e-30);
        CHECK(loss_itm_hs(Matrix::Zero(2, 1), std::vector<int>{0, 1}).value == doctest::Approx(std::log(2.0)));
        CHECK(loss_itm_hs(Matrix::Constant(1, 1, 50.0), std::vector<int>{1}).value < 1e-20);
    }
}

TEST_CASE("property: losses are non-negative, finite, and ifrs scales quadratically") {
    gen::Source src(57);
    for (int t = 0; t < 300; ++t) {
        const int m = 3 * src.integer(1, 4), d = src.integer(1, 5);
        const Matrix orig = src.matrix(m, d), pred = src.matrix(m, d, 100.0);
        const std::vector<ShuffledTriplet> map = draw_triplet_shuffle(m, 1.0, src.rng);
        const double c = src.real(1.0, 5.0);
        const double base = loss_ifrs(pred, map, orig).value;
        REQUIRE(std::isfinite(base));
        REQUIRE(loss_ifrs(orig + c * (pred - orig), map, orig).value == doctest::Approx(c * c * base).epsilon(1e-12));
        const Matrix big = src.matrix(2, 6, 800.0);
        REQUIRE(std::isfinite(loss_mlm(big, std::vector<std::uint8_t>{1, 1}, src.labels(2, 6)).value));
        Matrix y = Matrix::Zero(2, 6);
        y(0, 0) = 1.0;
        const double topic = loss_topic(big, y).value;
        REQUIRE(std::isfinite(topic));
        REQUIRE(topic >= 0.0);
    }
}

TEST_CASE("aggregate: weighted sum, inactive tasks and unknown names") {
    gen::Source src(58);
    for (int t = 0; t < 200; ++t) {
        std::map<std::string, double> computed;
        std::vector<std::string> active;
        std::map<std::string, double> w;
        double expected = 0.0;
        for (Task task : kAllTasks) {
            const std::string name(to_string(task));
            computed[name] = src.real(0.0, 5.0);
            w[name] = src.real(0.0, 3.0);
            if (src.coin()) {
                active.push_back(name);
                expected += w[name] * computed[name];
            }
        }
        const auto r = aggregate(computed, active, TaskWeights::parse(w));
        REQUIRE(r.aggregate == doctest::Approx(expected).epsilon(1e-14));
        REQUIRE(r.losses.size() == active.size());
    }
    const std::map<std::string, double> one = {{"MLM", 1.25}};
    CHECK(aggregate(one, {"MLM"}).aggregate == 1.25);
    CHECK_THROWS_WITH(aggregate(one, {"QA"}), doctest::Contains("QA"));
}

TEST_CASE("objective: negatives only feed MLM and ITM_HS") {
    const auto corpus = gradient_check_corpus(3);
    const Vocabulary vocab = build_vocabulary(corpus);
    const StageCorpus stage = build_sentence_stage_corpus(corpus, vocab);
    const HardSampleIndex index = build_hard_sample_index(corpus, 3);
    const RegionBank bank(corpus, vocab);
    std::vector<const StageExample*> ptrs;
    for (const auto& e : stage.examples) ptrs.push_back(&e);

    TransformConfig cfg;
    cfg.replace_rate = 1.0;
    cfg.region_mask_rate = 0.5;
    const TaskSet sentence{Task::MLM, Task::MRFR, Task::MOC, Task::TITS, Task::ITM_HS};
    const BatchInputs b = build_batch(ptrs, sentence, vocab, cfg, &index, &bank, 5);
    REQUIRE(std::count(b.match_label.begin(), b.match_label.end(), 0) == b.batch_size);

    Model model(gradient_check_model_config(vocab, corpus[0].features.cols(), corpus[0].region_count()), 1);
    Tape tape;
    const auto res = pretraining_objective(model, tape, b, sentence);
    CHECK(res.report.counts.at(Task::MRFR) == 0);
    CHECK(res.report.counts.at(Task::MOC) == 0);
    CHECK(res.report.counts.at(Task::TITS) == 0);
    CHECK(res.report.aggregate == doctest::Approx(res.report.losses.at(Task::MLM) + res.report.losses.at(Task::ITM_HS)));
}

TEST_CASE("objective: removing ITM_HS changes only its own term") {
    const auto corpus = gradient_check_corpus(4);
    const Vocabulary vocab = build_vocabulary(corpus);
    const StageCorpus stage = build_sentence_stage_corpus(corpus, vocab);
    const HardSampleIndex index = build_hard_sample_index(corpus, 3);
    const RegionBank bank(corpus, vocab);
    std::vector<const StageExample*> ptrs;
    for (const auto& e : stage.examples) ptrs.push_back(&e);
    const TaskSet full{Task::MLM, Task::MRFR, Task::MOC, Task::TITS, Task::ITM_HS};
    const BatchInputs b = build_batch(ptrs, full, vocab, {}, &index, &bank, 9);
    Model model(gradient_check_model_config(vocab, corpus[0].features.cols(), corpus[0].region_count()), 2);

    TaskSet reduced = full;
    reduced.erase(Task::ITM_HS);
    Tape t1, t2;
    const auto a = pretraining_objective(model, t1, b, full).report;
    const auto r = pretraining_objective(model, t2, b, reduced).report;
    CHECK(r.losses.count(Task::ITM_HS) == 0);
    for (const auto& [task, value] : r.losses) CHECK(a.losses.at(task) == value);
    CHECK(a.aggregate - r.aggregate == doctest::Approx(a.losses.at(Task::ITM_HS)));
}

TEST_CASE("gradient check: every task on the toy model") {
    const auto corpus = gradient_check_corpus(0);
    const Vocabulary vocab = build_vocabulary(corpus);
    for (Task task : kAllTasks) {
        const BatchInputs b = gradient_check_batch(task, corpus, vocab, 0);
        Model model(gradient_check_model_config(vocab, corpus[0].features.cols(), corpus[0].region_count()), 7);
        CAPTURE(to_string(task));
        for (const auto& block : gradient_check(model, b, TaskSet{task})) {
            CAPTURE(block.name);
            CHECK(block.relative_error <= 1e-4);
        }
    }
}

TEST_CASE("training log line format") {
    LossReport r;
    r.active = TaskSet{Task::MLM};
    r.losses[Task::MLM] = 1.0 / 3.0;
    r.counts[Task::MLM] = 2;
    r.aggregate = 1.0 / 3.0;
    const std::string line = r.log_line(4, Granularity::Phrase);
    CHECK(line.find("0.333333") != std::string::npos);
    CHECK(line.find("PHRASE") != std::string::npos);
    CHECK(line.find('\n') == std::string::npos);
}
