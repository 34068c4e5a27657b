// SPDX-License-Identifier: Apache-2.0
//
// msp: corpus generation, staged pre-training, fine-tuning, evaluation,
// ablation and self-verification from one JSON run config.

#include "msp/config.hpp"
#include "msp/verify.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include <filesystem>
#include <iostream>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kManifestVersion = 1;
constexpr int kCorpusFormatVersion = 1;

struct Options {
    std::string command;
    fs::path config;
    std::optional<std::uint64_t> seed;
    fs::path out = "msp_out";
    std::vector<std::string> overrides;
};

// Tracks the current stage and outputs of one command for the manifest.
class Run {
public:
    explicit Run(Options opts) : opts_(std::move(opts)) {}

    const Options& options() const { return opts_; }
    msp::RunConfig& config() { return cfg_; }

    void stage(std::string name) {
        spdlog::info("{}: {}", opts_.command, name);
        stage_ = std::move(name);
    }

    void output(const std::string& name, const fs::path& path) {
        outputs_[name] = {{"path", path.string()}, {"digest", msp::file_digest(path)}};
    }

    fs::path resolve(const fs::path& configured, const std::string& fallback) const {
        return configured.empty() ? opts_.out / fallback : configured;
    }

    void load_config() {
        stage("config");
        auto overrides = opts_.overrides;
        if (opts_.seed) overrides.push_back(fmt::format("seed={}", *opts_.seed));
        cfg_ = msp::load_run_config(opts_.config, overrides);
        if (opts_.seed) cfg_.plan.seed = *opts_.seed;
        snapshot_ = json::parse(msp::run_config_to_json(cfg_));
        fs::create_directories(opts_.out);
    }

    void write_manifest(const std::string& error) const {
        json m = {
            {"manifest_version", kManifestVersion},
            {"command", opts_.command},
            {"status", error.empty() ? "ok" : "failed"},
            {"config_path", opts_.config.string()},
            {"overrides", opts_.overrides},
            {"seed", snapshot_.is_null() ? json() : json(cfg_.seed)},
            {"config", snapshot_},
            {"formats", {{"checkpoint", msp::kCheckpointVersion}, {"corpus", kCorpusFormatVersion}}},
            {"outputs", outputs_},
        };
        if (!error.empty()) {
            m["failed_stage"] = stage_;
            m["error"] = error;
        }
        std::error_code ec;
        fs::create_directories(opts_.out, ec);
        msp::write_file(opts_.out / fmt::format("{}.manifest.json", opts_.command), m.dump(2) + "\n");
    }

private:
    Options opts_;
    msp::RunConfig cfg_;
    json snapshot_;
    std::string stage_ = "start";
    json outputs_ = json::object();
};

msp::ExperimentData load_experiment(Run& run) {
    auto& cfg = run.config();
    const fs::path corpus_path = run.resolve(cfg.paths.corpus, "corpus.jsonl");
    run.stage("load corpus");
    if (!fs::exists(corpus_path)) throw msp::Error(fmt::format("corpus file '{}' does not exist", corpus_path.string()));
    auto data = msp::prepare_experiment(msp::load_corpus(corpus_path), cfg.corpus.n_test, cfg.corpus.top_m);
    if (!cfg.paths.hard_index.empty() && fs::exists(cfg.paths.hard_index)) {
        run.stage("load hard sample index");
        data.index = msp::HardSampleIndex::load(cfg.paths.hard_index);
        for (const auto& ex : data.train)
            if (data.index.find(ex.image_id) < 0)
                throw msp::Error(fmt::format("hard sample index lacks training image '{}'", ex.image_id));
    }
    return data;
}

msp::Checkpoint load_matching_checkpoint(Run& run, const fs::path& path, const msp::ExperimentData& data) {
    run.stage("load checkpoint");
    if (!fs::exists(path)) throw msp::Error(fmt::format("checkpoint '{}' does not exist", path.string()));
    auto ckpt = msp::load_checkpoint(path);
    if (!(ckpt.vocab == data.vocab))
        throw msp::Error("checkpoint/config mismatch: checkpoint vocabulary differs from the configured corpus");
    if (ckpt.model.config().d_roi != static_cast<int>(data.train.front().features.cols()))
        throw msp::Error("checkpoint/config mismatch: region feature width differs from the configured corpus");
    return ckpt;
}

int cmd_generate(Run& run) {
    auto& cfg = run.config();
    run.stage("generate");
    const auto corpus = msp::generate_synthetic_corpus(cfg.corpus.synthetic);
    const fs::path path = run.resolve(cfg.paths.corpus, "corpus.jsonl");
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    msp::save_corpus(path, corpus);
    run.output("corpus", path);
    fmt::print("wrote {} images to {}\n", corpus.size(), path.string());
    return 0;
}

int cmd_pretrain(Run& run) {
    auto& cfg = run.config();
    const auto data = load_experiment(run);
    const fs::path index_path = run.resolve(cfg.paths.hard_index, "hard_index.txt");
    if (!fs::exists(index_path)) {
        data.index.save(index_path);
        run.output("hard_index", index_path);
    }

    run.stage("pretrain");
    msp::Model model(msp::fit_model_config(cfg.model, data), msp::derive_seed(cfg.seed, 0));
    msp::TrainingContext ctx;
    ctx.vocab = &data.vocab;
    ctx.index = &data.index;
    ctx.bank = &data.bank;
    ctx.transforms = cfg.transforms;
    ctx.weights = cfg.weights;
    const auto log = msp::run_schedule(model, cfg.plan, data.corpora, ctx);

    run.stage("write outputs");
    const fs::path ckpt = run.resolve(cfg.paths.checkpoint, "pretrained.ckpt");
    const fs::path log_path = run.resolve(cfg.paths.logs, "pretrain_log.jsonl");
    for (const auto& p : {ckpt, log_path})
        if (p.has_parent_path()) fs::create_directories(p.parent_path());
    msp::save_checkpoint(ckpt, model, data.vocab);
    msp::write_file(log_path, log.to_jsonl());
    run.output("checkpoint", ckpt);
    run.output("log", log_path);
    fmt::print("{} steps, final aggregate {:.6f}, checkpoint {} ({})\n", log.steps.size(),
               log.steps.empty() ? 0.0 : log.steps.back().report.aggregate, ckpt.string(), model.weights_digest());
    return 0;
}

int cmd_finetune(Run& run) {
    auto& cfg = run.config();
    const auto data = load_experiment(run);
    const fs::path src = run.resolve(cfg.paths.checkpoint, "pretrained.ckpt");
    auto ckpt = load_matching_checkpoint(run, src, data);

    run.stage(fmt::format("finetune {}", cfg.finetune.task));
    msp::FinetuneLog log;
    if (cfg.finetune.task == "classification")
        log = msp::finetune_classification(ckpt.model, data.classification_train, data.vocab, cfg.finetune.config);
    else
        log = msp::finetune_retrieval(ckpt.model, data.corpora.at(msp::Granularity::Sentence), data.index, data.bank,
                                      data.vocab, cfg.finetune.config);

    run.stage("write outputs");
    const fs::path out = run.options().out / fmt::format("finetuned_{}.ckpt", cfg.finetune.task);
    const fs::path log_path = run.options().out / fmt::format("finetune_{}_log.jsonl", cfg.finetune.task);
    msp::save_checkpoint(out, ckpt.model, data.vocab);
    std::string lines;
    for (std::size_t i = 0; i < log.losses.size(); ++i)
        lines += fmt::format("{{\"step\":{},\"loss\":{}}}\n", i, msp::fixed6(log.losses[i]));
    msp::write_file(log_path, lines);
    run.output("checkpoint", out);
    run.output("log", log_path);
    fmt::print("{} steps, final loss {:.6f}, checkpoint {}\n", log.losses.size(),
               log.losses.empty() ? 0.0 : log.losses.back(), out.string());
    return 0;
}

int cmd_evaluate(Run& run) {
    auto& cfg = run.config();
    const auto data = load_experiment(run);
    const fs::path src = run.resolve(cfg.paths.checkpoint, "pretrained.ckpt");
    auto ckpt = load_matching_checkpoint(run, src, data);
    auto& model = ckpt.model;

    run.stage("evaluate");
    msp::MetricsRow row;
    row.name = src.stem().string();
    std::optional<double> acc;
    if (model.has_classifier() && model.classifier_classes() == data.classification_test.n_classes)
        acc = 100.0 * msp::classification_accuracy(model, data.classification_test, data.vocab);
    row.values.emplace_back("accuracy", acc);

    std::optional<msp::RetrievalMetrics> ret;
    if (model.trained_heads.count(std::string(msp::kHeadMatch)))
        ret = msp::evaluate_retrieval(msp::model_score_matrix(model, data.retrieval_test, data.vocab), data.retrieval_test,
                                      msp::kDefaultRecallKs);
    for (const char* dir : {"IR", "TR"})
        for (int k : msp::kDefaultRecallKs) {
            std::optional<double> v;
            if (ret) v = 100.0 * (dir[0] == 'I' ? ret->image_retrieval : ret->text_retrieval).at(k);
            row.values.emplace_back(fmt::format("{}@{}", dir, k), v);
        }

    run.stage("write outputs");
    const fs::path reports = run.resolve(cfg.paths.reports, "reports");
    fs::create_directories(reports);
    const std::vector<msp::MetricsRow> rows = {row};
    const fs::path csv = reports / "metrics.csv", js = reports / "metrics.json";
    msp::write_file(csv, msp::metrics_table(rows));
    msp::write_file(js, msp::metrics_json(rows));
    run.output("metrics_csv", csv);
    run.output("metrics_json", js);
    fmt::print("{}", msp::metrics_table(rows));
    return 0;
}

int cmd_ablate(Run& run) {
    auto& cfg = run.config();
    const auto data = load_experiment(run);
    run.stage("parse grid");
    std::vector<msp::AblationRow> rows;
    for (const auto& r : cfg.ablation.rows) rows.push_back(msp::parse_ablation_row(r));

    run.stage("ablate");
    const auto results = msp::run_ablation_grid(rows, data, cfg.ablation.settings, [](const msp::MetricsRow& m) {
        fmt::print("row done: {}\n", m.name);
    });

    run.stage("write outputs");
    const fs::path reports = run.resolve(cfg.paths.reports, "reports");
    fs::create_directories(reports);
    const fs::path csv = reports / "ablation.csv", js = reports / "ablation.json";
    msp::write_file(csv, msp::metrics_table(results));
    msp::write_file(js, msp::metrics_json(results));
    run.output("ablation_csv", csv);
    run.output("ablation_json", js);
    fmt::print("{}", msp::metrics_table(results));
    return 0;
}

int cmd_verify(Run& run) {
    auto& cfg = run.config();
    run.stage("verify");
    msp::VerifyOptions vo;
    vo.seed = cfg.seed;
    json checks = json::array();
    bool ok = true;
    msp::run_verification(vo, [&](const msp::VerifyCheck& c) {
        fmt::print("{} {}: {}\n", c.passed ? "PASS" : "FAIL", c.name, c.detail);
        checks.push_back({{"name", c.name}, {"passed", c.passed}, {"detail", c.detail}});
        ok = ok && c.passed;
    });

    run.stage("write outputs");
    const fs::path reports = run.resolve(cfg.paths.reports, "reports");
    fs::create_directories(reports);
    const fs::path path = reports / "verify.json";
    msp::write_file(path, json({{"passed", ok}, {"checks", checks}}).dump(2) + "\n");
    run.output("verify_report", path);
    if (!ok) throw msp::Error("verification failed");
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    msp::init_logging();
    CLI::App app{"Multi-stage vision-language pre-training toolkit"};
    app.require_subcommand(1, 1);
    Options opts;

    const std::vector<std::pair<std::string, std::string>> commands = {
        {"generate", "Write a synthetic corpus"},
        {"pretrain", "Run the staged pre-training schedule"},
        {"finetune", "Fine-tune a pre-trained checkpoint"},
        {"evaluate", "Report accuracy and recall for a checkpoint"},
        {"ablate", "Run the stage/task ablation grid"},
        {"verify", "Run gradient, loss, transform and parameter-count checks"},
    };
    for (const auto& [name, help] : commands) {
        auto* sub = app.add_subcommand(name, help);
        sub->add_option("--config", opts.config, "Run config (JSON)")->required();
        sub->add_option("--seed", opts.seed, "Override the run seed");
        sub->add_option("--out", opts.out, "Output directory")->capture_default_str();
        sub->add_option("--override", opts.overrides, "KEY=VALUE config override (repeatable)");
        sub->callback([&opts, n = name] { opts.command = n; });
    }
    CLI11_PARSE(app, argc, argv);

    Run run(opts);
    try {
        run.load_config();
        int rc = 0;
        if (opts.command == "generate") rc = cmd_generate(run);
        else if (opts.command == "pretrain") rc = cmd_pretrain(run);
        else if (opts.command == "finetune") rc = cmd_finetune(run);
        else if (opts.command == "evaluate") rc = cmd_evaluate(run);
        else if (opts.command == "ablate") rc = cmd_ablate(run);
        else rc = cmd_verify(run);
        run.write_manifest("");
        return rc;
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        try {
            run.write_manifest(e.what());
        } catch (const std::exception& m) {
            spdlog::error("could not write manifest: {}", m.what());
        }
        return 1;
    }
}
