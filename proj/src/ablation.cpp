// SPDX-License-Identifier: Apache-2.0

#include "msp/ablation.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cctype>

namespace msp {

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t");
    return std::string(s.substr(b, e - b + 1));
}

std::string strip_spaces(std::string_view s) {
    std::string out;
    for (char c : s)
        if (!std::isspace(static_cast<unsigned char>(c))) out += c;
    return out;
}

Granularity stage_letter(const std::string& s, std::string_view spec) {
    if (s == "T" || s == "TOKEN") return Granularity::Token;
    if (s == "P" || s == "PHRASE") return Granularity::Phrase;
    if (s == "S" || s == "SENTENCE") return Granularity::Sentence;
    throw Error(fmt::format("malformed ablation row '{}': unknown stage '{}'", spec, s));
}

char letter(Granularity g) {
    switch (g) {
    case Granularity::Token: return 'T';
    case Granularity::Phrase: return 'P';
    case Granularity::Sentence: return 'S';
    }
    return '?';
}

TaskSet joint_tasks(Granularity g) {
    TaskSet t = TaskSet::parse("MLM MRFR MOC");
    if (g == Granularity::Sentence) t.insert(Task::ITM_HS);
    return t;
}

TaskSet stage_tasks(const AblationRow& row, Granularity g) {
    TaskSet t = row.mode == ScheduleMode::Joint ? joint_tasks(g) : default_stage_tasks(g);
    for (Task r : row.removed.tasks()) t.erase(r);
    return t;
}

} // namespace

ExperimentData prepare_experiment(std::vector<ImageTextExample> corpus, std::size_t n_test, int top_m) {
    if (n_test < 1 || n_test + 3 > corpus.size())
        throw Error(fmt::format("cannot split {} images into train and a test split of {}", corpus.size(), n_test));
    ExperimentData d;
    d.vocab = build_vocabulary(corpus, question_tokens());
    d.test.assign(corpus.end() - static_cast<std::ptrdiff_t>(n_test), corpus.end());
    corpus.resize(corpus.size() - n_test);
    d.train = std::move(corpus);
    d.bank = RegionBank(d.train, d.vocab);
    d.index = build_hard_sample_index(d.train, top_m);
    for (Granularity g : {Granularity::Token, Granularity::Phrase, Granularity::Sentence})
        d.corpora.emplace(g, build_stage_corpus(g, d.train, d.vocab));

    std::set<std::string> cats;
    for (const auto* split : {&d.train, &d.test})
        for (const auto& ex : *split) cats.insert(ex.categories.begin(), ex.categories.end());
    const std::vector<std::string> classes(cats.begin(), cats.end());
    d.classification_train = build_classification_task(d.train, d.vocab, classes);
    d.classification_test = build_classification_task(d.test, d.vocab, classes);
    d.retrieval_test = build_retrieval_split(d.test, d.vocab);
    return d;
}

ModelConfig fit_model_config(ModelConfig mc, const ExperimentData& data) {
    mc.vocab_size = data.vocab.size();
    mc.n_attr = data.vocab.attribute_count();
    mc.d_roi = static_cast<int>(data.train.front().features.cols());
    int max_regions = 0;
    for (const auto* split : {&data.train, &data.test})
        for (const auto& ex : *split) max_regions = std::max(max_regions, static_cast<int>(ex.features.rows()));
    mc.max_regions = std::max(mc.max_regions, max_regions);
    mc.validate();
    return mc;
}

SchedulePlan AblationRow::plan(int epochs, int batch_size, double learning_rate, std::uint64_t seed) const {
    SchedulePlan p;
    p.mode = mode;
    p.seed = seed;
    for (Granularity g : stages) {
        StageSpec s;
        s.granularity = g;
        s.tasks = stage_tasks(*this, g);
        s.epochs = epochs;
        s.batch_size = batch_size;
        s.learning_rate = learning_rate;
        s.hard_negatives = mode == ScheduleMode::Sequential;
        p.stages.push_back(s);
    }
    return p;
}

TaskSet AblationRow::tasks() const {
    TaskSet all;
    for (Granularity g : stages)
        for (Task t : stage_tasks(*this, g).tasks()) all.insert(t);
    return all;
}

AblationRow parse_ablation_row(std::string_view spec) {
    std::string text = trim(spec);
    for (std::size_t pos; (pos = text.find("→")) != std::string::npos;) text.replace(pos, 3, "->");
    AblationRow row;
    std::string lower;
    for (char c : text) lower += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (lower == "vanilla" || lower == "none") {
        row.vanilla = true;
        row.label = "vanilla";
        return row;
    }

    std::size_t cut = 0;
    while (cut < text.size() && !(text[cut] == '-' && (cut + 1 >= text.size() || text[cut + 1] != '>'))) ++cut;
    const std::string plan_part = strip_spaces(text.substr(0, cut));
    if (plan_part.empty()) throw Error(fmt::format("malformed ablation row '{}': no stages", spec));

    std::vector<std::string> parts;
    if (plan_part.find('+') != std::string::npos) {
        row.mode = ScheduleMode::Joint;
        for (std::size_t b = 0, e; b <= plan_part.size(); b = e + 1) {
            e = plan_part.find('+', b);
            if (e == std::string::npos) e = plan_part.size();
            parts.push_back(plan_part.substr(b, e - b));
        }
    } else {
        for (std::size_t b = 0, e; b <= plan_part.size(); b = e + 2) {
            e = plan_part.find("->", b);
            if (e == std::string::npos) e = plan_part.size();
            parts.push_back(plan_part.substr(b, e - b));
            if (e == plan_part.size()) break;
        }
    }
    for (const auto& p : parts) {
        const Granularity g = stage_letter(p, spec);
        if (std::find(row.stages.begin(), row.stages.end(), g) != row.stages.end())
            throw Error(fmt::format("malformed ablation row '{}': stage {} listed twice", spec, p));
        row.stages.push_back(g);
    }

    if (cut < text.size()) {
        const std::string removals = text.substr(cut + 1);
        for (std::size_t b = 0, e; b <= removals.size(); b = e + 1) {
            e = removals.find('-', b);
            if (e == std::string::npos) e = removals.size();
            const std::string name = trim(removals.substr(b, e - b));
            if (name.empty()) throw Error(fmt::format("malformed ablation row '{}': empty task removal", spec));
            Task t;
            try {
                t = parse_task(name);
            } catch (const Error&) {
                throw Error(fmt::format("malformed ablation row '{}': unknown task '{}'", spec, name));
            }
            row.removed.insert(t);
        }
    }

    TaskSet full;
    for (Granularity g : row.stages)
        for (Task t : (row.mode == ScheduleMode::Joint ? joint_tasks(g) : default_stage_tasks(g)).tasks()) full.insert(t);
    for (Task t : row.removed.tasks())
        if (!full.contains(t))
            throw Error(fmt::format("malformed ablation row '{}': removes {} which the row does not run", spec, to_string(t)));
    for (Granularity g : row.stages)
        if (stage_tasks(row, g).empty())
            throw Error(fmt::format("malformed ablation row '{}': stage {} has no tasks left", spec, to_string(g)));

    for (std::size_t i = 0; i < row.stages.size(); ++i) {
        if (i) row.label += row.mode == ScheduleMode::Joint ? "+" : "->";
        row.label += letter(row.stages[i]);
    }
    for (Task t : row.removed.tasks()) row.label += fmt::format(" -{}", to_string(t));
    return row;
}

const std::vector<std::string>& reference_grid() {
    static const std::vector<std::string> rows = {
        "vanilla", "S", "S -ITM_HS", "S -ITM_HS -TITS", "T+P+S", "T->S", "T->S -IFRS",
        "P->S", "P->S -TITP", "T->P->S", "T->P->S -TITP", "S->P->T", "P->T->S",
    };
    return rows;
}

const std::vector<std::string>& ablation_columns() {
    static const std::vector<std::string> cols = {"VQA", "IR_avg", "ZS_IR_avg", "TR_avg", "ZS_TR_avg"};
    return cols;
}

std::vector<MetricsRow> run_ablation_grid(std::span<const AblationRow> rows, const ExperimentData& data,
                                          const AblationSettings& settings,
                                          const std::function<void(const MetricsRow&)>& progress) {
    const ModelConfig mc = fit_model_config(settings.model, data);
    std::vector<MetricsRow> out;
    for (const auto& row : rows) {
        Model model(mc, derive_seed(settings.seed, 0));
        if (!row.vanilla) {
            TrainingContext ctx;
            ctx.vocab = &data.vocab;
            ctx.index = &data.index;
            ctx.bank = &data.bank;
            ctx.transforms = settings.transforms;
            run_schedule(model, row.plan(settings.epochs, settings.batch_size, settings.learning_rate, settings.seed),
                         data.corpora, ctx);
        }

        MetricsRow m;
        m.name = row.label;
        m.tasks = row.vanilla ? "None" : row.tasks().str();

        Model cls = model;
        finetune_classification(cls, data.classification_train, data.vocab, settings.classification);
        const double vqa = 100.0 * classification_accuracy(cls, data.classification_test, data.vocab);

        Model ret = model;
        finetune_retrieval(ret, data.corpora.at(Granularity::Sentence), data.index, data.bank, data.vocab,
                           settings.retrieval);
        const auto ft = evaluate_retrieval(model_score_matrix(ret, data.retrieval_test, data.vocab), data.retrieval_test,
                                           kDefaultRecallKs);

        std::optional<double> zs_ir, zs_tr;
        if (model.trained_heads.count(std::string(kHeadMatch))) {
            const auto zs = zero_shot_retrieval(model, data.retrieval_test, data.vocab, kDefaultRecallKs);
            zs_ir = 100.0 * zs.image_retrieval.average();
            zs_tr = 100.0 * zs.text_retrieval.average();
        }
        m.values = {{"VQA", vqa},
                    {"IR_avg", 100.0 * ft.image_retrieval.average()},
                    {"ZS_IR_avg", zs_ir},
                    {"TR_avg", 100.0 * ft.text_retrieval.average()},
                    {"ZS_TR_avg", zs_tr}};
        spdlog::info("ablation row '{}' done", m.name);
        if (progress) progress(m);
        out.push_back(std::move(m));
    }
    return out;
}

} // namespace msp
