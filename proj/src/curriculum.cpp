// SPDX-License-Identifier: Apache-2.0

#include "msp/curriculum.hpp"

#include "msp/objective.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <numeric>

namespace msp {

namespace {

constexpr std::uint64_t kOrderStream = 0x6f72646572ULL;
constexpr std::uint64_t kDropoutStream = 0x64726f70ULL;

struct Batching {
    const StageSpec* spec = nullptr;
    const StageCorpus* corpus = nullptr;
    int stage_index = 0;
    std::uint64_t seed = 0;
    TransformConfig transforms;
    long local_step = 0;

    std::vector<std::vector<const StageExample*>> epoch_batches(int epoch) const {
        std::vector<std::size_t> order(corpus->size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng(derive_seed(derive_seed(seed, kOrderStream), static_cast<std::uint64_t>(epoch)));
        std::shuffle(order.begin(), order.end(), rng);
        std::vector<std::vector<const StageExample*>> out;
        const auto b = static_cast<std::size_t>(spec->batch_size);
        for (std::size_t start = 0; start < order.size(); start += b) {
            std::vector<const StageExample*> batch;
            for (std::size_t k = start; k < std::min(order.size(), start + b); ++k) batch.push_back(&corpus->examples[order[k]]);
            out.push_back(std::move(batch));
        }
        return out;
    }
};

void check_requirements(const StageSpec& spec, const StageCorpus* corpus, const TrainingContext& ctx) {
    spec.validate();
    const auto g = to_string(spec.granularity);
    if (!corpus) throw Error(fmt::format("missing corpus for stage {}", g));
    if (corpus->granularity != spec.granularity)
        throw Error(fmt::format("stage {} was given a {} corpus", g, to_string(corpus->granularity)));
    if (corpus->empty()) throw Error(fmt::format("empty stage corpus ({})", g));
    if (!ctx.vocab) throw Error("configuration error: no vocabulary");
    if (spec.tasks.contains(Task::ITM_HS)) {
        if (!ctx.bank) throw Error(fmt::format("configuration error: ITM_HS in stage {} needs a region bank", g));
        if (spec.hard_negatives && !ctx.index)
            throw Error(fmt::format("configuration error: ITM_HS in stage {} needs a hard sample index", g));
    }
}

StepRecord train_step(Model& model, Adam& adam, Batching& state, std::span<const StageExample* const> examples,
                      const TrainingContext& ctx, long global_step) {
    const std::uint64_t step_seed = derive_seed(state.seed, static_cast<std::uint64_t>(state.local_step));
    const BatchInputs batch =
        build_batch(examples, state.spec->tasks, *ctx.vocab, state.transforms, ctx.index, ctx.bank, step_seed);
    Rng dropout_rng(derive_seed(derive_seed(state.seed, kDropoutStream), static_cast<std::uint64_t>(state.local_step)));

    model.zero_grad();
    Tape tape;
    const auto res = pretraining_objective(model, tape, batch, state.spec->tasks, ctx.weights,
                                           ForwardOptions{true, &dropout_rng});
    tape.backward(res.total);

    StepRecord rec;
    rec.step = global_step;
    rec.stage_index = state.stage_index;
    rec.granularity = state.spec->granularity;
    rec.optimizer_steps_before = adam.steps();
    rec.report = res.report;

    adam.step(model.parameters());
    model.trained_heads.insert(res.heads_used.begin(), res.heads_used.end());
    ++state.local_step;
    if (ctx.hooks.on_step) ctx.hooks.on_step(rec);
    spdlog::debug("{}", rec.report.log_line(rec.step, rec.granularity));
    return rec;
}

Batching make_batching(const StageSpec& spec, const StageCorpus& corpus, const TrainingContext& ctx, int stage_index) {
    Batching b;
    b.spec = &spec;
    b.corpus = &corpus;
    b.stage_index = stage_index;
    b.seed = derive_seed(ctx.seed, static_cast<std::uint64_t>(stage_index));
    b.transforms = ctx.transforms;
    b.transforms.hard_negatives = spec.hard_negatives;
    return b;
}

TrainingLog run_stage_from(Model& model, const StageSpec& spec, const StageCorpus& corpus, const TrainingContext& ctx,
                           int stage_index, long first_step) {
    check_requirements(spec, &corpus, ctx);
    Adam adam(AdamConfig{spec.learning_rate});
    Batching state = make_batching(spec, corpus, ctx, stage_index);
    if (ctx.hooks.on_stage_begin) ctx.hooks.on_stage_begin(stage_index, model);
    TrainingLog log;
    long step = first_step;
    for (int epoch = 0; epoch < spec.epochs; ++epoch)
        for (const auto& batch : state.epoch_batches(epoch))
            log.steps.push_back(train_step(model, adam, state, batch, ctx, step++));
    if (ctx.hooks.on_stage_end) ctx.hooks.on_stage_end(stage_index, model);
    spdlog::info("stage {} ({}) finished after {} steps", stage_index, to_string(spec.granularity), log.steps.size());
    return log;
}

} // namespace

std::string_view to_string(ScheduleMode m) { return m == ScheduleMode::Sequential ? "SEQUENTIAL" : "JOINT"; }

ScheduleMode parse_schedule_mode(std::string_view s) {
    if (s == "SEQUENTIAL" || s == "sequential") return ScheduleMode::Sequential;
    if (s == "JOINT" || s == "joint") return ScheduleMode::Joint;
    throw Error(fmt::format("unknown schedule mode '{}'", s));
}

void StageSpec::validate() const {
    if (tasks.empty()) throw Error(fmt::format("stage {} has no active tasks", to_string(granularity)));
    if (epochs < 1) throw Error("stage epochs must be >= 1");
    if (batch_size < 1) throw Error("stage batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw Error("stage learning_rate must be positive");
}

void SchedulePlan::validate() const {
    if (stages.empty()) throw Error("schedule plan has no stages");
    for (const auto& s : stages) s.validate();
}

TaskSet default_stage_tasks(Granularity g) {
    switch (g) {
    case Granularity::Token: return TaskSet::parse("IFRS MLM MRFR MOC");
    case Granularity::Phrase: return TaskSet::parse("TITP MLM MRFR MOC");
    case Granularity::Sentence: return TaskSet::parse("TITS ITM_HS MLM MRFR MOC");
    }
    return {};
}

SchedulePlan default_plan() {
    SchedulePlan p;
    p.stages = {
        {Granularity::Token, default_stage_tasks(Granularity::Token), 10, 64, 1e-5, true},
        {Granularity::Phrase, default_stage_tasks(Granularity::Phrase), 20, 128, 1e-5, true},
        {Granularity::Sentence, default_stage_tasks(Granularity::Sentence), 20, 128, 1e-5, true},
    };
    return p;
}

std::string TrainingLog::to_jsonl() const {
    std::string out;
    for (const auto& r : steps) {
        out += r.report.log_line(r.step, r.granularity);
        out += '\n';
    }
    return out;
}

void TrainingLog::append(const TrainingLog& other) { steps.insert(steps.end(), other.steps.begin(), other.steps.end()); }

long stage_step_count(const StageSpec& spec, std::size_t n_examples) {
    const auto b = static_cast<std::size_t>(spec.batch_size);
    return static_cast<long>(spec.epochs) * static_cast<long>((n_examples + b - 1) / b);
}

TrainingLog run_stage(Model& model, const StageSpec& spec, const StageCorpus& corpus, const TrainingContext& ctx,
                      int stage_index) {
    return run_stage_from(model, spec, corpus, ctx, stage_index, 0);
}

TrainingLog run_schedule(Model& model, const SchedulePlan& plan, const std::map<Granularity, StageCorpus>& corpora,
                         TrainingContext ctx) {
    plan.validate();
    ctx.seed = plan.seed;
    auto corpus_for = [&](Granularity g) -> const StageCorpus* {
        auto it = corpora.find(g);
        return it == corpora.end() ? nullptr : &it->second;
    };
    for (const auto& s : plan.stages) check_requirements(s, corpus_for(s.granularity), ctx);

    TrainingLog log;
    if (plan.mode == ScheduleMode::Sequential) {
        for (std::size_t i = 0; i < plan.stages.size(); ++i) {
            const auto& s = plan.stages[i];
            log.append(run_stage_from(model, s, *corpus_for(s.granularity), ctx, static_cast<int>(i),
                                      static_cast<long>(log.steps.size())));
        }
        return log;
    }

    // Joint: one optimizer at the first stage's learning rate.
    Adam adam(AdamConfig{plan.stages.front().learning_rate});
    std::vector<Batching> states;
    int max_epochs = 0;
    for (std::size_t i = 0; i < plan.stages.size(); ++i) {
        states.push_back(make_batching(plan.stages[i], *corpus_for(plan.stages[i].granularity), ctx, static_cast<int>(i)));
        max_epochs = std::max(max_epochs, plan.stages[i].epochs);
    }
    for (std::size_t i = 0; i < states.size(); ++i)
        if (ctx.hooks.on_stage_begin) ctx.hooks.on_stage_begin(static_cast<int>(i), model);
    long step = 0;
    for (int epoch = 0; epoch < max_epochs; ++epoch) {
        std::vector<std::vector<std::vector<const StageExample*>>> queues(states.size());
        std::size_t longest = 0;
        for (std::size_t i = 0; i < states.size(); ++i) {
            if (epoch < states[i].spec->epochs) queues[i] = states[i].epoch_batches(epoch);
            longest = std::max(longest, queues[i].size());
        }
        for (std::size_t j = 0; j < longest; ++j)
            for (std::size_t i = 0; i < states.size(); ++i)
                if (j < queues[i].size()) log.steps.push_back(train_step(model, adam, states[i], queues[i][j], ctx, step++));
    }
    for (std::size_t i = 0; i < states.size(); ++i)
        if (ctx.hooks.on_stage_end) ctx.hooks.on_stage_end(static_cast<int>(i), model);
    return log;
}

} // namespace msp
