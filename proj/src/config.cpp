// SPDX-License-Identifier: Apache-2.0

#include "msp/config.hpp"

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include <set>

namespace msp {

using nlohmann::json;

namespace {

std::string join_key(const std::string& base, std::string_view key) {
    return base.empty() ? std::string(key) : fmt::format("{}.{}", base, key);
}

// Reads fields of one JSON object and rejects keys nobody asked for.
class Fields {
public:
    Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw Error(fmt::format("config: '{}' must be an object", path_.empty() ? "<root>" : path_));
    }

    template <typename T>
    void optional(const char* key, T& field) {
        used_.insert(key);
        if (!j_.contains(key)) return;
        try {
            field = j_.at(key).get<T>();
        } catch (const json::exception&) {
            throw Error(fmt::format("config: key '{}' has the wrong type", join_key(path_, key)));
        }
    }

    template <typename T>
    T required(const char* key) {
        if (!j_.contains(key)) throw Error(fmt::format("config: missing required key '{}'", join_key(path_, key)));
        T v{};
        optional(key, v);
        return v;
    }

    const json* child(const char* key) {
        used_.insert(key);
        return j_.contains(key) ? &j_.at(key) : nullptr;
    }

    std::string key_path(std::string_view key) const { return join_key(path_, key); }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!used_.count(it.key())) throw Error(fmt::format("config: unknown key '{}'", join_key(path_, it.key())));
    }

private:
    const json& j_;
    std::string path_;
    std::set<std::string, std::less<>> used_;
};

ModelConfig read_model(const json& j, const std::string& path) {
    ModelConfig c;
    Fields f(j, path);
    f.optional("hidden_size", c.hidden_size);
    f.optional("num_heads", c.num_heads);
    f.optional("num_xlayers", c.num_xlayers);
    f.optional("ffn_size", c.ffn_size);
    f.optional("d_roi", c.d_roi);
    f.optional("vocab_size", c.vocab_size);
    f.optional("n_attr", c.n_attr);
    f.optional("max_text_len", c.max_text_len);
    f.optional("max_regions", c.max_regions);
    f.optional("dropout", c.dropout);
    f.optional("layer_norm_eps", c.layer_norm_eps);
    f.optional("init_std", c.init_std);
    f.optional("num_language_layers", c.num_language_layers);
    f.optional("num_relation_layers", c.num_relation_layers);
    f.finish();
    return c;
}

json model_json(const ModelConfig& c) { return json::parse(config_to_json(c)); }

StageSpec read_stage(const json& j, const std::string& path) {
    Fields f(j, path);
    StageSpec s;
    s.granularity = parse_granularity(f.required<std::string>("granularity"));
    std::string tasks;
    f.optional("tasks", tasks);
    s.tasks = tasks.empty() ? default_stage_tasks(s.granularity) : TaskSet::parse(tasks);
    f.optional("epochs", s.epochs);
    f.optional("batch_size", s.batch_size);
    f.optional("learning_rate", s.learning_rate);
    f.optional("hard_negatives", s.hard_negatives);
    f.finish();
    return s;
}

SchedulePlan read_plan(const json& j, const std::string& path, std::uint64_t default_seed) {
    Fields f(j, path);
    SchedulePlan p;
    p.seed = default_seed;
    std::string mode = "SEQUENTIAL";
    f.optional("mode", mode);
    p.mode = parse_schedule_mode(mode);
    f.optional("seed", p.seed);
    if (const json* stages = f.child("stages")) {
        if (!stages->is_array()) throw Error(fmt::format("config: '{}' must be an array", f.key_path("stages")));
        for (std::size_t i = 0; i < stages->size(); ++i)
            p.stages.push_back(read_stage(stages->at(i), fmt::format("{}.{}", f.key_path("stages"), i)));
    } else {
        p.stages = default_plan().stages;
    }
    f.finish();
    p.validate();
    return p;
}

json plan_json(const SchedulePlan& p) {
    json stages = json::array();
    for (const auto& s : p.stages)
        stages.push_back({{"granularity", std::string(to_string(s.granularity))},
                          {"tasks", s.tasks.str()},
                          {"epochs", s.epochs},
                          {"batch_size", s.batch_size},
                          {"learning_rate", s.learning_rate},
                          {"hard_negatives", s.hard_negatives}});
    return {{"mode", std::string(to_string(p.mode))}, {"seed", p.seed}, {"stages", stages}};
}

FinetuneConfig read_finetune_config(Fields& f, FinetuneConfig c) {
    f.optional("epochs", c.epochs);
    f.optional("learning_rate", c.learning_rate);
    f.optional("batch_size", c.batch_size);
    f.optional("freeze_encoder", c.freeze_encoder);
    return c;
}

json finetune_config_json(const FinetuneConfig& c) {
    return {{"epochs", c.epochs}, {"learning_rate", c.learning_rate}, {"batch_size", c.batch_size},
            {"freeze_encoder", c.freeze_encoder}};
}

void apply_override(json& doc, std::string_view spec) {
    const auto eq = spec.find('=');
    if (eq == std::string_view::npos || eq == 0) throw Error(fmt::format("override '{}' is not KEY=VALUE", spec));
    const std::string key(spec.substr(0, eq));
    const std::string text(spec.substr(eq + 1));
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;

    json* node = &doc;
    std::size_t b = 0;
    while (true) {
        const auto e = key.find('.', b);
        const std::string part = key.substr(b, e == std::string::npos ? std::string::npos : e - b);
        if (part.empty()) throw Error(fmt::format("override key '{}' is malformed", key));
        const bool last = e == std::string::npos;
        if (node->is_array()) {
            std::size_t idx = 0;
            try {
                idx = std::stoul(part);
            } catch (const std::exception&) {
                throw Error(fmt::format("override key '{}': '{}' is not an array index", key, part));
            }
            if (idx >= node->size()) throw Error(fmt::format("override key '{}': index {} out of range", key, idx));
            node = &(*node)[idx];
        } else {
            if (node->is_null()) *node = json::object();
            if (!node->is_object()) throw Error(fmt::format("override key '{}': '{}' is not an object", key, part));
            node = &(*node)[part];
        }
        if (last) break;
        b = e + 1;
    }
    *node = value;
}

} // namespace

RunConfig parse_run_config(std::string_view json_text, std::span<const std::string> overrides) {
    json doc = json::parse(json_text, nullptr, false);
    if (doc.is_discarded()) throw Error("config: not valid JSON");
    for (const auto& o : overrides) apply_override(doc, o);

    RunConfig c;
    Fields root(doc, "");
    c.seed = root.required<std::uint64_t>("seed");

    if (const json* p = root.child("paths")) {
        Fields f(*p, "paths");
        std::string s;
        auto path_field = [&](const char* key, std::filesystem::path& out) {
            s.clear();
            f.optional(key, s);
            out = s;
        };
        path_field("corpus", c.paths.corpus);
        path_field("checkpoint", c.paths.checkpoint);
        path_field("logs", c.paths.logs);
        path_field("reports", c.paths.reports);
        path_field("hard_index", c.paths.hard_index);
        f.finish();
    }

    c.corpus.synthetic.seed = c.seed;
    if (const json* p = root.child("corpus")) {
        Fields f(*p, "corpus");
        auto& s = c.corpus.synthetic;
        f.optional("n_images", s.n_images);
        f.optional("m_regions", s.m_regions);
        f.optional("n_categories", s.n_categories);
        f.optional("d_roi", s.d_roi);
        f.optional("n_attributes", s.n_attributes);
        f.optional("verb_phrase_rate", s.verb_phrase_rate);
        f.optional("feature_noise", s.feature_noise);
        f.optional("dominant_attribute_rate", s.dominant_attribute_rate);
        f.optional("box_jitter", s.box_jitter);
        f.optional("seed", s.seed);
        f.optional("n_test", c.corpus.n_test);
        f.optional("top_m", c.corpus.top_m);
        f.finish();
    }

    if (const json* p = root.child("model")) c.model = read_model(*p, "model");
    const json* plan = root.child("plan");
    c.plan = plan ? read_plan(*plan, "plan", c.seed) : default_plan();
    if (!plan) c.plan.seed = c.seed;

    if (const json* p = root.child("transforms")) {
        Fields f(*p, "transforms");
        f.optional("token_mask_rate", c.transforms.token_mask_rate);
        f.optional("region_mask_rate", c.transforms.region_mask_rate);
        f.optional("shuffle_rate", c.transforms.shuffle_rate);
        f.optional("replace_rate", c.transforms.replace_rate);
        f.optional("hard_negatives", c.transforms.hard_negatives);
        f.finish();
    }

    if (const json* p = root.child("weights")) {
        std::map<std::string, double> by_name;
        try {
            by_name = p->get<std::map<std::string, double>>();
        } catch (const json::exception&) {
            throw Error("config: 'weights' must map task names to numbers");
        }
        c.weights = TaskWeights::parse(by_name);
    }

    c.finetune.config.seed = c.seed;
    if (const json* p = root.child("finetune")) {
        Fields f(*p, "finetune");
        f.optional("task", c.finetune.task);
        if (c.finetune.task != "classification" && c.finetune.task != "retrieval")
            throw Error(fmt::format("config: finetune.task must be 'classification' or 'retrieval', got '{}'", c.finetune.task));
        c.finetune.config = read_finetune_config(f, default_finetune_config(c.finetune.task));
        c.finetune.config.seed = c.seed;
        f.finish();
    }

    c.ablation.rows = reference_grid();
    c.ablation.settings.seed = c.seed;
    if (const json* p = root.child("ablation")) {
        Fields f(*p, "ablation");
        auto& s = c.ablation.settings;
        f.optional("rows", c.ablation.rows);
        if (const json* m = f.child("model")) s.model = read_model(*m, "ablation.model");
        f.optional("epochs", s.epochs);
        f.optional("batch_size", s.batch_size);
        f.optional("learning_rate", s.learning_rate);
        if (const json* cl = f.child("classification")) {
            Fields g(*cl, "ablation.classification");
            s.classification = read_finetune_config(g, s.classification);
            g.finish();
        }
        if (const json* rt = f.child("retrieval")) {
            Fields g(*rt, "ablation.retrieval");
            s.retrieval = read_finetune_config(g, s.retrieval);
            g.finish();
        }
        f.finish();
        for (const auto& r : c.ablation.rows) parse_ablation_row(r);
    }
    c.ablation.settings.transforms = c.transforms;
    c.ablation.settings.classification.seed = derive_seed(c.seed, 11);
    c.ablation.settings.retrieval.seed = derive_seed(c.seed, 12);
    root.finish();
    return c;
}

RunConfig load_run_config(const std::filesystem::path& path, std::span<const std::string> overrides) {
    return parse_run_config(read_file(path), overrides);
}

std::string run_config_to_json(const RunConfig& c) {
    const auto& s = c.corpus.synthetic;
    json weights = json::object();
    for (const auto& [t, w] : c.weights.weights) weights[std::string(to_string(t))] = w;
    const auto& a = c.ablation.settings;
    json doc = {
        {"seed", c.seed},
        {"paths",
         {{"corpus", c.paths.corpus.string()},
          {"checkpoint", c.paths.checkpoint.string()},
          {"logs", c.paths.logs.string()},
          {"reports", c.paths.reports.string()},
          {"hard_index", c.paths.hard_index.string()}}},
        {"corpus",
         {{"n_images", s.n_images},
          {"m_regions", s.m_regions},
          {"n_categories", s.n_categories},
          {"d_roi", s.d_roi},
          {"n_attributes", s.n_attributes},
          {"verb_phrase_rate", s.verb_phrase_rate},
          {"feature_noise", s.feature_noise},
          {"dominant_attribute_rate", s.dominant_attribute_rate},
          {"box_jitter", s.box_jitter},
          {"seed", s.seed},
          {"n_test", c.corpus.n_test},
          {"top_m", c.corpus.top_m}}},
        {"model", model_json(c.model)},
        {"plan", plan_json(c.plan)},
        {"transforms",
         {{"token_mask_rate", c.transforms.token_mask_rate},
          {"region_mask_rate", c.transforms.region_mask_rate},
          {"shuffle_rate", c.transforms.shuffle_rate},
          {"replace_rate", c.transforms.replace_rate},
          {"hard_negatives", c.transforms.hard_negatives}}},
        {"weights", weights},
        {"finetune",
         [&] {
             json f = finetune_config_json(c.finetune.config);
             f["task"] = c.finetune.task;
             return f;
         }()},
        {"ablation",
         {{"rows", c.ablation.rows},
          {"model", model_json(a.model)},
          {"epochs", a.epochs},
          {"batch_size", a.batch_size},
          {"learning_rate", a.learning_rate},
          {"classification", finetune_config_json(a.classification)},
          {"retrieval", finetune_config_json(a.retrieval)}}},
    };
    return doc.dump(2);
}

std::string plan_to_json(const SchedulePlan& plan) { return plan_json(plan).dump(2); }

SchedulePlan plan_from_json(std::string_view json_text) {
    json doc = json::parse(json_text, nullptr, false);
    if (doc.is_discarded()) throw Error("plan: not valid JSON");
    return read_plan(doc, "plan", 0);
}

} // namespace msp
