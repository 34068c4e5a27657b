// SPDX-License-Identifier: Apache-2.0

#include "msp/model.hpp"

#include <fmt/format.h>

#include <cmath>

namespace msp {

void ModelConfig::validate() const {
    if (hidden_size <= 0 || num_heads <= 0 || num_xlayers < 0 || ffn_size <= 0 || d_roi <= 0 || vocab_size <= 0 ||
        n_attr <= 0 || max_text_len <= 0 || max_regions <= 0)
        throw Error("model config: all counts must be positive");
    if (hidden_size % num_heads != 0) throw Error("model config: hidden_size must be divisible by num_heads");
    if (dropout < 0.0 || dropout >= 1.0) throw Error("model config: dropout must be in [0, 1)");
}

ModelConfig ModelConfig::reference() {
    ModelConfig c;
    c.vocab_size = 30522;
    c.n_attr = 400;
    return c;
}

Architecture parse_architecture(std::string_view s) {
    if (s == "LXMERT_FULL") return Architecture::LxmertFull;
    if (s == "LXMERT_S") return Architecture::LxmertS;
    throw Error(fmt::format("unknown architecture '{}'", s));
}

long long count_parameters(Architecture arch, const ModelConfig& cfg) {
    const long long h = cfg.hidden_size;
    const long long f = cfg.ffn_size;
    const long long layer_norm = 2 * h;
    const long long attention = 4 * (h * h + h) + layer_norm;
    const long long ffn = (h * f + f) + (f * h + h) + layer_norm;
    const long long single_layer = attention + ffn;
    // shared cross-attention, two self-attentions, two feed-forwards
    const long long cross_layer = 3 * attention + 2 * ffn;
    const long long region_encoder = (cfg.d_roi * h + h) + layer_norm + (4 * h + h) + layer_norm;

    const long long simplified = cfg.num_xlayers * cross_layer + region_encoder;
    switch (arch) {
    case Architecture::LxmertS: return simplified;
    case Architecture::LxmertFull:
        return simplified + static_cast<long long>(cfg.num_language_layers + cfg.num_relation_layers) * single_layer;
    }
    throw Error("unknown architecture");
}

Parameter& Model::add(std::string name, Eigen::Index rows, Eigen::Index cols, Rng* init) {
    Parameter prm;
    prm.name = name;
    prm.value = Matrix::Zero(rows, cols);
    if (init) {
        std::normal_distribution<double> normal(0.0, cfg_.init_std);
        for (Eigen::Index i = 0; i < prm.value.size(); ++i) prm.value.data()[i] = normal(*init);
    }
    prm.zero_grad();
    index_.emplace(name, params_.size());
    params_.push_back(std::move(prm));
    return params_.back();
}

Model::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    const int h = cfg_.hidden_size;
    auto layer_norm = [&](const std::string& prefix) {
        add(prefix + ".gain", 1, h, nullptr).value.setOnes();
        add(prefix + ".bias", 1, h, nullptr);
    };
    auto dense = [&](const std::string& prefix, int in, int out) {
        add(prefix + ".weight", in, out, &rng);
        add(prefix + ".bias", 1, out, nullptr);
    };
    auto attention_block = [&](const std::string& prefix) {
        for (const char* part : {"query", "key", "value", "output"}) dense(prefix + "." + part, h, h);
        layer_norm(prefix + ".ln");
    };
    auto ffn_block = [&](const std::string& prefix) {
        dense(prefix + ".inter", h, cfg_.ffn_size);
        dense(prefix + ".output", cfg_.ffn_size, h);
        layer_norm(prefix + ".ln");
    };

    add("embeddings.word", cfg_.vocab_size, h, &rng);
    add("embeddings.position", cfg_.max_text_len, h, &rng);
    layer_norm("embeddings.ln");

    dense("visual.feature", cfg_.d_roi, h);
    layer_norm("visual.feature_ln");
    dense("visual.box", 4, h);
    layer_norm("visual.box_ln");

    for (int l = 0; l < cfg_.num_xlayers; ++l) {
        const std::string pre = fmt::format("xlayer.{}", l);
        attention_block(pre + ".cross_att");
        attention_block(pre + ".lang_self_att");
        attention_block(pre + ".visn_self_att");
        ffn_block(pre + ".lang_ffn");
        ffn_block(pre + ".visn_ffn");
    }

    dense("pooler", h, h);
    add("heads.mlm.bias", 1, cfg_.vocab_size, nullptr);
    dense("heads.region", h, cfg_.d_roi);
    dense("heads.moc_category", h, cfg_.vocab_size);
    dense("heads.moc_attribute", h, cfg_.n_attr);
    dense("heads.topic", h, cfg_.vocab_size);
    dense("heads.match", h, 1);
}

Parameter& Model::param(std::string_view name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error(fmt::format("no parameter named '{}'", name));
    return params_[it->second];
}

const Parameter& Model::param(std::string_view name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error(fmt::format("no parameter named '{}'", name));
    return params_[it->second];
}

long long Model::parameter_count() const {
    long long n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
}

long long Model::parameter_count(std::initializer_list<std::string_view> prefixes) const {
    long long n = 0;
    for (const auto& p : params_)
        for (auto pre : prefixes)
            if (std::string_view(p.name).starts_with(pre)) {
                n += p.value.size();
                break;
            }
    return n;
}

void Model::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

Tape::Var Model::linear(Tape& tape, Tape::Var x, const std::string& prefix) {
    return tape.add_row(tape.matmul(x, p(tape, prefix + ".weight")), p(tape, prefix + ".bias"));
}

Tape::Var Model::dropout(Tape& tape, Tape::Var x, const ForwardOptions& opts) {
    if (!opts.training || cfg_.dropout <= 0.0) return x;
    if (!opts.dropout_rng) throw Error("training-mode forward needs a dropout rng");
    const double keep = 1.0 - cfg_.dropout;
    Matrix mask(tape.rows(x), tape.cols(x));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = unit(*opts.dropout_rng) < keep ? 1.0 / keep : 0.0;
    return tape.mul_const(x, mask);
}

Tape::Var Model::attention(Tape& tape, const std::string& prefix, Tape::Var query, Tape::Var context,
                           std::span<const std::uint8_t> context_valid, const ForwardOptions& opts) {
    const int heads = cfg_.num_heads;
    const int dh = cfg_.hidden_size / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const Tape::Var q = linear(tape, query, prefix + ".query");
    const Tape::Var k = linear(tape, context, prefix + ".key");
    const Tape::Var v = linear(tape, context, prefix + ".value");
    std::vector<Tape::Var> ctx;
    ctx.reserve(static_cast<std::size_t>(heads));
    for (int hd = 0; hd < heads; ++hd) {
        const auto qh = tape.slice_cols(q, hd * dh, dh);
        const auto kh = tape.slice_cols(k, hd * dh, dh);
        const auto vh = tape.slice_cols(v, hd * dh, dh);
        auto probs = tape.masked_softmax(tape.scale(tape.matmul_nt(qh, kh), scale), context_valid);
        probs = dropout(tape, probs, opts);
        ctx.push_back(tape.matmul(probs, vh));
    }
    const Tape::Var merged = heads == 1 ? ctx.front() : tape.concat_cols(ctx);
    const Tape::Var out = dropout(tape, linear(tape, merged, prefix + ".output"), opts);
    return tape.layer_norm(tape.add(out, query), p(tape, prefix + ".ln.gain"), p(tape, prefix + ".ln.bias"),
                           cfg_.layer_norm_eps);
}

Tape::Var Model::feed_forward(Tape& tape, const std::string& prefix, Tape::Var x, const ForwardOptions& opts) {
    const Tape::Var hidden = tape.gelu(linear(tape, x, prefix + ".inter"));
    const Tape::Var out = dropout(tape, linear(tape, hidden, prefix + ".output"), opts);
    return tape.layer_norm(tape.add(out, x), p(tape, prefix + ".ln.gain"), p(tape, prefix + ".ln.bias"),
                           cfg_.layer_norm_eps);
}

EncodedExample Model::encode(Tape& tape, std::span<const int> text_ids, std::span<const std::uint8_t> text_valid,
                             const Matrix& region_features, const Matrix& boxes,
                             std::span<const std::uint8_t> region_valid, const ForwardOptions& opts) {
    const auto L = static_cast<int>(text_ids.size());
    const auto M = static_cast<int>(region_features.rows());
    if (L == 0 || static_cast<int>(text_valid.size()) != L) throw Error("encode: text ids / pad mask length mismatch");
    if (L > cfg_.max_text_len) throw Error(fmt::format("encode: text length {} exceeds max_text_len {}", L, cfg_.max_text_len));
    if (M == 0 || static_cast<int>(region_valid.size()) != M || boxes.rows() != M)
        throw Error("encode: region features / boxes / pad mask row mismatch");
    if (M > cfg_.max_regions) throw Error(fmt::format("encode: {} regions exceed max_regions {}", M, cfg_.max_regions));
    if (region_features.cols() != cfg_.d_roi) throw Error(fmt::format("encode: region features must have {} columns", cfg_.d_roi));
    if (boxes.cols() != 4) throw Error("encode: boxes must have 4 columns");
    if (!text_valid[0]) throw Error("encode: first text position must be valid");
    for (int id : text_ids)
        if (id < 0 || id >= cfg_.vocab_size) throw Error(fmt::format("encode: token id {} out of range", id));

    std::vector<int> positions(static_cast<std::size_t>(L));
    for (int i = 0; i < L; ++i) positions[static_cast<std::size_t>(i)] = i;
    Tape::Var lang = tape.add(tape.gather_rows(p(tape, "embeddings.word"), text_ids),
                              tape.gather_rows(p(tape, "embeddings.position"), positions));
    lang = tape.layer_norm(lang, p(tape, "embeddings.ln.gain"), p(tape, "embeddings.ln.bias"), cfg_.layer_norm_eps);
    lang = dropout(tape, lang, opts);

    const Tape::Var feats = tape.layer_norm(linear(tape, tape.constant(region_features), "visual.feature"),
                                            p(tape, "visual.feature_ln.gain"), p(tape, "visual.feature_ln.bias"),
                                            cfg_.layer_norm_eps);
    const Tape::Var box = tape.layer_norm(linear(tape, tape.constant(boxes), "visual.box"), p(tape, "visual.box_ln.gain"),
                                          p(tape, "visual.box_ln.bias"), cfg_.layer_norm_eps);
    Tape::Var visn = dropout(tape, tape.scale(tape.add(feats, box), 0.5), opts);

    for (int l = 0; l < cfg_.num_xlayers; ++l) {
        const std::string pre = fmt::format("xlayer.{}", l);
        const Tape::Var lang_x = attention(tape, pre + ".cross_att", lang, visn, region_valid, opts);
        const Tape::Var visn_x = attention(tape, pre + ".cross_att", visn, lang, text_valid, opts);
        const Tape::Var lang_s = attention(tape, pre + ".lang_self_att", lang_x, lang_x, text_valid, opts);
        const Tape::Var visn_s = attention(tape, pre + ".visn_self_att", visn_x, visn_x, region_valid, opts);
        lang = feed_forward(tape, pre + ".lang_ffn", lang_s, opts);
        visn = feed_forward(tape, pre + ".visn_ffn", visn_s, opts);
    }

    const int cls = 0;
    const Tape::Var pooled = tape.tanh(linear(tape, tape.gather_rows(lang, std::span<const int>(&cls, 1)), "pooler"));
    return {lang, visn, pooled};
}

std::vector<EncodedExample> Model::encode_batch(Tape& tape, const BatchInputs& batch, const ForwardOptions& opts) {
    std::vector<EncodedExample> out;
    out.reserve(static_cast<std::size_t>(batch.batch_size));
    for (std::size_t i = 0; i < static_cast<std::size_t>(batch.batch_size); ++i)
        out.push_back(encode(tape, batch.text_ids[i], batch.text_valid[i], batch.region_features[i], batch.boxes[i],
                             batch.region_valid[i], opts));
    return out;
}

Tape::Var Model::head_mlm(Tape& tape, Tape::Var text_states) {
    return tape.add_row(tape.matmul_nt(text_states, p(tape, "embeddings.word")), p(tape, "heads.mlm.bias"));
}

Tape::Var Model::head_region_regression(Tape& tape, Tape::Var vision_states) {
    return linear(tape, vision_states, "heads.region");
}

std::pair<Tape::Var, Tape::Var> Model::head_moc(Tape& tape, Tape::Var vision_states) {
    return {linear(tape, vision_states, "heads.moc_category"), linear(tape, vision_states, "heads.moc_attribute")};
}

Tape::Var Model::head_topic(Tape& tape, Tape::Var pooled) { return linear(tape, pooled, "heads.topic"); }

Tape::Var Model::head_match(Tape& tape, Tape::Var pooled) { return linear(tape, pooled, "heads.match"); }

void Model::add_classifier(int n_classes, std::uint64_t seed) {
    if (n_classes < 2) throw Error("classifier needs at least 2 classes");
    Rng rng(seed);
    if (has_classifier()) {
        Parameter& w = param("heads.classifier.weight");
        Parameter& b = param("heads.classifier.bias");
        w.value.resize(cfg_.hidden_size, n_classes);
        std::normal_distribution<double> normal(0.0, cfg_.init_std);
        for (Eigen::Index i = 0; i < w.value.size(); ++i) w.value.data()[i] = normal(rng);
        b.value = Matrix::Zero(1, n_classes);
        w.zero_grad();
        b.zero_grad();
        return;
    }
    add("heads.classifier.weight", cfg_.hidden_size, n_classes, &rng);
    add("heads.classifier.bias", 1, n_classes, nullptr);
}

int Model::classifier_classes() const {
    return has_classifier() ? static_cast<int>(param("heads.classifier.bias").value.cols()) : 0;
}

Tape::Var Model::head_classifier(Tape& tape, Tape::Var pooled) {
    if (!has_classifier()) throw Error("model has no classifier head");
    return linear(tape, pooled, "heads.classifier");
}

std::string Model::serialize_weights() const {
    std::string out;
    for (const auto& prm : params_) {
        out += prm.name;
        out += fmt::format("[{}x{}]", prm.value.rows(), prm.value.cols());
        out.append(reinterpret_cast<const char*>(prm.value.data()), static_cast<std::size_t>(prm.value.size()) * sizeof(double));
    }
    return out;
}

std::vector<EncodedValues> encode_values(Model& model, const BatchInputs& batch) {
    Tape tape(false);
    const auto enc = model.encode_batch(tape, batch);
    std::vector<EncodedValues> out;
    for (const auto& e : enc) out.push_back({tape.value(e.text), tape.value(e.vision), tape.value(e.pooled).row(0)});
    return out;
}

} // namespace msp
