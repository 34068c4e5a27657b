// SPDX-License-Identifier: Apache-2.0
//
// Layout (little-endian):
//   "MSPCKPT\0" | u32 version | u64 meta length | meta JSON |
//   u32 tensor count | per tensor: u32 name length, name, u32 rows, u32 cols, rows*cols f64

#include "msp/model.hpp"

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include <cstring>

namespace msp {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'M', 'S', 'P', 'C', 'K', 'P', 'T', '\0'};

template <typename T>
void put(std::string& out, T v) {
    out.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

class Reader {
public:
    explicit Reader(std::string_view bytes) : bytes_(bytes) {}

    template <typename T>
    T get() {
        T v;
        need(sizeof(T));
        std::memcpy(&v, bytes_.data() + at_, sizeof(T));
        at_ += sizeof(T);
        return v;
    }
    std::string_view take(std::size_t n) {
        need(n);
        auto s = bytes_.substr(at_, n);
        at_ += n;
        return s;
    }
    bool done() const { return at_ == bytes_.size(); }

private:
    void need(std::size_t n) const {
        if (at_ + n > bytes_.size()) throw Error("checkpoint is truncated");
    }
    std::string_view bytes_;
    std::size_t at_ = 0;
};

json config_json(const ModelConfig& c) {
    return {{"hidden_size", c.hidden_size},   {"num_heads", c.num_heads},
            {"num_xlayers", c.num_xlayers},   {"ffn_size", c.ffn_size},
            {"d_roi", c.d_roi},               {"vocab_size", c.vocab_size},
            {"n_attr", c.n_attr},             {"max_text_len", c.max_text_len},
            {"max_regions", c.max_regions},   {"dropout", c.dropout},
            {"layer_norm_eps", c.layer_norm_eps}, {"init_std", c.init_std},
            {"num_language_layers", c.num_language_layers}, {"num_relation_layers", c.num_relation_layers}};
}

ModelConfig config_from(const json& j) {
    ModelConfig c;
    auto read = [&](const char* key, auto& field) {
        if (j.contains(key)) field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
    };
    read("hidden_size", c.hidden_size);
    read("num_heads", c.num_heads);
    read("num_xlayers", c.num_xlayers);
    read("ffn_size", c.ffn_size);
    read("d_roi", c.d_roi);
    read("vocab_size", c.vocab_size);
    read("n_attr", c.n_attr);
    read("max_text_len", c.max_text_len);
    read("max_regions", c.max_regions);
    read("dropout", c.dropout);
    read("layer_norm_eps", c.layer_norm_eps);
    read("init_std", c.init_std);
    read("num_language_layers", c.num_language_layers);
    read("num_relation_layers", c.num_relation_layers);
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!config_json(c).contains(it.key())) throw Error(fmt::format("model config: unknown key '{}'", it.key()));
    return c;
}

} // namespace

std::string config_to_json(const ModelConfig& cfg) { return config_json(cfg).dump(); }

ModelConfig config_from_json(std::string_view text) { return config_from(json::parse(text)); }

std::string serialize_checkpoint(const Model& model, const Vocabulary& vocab) {
    json meta = {{"config", config_json(model.config())},
                 {"vocabulary", vocab.tokens()},
                 {"attribute_classes", vocab.attribute_classes()},
                 {"trained_heads", model.trained_heads}};
    const std::string meta_text = meta.dump();
    std::string out(kMagic, sizeof(kMagic));
    put<std::uint32_t>(out, kCheckpointVersion);
    put<std::uint64_t>(out, meta_text.size());
    out += meta_text;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(model.parameters().size()));
    for (const auto& prm : model.parameters()) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(prm.name.size()));
        out += prm.name;
        put<std::uint32_t>(out, static_cast<std::uint32_t>(prm.value.rows()));
        put<std::uint32_t>(out, static_cast<std::uint32_t>(prm.value.cols()));
        out.append(reinterpret_cast<const char*>(prm.value.data()), static_cast<std::size_t>(prm.value.size()) * sizeof(double));
    }
    return out;
}

Checkpoint parse_checkpoint(std::string_view bytes) {
    Reader in(bytes);
    if (in.take(sizeof(kMagic)) != std::string_view(kMagic, sizeof(kMagic))) throw Error("not a checkpoint file");
    const auto version = in.get<std::uint32_t>();
    if (version != kCheckpointVersion)
        throw Error(fmt::format("checkpoint format version {} is not supported (expected {})", version, kCheckpointVersion));
    const auto meta_len = in.get<std::uint64_t>();
    const json meta = json::parse(in.take(meta_len));

    Checkpoint ck;
    ck.vocab = Vocabulary(meta.at("vocabulary").get<std::vector<std::string>>(),
                          meta.at("attribute_classes").get<std::vector<std::string>>());
    const ModelConfig cfg = config_from(meta.at("config"));
    if (cfg.vocab_size != ck.vocab.size()) throw Error("checkpoint vocabulary does not match its model config");
    ck.model = Model(cfg, 0);
    ck.model.trained_heads = meta.at("trained_heads").get<std::set<std::string>>();

    const auto count = in.get<std::uint32_t>();
    std::set<std::string> seen;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = in.get<std::uint32_t>();
        const std::string name(in.take(name_len));
        const auto rows = in.get<std::uint32_t>();
        const auto cols = in.get<std::uint32_t>();
        if (name == "heads.classifier.weight") ck.model.add_classifier(static_cast<int>(cols), 0);
        Parameter& prm = ck.model.param(name);
        if (prm.value.rows() != rows || prm.value.cols() != cols)
            throw Error(fmt::format("checkpoint tensor '{}' has shape {}x{}, model expects {}x{}", name, rows, cols,
                                    prm.value.rows(), prm.value.cols()));
        const auto data = in.take(static_cast<std::size_t>(rows) * cols * sizeof(double));
        std::memcpy(prm.value.data(), data.data(), data.size());
        seen.insert(name);
    }
    if (!in.done()) throw Error("checkpoint has trailing bytes");
    for (const auto& prm : ck.model.parameters())
        if (!seen.count(prm.name)) throw Error(fmt::format("checkpoint is missing tensor '{}'", prm.name));
    return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Model& model, const Vocabulary& vocab) {
    write_file(path, serialize_checkpoint(model, vocab));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return parse_checkpoint(read_file(path)); }

} // namespace msp
