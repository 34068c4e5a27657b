// SPDX-License-Identifier: Apache-2.0
//
// Simplified cross-modality encoder: text and region embeddings feed a stack
// of cross-modality layers (bidirectional cross-attention, per-modality
// self-attention, per-modality feed-forward), followed by a tanh pooler on
// the CLS position and the pre-training heads.

#pragma once

#include "msp/autograd.hpp"
#include "msp/common.hpp"
#include "msp/corpus.hpp"
#include "msp/transforms.hpp"
#include "msp/util.hpp"

#include <deque>
#include <filesystem>
#include <map>
#include <set>
#include <string>

namespace msp {

struct ModelConfig {
    int hidden_size = 768;
    int num_heads = 12;
    int num_xlayers = 5;
    int ffn_size = 3072;
    int d_roi = 2048;
    int vocab_size = 0;
    int n_attr = 0;
    int max_text_len = 40;
    int max_regions = 36;
    double dropout = 0.1;
    double layer_norm_eps = 1e-12;
    double init_std = 0.02;
    // Only used by count_parameters for the full reference architecture.
    int num_language_layers = 9;
    int num_relation_layers = 5;

    void validate() const;
    bool operator==(const ModelConfig&) const = default;

    // 768 hidden, 12 heads, 3072 FFN, 2048-d ROI features, 5 cross layers.
    static ModelConfig reference();
};

enum class Architecture { LxmertFull, LxmertS };

Architecture parse_architecture(std::string_view s);

// Transformer-part parameters: region feature/box encoders plus every
// encoder layer. Word/position embeddings, the pooler and task heads are
// excluded.
long long count_parameters(Architecture arch, const ModelConfig& cfg);

struct ForwardOptions {
    bool training = false;  // enables dropout
    Rng* dropout_rng = nullptr;
};

struct EncodedExample {
    Tape::Var text;    // max_text_len x hidden (batch-padded length)
    Tape::Var vision;  // max_regions x hidden
    Tape::Var pooled;  // 1 x hidden
};

// Head names as recorded in Model::trained_heads.
inline constexpr std::string_view kHeadMlm = "mlm";
inline constexpr std::string_view kHeadRegion = "region";
inline constexpr std::string_view kHeadMoc = "moc";
inline constexpr std::string_view kHeadTopic = "topic";
inline constexpr std::string_view kHeadMatch = "match";
inline constexpr std::string_view kHeadClassifier = "classifier";

class Model {
public:
    Model() = default;
    Model(const ModelConfig& cfg, std::uint64_t seed);

    const ModelConfig& config() const { return cfg_; }

    std::deque<Parameter>& parameters() { return params_; }
    const std::deque<Parameter>& parameters() const { return params_; }
    Parameter& param(std::string_view name);
    const Parameter& param(std::string_view name) const;
    bool has_param(std::string_view name) const { return index_.count(std::string(name)) != 0; }
    long long parameter_count() const;
    // Sum of sizes of parameters whose name starts with one of the prefixes.
    long long parameter_count(std::initializer_list<std::string_view> prefixes) const;

    void zero_grad();

    // One example. `text_valid` / `region_valid` flag non-padding positions;
    // padding is never attended to.
    EncodedExample encode(Tape& tape, std::span<const int> text_ids, std::span<const std::uint8_t> text_valid,
                          const Matrix& region_features, const Matrix& boxes,
                          std::span<const std::uint8_t> region_valid, const ForwardOptions& opts = {});
    std::vector<EncodedExample> encode_batch(Tape& tape, const BatchInputs& batch, const ForwardOptions& opts = {});

    Tape::Var head_mlm(Tape& tape, Tape::Var text_states);
    Tape::Var head_region_regression(Tape& tape, Tape::Var vision_states);
    std::pair<Tape::Var, Tape::Var> head_moc(Tape& tape, Tape::Var vision_states);
    Tape::Var head_topic(Tape& tape, Tape::Var pooled);
    Tape::Var head_match(Tape& tape, Tape::Var pooled);

    // Downstream answer head (pooled -> n_classes), created on demand.
    void add_classifier(int n_classes, std::uint64_t seed);
    bool has_classifier() const { return has_param("heads.classifier.weight"); }
    int classifier_classes() const;
    Tape::Var head_classifier(Tape& tape, Tape::Var pooled);

    // Heads that have received optimizer updates, by the names above.
    std::set<std::string> trained_heads;

    // Canonical serialization of all parameter values (names, shapes, data).
    std::string serialize_weights() const;
    std::string weights_digest() const { return hex64(fnv1a64(serialize_weights())); }

private:
    Parameter& add(std::string name, Eigen::Index rows, Eigen::Index cols, Rng* init);
    Tape::Var p(Tape& tape, const std::string& name) { return tape.parameter(param(name)); }
    Tape::Var linear(Tape& tape, Tape::Var x, const std::string& prefix);
    Tape::Var dropout(Tape& tape, Tape::Var x, const ForwardOptions& opts);
    Tape::Var attention(Tape& tape, const std::string& prefix, Tape::Var query, Tape::Var context,
                        std::span<const std::uint8_t> context_valid, const ForwardOptions& opts);
    Tape::Var feed_forward(Tape& tape, const std::string& prefix, Tape::Var x, const ForwardOptions& opts);

    ModelConfig cfg_;
    std::deque<Parameter> params_;
    std::map<std::string, std::size_t, std::less<>> index_;
};

// Forward values of a batch in evaluation mode.
struct EncodedValues {
    Matrix text;
    Matrix vision;
    RowVector pooled;
};
std::vector<EncodedValues> encode_values(Model& model, const BatchInputs& batch);

// Checkpoint: binary container with a format version, the JSON-serialized
// config / vocabulary / trained-head metadata, and named shape-tagged tensors.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    Model model;
    Vocabulary vocab;
};

std::string serialize_checkpoint(const Model& model, const Vocabulary& vocab);
Checkpoint parse_checkpoint(std::string_view bytes);
void save_checkpoint(const std::filesystem::path& path, const Model& model, const Vocabulary& vocab);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::string config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(std::string_view json_text);

} // namespace msp
