// SPDX-License-Identifier: Apache-2.0
//
// Image-text data model, vocabulary, corpus file I/O, the synthetic corpus
// generator and the three granularity-specific corpus builders.

#pragma once

#include "msp/common.hpp"

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace msp {

struct Phrase {
    std::vector<std::string> tokens;
    bool is_verb_phrase = false;

    bool operator==(const Phrase&) const = default;
};

// One image with its detected regions and text. Labels are kept as strings
// here; they are resolved against a Vocabulary when a stage corpus is built.
struct ImageTextExample {
    std::string image_id;
    Matrix features;                      // m x d_roi
    Matrix boxes;                         // m x 4, normalized (x1, y1, x2, y2)
    std::vector<std::string> categories;  // m
    std::vector<std::string> attributes;  // m
    std::vector<std::string> caption;
    std::vector<Phrase> phrases;

    int region_count() const { return static_cast<int>(features.rows()); }
    bool operator==(const ImageTextExample& o) const;
};

class Vocabulary {
public:
    static constexpr int kPad = 0;
    static constexpr int kMask = 1;
    static constexpr int kCls = 2;
    static constexpr int kSep = 3;
    static constexpr int kUnk = 4;
    static constexpr int kNumSpecial = 5;
    static constexpr std::string_view kComma = ",";

    Vocabulary() = default;
    // `tokens` must start with the special tokens in canonical order.
    Vocabulary(std::vector<std::string> tokens, std::vector<std::string> attribute_classes);

    int size() const { return static_cast<int>(tokens_.size()); }
    const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
    // Unknown tokens map to kUnk.
    int index(std::string_view token) const;
    bool contains(std::string_view token) const;
    bool is_special(int id) const { return id < kNumSpecial; }
    // Index of the comma token, or -1 when the corpus had no phrases.
    int comma() const { return comma_; }

    int attribute_count() const { return static_cast<int>(attributes_.size()); }
    const std::string& attribute(int id) const { return attributes_.at(static_cast<std::size_t>(id)); }
    int attribute_index(std::string_view attr) const;

    const std::vector<std::string>& tokens() const { return tokens_; }
    const std::vector<std::string>& attribute_classes() const { return attributes_; }

    std::vector<int> encode(std::span<const std::string> words) const;

    bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_ && attributes_ == o.attributes_; }

    static const std::vector<std::string>& special_tokens();

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> ids_;
    std::vector<std::string> attributes_;
    std::unordered_map<std::string, int> attr_ids_;
    int comma_ = -1;
};

// Specials first, then every caption, phrase, category and attribute token
// (plus `extra_tokens`) in lexicographic order. The attribute-class space is
// the sorted set of attribute labels.
Vocabulary build_vocabulary(std::span<const ImageTextExample> examples,
                            std::span<const std::string> extra_tokens = {});

// Corpus file: JSON lines. The first line is a header declaring d_roi and m.
void save_corpus(const std::filesystem::path& path, std::span<const ImageTextExample> examples);
std::string serialize_corpus(std::span<const ImageTextExample> examples);
std::vector<ImageTextExample> load_corpus(const std::filesystem::path& path);
std::vector<ImageTextExample> parse_corpus(std::string_view text);

// Throws Error naming the image and field when an invariant is violated.
void validate_example(const ImageTextExample& ex);

struct SyntheticCorpusConfig {
    int n_images = 100;
    int m_regions = 36;
    int n_categories = 20;
    int d_roi = 16;
    int n_attributes = 8;
    double verb_phrase_rate = 0.2;
    double feature_noise = 0.1;
    // Probability that a region takes its category's dominant attribute.
    double dominant_attribute_rate = 0.8;
    // Half-width of the uniform jitter around each category's box anchor.
    double box_jitter = 0.03;
    std::uint64_t seed = 0;
};

std::vector<ImageTextExample> generate_synthetic_corpus(const SyntheticCorpusConfig& cfg);
std::vector<ImageTextExample> generate_synthetic_corpus(int n_images, int m_regions, int n_categories,
                                                        std::uint64_t seed);

// Region data resolved against a vocabulary.
struct RegionSet {
    Matrix features;
    Matrix boxes;
    std::vector<int> category_ids;   // vocabulary indices
    std::vector<int> attribute_ids;  // attribute-class indices

    int size() const { return static_cast<int>(features.rows()); }
};

RegionSet resolve_regions(const ImageTextExample& ex, const Vocabulary& vocab);

struct StageExample {
    std::vector<int> text_ids;
    RegionSet regions;
    std::string image_id;
};

struct StageCorpus {
    Granularity granularity = Granularity::Sentence;
    std::vector<StageExample> examples;
    std::size_t dropped = 0;  // examples excluded because their text came out empty

    std::size_t size() const { return examples.size(); }
    bool empty() const { return examples.empty(); }
};

StageCorpus build_token_stage_corpus(std::span<const ImageTextExample> examples, const Vocabulary& vocab);
StageCorpus build_phrase_stage_corpus(std::span<const ImageTextExample> examples, const Vocabulary& vocab);
StageCorpus build_sentence_stage_corpus(std::span<const ImageTextExample> examples, const Vocabulary& vocab);
StageCorpus build_stage_corpus(Granularity g, std::span<const ImageTextExample> examples, const Vocabulary& vocab);

// Keeps the first `budget` examples; metadata-style subsetting knob.
StageCorpus take_budget(StageCorpus corpus, std::size_t budget);

} // namespace msp
