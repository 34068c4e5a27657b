// SPDX-License-Identifier: Apache-2.0
//
// Stochastic input corruptions for the pre-training objectives and the batch
// assembly that applies them.
//
// RNG consumption is part of the contract: every function documents the
// order in which it draws, so that a (inputs, seed) pair always yields the
// same output.

#pragma once

#include "msp/common.hpp"
#include "msp/corpus.hpp"
#include "msp/util.hpp"

#include <filesystem>
#include <span>
#include <unordered_map>

namespace msp {

struct TokenMaskResult {
    std::vector<int> ids;
    std::vector<std::uint8_t> masked;
    std::vector<int> targets;  // original id at masked positions, -1 elsewhere
};

// Each candidate (anything but PAD/CLS/SEP) is selected with p_mask. Draws:
// one uniform per candidate in position order; one index draw if nothing was
// selected; then per selected slot one branch draw (0.8 MASK, 0.1 random
// non-special token with one more draw, 0.1 unchanged).
TokenMaskResult mask_tokens(std::span<const int> text_ids, double p_mask, int vocab_size, Rng& rng);

struct RegionMaskResult {
    Matrix features;
    std::vector<std::uint8_t> masked;
    Matrix targets;  // original features; rows at masked positions are the regression targets
};

// Masked rows become zero. Positions flagged in `excluded` are never masked;
// the Bernoulli draw for them is still consumed so the stream does not depend
// on the exclusion set.
RegionMaskResult mask_regions(const Matrix& features, double p_mask, Rng& rng,
                              std::span<const std::uint8_t> excluded = {});
std::vector<std::uint8_t> draw_region_mask(int m, double p_mask, Rng& rng, std::span<const std::uint8_t> excluded = {});
Matrix apply_region_mask(const Matrix& features, std::span<const std::uint8_t> masked);

// A shuffled triplet occupies rows start..start+2; after shuffling row
// start+k holds the original row start+source[k].
struct ShuffledTriplet {
    int start = 0;
    std::array<int, 3> source{0, 1, 2};

    bool operator==(const ShuffledTriplet&) const = default;
};

struct ShuffleResult {
    Matrix features;
    std::vector<ShuffledTriplet> map;
    int shuffled_triplets() const { return static_cast<int>(map.size()); }
};

// The five non-identity permutations of three elements.
const std::array<std::array<int, 3>, 5>& non_identity_permutations();

// Disjoint consecutive triplets (0-2, 3-5, ...). Draws, per triplet in order:
// one uniform for selection and, if selected, one permutation index.
std::vector<ShuffledTriplet> draw_triplet_shuffle(int m, double p_shuffle, Rng& rng);
Matrix apply_shuffle(const Matrix& features, std::span<const ShuffledTriplet> map);
ShuffleResult shuffle_region_triplets(const Matrix& features, double p_shuffle, Rng& rng);

struct Neighbor {
    int image = 0;  // position in HardSampleIndex::image_ids()
    double similarity = 0.0;
};

// Top-M most similar images per image by cosine similarity of mean region
// features.
class HardSampleIndex {
public:
    HardSampleIndex() = default;
    HardSampleIndex(std::vector<std::string> image_ids, std::vector<std::vector<Neighbor>> lists);

    std::size_t size() const { return ids_.size(); }
    const std::vector<std::string>& image_ids() const { return ids_; }
    const std::string& image_id(int i) const { return ids_.at(static_cast<std::size_t>(i)); }
    // -1 when absent.
    int find(std::string_view image_id) const;
    std::span<const Neighbor> neighbors(int image) const { return lists_.at(static_cast<std::size_t>(image)); }
    std::span<const Neighbor> neighbors(std::string_view image_id) const;

    // One line per image: id, then (neighbor_id, similarity) pairs with six decimals.
    std::string serialize() const;
    static HardSampleIndex parse(std::string_view text);
    void save(const std::filesystem::path& path) const;
    static HardSampleIndex load(const std::filesystem::path& path);

private:
    std::vector<std::string> ids_;
    std::vector<std::vector<Neighbor>> lists_;
    std::unordered_map<std::string, int> pos_;
};

HardSampleIndex build_hard_sample_index(std::span<const ImageTextExample> corpus, int top_m);

// Resolved regions of every image in a corpus, addressable by image id. Used
// as the pool negatives are drawn from.
class RegionBank {
public:
    RegionBank() = default;
    RegionBank(std::span<const ImageTextExample> corpus, const Vocabulary& vocab);

    std::size_t size() const { return regions_.size(); }
    const RegionSet& regions(int i) const { return regions_.at(static_cast<std::size_t>(i)); }
    const std::string& image_id(int i) const { return ids_.at(static_cast<std::size_t>(i)); }
    int find(std::string_view image_id) const;
    const RegionSet& at(std::string_view image_id) const;

private:
    std::vector<std::string> ids_;
    std::vector<RegionSet> regions_;
    std::unordered_map<std::string, int> pos_;
};

struct NegativeDraw {
    std::string image_id;
    const RegionSet* regions = nullptr;
    int match_label = 1;
};

// With probability p_replace the regions are swapped for a uniformly chosen
// entry of the image's hard list (or, when that list is empty or `index` is
// null, a uniform other image of the bank) and the label becomes 0. Draws:
// one uniform; one index draw when replacing.
NegativeDraw sample_negative_pair(std::string_view image_id, const HardSampleIndex* index, const RegionBank& bank,
                                  double p_replace, Rng& rng);

// Y[i] = 1 iff token i occurs in the text and among the region categories;
// specials and the comma are always 0.
RowVector build_topic_targets(std::span<const int> text_ids, std::span<const int> category_ids, const Vocabulary& vocab);

struct TransformConfig {
    double token_mask_rate = 0.15;
    double region_mask_rate = 0.15;
    double shuffle_rate = 0.05;
    double replace_rate = 0.5;
    // false: negatives are drawn uniformly (plain ITM) instead of from the hard list.
    bool hard_negatives = true;
};

// Post-transform batch, padded to the longest text and region set.
struct BatchInputs {
    int batch_size = 0;
    int max_text_len = 0;
    int max_regions = 0;
    int d_roi = 0;

    std::vector<std::vector<int>> text_ids;
    std::vector<std::vector<std::uint8_t>> text_valid;
    std::vector<std::vector<std::uint8_t>> text_mask_positions;
    std::vector<std::vector<int>> mlm_targets;  // -1 where not masked

    std::vector<Matrix> region_features;  // corrupted input
    std::vector<Matrix> boxes;
    std::vector<std::vector<std::uint8_t>> region_valid;
    std::vector<std::vector<std::uint8_t>> region_mask_positions;
    std::vector<Matrix> region_targets;  // uncorrupted features of the paired image
    std::vector<std::vector<int>> moc_category_targets;
    std::vector<std::vector<int>> moc_attribute_targets;
    std::vector<std::vector<ShuffledTriplet>> shuffle_map;

    std::vector<int> match_label;
    std::vector<RowVector> topic_targets;
    std::vector<std::string> image_ids;  // image whose regions were paired with the text
};

// Pads clean (uncorrupted) pairs into a batch; every match label is 1.
BatchInputs assemble_batch(std::span<const std::vector<int>> texts, std::span<const RegionSet* const> regions,
                           std::span<const std::string> image_ids, const Vocabulary& vocab);

// Applies the corruptions required by `tasks`. Each example i draws from
// four streams derived from `seed`: 4i (negative pair), 4i+1 (shuffle),
// 4i+2 (region mask), 4i+3 (token mask). Shuffled slots are excluded from
// region masking. Pairs with a negative image are corrupted the same way;
// region losses only read matched pairs.
BatchInputs build_batch(std::span<const StageExample* const> examples, TaskSet tasks, const Vocabulary& vocab,
                        const TransformConfig& cfg, const HardSampleIndex* index, const RegionBank* bank,
                        std::uint64_t seed);

} // namespace msp
