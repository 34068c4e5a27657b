// SPDX-License-Identifier: Apache-2.0

#include "msp/transforms.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <numeric>
#include <sstream>

namespace msp {

namespace {

double draw_unit(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

int draw_index(Rng& rng, int n) { return std::uniform_int_distribution<int>(0, n - 1)(rng); }

void check_rate(double p, const char* name, bool allow_zero) {
    if (!(p <= 1.0) || (allow_zero ? p < 0.0 : p <= 0.0))
        throw Error(fmt::format("{} must be in {}0, 1]", name, allow_zero ? "[" : "("));
}

Vector mean_rows(const Matrix& m) { return m.colwise().mean().transpose(); }

} // namespace

TokenMaskResult mask_tokens(std::span<const int> text_ids, double p_mask, int vocab_size, Rng& rng) {
    check_rate(p_mask, "p_mask", false);
    std::vector<int> candidates;
    for (std::size_t i = 0; i < text_ids.size(); ++i) {
        const int id = text_ids[i];
        if (id != Vocabulary::kPad && id != Vocabulary::kCls && id != Vocabulary::kSep)
            candidates.push_back(static_cast<int>(i));
    }
    if (candidates.empty()) throw Error("nothing to mask");

    TokenMaskResult out;
    out.ids.assign(text_ids.begin(), text_ids.end());
    out.masked.assign(text_ids.size(), 0);
    out.targets.assign(text_ids.size(), -1);

    std::vector<int> selected;
    for (int pos : candidates)
        if (draw_unit(rng) < p_mask) selected.push_back(pos);
    if (selected.empty()) selected.push_back(candidates[static_cast<std::size_t>(draw_index(rng, static_cast<int>(candidates.size())))]);

    const int n_content = vocab_size - Vocabulary::kNumSpecial;
    for (int pos : selected) {
        const auto p = static_cast<std::size_t>(pos);
        out.masked[p] = 1;
        out.targets[p] = text_ids[p];
        const double branch = draw_unit(rng);
        if (branch < 0.8) {
            out.ids[p] = Vocabulary::kMask;
        } else if (branch < 0.9 && n_content > 0) {
            out.ids[p] = Vocabulary::kNumSpecial + draw_index(rng, n_content);
        }
    }
    return out;
}

std::vector<std::uint8_t> draw_region_mask(int m, double p_mask, Rng& rng, std::span<const std::uint8_t> excluded) {
    check_rate(p_mask, "p_mask", false);
    if (!excluded.empty() && static_cast<int>(excluded.size()) != m) throw Error("exclusion mask length mismatch");
    std::vector<std::uint8_t> masked(static_cast<std::size_t>(m), 0);
    std::vector<int> candidates;
    bool any = false;
    for (int i = 0; i < m; ++i) {
        const bool allowed = excluded.empty() || !excluded[static_cast<std::size_t>(i)];
        const bool hit = draw_unit(rng) < p_mask;
        if (!allowed) continue;
        candidates.push_back(i);
        if (hit) {
            masked[static_cast<std::size_t>(i)] = 1;
            any = true;
        }
    }
    if (!any && !candidates.empty())
        masked[static_cast<std::size_t>(candidates[static_cast<std::size_t>(draw_index(rng, static_cast<int>(candidates.size())))])] = 1;
    return masked;
}

Matrix apply_region_mask(const Matrix& features, std::span<const std::uint8_t> masked) {
    Matrix out = features;
    for (std::size_t i = 0; i < masked.size(); ++i)
        if (masked[i]) out.row(static_cast<Eigen::Index>(i)).setZero();
    return out;
}

RegionMaskResult mask_regions(const Matrix& features, double p_mask, Rng& rng, std::span<const std::uint8_t> excluded) {
    RegionMaskResult out;
    out.masked = draw_region_mask(static_cast<int>(features.rows()), p_mask, rng, excluded);
    out.features = apply_region_mask(features, out.masked);
    out.targets = features;
    return out;
}

const std::array<std::array<int, 3>, 5>& non_identity_permutations() {
    static const std::array<std::array<int, 3>, 5> perms = {{{0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}}};
    return perms;
}

std::vector<ShuffledTriplet> draw_triplet_shuffle(int m, double p_shuffle, Rng& rng) {
    if (m < 3) throw Error("too few regions");
    check_rate(p_shuffle, "p_shuffle", true);
    std::vector<ShuffledTriplet> map;
    for (int t = 0; t + 3 <= m; t += 3) {
        if (draw_unit(rng) < p_shuffle) {
            const auto& perm = non_identity_permutations()[static_cast<std::size_t>(draw_index(rng, 5))];
            map.push_back({t, perm});
        }
    }
    return map;
}

Matrix apply_shuffle(const Matrix& features, std::span<const ShuffledTriplet> map) {
    Matrix out = features;
    for (const auto& t : map) {
        if (t.start < 0 || t.start + 3 > features.rows()) throw Error("shuffle map out of range");
        for (int k = 0; k < 3; ++k) out.row(t.start + k) = features.row(t.start + t.source[static_cast<std::size_t>(k)]);
    }
    return out;
}

ShuffleResult shuffle_region_triplets(const Matrix& features, double p_shuffle, Rng& rng) {
    ShuffleResult out;
    out.map = draw_triplet_shuffle(static_cast<int>(features.rows()), p_shuffle, rng);
    out.features = apply_shuffle(features, out.map);
    return out;
}

HardSampleIndex::HardSampleIndex(std::vector<std::string> image_ids, std::vector<std::vector<Neighbor>> lists)
    : ids_(std::move(image_ids)), lists_(std::move(lists)) {
    if (ids_.size() != lists_.size()) throw Error("hard sample index: id/list count mismatch");
    for (std::size_t i = 0; i < ids_.size(); ++i)
        if (!pos_.emplace(ids_[i], static_cast<int>(i)).second)
            throw Error(fmt::format("hard sample index: duplicate image '{}'", ids_[i]));
}

int HardSampleIndex::find(std::string_view image_id) const {
    auto it = pos_.find(std::string(image_id));
    return it == pos_.end() ? -1 : it->second;
}

std::span<const Neighbor> HardSampleIndex::neighbors(std::string_view image_id) const {
    const int i = find(image_id);
    if (i < 0) return {};
    return neighbors(i);
}

std::string HardSampleIndex::serialize() const {
    std::string out;
    for (std::size_t i = 0; i < ids_.size(); ++i) {
        out += ids_[i];
        for (const auto& n : lists_[i]) out += fmt::format("\t{}\t{:.6f}", ids_[static_cast<std::size_t>(n.image)], n.similarity);
        out += '\n';
    }
    return out;
}

HardSampleIndex HardSampleIndex::parse(std::string_view text) {
    std::vector<std::string> ids;
    std::vector<std::vector<std::pair<std::string, double>>> raw;
    std::istringstream in{std::string(text)};
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::size_t start = 0;
        while (true) {
            const auto tab = line.find('\t', start);
            fields.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
            if (tab == std::string::npos) break;
            start = tab + 1;
        }
        if (fields.size() % 2 != 1) throw Error(fmt::format("hard sample index line {}: odd neighbor field count", line_no));
        ids.push_back(fields[0]);
        std::vector<std::pair<std::string, double>> row;
        for (std::size_t k = 1; k < fields.size(); k += 2) {
            try {
                row.emplace_back(fields[k], std::stod(fields[k + 1]));
            } catch (const std::exception&) {
                throw Error(fmt::format("hard sample index line {}: bad similarity '{}'", line_no, fields[k + 1]));
            }
        }
        raw.push_back(std::move(row));
    }
    std::unordered_map<std::string, int> pos;
    for (std::size_t i = 0; i < ids.size(); ++i) pos[ids[i]] = static_cast<int>(i);
    std::vector<std::vector<Neighbor>> lists;
    for (const auto& row : raw) {
        std::vector<Neighbor> l;
        for (const auto& [id, sim] : row) {
            auto it = pos.find(id);
            if (it == pos.end()) throw Error(fmt::format("hard sample index: unknown neighbor '{}'", id));
            l.push_back({it->second, sim});
        }
        lists.push_back(std::move(l));
    }
    return HardSampleIndex(std::move(ids), std::move(lists));
}

void HardSampleIndex::save(const std::filesystem::path& path) const { write_file(path, serialize()); }

HardSampleIndex HardSampleIndex::load(const std::filesystem::path& path) { return parse(read_file(path)); }

HardSampleIndex build_hard_sample_index(std::span<const ImageTextExample> corpus, int top_m) {
    if (corpus.size() < 2) throw Error("hard sample index needs at least 2 images");
    if (top_m <= 0) throw Error("top_m must be positive");
    const std::size_t n = corpus.size();

    // Candidates are visited in image_id order so that a stable sort on
    // similarity breaks ties by id.
    std::vector<std::size_t> by_id(n);
    std::iota(by_id.begin(), by_id.end(), 0);
    std::sort(by_id.begin(), by_id.end(), [&](auto a, auto b) { return corpus[a].image_id < corpus[b].image_id; });

    std::vector<Vector> unit;
    unit.reserve(n);
    for (const auto& ex : corpus) {
        Vector v = mean_rows(ex.features);
        const double norm = v.norm();
        unit.push_back(norm > 0.0 ? Vector(v / norm) : v);
    }

    std::vector<std::string> ids;
    std::vector<std::vector<Neighbor>> lists;
    for (std::size_t i = 0; i < n; ++i) {
        ids.push_back(corpus[i].image_id);
        std::vector<Neighbor> cand;
        for (std::size_t j : by_id)
            if (j != i) cand.push_back({static_cast<int>(j), unit[i].dot(unit[j])});
        std::stable_sort(cand.begin(), cand.end(), [](const Neighbor& a, const Neighbor& b) { return a.similarity > b.similarity; });
        if (cand.size() > static_cast<std::size_t>(top_m)) cand.resize(static_cast<std::size_t>(top_m));
        lists.push_back(std::move(cand));
    }
    return HardSampleIndex(std::move(ids), std::move(lists));
}

RegionBank::RegionBank(std::span<const ImageTextExample> corpus, const Vocabulary& vocab) {
    for (const auto& ex : corpus) {
        if (!pos_.emplace(ex.image_id, static_cast<int>(ids_.size())).second)
            throw Error(fmt::format("duplicate image_id '{}'", ex.image_id));
        ids_.push_back(ex.image_id);
        regions_.push_back(resolve_regions(ex, vocab));
    }
}

int RegionBank::find(std::string_view image_id) const {
    auto it = pos_.find(std::string(image_id));
    return it == pos_.end() ? -1 : it->second;
}

const RegionSet& RegionBank::at(std::string_view image_id) const {
    const int i = find(image_id);
    if (i < 0) throw Error(fmt::format("image '{}' not in region bank", image_id));
    return regions(i);
}

NegativeDraw sample_negative_pair(std::string_view image_id, const HardSampleIndex* index, const RegionBank& bank,
                                  double p_replace, Rng& rng) {
    check_rate(p_replace, "p_replace", true);
    NegativeDraw out;
    out.image_id = std::string(image_id);
    out.regions = &bank.at(image_id);
    out.match_label = 1;
    if (!(draw_unit(rng) < p_replace)) return out;

    std::vector<std::string> hard;
    if (index) {
        for (const auto& n : index->neighbors(image_id)) {
            const auto& id = index->image_id(n.image);
            if (id != image_id && bank.find(id) >= 0) hard.push_back(id);
        }
    }
    if (!hard.empty()) {
        out.image_id = hard[static_cast<std::size_t>(draw_index(rng, static_cast<int>(hard.size())))];
    } else {
        const int self = bank.find(image_id);
        const int n = static_cast<int>(bank.size());
        if (n < 2) throw Error("no negative available");
        int pick = draw_index(rng, n - 1);
        if (pick >= self) ++pick;
        out.image_id = bank.image_id(pick);
    }
    out.regions = &bank.at(out.image_id);
    out.match_label = 0;
    return out;
}

RowVector build_topic_targets(std::span<const int> text_ids, std::span<const int> category_ids, const Vocabulary& vocab) {
    const int v = vocab.size();
    std::vector<std::uint8_t> in_text(static_cast<std::size_t>(v), 0);
    for (int id : text_ids) {
        if (id < 0 || id >= v) throw Error("text id out of vocabulary range");
        in_text[static_cast<std::size_t>(id)] = 1;
    }
    RowVector y = RowVector::Zero(v);
    for (int id : category_ids) {
        if (id < 0 || id >= v) throw Error("category id out of vocabulary range");
        if (vocab.is_special(id) || id == vocab.comma()) continue;
        if (in_text[static_cast<std::size_t>(id)]) y(id) = 1.0;
    }
    return y;
}

BatchInputs assemble_batch(std::span<const std::vector<int>> texts, std::span<const RegionSet* const> regions,
                           std::span<const std::string> image_ids, const Vocabulary& vocab) {
    if (texts.size() != regions.size() || texts.size() != image_ids.size()) throw Error("batch component size mismatch");
    if (texts.empty()) throw Error("empty batch");
    BatchInputs b;
    b.batch_size = static_cast<int>(texts.size());
    b.d_roi = static_cast<int>(regions.front()->features.cols());
    for (std::size_t i = 0; i < texts.size(); ++i) {
        b.max_text_len = std::max(b.max_text_len, static_cast<int>(texts[i].size()));
        b.max_regions = std::max(b.max_regions, regions[i]->size());
    }
    const auto L = static_cast<std::size_t>(b.max_text_len);
    const auto M = static_cast<std::size_t>(b.max_regions);
    for (std::size_t i = 0; i < texts.size(); ++i) {
        const RegionSet& rs = *regions[i];
        if (rs.features.cols() != b.d_roi) throw Error("inconsistent region feature width in batch");
        std::vector<int> ids(L, Vocabulary::kPad);
        std::vector<std::uint8_t> valid(L, 0);
        for (std::size_t t = 0; t < texts[i].size(); ++t) {
            ids[t] = texts[i][t];
            valid[t] = 1;
        }
        b.text_ids.push_back(std::move(ids));
        b.text_valid.push_back(std::move(valid));
        b.text_mask_positions.emplace_back(L, 0);
        b.mlm_targets.emplace_back(L, -1);

        Matrix feats = Matrix::Zero(static_cast<Eigen::Index>(M), b.d_roi);
        Matrix boxes = Matrix::Zero(static_cast<Eigen::Index>(M), 4);
        feats.topRows(rs.size()) = rs.features;
        boxes.topRows(rs.size()) = rs.boxes;
        std::vector<std::uint8_t> rvalid(M, 0);
        std::vector<int> cats(M, -1), attrs(M, -1);
        for (int r = 0; r < rs.size(); ++r) {
            rvalid[static_cast<std::size_t>(r)] = 1;
            cats[static_cast<std::size_t>(r)] = rs.category_ids[static_cast<std::size_t>(r)];
            attrs[static_cast<std::size_t>(r)] = rs.attribute_ids[static_cast<std::size_t>(r)];
        }
        b.region_features.push_back(feats);
        b.region_targets.push_back(std::move(feats));
        b.boxes.push_back(std::move(boxes));
        b.region_valid.push_back(std::move(rvalid));
        b.region_mask_positions.emplace_back(M, 0);
        b.moc_category_targets.push_back(std::move(cats));
        b.moc_attribute_targets.push_back(std::move(attrs));
        b.shuffle_map.emplace_back();
        b.match_label.push_back(1);
        b.topic_targets.push_back(build_topic_targets(texts[i], rs.category_ids, vocab));
        b.image_ids.push_back(image_ids[i]);
    }
    return b;
}

BatchInputs build_batch(std::span<const StageExample* const> examples, TaskSet tasks, const Vocabulary& vocab,
                        const TransformConfig& cfg, const HardSampleIndex* index, const RegionBank* bank,
                        std::uint64_t seed) {
    if (examples.empty()) throw Error("empty batch");
    const bool need_pairs = tasks.contains(Task::ITM_HS);
    if (need_pairs && !bank) throw Error("configuration error: ITM_HS needs a region bank for negatives");
    if (need_pairs && cfg.hard_negatives && !index)
        throw Error("configuration error: ITM_HS needs a hard sample index");

    std::vector<std::vector<int>> texts;
    std::vector<const RegionSet*> regions;
    std::vector<std::string> ids;
    std::vector<int> labels;
    for (std::size_t i = 0; i < examples.size(); ++i) {
        const StageExample& ex = *examples[i];
        texts.push_back(ex.text_ids);
        if (need_pairs) {
            Rng rng(derive_seed(seed, 4 * i));
            const NegativeDraw d = sample_negative_pair(ex.image_id, cfg.hard_negatives ? index : nullptr, *bank,
                                                        cfg.replace_rate, rng);
            regions.push_back(d.regions);
            ids.push_back(d.image_id);
            labels.push_back(d.match_label);
        } else {
            regions.push_back(&ex.regions);
            ids.push_back(ex.image_id);
            labels.push_back(1);
        }
    }
    BatchInputs b = assemble_batch(texts, regions, ids, vocab);
    b.match_label = labels;

    const bool shuffle = tasks.contains(Task::IFRS);
    const bool mask_regions_needed = tasks.contains(Task::MRFR) || tasks.contains(Task::MOC);
    for (std::size_t i = 0; i < examples.size(); ++i) {
        const int m = regions[i]->size();
        {
            std::vector<std::uint8_t> shuffled(static_cast<std::size_t>(m), 0);
            if (shuffle) {
                Rng rng(derive_seed(seed, 4 * i + 1));
                b.shuffle_map[i] = draw_triplet_shuffle(m, cfg.shuffle_rate, rng);
                for (const auto& t : b.shuffle_map[i])
                    for (int k = 0; k < 3; ++k) shuffled[static_cast<std::size_t>(t.start + k)] = 1;
            }
            Matrix feats = regions[i]->features;
            if (mask_regions_needed) {
                Rng rng(derive_seed(seed, 4 * i + 2));
                const auto masked = draw_region_mask(m, cfg.region_mask_rate, rng, shuffled);
                std::copy(masked.begin(), masked.end(), b.region_mask_positions[i].begin());
                feats = apply_region_mask(feats, masked);
            }
            feats = apply_shuffle(feats, b.shuffle_map[i]);
            b.region_features[i].topRows(m) = feats;
        }
        if (tasks.contains(Task::MLM)) {
            Rng rng(derive_seed(seed, 4 * i + 3));
            const auto res = mask_tokens(texts[i], cfg.token_mask_rate, vocab.size(), rng);
            for (std::size_t t = 0; t < res.ids.size(); ++t) {
                b.text_ids[i][t] = res.ids[t];
                b.text_mask_positions[i][t] = res.masked[t];
                b.mlm_targets[i][t] = res.targets[t];
            }
        }
    }
    return b;
}

} // namespace msp
