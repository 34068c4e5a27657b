// SPDX-License-Identifier: Apache-2.0

#include "msp/corpus.hpp"

#include "msp/util.hpp"

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

namespace msp {

using nlohmann::json;

namespace {

constexpr int kCorpusFormatVersion = 1;

const std::vector<std::string>& category_names() {
    static const std::vector<std::string> names = {
        "car",  "tree",  "dog",   "cat",  "horse", "ball",  "table", "chair",  "cup",   "bird",
        "boat", "bike",  "bench", "lamp", "book",  "sign",  "door",  "window", "clock", "bag",
        "hat",  "kite",  "plate", "vase", "rock",  "fence", "train", "bus",    "truck", "bottle"};
    return names;
}

const std::vector<std::string>& attribute_names() {
    static const std::vector<std::string> names = {"red",   "green",  "blue",   "white", "black",  "old",
                                                   "small", "large",  "wooden", "shiny", "yellow", "striped"};
    return names;
}

const std::vector<std::string> kVerbs = {"sits", "stands", "rests", "waits"};
const std::vector<std::string> kPrepositions = {"near", "beside", "behind"};
const std::vector<std::string> kSubjects = {"man", "woman", "person", "child"};
const std::vector<std::string> kActions = {"running", "walking", "jumping", "riding"};

double round4(double v) { return std::round(v * 1e4) / 1e4; }

std::vector<std::string> split_words(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream in(s);
    std::string w;
    while (in >> w) out.push_back(w);
    return out;
}

std::string join_words(const std::vector<std::string>& words) {
    std::string out;
    for (const auto& w : words) {
        if (!out.empty()) out += ' ';
        out += w;
    }
    return out;
}

json matrix_to_json(const Matrix& m) {
    json rows = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        json row = json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        rows.push_back(std::move(row));
    }
    return rows;
}

Matrix matrix_from_json(const json& j, int cols, const char* field) {
    if (!j.is_array()) throw Error(fmt::format("field '{}' must be an array", field));
    Matrix m(static_cast<Eigen::Index>(j.size()), cols);
    for (std::size_t r = 0; r < j.size(); ++r) {
        const json& row = j[r];
        if (!row.is_array() || static_cast<int>(row.size()) != cols)
            throw Error(fmt::format("field '{}' row {} must have {} values", field, r, cols));
        for (int c = 0; c < cols; ++c) m(static_cast<Eigen::Index>(r), c) = row[static_cast<std::size_t>(c)].get<double>();
    }
    return m;
}

StageExample make_stage_example(const ImageTextExample& ex, const Vocabulary& vocab, const std::vector<int>& body) {
    StageExample out;
    out.text_ids.reserve(body.size() + 2);
    out.text_ids.push_back(Vocabulary::kCls);
    out.text_ids.insert(out.text_ids.end(), body.begin(), body.end());
    out.text_ids.push_back(Vocabulary::kSep);
    out.regions = resolve_regions(ex, vocab);
    out.image_id = ex.image_id;
    return out;
}

} // namespace

bool ImageTextExample::operator==(const ImageTextExample& o) const {
    return image_id == o.image_id && features == o.features && boxes == o.boxes && categories == o.categories &&
           attributes == o.attributes && caption == o.caption && phrases == o.phrases;
}

const std::vector<std::string>& Vocabulary::special_tokens() {
    static const std::vector<std::string> specials = {"[PAD]", "[MASK]", "[CLS]", "[SEP]", "[UNK]"};
    return specials;
}

Vocabulary::Vocabulary(std::vector<std::string> tokens, std::vector<std::string> attribute_classes)
    : tokens_(std::move(tokens)), attributes_(std::move(attribute_classes)) {
    const auto& specials = special_tokens();
    if (tokens_.size() < specials.size() || !std::equal(specials.begin(), specials.end(), tokens_.begin()))
        throw Error("vocabulary must start with the special tokens");
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
        if (!ids_.emplace(tokens_[i], static_cast<int>(i)).second)
            throw Error(fmt::format("duplicate vocabulary token '{}'", tokens_[i]));
    }
    for (std::size_t i = 0; i < attributes_.size(); ++i) {
        if (!attr_ids_.emplace(attributes_[i], static_cast<int>(i)).second)
            throw Error(fmt::format("duplicate attribute class '{}'", attributes_[i]));
    }
    if (auto it = ids_.find(std::string(kComma)); it != ids_.end()) comma_ = it->second;
}

int Vocabulary::index(std::string_view token) const {
    auto it = ids_.find(std::string(token));
    return it == ids_.end() ? kUnk : it->second;
}

bool Vocabulary::contains(std::string_view token) const { return ids_.count(std::string(token)) != 0; }

int Vocabulary::attribute_index(std::string_view attr) const {
    auto it = attr_ids_.find(std::string(attr));
    if (it == attr_ids_.end()) throw Error(fmt::format("unknown attribute class '{}'", attr));
    return it->second;
}

std::vector<int> Vocabulary::encode(std::span<const std::string> words) const {
    std::vector<int> ids;
    ids.reserve(words.size());
    for (const auto& w : words) ids.push_back(index(w));
    return ids;
}

Vocabulary build_vocabulary(std::span<const ImageTextExample> examples, std::span<const std::string> extra_tokens) {
    if (examples.empty()) throw Error("empty corpus");
    std::set<std::string> content;
    std::set<std::string> attrs;
    bool any_phrase = false;
    for (const auto& ex : examples) {
        content.insert(ex.caption.begin(), ex.caption.end());
        for (const auto& p : ex.phrases) {
            content.insert(p.tokens.begin(), p.tokens.end());
            any_phrase = true;
        }
        content.insert(ex.categories.begin(), ex.categories.end());
        content.insert(ex.attributes.begin(), ex.attributes.end());
        attrs.insert(ex.attributes.begin(), ex.attributes.end());
    }
    content.insert(extra_tokens.begin(), extra_tokens.end());
    if (any_phrase) content.insert(std::string(Vocabulary::kComma));
    for (const auto& s : Vocabulary::special_tokens()) content.erase(s);

    std::vector<std::string> tokens = Vocabulary::special_tokens();
    tokens.insert(tokens.end(), content.begin(), content.end());
    return Vocabulary(std::move(tokens), std::vector<std::string>(attrs.begin(), attrs.end()));
}

void validate_example(const ImageTextExample& ex) {
    const auto m = ex.features.rows();
    auto fail = [&](const std::string& what) { throw Error(fmt::format("image '{}': {}", ex.image_id, what)); };
    if (ex.image_id.empty()) throw Error("record has an empty image_id");
    if (ex.caption.empty()) fail("field 'caption' is empty");
    if (ex.boxes.rows() != m || ex.boxes.cols() != 4) fail(fmt::format("field 'boxes' must be {}x4", m));
    if (static_cast<Eigen::Index>(ex.categories.size()) != m)
        fail(fmt::format("field 'categories' has {} labels for {} features", ex.categories.size(), m));
    if (static_cast<Eigen::Index>(ex.attributes.size()) != m)
        fail(fmt::format("field 'attributes' has {} labels for {} features", ex.attributes.size(), m));
    for (Eigen::Index r = 0; r < m; ++r) {
        const double x1 = ex.boxes(r, 0), y1 = ex.boxes(r, 1), x2 = ex.boxes(r, 2), y2 = ex.boxes(r, 3);
        if (!(x1 <= x2) || !(y1 <= y2)) fail(fmt::format("box {} violates x1 <= x2 and y1 <= y2", r));
        for (int c = 0; c < 4; ++c)
            if (!(ex.boxes(r, c) >= 0.0 && ex.boxes(r, c) <= 1.0)) fail(fmt::format("box {} is not normalized", r));
    }
    const auto& specials = Vocabulary::special_tokens();
    for (const auto& c : ex.categories) {
        if (c.empty()) fail("empty category label");
        if (std::find(specials.begin(), specials.end(), c) != specials.end() || c == Vocabulary::kComma)
            fail(fmt::format("category label '{}' is reserved", c));
    }
    if (!ex.features.allFinite()) fail("field 'features' contains non-finite values");
}

std::string serialize_corpus(std::span<const ImageTextExample> examples) {
    if (examples.empty()) throw Error("empty corpus");
    const int d_roi = static_cast<int>(examples.front().features.cols());
    const int m = examples.front().region_count();
    std::string out;
    json header = {{"format", "msp-corpus"}, {"version", kCorpusFormatVersion}, {"d_roi", d_roi}, {"m", m}};
    out += header.dump() + "\n";
    for (const auto& ex : examples) {
        json phrases = json::array();
        for (const auto& p : ex.phrases) phrases.push_back({{"text", join_words(p.tokens)}, {"verb", p.is_verb_phrase}});
        json rec = {{"image_id", ex.image_id},
                    {"features", matrix_to_json(ex.features)},
                    {"boxes", matrix_to_json(ex.boxes)},
                    {"categories", ex.categories},
                    {"attributes", ex.attributes},
                    {"caption", join_words(ex.caption)},
                    {"phrases", std::move(phrases)}};
        out += rec.dump() + "\n";
    }
    return out;
}

void save_corpus(const std::filesystem::path& path, std::span<const ImageTextExample> examples) {
    write_file(path, serialize_corpus(examples));
}

std::vector<ImageTextExample> parse_corpus(std::string_view text) {
    std::istringstream in{std::string(text)};
    std::string line;
    int line_no = 0;
    int d_roi = -1;
    int m = -1;
    std::vector<ImageTextExample> out;
    std::set<std::string> seen;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            json rec = json::parse(line);
            if (d_roi < 0) {
                if (!rec.contains("d_roi") || !rec.contains("m")) throw Error("header must declare 'd_roi' and 'm'");
                d_roi = rec.at("d_roi").get<int>();
                m = rec.at("m").get<int>();
                if (d_roi <= 0 || m <= 0) throw Error("header 'd_roi' and 'm' must be positive");
                continue;
            }
            for (const char* key : {"image_id", "features", "boxes", "categories", "attributes", "caption", "phrases"})
                if (!rec.contains(key)) throw Error(fmt::format("missing field '{}'", key));
            ImageTextExample ex;
            ex.image_id = rec.at("image_id").get<std::string>();
            ex.features = matrix_from_json(rec.at("features"), d_roi, "features");
            if (ex.features.rows() != m)
                throw Error(fmt::format("field 'features' has {} rows, header declares m = {}", ex.features.rows(), m));
            ex.boxes = matrix_from_json(rec.at("boxes"), 4, "boxes");
            ex.categories = rec.at("categories").get<std::vector<std::string>>();
            ex.attributes = rec.at("attributes").get<std::vector<std::string>>();
            ex.caption = split_words(rec.at("caption").get<std::string>());
            for (const auto& p : rec.at("phrases")) {
                if (!p.contains("text") || !p.contains("verb")) throw Error("phrase needs 'text' and 'verb'");
                ex.phrases.push_back({split_words(p.at("text").get<std::string>()), p.at("verb").get<bool>()});
            }
            validate_example(ex);
            if (!seen.insert(ex.image_id).second) throw Error(fmt::format("duplicate image_id '{}'", ex.image_id));
            out.push_back(std::move(ex));
        } catch (const json::exception& e) {
            throw Error(fmt::format("corpus line {}: {}", line_no, e.what()));
        } catch (const Error& e) {
            throw Error(fmt::format("corpus line {}: {}", line_no, e.what()));
        }
    }
    if (d_roi < 0) throw Error("corpus has no header record");
    return out;
}

std::vector<ImageTextExample> load_corpus(const std::filesystem::path& path) { return parse_corpus(read_file(path)); }

std::vector<ImageTextExample> generate_synthetic_corpus(const SyntheticCorpusConfig& cfg) {
    if (cfg.n_images <= 0 || cfg.m_regions <= 0 || cfg.n_categories <= 0 || cfg.d_roi <= 0 || cfg.n_attributes <= 0)
        throw Error("synthetic corpus counts must be positive");
    if (cfg.box_jitter < 0.0) throw Error("box_jitter must be non-negative");
    if (cfg.verb_phrase_rate < 0.0 || cfg.verb_phrase_rate > 1.0) throw Error("verb_phrase_rate must be in [0, 1]");

    // RNG consumption order: category prototypes, attribute prototypes,
    // dominant attributes, box anchors, then images in id order.
    Rng rng(cfg.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    std::vector<std::string> cats;
    for (int c = 0; c < cfg.n_categories; ++c)
        cats.push_back(c < static_cast<int>(category_names().size()) ? category_names()[static_cast<std::size_t>(c)]
                                                                     : fmt::format("object{}", c));
    std::vector<std::string> attrs;
    for (int a = 0; a < cfg.n_attributes; ++a)
        attrs.push_back(a < static_cast<int>(attribute_names().size()) ? attribute_names()[static_cast<std::size_t>(a)]
                                                                       : fmt::format("attr{}", a));

    Matrix cat_proto(cfg.n_categories, cfg.d_roi);
    for (Eigen::Index i = 0; i < cat_proto.size(); ++i) cat_proto.data()[i] = normal(rng);
    Matrix attr_proto(cfg.n_attributes, cfg.d_roi);
    for (Eigen::Index i = 0; i < attr_proto.size(); ++i) attr_proto.data()[i] = 0.5 * normal(rng);
    std::vector<int> dominant(static_cast<std::size_t>(cfg.n_categories));
    for (auto& d : dominant) d = std::uniform_int_distribution<int>(0, cfg.n_attributes - 1)(rng);
    // Each category sits around a characteristic box (x1, y1, width, height).
    Matrix anchor(cfg.n_categories, 4);
    for (int c = 0; c < cfg.n_categories; ++c) {
        anchor(c, 0) = 0.02 + 0.74 * unit(rng);
        anchor(c, 1) = 0.02 + 0.74 * unit(rng);
        anchor(c, 2) = 0.05 + 0.15 * unit(rng);
        anchor(c, 3) = 0.05 + 0.15 * unit(rng);
    }
    auto jitter = [&] { return cfg.box_jitter * (2.0 * unit(rng) - 1.0); };

    const int max_present = std::min(4, cfg.n_categories);
    std::vector<ImageTextExample> out;
    out.reserve(static_cast<std::size_t>(cfg.n_images));
    for (int i = 0; i < cfg.n_images; ++i) {
        ImageTextExample ex;
        ex.image_id = fmt::format("img{:05d}", i);

        const int n_present = std::uniform_int_distribution<int>(std::min(2, max_present), max_present)(rng);
        std::vector<int> pool(static_cast<std::size_t>(cfg.n_categories));
        for (int c = 0; c < cfg.n_categories; ++c) pool[static_cast<std::size_t>(c)] = c;
        for (int k = 0; k < n_present; ++k) {
            const int j = std::uniform_int_distribution<int>(k, cfg.n_categories - 1)(rng);
            std::swap(pool[static_cast<std::size_t>(k)], pool[static_cast<std::size_t>(j)]);
        }
        std::vector<int> present(pool.begin(), pool.begin() + n_present);

        ex.features.resize(cfg.m_regions, cfg.d_roi);
        ex.boxes.resize(cfg.m_regions, 4);
        std::vector<int> region_cat, region_attr;
        for (int r = 0; r < cfg.m_regions; ++r) {
            const int c = present[static_cast<std::size_t>(
                std::uniform_int_distribution<int>(0, n_present - 1)(rng))];
            int a = dominant[static_cast<std::size_t>(c)];
            if (unit(rng) >= cfg.dominant_attribute_rate) a = std::uniform_int_distribution<int>(0, cfg.n_attributes - 1)(rng);
            region_cat.push_back(c);
            region_attr.push_back(a);
            for (int d = 0; d < cfg.d_roi; ++d)
                ex.features(r, d) = round4(cat_proto(c, d) + attr_proto(a, d) + cfg.feature_noise * normal(rng));
            const double x1 = std::clamp(anchor(c, 0) + jitter(), 0.0, 0.78);
            const double y1 = std::clamp(anchor(c, 1) + jitter(), 0.0, 0.78);
            ex.boxes(r, 0) = round4(x1);
            ex.boxes(r, 1) = round4(y1);
            ex.boxes(r, 2) = round4(x1 + std::clamp(anchor(c, 2) + jitter(), 0.01, 0.22));
            ex.boxes(r, 3) = round4(y1 + std::clamp(anchor(c, 3) + jitter(), 0.01, 0.22));
            ex.categories.push_back(cats[static_cast<std::size_t>(c)]);
            ex.attributes.push_back(attrs[static_cast<std::size_t>(a)]);
        }

        // Distinct categories in order of first appearance, each paired with
        // the attribute of its first region.
        std::vector<std::pair<int, int>> mentions;
        for (int r = 0; r < cfg.m_regions; ++r) {
            const int c = region_cat[static_cast<std::size_t>(r)];
            if (std::none_of(mentions.begin(), mentions.end(), [&](auto& p) { return p.first == c; }))
                mentions.emplace_back(c, region_attr[static_cast<std::size_t>(r)]);
        }

        const int n_caption = std::uniform_int_distribution<int>(1, std::min<int>(3, static_cast<int>(mentions.size())))(rng);
        const auto& verb = kVerbs[std::uniform_int_distribution<std::size_t>(0, kVerbs.size() - 1)(rng)];
        for (int k = 0; k < n_caption; ++k) {
            const auto [c, a] = mentions[static_cast<std::size_t>(k)];
            if (k > 0) ex.caption.push_back(kPrepositions[std::uniform_int_distribution<std::size_t>(0, kPrepositions.size() - 1)(rng)]);
            ex.caption.push_back("a");
            ex.caption.push_back(attrs[static_cast<std::size_t>(a)]);
            ex.caption.push_back(cats[static_cast<std::size_t>(c)]);
            if (k == 0) ex.caption.push_back(verb);
        }

        // One phrase slot per mentioned category; each slot independently
        // becomes a verb phrase about a non-category subject.
        for (const auto& [c, a] : mentions) {
            if (unit(rng) < cfg.verb_phrase_rate) {
                const auto& subj = kSubjects[std::uniform_int_distribution<std::size_t>(0, kSubjects.size() - 1)(rng)];
                const auto& act = kActions[std::uniform_int_distribution<std::size_t>(0, kActions.size() - 1)(rng)];
                ex.phrases.push_back({{subj, act}, true});
            } else {
                ex.phrases.push_back({{attrs[static_cast<std::size_t>(a)], cats[static_cast<std::size_t>(c)]}, false});
            }
        }
        out.push_back(std::move(ex));
    }
    return out;
}

std::vector<ImageTextExample> generate_synthetic_corpus(int n_images, int m_regions, int n_categories,
                                                        std::uint64_t seed) {
    SyntheticCorpusConfig cfg;
    cfg.n_images = n_images;
    cfg.m_regions = m_regions;
    cfg.n_categories = n_categories;
    cfg.seed = seed;
    return generate_synthetic_corpus(cfg);
}

RegionSet resolve_regions(const ImageTextExample& ex, const Vocabulary& vocab) {
    RegionSet rs;
    rs.features = ex.features;
    rs.boxes = ex.boxes;
    rs.category_ids.reserve(ex.categories.size());
    for (const auto& c : ex.categories) {
        if (!vocab.contains(c)) throw Error(fmt::format("image '{}': category '{}' not in vocabulary", ex.image_id, c));
        rs.category_ids.push_back(vocab.index(c));
    }
    for (const auto& a : ex.attributes) rs.attribute_ids.push_back(vocab.attribute_index(a));
    return rs;
}

StageCorpus build_token_stage_corpus(std::span<const ImageTextExample> examples, const Vocabulary& vocab) {
    StageCorpus out;
    out.granularity = Granularity::Token;
    for (const auto& ex : examples) out.examples.push_back(make_stage_example(ex, vocab, vocab.encode(ex.categories)));
    return out;
}

StageCorpus build_phrase_stage_corpus(std::span<const ImageTextExample> examples, const Vocabulary& vocab) {
    StageCorpus out;
    out.granularity = Granularity::Phrase;
    for (const auto& ex : examples) {
        std::vector<int> body;
        for (const auto& p : ex.phrases) {
            if (p.is_verb_phrase || p.tokens.empty()) continue;
            if (!body.empty()) {
                if (vocab.comma() < 0) throw Error("vocabulary has no comma token");
                body.push_back(vocab.comma());
            }
            for (const auto& t : p.tokens) body.push_back(vocab.index(t));
        }
        if (body.empty()) {
            ++out.dropped;
            continue;
        }
        out.examples.push_back(make_stage_example(ex, vocab, body));
    }
    return out;
}

StageCorpus build_sentence_stage_corpus(std::span<const ImageTextExample> examples, const Vocabulary& vocab) {
    StageCorpus out;
    out.granularity = Granularity::Sentence;
    for (const auto& ex : examples) {
        if (ex.caption.empty()) {
            ++out.dropped;
            continue;
        }
        out.examples.push_back(make_stage_example(ex, vocab, vocab.encode(ex.caption)));
    }
    return out;
}

StageCorpus build_stage_corpus(Granularity g, std::span<const ImageTextExample> examples, const Vocabulary& vocab) {
    switch (g) {
    case Granularity::Token: return build_token_stage_corpus(examples, vocab);
    case Granularity::Phrase: return build_phrase_stage_corpus(examples, vocab);
    case Granularity::Sentence: return build_sentence_stage_corpus(examples, vocab);
    }
    throw Error("unknown granularity");
}

StageCorpus take_budget(StageCorpus corpus, std::size_t budget) {
    if (corpus.examples.size() > budget) corpus.examples.resize(budget);
    return corpus;
}

} // namespace msp
