// SPDX-License-Identifier: Apache-2.0

#include "msp/verify.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>

namespace msp {

namespace {

constexpr double kLossTolerance = 1e-6;

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

Matrix random_matrix(Rng& rng, int rows, int cols, double scale) {
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = uniform(rng, -scale, scale);
    return m;
}

std::vector<std::uint8_t> random_mask(Rng& rng, int n) {
    std::vector<std::uint8_t> m(static_cast<std::size_t>(n));
    for (auto& v : m) v = uniform(rng, 0, 1) < 0.5;
    m[static_cast<std::size_t>(uniform_int(rng, 0, n - 1))] = 1;
    return m;
}

std::vector<int> random_targets(Rng& rng, int n, int classes) {
    std::vector<int> t(static_cast<std::size_t>(n));
    for (auto& v : t) v = uniform_int(rng, 0, classes - 1);
    return t;
}

// Plain softmax, no max shift: inputs stay within a few units.
double ref_cross_entropy(const Matrix& logits, Eigen::Index r, int target) {
    double z = 0.0;
    for (Eigen::Index c = 0; c < logits.cols(); ++c) z += std::exp(logits(r, c));
    return -std::log(std::exp(logits(r, target)) / z);
}

double ref_bce(double logit, double y) {
    const double p = 1.0 / (1.0 + std::exp(-logit));
    return -(y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
}

VerifyCheck compare_losses(const std::string& name, int instances, Rng& rng,
                           const std::function<std::pair<double, double>(Rng&)>& draw) {
    double worst = 0.0;
    for (int i = 0; i < instances; ++i) {
        const auto [got, want] = draw(rng);
        worst = std::max(worst, std::abs(got - want));
    }
    return {fmt::format("loss reference: {}", name), worst <= kLossTolerance,
            fmt::format("{} instances, max abs diff {:.3e}", instances, worst)};
}

VerifyCheck rate_check(const std::string& name, double rate, double lo, double hi, long n) {
    return {name, rate >= lo && rate <= hi, fmt::format("{:.4f} over {} candidates, expected [{}, {}]", rate, n, lo, hi)};
}

} // namespace

std::vector<VerifyCheck> verify_parameter_counts() {
    const ModelConfig ref = ModelConfig::reference();
    const double s = static_cast<double>(count_parameters(Architecture::LxmertS, ref));
    const double full = static_cast<double>(count_parameters(Architecture::LxmertFull, ref));
    const auto within = [](double v, double target) { return std::abs(v - target) <= 0.03 * target; };
    const double ratio = s / full;
    return {
        {"parameter count: LXMERT_S", within(s, 84.3e6), fmt::format("{:.2f}M, expected 84.3M +- 3%", s / 1e6)},
        {"parameter count: LXMERT_FULL", within(full, 183.5e6), fmt::format("{:.2f}M, expected 183.5M +- 3%", full / 1e6)},
        {"parameter count: ratio", ratio >= 0.439 && ratio <= 0.479, fmt::format("{:.4f}, expected [0.439, 0.479]", ratio)},
    };
}

std::vector<VerifyCheck> verify_loss_references(int instances, std::uint64_t seed) {
    Rng rng(derive_seed(seed, 101));
    std::vector<VerifyCheck> out;

    out.push_back(compare_losses("MLM", instances, rng, [](Rng& g) {
        const int rows = uniform_int(g, 1, 8), cols = uniform_int(g, 2, 10);
        const Matrix logits = random_matrix(g, rows, cols, 3.0);
        const auto mask = random_mask(g, rows);
        const auto targets = random_targets(g, rows, cols);
        double sum = 0.0;
        int n = 0;
        for (int r = 0; r < rows; ++r)
            if (mask[static_cast<std::size_t>(r)]) {
                sum += ref_cross_entropy(logits, r, targets[static_cast<std::size_t>(r)]);
                ++n;
            }
        return std::pair{loss_mlm(logits, mask, targets).value, sum / n};
    }));

    out.push_back(compare_losses("MRFR", instances, rng, [](Rng& g) {
        const int rows = uniform_int(g, 1, 8), cols = uniform_int(g, 1, 6);
        const Matrix pred = random_matrix(g, rows, cols, 2.0), target = random_matrix(g, rows, cols, 2.0);
        const auto mask = random_mask(g, rows);
        double sum = 0.0;
        int n = 0;
        for (int r = 0; r < rows; ++r) {
            if (!mask[static_cast<std::size_t>(r)]) continue;
            for (int c = 0; c < cols; ++c) sum += (pred(r, c) - target(r, c)) * (pred(r, c) - target(r, c));
            ++n;
        }
        return std::pair{loss_mrfr(pred, mask, target).value, sum / n};
    }));

    out.push_back(compare_losses("MOC", instances, rng, [](Rng& g) {
        const int rows = uniform_int(g, 1, 8), nc = uniform_int(g, 2, 8), na = uniform_int(g, 2, 6);
        const Matrix cl = random_matrix(g, rows, nc, 3.0), al = random_matrix(g, rows, na, 3.0);
        const auto mask = random_mask(g, rows);
        const auto ct = random_targets(g, rows, nc), at = random_targets(g, rows, na);
        double cat = 0.0, attr = 0.0;
        int n = 0;
        for (int r = 0; r < rows; ++r) {
            const auto i = static_cast<std::size_t>(r);
            if (!mask[i]) continue;
            cat += ref_cross_entropy(cl, r, ct[i]);
            attr += ref_cross_entropy(al, r, at[i]);
            ++n;
        }
        return std::pair{loss_moc(cl, al, mask, ct, at).value, cat / n + attr / n};
    }));

    out.push_back(compare_losses("IFRS", instances, rng, [](Rng& g) {
        const int triplets = uniform_int(g, 1, 4), cols = uniform_int(g, 1, 6);
        const int rows = 3 * triplets;
        const Matrix pred = random_matrix(g, rows, cols, 2.0), original = random_matrix(g, rows, cols, 2.0);
        std::vector<ShuffledTriplet> map;
        for (int t = 0; t < triplets; ++t)
            if (uniform(g, 0, 1) < 0.6) map.push_back({3 * t, non_identity_permutations()[static_cast<std::size_t>(uniform_int(g, 0, 4))]});
        double sum = 0.0;
        for (const auto& t : map)
            for (int k = 0; k < 3; ++k)
                for (int c = 0; c < cols; ++c) {
                    const double d = pred(t.start + k, c) - original(t.start + k, c);
                    sum += d * d;
                }
        const double want = map.empty() ? 0.0 : sum / (3.0 * static_cast<double>(map.size()));
        return std::pair{loss_ifrs(pred, map, original).value, want};
    }));

    const auto topic = [](Rng& g) {
        const int rows = uniform_int(g, 1, 6), cols = uniform_int(g, 1, 12);
        const Matrix logits = random_matrix(g, rows, cols, 4.0);
        Matrix y(rows, cols);
        for (Eigen::Index i = 0; i < y.size(); ++i) y.data()[i] = uniform(g, 0, 1) < 0.3 ? 1.0 : 0.0;
        double sum = 0.0;
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c) sum += ref_bce(logits(r, c), y(r, c));
        return std::pair{loss_topic(logits, y).value, sum / (rows * cols)};
    };
    out.push_back(compare_losses("TITP", instances, rng, topic));
    out.push_back(compare_losses("TITS", instances, rng, topic));

    out.push_back(compare_losses("ITM_HS", instances, rng, [](Rng& g) {
        const int rows = uniform_int(g, 1, 10);
        const Matrix logits = random_matrix(g, rows, 1, 4.0);
        const auto labels = random_targets(g, rows, 2);
        double sum = 0.0;
        for (int r = 0; r < rows; ++r) sum += ref_bce(logits(r, 0), labels[static_cast<std::size_t>(r)]);
        return std::pair{loss_itm_hs(logits, labels).value, sum / rows};
    }));
    return out;
}

std::vector<ImageTextExample> gradient_check_corpus(std::uint64_t seed) {
    SyntheticCorpusConfig cfg;
    cfg.n_images = 6;
    cfg.m_regions = 6;
    cfg.n_categories = 4;
    cfg.d_roi = 6;
    cfg.n_attributes = 3;
    cfg.seed = seed;
    return generate_synthetic_corpus(cfg);
}

ModelConfig gradient_check_model_config(const Vocabulary& vocab, int d_roi, int max_regions) {
    ModelConfig mc;
    mc.hidden_size = 8;
    mc.num_heads = 2;
    mc.num_xlayers = 1;
    mc.ffn_size = 16;
    mc.d_roi = d_roi;
    mc.vocab_size = vocab.size();
    mc.n_attr = vocab.attribute_count();
    mc.max_text_len = 24;
    mc.max_regions = max_regions;
    mc.dropout = 0.0;
    mc.init_std = 0.3;
    mc.layer_norm_eps = 1e-5;
    return mc;
}

BatchInputs gradient_check_batch(Task task, std::span<const ImageTextExample> corpus, const Vocabulary& vocab,
                                 std::uint64_t seed) {
    Granularity g = Granularity::Sentence;
    if (task == Task::IFRS) g = Granularity::Token;
    if (task == Task::TITP) g = Granularity::Phrase;
    const StageCorpus sc = build_stage_corpus(g, corpus, vocab);
    if (sc.examples.empty()) throw Error("gradient check corpus has no examples");
    std::vector<const StageExample*> ptrs;
    for (std::size_t i = 0; i < sc.examples.size() && i < 4; ++i) ptrs.push_back(&sc.examples[i]);

    TransformConfig cfg;
    cfg.token_mask_rate = 0.3;
    cfg.region_mask_rate = 0.4;
    cfg.shuffle_rate = task == Task::IFRS ? 1.0 : 0.0;
    cfg.replace_rate = 0.5;
    const RegionBank bank(corpus, vocab);
    const HardSampleIndex index = build_hard_sample_index(corpus, 3);
    const TaskSet tasks{task};

    for (std::uint64_t k = 0; k < 64; ++k) {
        BatchInputs b = build_batch(ptrs, tasks, vocab, cfg, &index, &bank, derive_seed(seed, k));
        bool pos = false, neg = false, region_masked = false;
        for (std::size_t i = 0; i < b.match_label.size(); ++i) {
            (b.match_label[i] ? pos : neg) = true;
            if (b.match_label[i])
                for (auto m : b.region_mask_positions[i]) region_masked |= m != 0;
        }
        if (task == Task::ITM_HS && !(pos && neg)) continue;
        if ((task == Task::MRFR || task == Task::MOC) && !region_masked) continue;
        return b;
    }
    throw Error(fmt::format("could not draw a usable gradient check batch for {}", to_string(task)));
}

std::vector<VerifyCheck> verify_gradients(std::uint64_t seed, double tolerance) {
    const auto corpus = gradient_check_corpus(seed);
    const Vocabulary vocab = build_vocabulary(corpus);
    const ModelConfig mc = gradient_check_model_config(vocab, 6, 6);
    std::vector<VerifyCheck> out;
    for (Task t : kAllTasks) {
        Model model(mc, derive_seed(seed, 7));
        const BatchInputs batch = gradient_check_batch(t, corpus, vocab, derive_seed(seed, 8));
        const auto blocks = gradient_check(model, batch, TaskSet{t});
        double worst = 0.0;
        std::string worst_name;
        for (const auto& b : blocks)
            if (b.relative_error >= worst) {
                worst = b.relative_error;
                worst_name = b.name;
            }
        out.push_back({fmt::format("gradient check: {}", to_string(t)), worst <= tolerance,
                       fmt::format("{} blocks, worst relative error {:.3e} ({})", blocks.size(), worst, worst_name)});
    }
    return out;
}

std::vector<VerifyCheck> verify_transform_rates(int candidates, std::uint64_t seed) {
    std::vector<VerifyCheck> out;
    constexpr int kVocab = 60;
    constexpr int kLength = 38;
    constexpr int kRegions = 36;

    {
        Rng rng(derive_seed(seed, 201));
        long total = 0, masked = 0;
        std::vector<int> text(kLength + 2);
        while (total < candidates) {
            text.front() = Vocabulary::kCls;
            text.back() = Vocabulary::kSep;
            for (int i = 1; i <= kLength; ++i) text[static_cast<std::size_t>(i)] = uniform_int(rng, Vocabulary::kNumSpecial, kVocab - 1);
            const auto r = mask_tokens(text, 0.15, kVocab, rng);
            for (auto m : r.masked) masked += m;
            total += kLength;
        }
        out.push_back(rate_check("transform rate: token mask", static_cast<double>(masked) / total, 0.135, 0.165, total));
    }
    {
        Rng rng(derive_seed(seed, 202));
        long total = 0, masked = 0;
        while (total < candidates) {
            for (auto m : draw_region_mask(kRegions, 0.15, rng)) masked += m;
            total += kRegions;
        }
        out.push_back(rate_check("transform rate: region mask", static_cast<double>(masked) / total, 0.135, 0.165, total));
    }
    {
        Rng rng(derive_seed(seed, 203));
        long total = 0, shuffled = 0;
        while (total < candidates) {
            shuffled += static_cast<long>(draw_triplet_shuffle(kRegions, 0.05, rng).size());
            total += kRegions / 3;
        }
        out.push_back(rate_check("transform rate: triplet shuffle", static_cast<double>(shuffled) / total, 0.03, 0.07, total));
    }
    {
        Rng rng(derive_seed(seed, 204));
        int preserved = 0;
        constexpr int kTrials = 1000;
        for (int t = 0; t < kTrials; ++t) {
            const Matrix f = random_matrix(rng, kRegions, 4, 1.0);
            const auto r = shuffle_region_triplets(f, 0.5, rng);
            std::vector<std::vector<double>> a, b;
            for (int i = 0; i < kRegions; ++i) {
                a.emplace_back(f.row(i).begin(), f.row(i).end());
                b.emplace_back(r.features.row(i).begin(), r.features.row(i).end());
            }
            std::sort(a.begin(), a.end());
            std::sort(b.begin(), b.end());
            preserved += a == b;
        }
        out.push_back({"transform: shuffle preserves feature multiset", preserved == kTrials,
                       fmt::format("{}/{} trials", preserved, kTrials)});
    }
    {
        SyntheticCorpusConfig cfg;
        cfg.n_images = 8;
        cfg.m_regions = 3;
        cfg.n_categories = 4;
        cfg.d_roi = 4;
        cfg.seed = seed;
        const auto corpus = generate_synthetic_corpus(cfg);
        const Vocabulary vocab = build_vocabulary(corpus);
        const RegionBank bank(corpus, vocab);
        const HardSampleIndex index = build_hard_sample_index(corpus, 3);
        Rng rng(derive_seed(seed, 205));
        long replaced = 0;
        for (int i = 0; i < candidates; ++i) {
            const auto& id = corpus[static_cast<std::size_t>(i) % corpus.size()].image_id;
            replaced += sample_negative_pair(id, &index, bank, 0.5, rng).match_label == 0;
        }
        out.push_back(rate_check("transform rate: ITM replacement", static_cast<double>(replaced) / candidates, 0.48,
                                 0.52, candidates));
    }
    return out;
}

std::vector<VerifyCheck> run_verification(const VerifyOptions& opts,
                                          const std::function<void(const VerifyCheck&)>& progress) {
    std::vector<VerifyCheck> all;
    auto add = [&](std::vector<VerifyCheck> checks) {
        for (auto& c : checks) {
            if (progress) progress(c);
            all.push_back(std::move(c));
        }
    };
    add(verify_parameter_counts());
    add(verify_loss_references(opts.loss_instances, opts.seed));
    add(verify_transform_rates(opts.mask_candidates, opts.seed));
    if (opts.gradients) add(verify_gradients(opts.seed));
    return all;
}

} // namespace msp
