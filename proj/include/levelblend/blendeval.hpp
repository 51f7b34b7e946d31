#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include "levelblend/generator.hpp"
#include "levelblend/level.hpp"
#include "levelblend/textops.hpp"
#include "levelblend/vocab.hpp"

namespace lvb {

// ---------------------------------------------------------------------------
// embedding interpolation
// ---------------------------------------------------------------------------

struct Interpolated {
    std::vector<float> raw;  // alpha*a + (1-alpha)*b
    std::vector<float> unit; // renormalized; what conditions the decoder
};

inline Interpolated interpolate(const std::vector<float>& a, const std::vector<float>& b, double alpha) {
    if (alpha < 0.0 || alpha > 1.0) fail("AlphaOutOfRange", "alpha must lie in [0,1]");
    if (a.size() != b.size()) fail("DimensionMismatch", "interpolate: embedding sizes differ");
    Interpolated out;
    out.raw.resize(a.size());
    for (std::size_t i = 0; i < a.size(); ++i)
        out.raw[i] = static_cast<float>(alpha * a[i] + (1.0 - alpha) * b[i]);
    out.unit = out.raw;
    double norm = 0.0;
    for (float v : out.unit) norm += static_cast<double>(v) * v;
    norm = std::sqrt(norm);
    if (norm > 1e-12)
        for (auto& v : out.unit) v = static_cast<float>(v / norm);
    return out;
}

// ---------------------------------------------------------------------------
// proxy visual features
// ---------------------------------------------------------------------------

// Deterministic stand-in for a pretrained visual encoder: per-category
// histogram, a 4x4 pooled per-category occupancy grid, and horizontal +
// vertical category-transition counts, all L2-normalized together. Working
// over categories rather than raw tile ids keeps cross-game scores
// meaningful.
inline std::vector<float> proxy_features(const LevelGrid& g, const TileVocabulary& vocab) {
    const int ncat = static_cast<int>(tile_categories().size());
    const int H = g.height, W = g.width;
    std::vector<float> hist(static_cast<std::size_t>(ncat), 0.0f);
    std::vector<float> occupancy(static_cast<std::size_t>(ncat) * 16, 0.0f);
    float htrans = 0.0f, vtrans = 0.0f;

    std::vector<int> cat(static_cast<std::size_t>(H) * W);
    for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c) cat[static_cast<std::size_t>(r) * W + c] = vocab.category_of(g.at(r, c));

    const float cell_w = 1.0f / static_cast<float>(H * W);
    for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c) {
            int k = cat[static_cast<std::size_t>(r) * W + c];
            hist[static_cast<std::size_t>(k)] += cell_w;
            int br = std::min(r * 4 / H, 3), bc = std::min(c * 4 / W, 3);
            occupancy[static_cast<std::size_t>(k) * 16 + br * 4 + bc] += cell_w;
        }
    for (int r = 0; r < H; ++r)
        for (int c = 0; c + 1 < W; ++c)
            if (cat[static_cast<std::size_t>(r) * W + c] != cat[static_cast<std::size_t>(r) * W + c + 1]) htrans += 1.0f;
    for (int r = 0; r + 1 < H; ++r)
        for (int c = 0; c < W; ++c)
            if (cat[static_cast<std::size_t>(r) * W + c] != cat[static_cast<std::size_t>((r + 1)) * W + c]) vtrans += 1.0f;
    const float trans_scale = 1.0f / static_cast<float>(H * W);

    std::vector<float> feat;
    feat.reserve(hist.size() + occupancy.size() + 2);
    feat.insert(feat.end(), hist.begin(), hist.end());
    feat.insert(feat.end(), occupancy.begin(), occupancy.end());
    feat.push_back(htrans * trans_scale);
    feat.push_back(vtrans * trans_scale);

    double norm = 0.0;
    for (float v : feat) norm += static_cast<double>(v) * v;
    norm = std::sqrt(norm);
    if (norm > 0.0)
        for (auto& v : feat) v = static_cast<float>(v / norm);
    return feat;
}

// Cosine of proxy features; 1.0 for identical grids, symmetric.
inline double proxy_score(const LevelGrid& a, const LevelGrid& b, const TileVocabulary& vocab) {
    return cosine_similarity(proxy_features(a, vocab), proxy_features(b, vocab));
}

// ---------------------------------------------------------------------------
// statistics
// ---------------------------------------------------------------------------

// Weighted geometric mean s_a^alpha * s_b^(1-alpha).
inline double wgm(double s_a, double s_b, double alpha) {
    if (!(s_a > 0.0) || !(s_b > 0.0)) fail("NonPositiveScore", "wgm needs positive scores");
    if (alpha < 0.0 || alpha > 1.0) fail("AlphaOutOfRange", "alpha must lie in [0,1]");
    return std::pow(s_a, alpha) * std::pow(s_b, 1.0 - alpha);
}

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) fail("LengthMismatch", "pearson: sequence lengths differ");
    const std::size_t n = x.size();
    if (n < 2) fail("LengthMismatch", "pearson needs at least two points");
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double dx = x[i] - mx, dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx <= 0.0 || syy <= 0.0) fail("Degenerate", "pearson: zero variance");
    return sxy / std::sqrt(sxx * syy);
}

namespace detail {

// Regularized incomplete beta via Lentz's continued fraction.
inline double betacf(double a, double b, double x) {
    const double tiny = 1e-300;
    const int max_iter = 400;
    double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0, d = 1.0 - qab * x / qap;
    if (std::abs(d) < tiny) d = tiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= max_iter; ++m) {
        int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < tiny) d = tiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < tiny) d = tiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < 3e-12) break;
    }
    return h;
}

inline double betai(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    double ln_bt = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) +
                   b * std::log(1.0 - x);
    double bt = std::exp(ln_bt);
    if (x < (a + 1.0) / (a + b + 2.0)) return bt * betacf(a, b, x) / a;
    return 1.0 - bt * betacf(b, a, 1.0 - x) / b;
}

} // namespace detail

struct TTestResult {
    double t = 0.0;
    double p = 1.0;
    int df = 0;
};

// Two-sided paired t-test; exact p from the regularized incomplete beta.
inline TTestResult paired_t_test(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) fail("LengthMismatch", "paired_t_test: sequence lengths differ");
    const std::size_t n = a.size();
    if (n < 2) fail("LengthMismatch", "paired_t_test needs at least two pairs");
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += a[i] - b[i];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double d = (a[i] - b[i]) - mean;
        var += d * d;
    }
    var /= static_cast<double>(n - 1);
    if (var <= 0.0) {
        if (mean == 0.0) return TTestResult{0.0, 1.0, static_cast<int>(n - 1)};
        fail("Degenerate", "paired_t_test: zero variance with nonzero mean difference");
    }
    TTestResult r;
    r.df = static_cast<int>(n - 1);
    r.t = mean / std::sqrt(var / static_cast<double>(n));
    double nu = static_cast<double>(r.df);
    r.p = detail::betai(nu / 2.0, 0.5, nu / (nu + r.t * r.t));
    return r;
}

// ---------------------------------------------------------------------------
// rendering
// ---------------------------------------------------------------------------

struct Rgb {
    unsigned char r = 0, g = 0, b = 0;
};

// Fixed per-category palette; one entry per tile category, no fallback.
inline Rgb category_color(int category) {
    static const Rgb palette[] = {
        {170, 60, 200},  // enemy
        {70, 150, 60},   // environment
        {150, 100, 40},  // climbable
        {235, 200, 40},  // collectable
        {235, 130, 30},  // interactive
        {210, 40, 40},   // hazard
        {24, 30, 40},    // empty
        {110, 115, 125}, // solid
        {60, 130, 230},  // agent
        {60, 220, 220},  // goal
        {230, 120, 180}, // other
    };
    if (category < 0 || category >= static_cast<int>(std::size(palette)))
        fail("ConfigInvalid", "category index out of range");
    return palette[static_cast<std::size_t>(category)];
}

// 8x8 solid block per tile; a 16x16 grid renders to 128x128 RGB.
inline std::vector<unsigned char> render_rgb(const LevelGrid& g, const TileVocabulary& vocab,
                                             int tile_px = 8) {
    const int H = g.height * tile_px, W = g.width * tile_px;
    std::vector<unsigned char> img(static_cast<std::size_t>(H) * W * 3);
    for (int r = 0; r < g.height; ++r)
        for (int c = 0; c < g.width; ++c) {
            Rgb col = category_color(vocab.category_of(g.at(r, c)));
            for (int dr = 0; dr < tile_px; ++dr)
                for (int dc = 0; dc < tile_px; ++dc) {
                    std::size_t p = (static_cast<std::size_t>(r * tile_px + dr) * W + c * tile_px + dc) * 3;
                    img[p] = col.r;
                    img[p + 1] = col.g;
                    img[p + 2] = col.b;
                }
        }
    return img;
}

inline void write_ppm(const std::vector<unsigned char>& rgb, int width, int height,
                      const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail("IoError", "cannot open '" + path + "' for writing");
    out << "P6\n" << width << " " << height << "\n255\n";
    out.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
}

inline void render_to_ppm(const LevelGrid& g, const TileVocabulary& vocab, const std::string& path) {
    auto img = render_rgb(g, vocab);
    write_ppm(img, g.width * 8, g.height * 8, path);
}

// ---------------------------------------------------------------------------
// interpolation sweep
// ---------------------------------------------------------------------------

struct BlendPair {
    int a_index = 0; // sample indices into the dataset
    int b_index = 0;
    std::string group; // intra_genre | inter_genre
};

struct SweepRow {
    int pair = 0;
    std::string group;
    double alpha = 0.0;
    double score_a = 0.0;
    double score_b = 0.0;
};

struct SweepAggregate {
    std::string group; // intra_genre | inter_genre | overall
    double pearson_r = 0.0;    // mean over pairs of corr(alpha, S_A)
    double wgm_balance = 0.0;  // mean WGM at alpha = 0.5
    double wgm_bias = 0.0;     // mean WGM at alpha = 0.75
    int pairs = 0;
};

struct ScoreReport {
    std::vector<SweepRow> rows;
    std::vector<SweepAggregate> aggregates;
    std::vector<double> per_pair_pearson; // corr(alpha, S_A) per pair, row order
};

inline const std::vector<double>& default_ratios() {
    static const std::vector<double> r = {0.0, 0.25, 0.5, 0.75, 1.0};
    return r;
}

// Generates a level per (pair, ratio) from the interpolated text embeddings
// via the nearest-train-latent sampler, scores it against both ground-truth
// levels, and aggregates WGM/correlation per group.
inline ScoreReport run_interpolation_sweep(const GeneratorModel& gen, const ContrastiveModel& text_model,
                                           const AbstractionRuleSet& rules, const Dataset& ds,
                                           const std::vector<BlendPair>& pairs,
                                           const std::vector<double>& ratios = default_ratios()) {
    ScoreReport report;
    struct GroupAcc {
        std::vector<double> pearsons, balances, biases;
    };
    std::map<std::string, GroupAcc> acc;

    for (std::size_t pi = 0; pi < pairs.size(); ++pi) {
        const auto& pair = pairs[pi];
        const auto& sa = ds.samples[static_cast<std::size_t>(pair.a_index)];
        const auto& sb = ds.samples[static_cast<std::size_t>(pair.b_index)];
        auto ea = text_model.embed_instruction(sa.instruction, rules);
        auto eb = text_model.embed_instruction(sb.instruction, rules);

        std::vector<double> alphas, scores_a;
        double balance = 0.0, bias = 0.0;
        for (double alpha : ratios) {
            auto mix = interpolate(ea, eb, alpha);
            LevelGrid g = generate_level(gen, mix.unit, LatentSampler::nearest_train_latent);
            double s_a = proxy_score(g, sa.grid, ds.vocab);
            double s_b = proxy_score(g, sb.grid, ds.vocab);
            report.rows.push_back({static_cast<int>(pi), pair.group, alpha, s_a, s_b});
            alphas.push_back(alpha);
            scores_a.push_back(s_a);
            if (alpha == 0.5) balance = wgm(s_a, s_b, alpha);
            if (alpha == 0.75) bias = wgm(s_a, s_b, alpha);
        }
        // a constant score series carries no direction; count it as zero
        double r = 0.0;
        bool varies = false;
        for (double s : scores_a)
            if (std::abs(s - scores_a[0]) > 1e-12) varies = true;
        if (varies) r = pearson(alphas, scores_a);
        report.per_pair_pearson.push_back(r);
        acc[pair.group].pearsons.push_back(r);
        acc["overall"].pearsons.push_back(r);
        acc[pair.group].balances.push_back(balance);
        acc["overall"].balances.push_back(balance);
        acc[pair.group].biases.push_back(bias);
        acc["overall"].biases.push_back(bias);
    }

    auto mean = [](const std::vector<double>& v) {
        if (v.empty()) return 0.0;
        double s = 0.0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
    };
    for (const auto& [group, ga] : acc)
        report.aggregates.push_back({group, mean(ga.pearsons), mean(ga.balances), mean(ga.biases),
                                     static_cast<int>(ga.pearsons.size())});
    return report;
}

inline void write_sweep_csv(const ScoreReport& report, const std::string& detail_path,
                            const std::string& aggregate_path, const std::string& run_id = {}) {
    std::ofstream out(detail_path);
    if (!out) fail("IoError", "cannot open '" + detail_path + "' for writing");
    out << "pair,group,alpha,score_a,score_b\n";
    char buf[160];
    for (const auto& r : report.rows) {
        std::snprintf(buf, sizeof(buf), "%d,%s,%.9g,%.9g,%.9g\n", r.pair, r.group.c_str(), r.alpha,
                      r.score_a, r.score_b);
        out << buf;
    }
    std::ofstream agg(aggregate_path);
    if (!agg) fail("IoError", "cannot open '" + aggregate_path + "' for writing");
    agg << "group,pairs,pearson_r,wgm_balance,wgm_bias,run_id\n";
    for (const auto& a : report.aggregates) {
        std::snprintf(buf, sizeof(buf), "%s,%d,%.9g,%.9g,%.9g,%s\n", a.group.c_str(), a.pairs, a.pearson_r,
                      a.wgm_balance, a.wgm_bias, run_id.c_str());
        agg << buf;
    }
}

} // namespace lvb
