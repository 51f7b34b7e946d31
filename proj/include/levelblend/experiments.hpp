#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "levelblend/blendeval.hpp"
#include "levelblend/contrastive.hpp"
#include "levelblend/dataset.hpp"
#include "levelblend/generator.hpp"

namespace lvb {

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

// Flat key=value file with a fixed key set; unknown keys are errors. Every
// constant defaults to the reference training configuration; desk-scale runs
// override epochs/batch/seeds.
struct ExperimentConfig {
    std::string levels_dir;
    std::vector<std::string> legends;
    std::string annotations;
    std::string cache_path = "cache.jsonl";
    std::string out_dir = "runs";
    std::string experiment = "interpolation"; // single_game | interpolation | composite

    int embed_dim = 128;
    int latent_dim = 128;
    int codebook_size = 256;
    double delta = 0.3;
    float tau_init = 0.14f;
    double contrastive_lr = 5e-5;
    int contrastive_batch = 64;
    int contrastive_epochs = 500;
    double generator_lr = 4e-4;
    int generator_batch = 64;
    int generator_epochs = 500;
    float beta = 0.5f;
    float beta_min = 0.3f;
    float coef_start = 1.0f;
    float coef_min = 0.6f;
    long decay_start = 100;
    long decay_end = 1100;
    double ema_gamma = 0.99;
    double ema_eps = 1e-5;
    double test_fraction = 0.2;
    int eval_pairs = 24;
    std::vector<std::uint64_t> seeds = {0, 1, 2};

    BetaSchedule schedule() const {
        return BetaSchedule{beta, beta_min, coef_start, coef_min, decay_start, decay_end};
    }

    ContrastiveConfig contrastive(ClVariant variant, std::uint64_t seed) const {
        ContrastiveConfig c;
        c.variant = variant;
        c.delta = delta;
        c.tau_init = tau_init;
        c.lr = contrastive_lr;
        c.batch = contrastive_batch;
        c.epochs = contrastive_epochs;
        c.seed = seed;
        return c;
    }

    GeneratorConfig generator(std::uint64_t seed) const {
        GeneratorConfig g;
        g.lr = generator_lr;
        g.batch = generator_batch;
        g.epochs = generator_epochs;
        g.seed = seed;
        g.schedule = schedule();
        g.codebook_size = codebook_size;
        return g;
    }

    void set(const std::string& key, const std::string& value);
    static ExperimentConfig load(const std::string& path);
    void save(const std::string& path) const;
    std::string serialize() const;
};

namespace detail {

inline std::vector<std::string> split_list(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

inline std::string fmt_double(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

} // namespace detail

inline void ExperimentConfig::set(const std::string& key, const std::string& value) {
    if (key == "corpus.levels_dir") levels_dir = value;
    else if (key == "corpus.legends") legends = detail::split_list(value, ',');
    else if (key == "corpus.annotations") annotations = value;
    else if (key == "cache.path") cache_path = value;
    else if (key == "run.out_dir") out_dir = value;
    else if (key == "experiment") experiment = value;
    else if (key == "model.embed_dim") embed_dim = std::stoi(value);
    else if (key == "model.latent_dim") latent_dim = std::stoi(value);
    else if (key == "model.codebook_size") codebook_size = std::stoi(value);
    else if (key == "contrastive.delta") delta = std::stod(value);
    else if (key == "contrastive.tau_init") tau_init = std::stof(value);
    else if (key == "contrastive.lr") contrastive_lr = std::stod(value);
    else if (key == "contrastive.batch") contrastive_batch = std::stoi(value);
    else if (key == "contrastive.epochs") contrastive_epochs = std::stoi(value);
    else if (key == "generator.lr") generator_lr = std::stod(value);
    else if (key == "generator.batch") generator_batch = std::stoi(value);
    else if (key == "generator.epochs") generator_epochs = std::stoi(value);
    else if (key == "generator.beta") beta = std::stof(value);
    else if (key == "generator.beta_min") beta_min = std::stof(value);
    else if (key == "generator.coef_start") coef_start = std::stof(value);
    else if (key == "generator.coef_min") coef_min = std::stof(value);
    else if (key == "generator.decay_start") decay_start = std::stol(value);
    else if (key == "generator.decay_end") decay_end = std::stol(value);
    else if (key == "generator.ema_gamma") ema_gamma = std::stod(value);
    else if (key == "generator.ema_eps") ema_eps = std::stod(value);
    else if (key == "corpus.test_fraction") test_fraction = std::stod(value);
    else if (key == "eval.pairs") eval_pairs = std::stoi(value);
    else if (key == "run.seeds") {
        seeds.clear();
        for (const auto& s : detail::split_list(value, ',')) seeds.push_back(std::stoull(s));
    } else {
        fail("ConfigInvalid", "unknown config key '" + key + "'");
    }
}

inline ExperimentConfig ExperimentConfig::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail("IoError", "cannot open config '" + path + "'");
    ExperimentConfig cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            fail("ConfigInvalid", path + ":" + std::to_string(lineno) + ": expected key=value");
        cfg.set(line.substr(0, eq), line.substr(eq + 1));
    }
    return cfg;
}

inline std::string ExperimentConfig::serialize() const {
    std::string legends_joined;
    for (std::size_t i = 0; i < legends.size(); ++i) {
        if (i) legends_joined += ',';
        legends_joined += legends[i];
    }
    std::string seeds_joined;
    for (std::size_t i = 0; i < seeds.size(); ++i) {
        if (i) seeds_joined += ',';
        seeds_joined += std::to_string(seeds[i]);
    }
    std::ostringstream out;
    out << "corpus.levels_dir=" << levels_dir << "\n"
        << "corpus.legends=" << legends_joined << "\n"
        << "corpus.annotations=" << annotations << "\n"
        << "corpus.test_fraction=" << detail::fmt_double(test_fraction) << "\n"
        << "cache.path=" << cache_path << "\n"
        << "run.out_dir=" << out_dir << "\n"
        << "run.seeds=" << seeds_joined << "\n"
        << "experiment=" << experiment << "\n"
        << "model.embed_dim=" << embed_dim << "\n"
        << "model.latent_dim=" << latent_dim << "\n"
        << "model.codebook_size=" << codebook_size << "\n"
        << "contrastive.delta=" << detail::fmt_double(delta) << "\n"
        << "contrastive.tau_init=" << detail::fmt_double(tau_init) << "\n"
        << "contrastive.lr=" << detail::fmt_double(contrastive_lr) << "\n"
        << "contrastive.batch=" << contrastive_batch << "\n"
        << "contrastive.epochs=" << contrastive_epochs << "\n"
        << "generator.lr=" << detail::fmt_double(generator_lr) << "\n"
        << "generator.batch=" << generator_batch << "\n"
        << "generator.epochs=" << generator_epochs << "\n"
        << "generator.beta=" << detail::fmt_double(beta) << "\n"
        << "generator.beta_min=" << detail::fmt_double(beta_min) << "\n"
        << "generator.coef_start=" << detail::fmt_double(coef_start) << "\n"
        << "generator.coef_min=" << detail::fmt_double(coef_min) << "\n"
        << "generator.decay_start=" << decay_start << "\n"
        << "generator.decay_end=" << decay_end << "\n"
        << "generator.ema_gamma=" << detail::fmt_double(ema_gamma) << "\n"
        << "generator.ema_eps=" << detail::fmt_double(ema_eps) << "\n"
        << "eval.pairs=" << eval_pairs << "\n";
    return out.str();
}

inline void ExperimentConfig::save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) fail("IoError", "cannot open '" + path + "' for writing");
    out << serialize();
}

// ---------------------------------------------------------------------------
// run manifests
// ---------------------------------------------------------------------------

struct RunManifest {
    std::string run_id;
    std::string config_hash;
    std::uint64_t seed = 0;
    std::vector<std::pair<std::string, std::string>> input_hashes; // path -> content hash
    std::vector<std::string> outputs;
};

inline std::string hash_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail("IoError", "cannot hash missing file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    std::string bytes = ss.str();
    return hex64(fnv1a64(bytes.data(), bytes.size()));
}

inline RunManifest make_manifest(const ExperimentConfig& cfg, std::uint64_t seed,
                                 const std::vector<std::string>& input_paths) {
    RunManifest m;
    m.config_hash = hex64(fnv1a64(cfg.serialize()));
    m.seed = seed;
    for (const auto& p : input_paths) m.input_hashes.emplace_back(p, hash_file(p));
    std::string key = m.config_hash + ":" + std::to_string(seed);
    for (const auto& [p, h] : m.input_hashes) key += ":" + h;
    m.run_id = hex64(fnv1a64(key));
    return m;
}

inline void save_manifest(const RunManifest& m, const std::string& path) {
    std::ofstream out(path);
    if (!out) fail("IoError", "cannot open '" + path + "' for writing");
    out << "run_id=" << m.run_id << "\n";
    out << "config_hash=" << m.config_hash << "\n";
    out << "seed=" << m.seed << "\n";
    for (const auto& [p, h] : m.input_hashes) out << "input=" << p << ":" << h << "\n";
    for (const auto& o : m.outputs) out << "output=" << o << "\n";
}

// ---------------------------------------------------------------------------
// evaluation pair sampling
// ---------------------------------------------------------------------------

// Test-split pairs with one game anchored per side; the group tag comes from
// genre equality (same genre -> intra_genre).
inline std::vector<BlendPair> sample_blend_pairs(const Dataset& ds, int count, std::uint64_t seed,
                                                 bool cross_game_only = false) {
    std::map<std::string, std::vector<int>> by_game;
    for (int idx : ds.split_indices(Split::test))
        by_game[ds.samples[static_cast<std::size_t>(idx)].grid.domain].push_back(idx);
    std::vector<std::string> games;
    for (const auto& [g, v] : by_game) games.push_back(g);
    if (games.size() < 2) fail("ConfigInvalid", "need at least two game domains for blending pairs");

    Rng rng = Rng(seed).child("blend_pairs");
    std::vector<BlendPair> pairs;
    for (int i = 0; i < count; ++i) {
        std::size_t ga = rng.index(games.size());
        std::size_t gb = cross_game_only ? (ga + 1 + rng.index(games.size() - 1)) % games.size()
                                         : rng.index(games.size());
        const auto& va = by_game[games[ga]];
        const auto& vb = by_game[games[gb]];
        BlendPair p;
        p.a_index = va[rng.index(va.size())];
        p.b_index = vb[rng.index(vb.size())];
        if (p.a_index == p.b_index) {
            p.b_index = vb[(static_cast<std::size_t>(
                               std::find(vb.begin(), vb.end(), p.b_index) - vb.begin()) +
                           1) %
                           vb.size()];
        }
        Genre gena = ds.vocab.domain(games[ga]).genre;
        Genre genb = ds.vocab.domain(games[gb]).genre;
        p.group = gena == genb ? "intra_genre" : "inter_genre";
        pairs.push_back(p);
    }
    return pairs;
}

// ---------------------------------------------------------------------------
// experiment: single-game generation quality (reference-encode sampling)
// ---------------------------------------------------------------------------

struct SingleGameCell {
    double mean = 0.0;
    double sd = 0.0;
    int runs = 0;
};

struct SingleGameTable {
    std::vector<std::string> games; // row order; last row is "overall"
    std::vector<std::string> columns;
    std::vector<std::vector<SingleGameCell>> cells; // [row][col]
};

namespace detail {

inline std::pair<double, double> mean_sd(const std::vector<double>& v) {
    if (v.empty()) return {0.0, 0.0};
    double m = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - m) * (x - m);
    var = v.size() > 1 ? var / static_cast<double>(v.size() - 1) : 0.0;
    return {m, std::sqrt(var)};
}

} // namespace detail

// Mean proxy score of reference-encoded generations against their ground
// truth, per game, for one trained model pair.
inline std::map<std::string, double> eval_single_game_scores(const GeneratorModel& gen,
                                                             const ContrastiveModel& text_model,
                                                             const AbstractionRuleSet& rules,
                                                             const Dataset& ds, int max_per_game = 32) {
    std::map<std::string, std::vector<double>> scores;
    std::map<std::string, int> taken;
    for (int idx : ds.split_indices(Split::test)) {
        const auto& s = ds.samples[static_cast<std::size_t>(idx)];
        if (taken[s.grid.domain] >= max_per_game) continue;
        ++taken[s.grid.domain];
        auto emb = text_model.embed_instruction(s.instruction, rules);
        LevelGrid g = generate_level(gen, emb, LatentSampler::encode_reference, &s.grid);
        scores[s.grid.domain].push_back(proxy_score(g, s.grid, ds.vocab));
    }
    std::map<std::string, double> out;
    for (const auto& [game, v] : scores) out[game] = detail::mean_sd(v).first;
    return out;
}

// ---------------------------------------------------------------------------
// experiment: composite instructions
// ---------------------------------------------------------------------------

struct CompositeStats {
    Provenance strategy = Provenance::concat;
    double cos_a = 0.0;         // mean cosine to the A-side source embedding
    double cos_b = 0.0;
    double implied_alpha = 0.5; // mean chord projection
    double score_a = 0.0;       // mean proxy score of generations vs A levels
    double score_b = 0.0;
};

// Least-squares projection of the composite embedding onto the segment
// between the two source embeddings, clamped to [0,1].
inline double implied_interpolation_ratio(const std::vector<float>& composite,
                                          const std::vector<float>& t_a,
                                          const std::vector<float>& t_b) {
    if (composite.size() != t_a.size() || t_a.size() != t_b.size())
        fail("DimensionMismatch", "implied_interpolation_ratio: embedding sizes differ");
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < t_a.size(); ++i) {
        double chord = static_cast<double>(t_a[i]) - t_b[i];
        num += (static_cast<double>(composite[i]) - t_b[i]) * chord;
        den += chord * chord;
    }
    if (den <= 0.0) return 0.5;
    return std::min(1.0, std::max(0.0, num / den));
}

inline std::vector<CompositeStats> exp_composite(const GeneratorModel& gen,
                                                 const ContrastiveModel& text_model,
                                                 const AbstractionRuleSet& rules, const Dataset& ds,
                                                 const std::vector<BlendPair>& pairs,
                                                 bool with_generation = true) {
    const Provenance strategies[] = {Provenance::concat, Provenance::mix, Provenance::a_base,
                                     Provenance::b_base};
    std::vector<CompositeStats> out;
    for (Provenance strategy : strategies) {
        CompositeStats st;
        st.strategy = strategy;
        double n = 0.0;
        for (const auto& pair : pairs) {
            const auto& sa = ds.samples[static_cast<std::size_t>(pair.a_index)];
            const auto& sb = ds.samples[static_cast<std::size_t>(pair.b_index)];
            Instruction ia = Instruction::make(sa.instruction, rules);
            Instruction ib = Instruction::make(sb.instruction, rules);
            Instruction comp = compose_instructions(ia, ib, strategy, rules);

            auto ta = text_model.embed_instruction(ia.raw, rules);
            auto tb = text_model.embed_instruction(ib.raw, rules);
            auto tc = text_model.embed_instruction(comp.raw, rules);
            st.cos_a += cosine_similarity(tc, ta);
            st.cos_b += cosine_similarity(tc, tb);
            st.implied_alpha += implied_interpolation_ratio(tc, ta, tb);
            if (with_generation) {
                LevelGrid g = generate_level(gen, tc, LatentSampler::nearest_train_latent);
                st.score_a += proxy_score(g, sa.grid, ds.vocab);
                st.score_b += proxy_score(g, sb.grid, ds.vocab);
            }
            n += 1.0;
        }
        if (n > 0.0) {
            st.cos_a /= n;
            st.cos_b /= n;
            st.implied_alpha /= n;
            st.score_a /= n;
            st.score_b /= n;
        }
        out.push_back(st);
    }
    return out;
}

// ---------------------------------------------------------------------------
// PCA projection of the shared space
// ---------------------------------------------------------------------------

struct ProjectionRow {
    double x = 0.0, y = 0.0;
    std::string domain;
    std::string modality; // level | text
};

struct ProjectionResult {
    std::vector<ProjectionRow> rows;
    double variance_captured = 0.0; // fraction of total variance in 2 components
    std::vector<double> axis1, axis2;
};

// Power iteration with deflation on the covariance of the pooled level+text
// embeddings.
inline ProjectionResult project_embeddings(const ContrastiveModel& model, const Dataset& ds,
                                           const AbstractionRuleSet& rules,
                                           const std::vector<int>& indices) {
    const int d = kEmbedDim;
    auto levels = embed_levels(model, ds, indices);
    auto texts = embed_texts(model, ds, indices, rules);
    std::vector<std::vector<float>> all;
    all.reserve(levels.size() + texts.size());
    for (auto& v : levels) all.push_back(v);
    for (auto& v : texts) all.push_back(v);
    const std::size_t n = all.size();

    std::vector<double> mean(static_cast<std::size_t>(d), 0.0);
    for (const auto& v : all)
        for (int i = 0; i < d; ++i) mean[static_cast<std::size_t>(i)] += v[static_cast<std::size_t>(i)];
    for (auto& m : mean) m /= static_cast<double>(n);

    std::vector<double> cov(static_cast<std::size_t>(d) * d, 0.0);
    for (const auto& v : all)
        for (int i = 0; i < d; ++i) {
            double di = v[static_cast<std::size_t>(i)] - mean[static_cast<std::size_t>(i)];
            for (int j = 0; j < d; ++j)
                cov[static_cast<std::size_t>(i) * d + j] +=
                    di * (v[static_cast<std::size_t>(j)] - mean[static_cast<std::size_t>(j)]);
        }
    double denom = n > 1 ? static_cast<double>(n - 1) : 1.0;
    for (auto& c : cov) c /= denom;
    double trace = 0.0;
    for (int i = 0; i < d; ++i) trace += cov[static_cast<std::size_t>(i) * d + i];

    auto power_iterate = [&](const std::vector<double>& prev) {
        Rng rng(0xC0FFEE);
        std::vector<double> v(static_cast<std::size_t>(d));
        for (auto& x : v) x = rng.next_double() - 0.5;
        for (int iter = 0; iter < 300; ++iter) {
            if (!prev.empty()) { // deflate against the first axis
                double dot = 0.0;
                for (int i = 0; i < d; ++i) dot += v[static_cast<std::size_t>(i)] * prev[static_cast<std::size_t>(i)];
                for (int i = 0; i < d; ++i) v[static_cast<std::size_t>(i)] -= dot * prev[static_cast<std::size_t>(i)];
            }
            std::vector<double> next(static_cast<std::size_t>(d), 0.0);
            for (int i = 0; i < d; ++i) {
                double acc = 0.0;
                for (int j = 0; j < d; ++j) acc += cov[static_cast<std::size_t>(i) * d + j] * v[static_cast<std::size_t>(j)];
                next[static_cast<std::size_t>(i)] = acc;
            }
            double norm = 0.0;
            for (double x : next) norm += x * x;
            norm = std::sqrt(norm);
            if (norm < 1e-30) break;
            for (auto& x : next) x /= norm;
            v = next;
        }
        return v;
    };

    ProjectionResult res;
    res.axis1 = power_iterate({});
    res.axis2 = power_iterate(res.axis1);
    auto eigval = [&](const std::vector<double>& v) {
        double acc = 0.0;
        for (int i = 0; i < d; ++i) {
            double row = 0.0;
            for (int j = 0; j < d; ++j) row += cov[static_cast<std::size_t>(i) * d + j] * v[static_cast<std::size_t>(j)];
            acc += v[static_cast<std::size_t>(i)] * row;
        }
        return acc;
    };
    res.variance_captured = trace > 0.0 ? (eigval(res.axis1) + eigval(res.axis2)) / trace : 0.0;

    auto project = [&](const std::vector<float>& v, const std::vector<double>& axis) {
        double acc = 0.0;
        for (int i = 0; i < d; ++i) acc += (v[static_cast<std::size_t>(i)] - mean[static_cast<std::size_t>(i)]) * axis[static_cast<std::size_t>(i)];
        return acc;
    };
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const auto& s = ds.samples[static_cast<std::size_t>(indices[i])];
        res.rows.push_back({project(levels[i], res.axis1), project(levels[i], res.axis2), s.grid.domain, "level"});
    }
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const auto& s = ds.samples[static_cast<std::size_t>(indices[i])];
        res.rows.push_back({project(texts[i], res.axis1), project(texts[i], res.axis2), s.grid.domain, "text"});
    }
    return res;
}

inline void write_projection_csv(const ProjectionResult& res, const std::string& path) {
    std::ofstream out(path);
    if (!out) fail("IoError", "cannot open '" + path + "' for writing");
    out << "# variance_captured=" << detail::fmt_double(res.variance_captured) << "\n";
    out << "x,y,domain,modality\n";
    char buf[160];
    for (const auto& r : res.rows) {
        std::snprintf(buf, sizeof(buf), "%.9g,%.9g,%s,%s\n", r.x, r.y, r.domain.c_str(), r.modality.c_str());
        out << buf;
    }
}

// ---------------------------------------------------------------------------
// orchestration
// ---------------------------------------------------------------------------

struct TrainedPair {
    ContrastiveModel text_model;
    GeneratorModel generator;
};

inline TrainedPair train_pair(const Dataset& ds, const AbstractionRuleSet& rules,
                              const ExperimentConfig& cfg, ClVariant variant, std::uint64_t seed,
                              const std::string& curve_dir = {}) {
    ContrastiveConfig cc = cfg.contrastive(variant, seed);
    GeneratorConfig gc = cfg.generator(seed);
    if (!curve_dir.empty()) {
        std::string stem = curve_dir + "/" + variant_to_string(variant) + "_seed" + std::to_string(seed);
        cc.curve_csv = stem + "_contrastive.csv";
        gc.curve_csv = stem + "_generator.csv";
    }
    TrainedPair pair;
    pair.text_model = train_contrastive(ds, rules, cc).model;
    pair.generator = train_generator(ds, pair.text_model, rules, gc).model;
    return pair;
}

inline Dataset filter_domain(const Dataset& ds, const std::string& domain) {
    Dataset out;
    out.vocab = ds.vocab;
    for (const auto& s : ds.samples)
        if (s.grid.domain == domain) out.samples.push_back(s);
    return out;
}

// Table-1-shaped experiment: per game, reference-encode generation quality of
// a single-game-trained baseline vs. the multi-game baseline and the
// multi-positive model, aggregated over seeds.
inline SingleGameTable exp_single_game(const Dataset& ds, const AbstractionRuleSet& rules,
                                       const ExperimentConfig& cfg) {
    std::vector<std::string> games;
    for (const auto& d : ds.vocab.domains()) games.push_back(d.name);

    // scores[col][game] -> per-seed values
    std::vector<std::map<std::string, std::vector<double>>> scores(3);
    for (std::uint64_t seed : cfg.seeds) {
        for (const auto& game : games) {
            Dataset sub = filter_domain(ds, game);
            TrainedPair p = train_pair(sub, rules, cfg, ClVariant::single_cl, seed);
            auto s = eval_single_game_scores(p.generator, p.text_model, rules, sub);
            scores[0][game].push_back(s.at(game));
        }
        TrainedPair multi_single = train_pair(ds, rules, cfg, ClVariant::single_cl, seed);
        auto s1 = eval_single_game_scores(multi_single.generator, multi_single.text_model, rules, ds);
        TrainedPair multi_meta = train_pair(ds, rules, cfg, ClVariant::multiverse, seed);
        auto s2 = eval_single_game_scores(multi_meta.generator, multi_meta.text_model, rules, ds);
        for (const auto& game : games) {
            scores[1][game].push_back(s1.at(game));
            scores[2][game].push_back(s2.at(game));
        }
    }

    SingleGameTable table;
    table.columns = {"single_game_single_cl", "multi_single_cl", "multi_multiverse"};
    for (const auto& game : games) table.games.push_back(game);
    table.games.push_back("overall");
    for (const auto& game : table.games) {
        std::vector<SingleGameCell> row;
        for (int col = 0; col < 3; ++col) {
            std::vector<double> vals;
            if (game == "overall") {
                // mean over games, per seed
                for (std::size_t si = 0; si < cfg.seeds.size(); ++si) {
                    double m = 0.0;
                    for (const auto& g : games) m += scores[static_cast<std::size_t>(col)][g][si];
                    vals.push_back(m / static_cast<double>(games.size()));
                }
            } else {
                vals = scores[static_cast<std::size_t>(col)][game];
            }
            auto [mean, sd] = detail::mean_sd(vals);
            row.push_back({mean, sd, static_cast<int>(vals.size())});
        }
        table.cells.push_back(std::move(row));
    }
    return table;
}

inline void write_single_game_csv(const SingleGameTable& table, const std::string& path,
                                  const std::string& run_id = {}) {
    std::ofstream out(path);
    if (!out) fail("IoError", "cannot open '" + path + "' for writing");
    out << "game";
    for (const auto& c : table.columns) out << "," << c << "_mean," << c << "_sd";
    out << ",run_id\n";
    for (std::size_t r = 0; r < table.games.size(); ++r) {
        out << table.games[r];
        for (const auto& cell : table.cells[r])
            out << "," << detail::fmt_double(cell.mean) << "," << detail::fmt_double(cell.sd);
        out << "," << run_id << "\n";
    }
}

// Table-3-shaped ablation: per group and variant, controllability and WGM
// quality with paired significance against the single-positive baseline
// across seeds.
struct AblationCell {
    double mean = 0.0;
    double sd = 0.0;
    double p_vs_baseline = 1.0; // paired t-test across seeds; 1.0 for the baseline itself
};

struct AblationRow {
    std::string group;
    ClVariant variant = ClVariant::single_cl;
    AblationCell correlation, wgm_balance, wgm_bias;
};

struct AblationResult {
    std::vector<AblationRow> rows;
    // raw per-seed aggregates: [variant][seed] -> group -> aggregate
    std::map<ClVariant, std::vector<std::map<std::string, SweepAggregate>>> raw;
};

inline const std::vector<ClVariant>& ablation_variants() {
    static const std::vector<ClVariant> v = {ClVariant::single_cl, ClVariant::no_abstraction,
                                             ClVariant::no_threshold, ClVariant::multiverse};
    return v;
}

inline AblationResult exp_interpolation(const Dataset& ds, const AbstractionRuleSet& rules,
                                        const ExperimentConfig& cfg, const std::string& out_dir = {}) {
    // shared pairs across variants and seeds so comparisons are paired
    auto pairs = sample_blend_pairs(ds, cfg.eval_pairs, cfg.seeds.empty() ? 0 : cfg.seeds[0]);

    AblationResult result;
    for (ClVariant variant : ablation_variants()) {
        for (std::uint64_t seed : cfg.seeds) {
            TrainedPair p = train_pair(ds, rules, cfg, variant, seed, out_dir);
            ScoreReport report = run_interpolation_sweep(p.generator, p.text_model, rules, ds, pairs);
            std::map<std::string, SweepAggregate> by_group;
            for (const auto& a : report.aggregates) by_group[a.group] = a;
            result.raw[variant].push_back(by_group);
            if (!out_dir.empty()) {
                std::string stem = out_dir + "/sweep_" + variant_to_string(variant) + "_seed" +
                                   std::to_string(seed);
                write_sweep_csv(report, stem + "_detail.csv", stem + "_aggregate.csv");
            }
        }
    }

    const std::vector<std::string> groups = {"intra_genre", "inter_genre", "overall"};
    for (const auto& group : groups) {
        // per-seed metric series for the baseline
        auto series = [&](ClVariant v, auto pick) {
            std::vector<double> out;
            for (const auto& by_group : result.raw[v]) {
                auto it = by_group.find(group);
                out.push_back(it == by_group.end() ? 0.0 : pick(it->second));
            }
            return out;
        };
        auto corr_of = [](const SweepAggregate& a) { return a.pearson_r; };
        auto bal_of = [](const SweepAggregate& a) { return a.wgm_balance; };
        auto bias_of = [](const SweepAggregate& a) { return a.wgm_bias; };
        std::vector<double> base_corr = series(ClVariant::single_cl, corr_of);
        std::vector<double> base_bal = series(ClVariant::single_cl, bal_of);
        std::vector<double> base_bias = series(ClVariant::single_cl, bias_of);

        for (ClVariant variant : ablation_variants()) {
            AblationRow row;
            row.group = group;
            row.variant = variant;
            auto fill = [&](AblationCell& cell, auto pick, const std::vector<double>& baseline) {
                std::vector<double> vals = series(variant, pick);
                auto [mean, sd] = detail::mean_sd(vals);
                cell.mean = mean;
                cell.sd = sd;
                if (variant != ClVariant::single_cl && vals.size() >= 2)
                    cell.p_vs_baseline = paired_t_test(vals, baseline).p;
            };
            fill(row.correlation, corr_of, base_corr);
            fill(row.wgm_balance, bal_of, base_bal);
            fill(row.wgm_bias, bias_of, base_bias);
            result.rows.push_back(row);
        }
    }
    return result;
}

inline std::string significance_stars(double p) {
    if (p < 0.01) return "**";
    if (p < 0.05) return "*";
    return "";
}

inline void write_ablation_csv(const AblationResult& result, const std::string& path,
                               const std::string& run_id = {}) {
    std::ofstream out(path);
    if (!out) fail("IoError", "cannot open '" + path + "' for writing");
    out << "group,method,correlation_mean,correlation_sd,correlation_sig,"
           "wgm_balance_mean,wgm_balance_sd,wgm_balance_sig,"
           "wgm_bias_mean,wgm_bias_sd,wgm_bias_sig,run_id\n";
    for (const auto& r : result.rows) {
        out << r.group << "," << variant_to_string(r.variant);
        for (const AblationCell* c : {&r.correlation, &r.wgm_balance, &r.wgm_bias})
            out << "," << detail::fmt_double(c->mean) << "," << detail::fmt_double(c->sd) << ","
                << (r.variant == ClVariant::single_cl ? "" : significance_stars(c->p_vs_baseline));
        out << "," << run_id << "\n";
    }
}

// Composite-instruction study on the multi-positive model: embedding
// positions, implied interpolation ratios, and generation scores per
// strategy, averaged over seeds.
inline std::vector<CompositeStats> exp_composite_study(const Dataset& ds,
                                                       const AbstractionRuleSet& rules,
                                                       const ExperimentConfig& cfg,
                                                       const std::string& out_dir = {}) {
    auto pairs = sample_blend_pairs(ds, cfg.eval_pairs, cfg.seeds.empty() ? 0 : cfg.seeds[0],
                                    /*cross_game_only=*/true);
    std::vector<CompositeStats> acc;
    for (std::uint64_t seed : cfg.seeds) {
        TrainedPair p = train_pair(ds, rules, cfg, ClVariant::multiverse, seed, out_dir);
        auto stats = exp_composite(p.generator, p.text_model, rules, ds, pairs);
        if (acc.empty()) {
            acc = stats;
        } else {
            for (std::size_t i = 0; i < stats.size(); ++i) {
                acc[i].cos_a += stats[i].cos_a;
                acc[i].cos_b += stats[i].cos_b;
                acc[i].implied_alpha += stats[i].implied_alpha;
                acc[i].score_a += stats[i].score_a;
                acc[i].score_b += stats[i].score_b;
            }
        }
    }
    const double n = static_cast<double>(cfg.seeds.size());
    if (n > 1.0)
        for (auto& s : acc) {
            s.cos_a /= n;
            s.cos_b /= n;
            s.implied_alpha /= n;
            s.score_a /= n;
            s.score_b /= n;
        }
    return acc;
}

inline void write_composite_csv(const std::vector<CompositeStats>& stats, const std::string& path,
                                const std::string& run_id = {}) {
    std::ofstream out(path);
    if (!out) fail("IoError", "cannot open '" + path + "' for writing");
    out << "strategy,cos_a,cos_b,implied_alpha,score_a,score_b,run_id\n";
    for (const auto& s : stats)
        out << provenance_to_string(s.strategy) << "," << detail::fmt_double(s.cos_a) << ","
            << detail::fmt_double(s.cos_b) << "," << detail::fmt_double(s.implied_alpha) << ","
            << detail::fmt_double(s.score_a) << "," << detail::fmt_double(s.score_b) << "," << run_id
            << "\n";
}

// ---------------------------------------------------------------------------
// report assembly
// ---------------------------------------------------------------------------

// Concatenates every CSV in the directory into one markdown summary.
inline void write_report(const std::string& dir, const std::string& out_path) {
    namespace fs = std::filesystem;
    std::vector<fs::path> csvs;
    if (fs::is_directory(dir))
        for (const auto& e : fs::recursive_directory_iterator(dir))
            if (e.is_regular_file() && e.path().extension() == ".csv") csvs.push_back(e.path());
    std::sort(csvs.begin(), csvs.end());
    std::ofstream out(out_path);
    if (!out) fail("IoError", "cannot open '" + out_path + "' for writing");
    out << "# Run report\n\n";
    for (const auto& p : csvs) {
        out << "## " << fs::relative(p, dir).string() << "\n\n";
        std::ifstream in(p);
        std::string line;
        bool header = true;
        int cols = 0;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            if (line[0] == '#') {
                out << "_" << line.substr(1) << "_\n\n";
                continue;
            }
            auto fields = detail::split_list(line, ',');
            if (header) cols = static_cast<int>(fields.size());
            out << "|";
            for (const auto& f : fields) out << " " << f << " |";
            out << "\n";
            if (header) {
                out << "|";
                for (int i = 0; i < cols; ++i) out << " --- |";
                out << "\n";
                header = false;
            }
        }
        out << "\n";
    }
}

} // namespace lvb
