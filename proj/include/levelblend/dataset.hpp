#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "levelblend/level.hpp"
#include "levelblend/rng.hpp"
#include "levelblend/textops.hpp"
#include "levelblend/vocab.hpp"

namespace lvb {

enum class Split { train, test };

inline std::string split_to_string(Split s) { return s == Split::train ? "train" : "test"; }

inline Split split_from_string(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "test") return Split::test;
    fail("ConfigInvalid", "unknown split '" + s + "'");
}

struct LevelSample {
    LevelGrid grid;            // 16x16 after preprocessing
    std::string instruction;   // raw annotation text
    Split split = Split::train;
};

// Augmentation variants share everything before the first '+', so grouping
// on this key keeps variants of one source level on the same side of the
// split.
inline std::string split_group_key(const std::string& source_id) {
    std::size_t plus = source_id.find('+');
    return plus == std::string::npos ? source_id : source_id.substr(0, plus);
}

// Per-domain stratified split over source groups; deterministic for a fixed
// seed regardless of sample order.
inline void build_splits(std::vector<LevelSample>& samples, double test_fraction, std::uint64_t seed) {
    if (!(test_fraction > 0.0 && test_fraction < 1.0))
        fail("ConfigInvalid", "test fraction must lie in (0,1)");
    std::map<std::string, std::set<std::string>> groups_by_domain;
    for (const auto& s : samples) groups_by_domain[s.grid.domain].insert(split_group_key(s.grid.source_id));

    std::set<std::string> test_groups;
    Rng rng(seed);
    for (const auto& [domain, group_set] : groups_by_domain) {
        std::vector<std::string> groups(group_set.begin(), group_set.end());
        Rng domain_rng = rng.child("split:" + domain);
        domain_rng.shuffle(groups);
        auto n_test = static_cast<std::size_t>(std::lround(test_fraction * static_cast<double>(groups.size())));
        if (n_test == 0)
            fail("EmptyDomain", "domain '" + domain + "' would receive zero test samples");
        if (n_test >= groups.size())
            fail("EmptyDomain", "domain '" + domain + "' would receive zero train samples");
        for (std::size_t i = 0; i < n_test; ++i) test_groups.insert(domain + "\x1f" + groups[i]);
    }
    for (auto& s : samples)
        s.split = test_groups.count(s.grid.domain + "\x1f" + split_group_key(s.grid.source_id)) ? Split::test
                                                                                                : Split::train;
}

// ---------------------------------------------------------------------------
// dataset cache (JSONL) and annotation files
// ---------------------------------------------------------------------------

struct Dataset {
    TileVocabulary vocab;
    std::vector<LevelSample> samples;

    std::vector<int> split_indices(Split split) const {
        std::vector<int> idx;
        for (int i = 0; i < static_cast<int>(samples.size()); ++i)
            if (samples[static_cast<std::size_t>(i)].split == split) idx.push_back(i);
        return idx;
    }
};

inline std::string vocab_sidecar_path(const std::string& cache_path) { return cache_path + ".vocab.json"; }

inline void save_vocab(const TileVocabulary& vocab, const std::string& path) {
    nlohmann::json j;
    j["domains"] = nlohmann::json::array();
    for (const auto& d : vocab.domains())
        j["domains"].push_back({{"name", d.name}, {"genre", genre_to_string(d.genre)}});
    j["tiles"] = nlohmann::json::array();
    for (const auto& e : vocab.entries())
        j["tiles"].push_back({{"glyph", std::string(1, e.glyph)},
                              {"category", e.category},
                              {"name", e.display_name},
                              {"game", e.game}});
    std::ofstream out(path);
    if (!out) fail("IoError", "cannot open '" + path + "' for writing");
    out << j.dump() << "\n";
}

inline std::string vocab_to_json(const TileVocabulary& vocab) {
    nlohmann::json j;
    j["domains"] = nlohmann::json::array();
    for (const auto& d : vocab.domains())
        j["domains"].push_back({{"name", d.name}, {"genre", genre_to_string(d.genre)}});
    j["tiles"] = nlohmann::json::array();
    for (const auto& e : vocab.entries())
        j["tiles"].push_back({{"glyph", std::string(1, e.glyph)},
                              {"category", e.category},
                              {"name", e.display_name},
                              {"game", e.game}});
    return j.dump();
}

inline TileVocabulary vocab_from_json(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    TileVocabulary vocab;
    std::map<std::string, GameDomain> domains;
    std::vector<std::string> order;
    for (const auto& d : j.at("domains")) {
        GameDomain dom;
        dom.name = d.at("name").get<std::string>();
        dom.genre = genre_from_string(d.at("genre").get<std::string>());
        domains[dom.name] = dom;
        order.push_back(dom.name);
    }
    for (const auto& name : order) {
        std::vector<std::tuple<char, std::string, std::string>> tiles;
        for (const auto& t : j.at("tiles"))
            if (t.at("game").get<std::string>() == name)
                tiles.emplace_back(t.at("glyph").get<std::string>()[0], t.at("category").get<std::string>(),
                                   t.at("name").get<std::string>());
        vocab.add_game(domains[name], tiles);
    }
    return vocab;
}

inline TileVocabulary load_vocab(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail("IoError", "cannot open vocabulary '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return vocab_from_json(ss.str());
}

// One JSON record per sample; the merged vocabulary lives in a sidecar file
// next to the cache.
inline void save_cache(const Dataset& ds, const std::string& path) {
    std::ofstream out(path);
    if (!out) fail("IoError", "cannot open '" + path + "' for writing");
    for (const auto& s : ds.samples) {
        nlohmann::json j;
        j["source_id"] = s.grid.source_id;
        j["domain"] = s.grid.domain;
        j["tiles"] = s.grid.tiles;
        j["instruction"] = s.instruction;
        j["split"] = split_to_string(s.split);
        out << j.dump() << "\n";
    }
    save_vocab(ds.vocab, vocab_sidecar_path(path));
}

inline Dataset load_cache(const std::string& path) {
    Dataset ds;
    ds.vocab = load_vocab(vocab_sidecar_path(path));
    std::ifstream in(path);
    if (!in) fail("IoError", "cannot open cache '" + path + "'");
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded()) fail("ConfigInvalid", path + ":" + std::to_string(lineno) + ": bad JSON record");
        LevelSample s;
        s.grid.source_id = j.at("source_id").get<std::string>();
        s.grid.domain = j.at("domain").get<std::string>();
        s.grid.tiles = j.at("tiles").get<std::vector<int>>();
        s.grid.height = kLevelSize;
        s.grid.width = kLevelSize;
        if (s.grid.tiles.size() != static_cast<std::size_t>(kLevelSize) * kLevelSize)
            fail("ConfigInvalid", path + ":" + std::to_string(lineno) + ": expected 256 tiles");
        for (int t : s.grid.tiles)
            if (t < 0 || t >= ds.vocab.size())
                fail("TileIdOutOfRange", path + ":" + std::to_string(lineno) + ": tile " + std::to_string(t));
        s.instruction = j.at("instruction").get<std::string>();
        s.split = split_from_string(j.at("split").get<std::string>());
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

// Annotation file: one tab-separated record per line {source_id, text}.
inline std::map<std::string, std::string> load_annotations(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail("IoError", "cannot open annotations '" + path + "'");
    std::map<std::string, std::string> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        std::size_t tab = line.find('\t');
        if (tab == std::string::npos)
            fail("ConfigInvalid", path + ":" + std::to_string(lineno) + ": expected <source_id>\\t<text>");
        out[line.substr(0, tab)] = line.substr(tab + 1);
    }
    return out;
}

inline void save_annotations(const std::vector<std::pair<std::string, std::string>>& rows,
                             const std::string& path) {
    std::ofstream out(path);
    if (!out) fail("IoError", "cannot open '" + path + "' for writing");
    for (const auto& [id, text] : rows) out << id << "\t" << text << "\n";
}

// ---------------------------------------------------------------------------
// ingest pipeline
// ---------------------------------------------------------------------------

// Directory layout: <levels_dir>/<game>/<file>.txt, one plaintext grid per
// file. Returns 16x16 samples: windowed, padded, split by source level, then
// augmented per domain policy.
inline Dataset ingest_corpus(const std::string& levels_dir, const std::vector<std::string>& legend_paths,
                             const std::string& annotations_path, double test_fraction,
                             std::uint64_t seed) {
    namespace fs = std::filesystem;
    Dataset ds;
    for (const auto& p : legend_paths) ds.vocab.load_legend_file(p);

    std::map<std::string, std::string> annotations;
    if (!annotations_path.empty()) annotations = load_annotations(annotations_path);

    std::vector<LevelSample> base;
    for (const auto& domain : ds.vocab.domains()) {
        fs::path dir = fs::path(levels_dir) / domain.name;
        if (!fs::is_directory(dir)) fail("IoError", "missing level directory '" + dir.string() + "'");
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(dir))
            if (e.is_regular_file() && e.path().extension() == ".txt") files.push_back(e.path());
        std::sort(files.begin(), files.end());
        if (files.empty()) fail("EmptyDomain", "no level files for domain '" + domain.name + "'");
        for (const auto& file : files) {
            std::ifstream in(file);
            std::stringstream ss;
            ss << in.rdbuf();
            std::string source_id = domain.name + "/" + file.stem().string();
            LevelGrid raw = parse_level_text(ss.str(), ds.vocab, domain, source_id);
            std::vector<LevelGrid> pieces;
            if (raw.height < kLevelSize && raw.width < kLevelSize)
                pieces.push_back(raw);
            else
                pieces = window_level(raw);
            for (auto& piece : pieces) {
                LevelSample s;
                s.grid = pad_level(piece);
                base.push_back(std::move(s));
            }
        }
    }

    build_splits(base, test_fraction, seed);

    for (const auto& b : base) {
        const GameDomain& domain = ds.vocab.domain(b.grid.domain);
        for (auto& variant : augment(b.grid, domain)) {
            LevelSample s;
            s.grid = std::move(variant);
            s.split = b.split;
            auto it = annotations.find(s.grid.source_id);
            if (it != annotations.end()) s.instruction = it->second;
            ds.samples.push_back(std::move(s));
        }
    }
    return ds;
}

// ---------------------------------------------------------------------------
// stub annotator
// ---------------------------------------------------------------------------

namespace detail {

// Empty for singletons so the ubiquitous "one" never enters the bag.
inline std::string count_word(int n) {
    static const char* words[] = {"", "two", "three", "four", "five"};
    if (n <= 5) return words[std::max(1, n) - 1];
    if (n <= 8) return "several";
    return "many";
}

struct ObjectStat {
    int tile_id = 0;
    int count = 0;
    double row_sum = 0.0, col_sum = 0.0;
};

// Coarse location word from a center of mass; empty when the mass sits near
// the center (the default placement is not worth a token). Side-view games
// only use the horizontal axis.
inline std::string position_word(double cr, double cc, int H, int W, bool horizontal_only) {
    double dr = cr - (H - 1) / 2.0, dc = cc - (W - 1) / 2.0;
    const double tr = H / 6.0, tc = W / 6.0;
    std::string horiz = dc < -tc ? "left" : (dc > tc ? "right" : "");
    if (horizontal_only) {
        if (!horiz.empty() && dr < -tr) return horiz + " high";
        return horiz;
    }
    std::string vert = dr < -tr ? "top" : (dr > tr ? "bottom" : "");
    if (!vert.empty() && !horiz.empty()) return vert + " " + horiz;
    if (!vert.empty()) return vert;
    return horiz;
}

} // namespace detail

// Deterministic telegraphic instruction from tile-category statistics. Speaks
// each game's own tile vocabulary so that abstraction has real work to do;
// terse style keeps filler tokens from dominating bag similarity.
inline std::string stub_annotate(const LevelGrid& g, const TileVocabulary& vocab) {
    const int H = g.height, W = g.width;
    std::map<int, detail::ObjectStat> stats;
    int solid_count = 0;
    std::vector<int> solid_col_height(static_cast<std::size_t>(W), 0);
    for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c) {
            const TileEntry& e = vocab.entry(g.at(r, c));
            if (e.category == "solid") {
                ++solid_count;
                ++solid_col_height[static_cast<std::size_t>(c)];
                continue;
            }
            if (e.category == "empty") continue;
            auto& st = stats[g.at(r, c)];
            st.tile_id = g.at(r, c);
            ++st.count;
            st.row_sum += r;
            st.col_sum += c;
        }

    const double solid_frac = static_cast<double>(solid_count) / (H * W);
    int bottom_solid = 0, bottom_gaps = 0;
    bool in_gap = false;
    for (int c = 0; c < W; ++c) {
        bool solid = vocab.entry(g.at(H - 1, c)).category == "solid";
        if (solid) ++bottom_solid;
        if (!solid && !in_gap) ++bottom_gaps;
        in_gap = !solid;
    }
    int border_solid = 0, border_total = 0;
    for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c)
            if (r == 0 || c == 0 || r == H - 1 || c == W - 1) {
                ++border_total;
                if (vocab.entry(g.at(r, c)).category == "solid") ++border_solid;
            }

    std::string structure;
    if (border_solid >= border_total * 3 / 4 && vocab.domain(g.domain).genre == Genre::dungeon_crawler) {
        // count full-ish interior wall lines
        int wall_rows = 0, wall_cols = 0;
        for (int r = 2; r < H - 2; ++r) {
            int run = 0;
            for (int c = 1; c < W - 1; ++c)
                if (vocab.entry(g.at(r, c)).category == "solid") ++run;
            if (run >= W - 6) ++wall_rows;
        }
        for (int c = 2; c < W - 2; ++c) {
            int run = 0;
            for (int r = 1; r < H - 1; ++r)
                if (vocab.entry(g.at(r, c)).category == "solid") ++run;
            if (run >= H - 6) ++wall_cols;
        }
        // central block mass
        int central = 0, interior = solid_count - border_solid;
        for (int r = H / 2 - 3; r <= H / 2 + 3; ++r)
            for (int c = W / 2 - 3; c <= W / 2 + 3; ++c)
                if (r > 0 && r < H - 1 && c > 0 && c < W - 1 &&
                    vocab.entry(g.at(r, c)).category == "solid")
                    ++central;
        double interior_frac = static_cast<double>(interior) / (H * W);
        if (interior_frac < 0.03)
            structure = "open room";
        else if (wall_rows >= 2)
            structure = "corridor rows";
        else if (wall_rows >= 1 && wall_cols >= 1)
            structure = "split chambers";
        else if (central >= interior * 3 / 5 && interior >= 8)
            structure = "central blocks";
        else if (interior_frac >= 0.16)
            structure = "spiral walls";
        else
            structure = "scattered rubble";
    } else if (bottom_solid >= W * 3 / 4) {
        int minh = H, maxh = 0;
        for (int c = 0; c < W; ++c) {
            minh = std::min(minh, solid_col_height[static_cast<std::size_t>(c)]);
            maxh = std::max(maxh, solid_col_height[static_cast<std::size_t>(c)]);
        }
        if (bottom_gaps >= 2)
            structure = "gapped floor";
        else if (maxh - minh <= 1)
            structure = "flat ground";
        else if (maxh - minh >= 5)
            structure = "tall columns";
        else
            structure = "uneven ground";
    } else if (bottom_solid >= W / 2) {
        structure = "gapped floor";
    } else if (solid_frac < 0.08) {
        structure = "open sky";
    } else {
        structure = "floating platforms";
    }

    // most frequent objects first, up to three mentions
    std::vector<detail::ObjectStat> objects;
    for (const auto& [id, st] : stats) objects.push_back(st);
    std::sort(objects.begin(), objects.end(), [](const auto& a, const auto& b) {
        if (a.count != b.count) return a.count > b.count;
        return a.tile_id < b.tile_id;
    });

    const bool horizontal_only = vocab.domain(g.domain).genre == Genre::platformer;
    // two phrasing styles keyed to the source id, connective and telegraphic
    const bool connective_style = fnv1a64(g.source_id) % 2 == 0;
    std::string text = structure;
    const std::size_t mentions = std::min<std::size_t>(objects.size(), 3);
    for (std::size_t i = 0; i < mentions; ++i) {
        const auto& st = objects[i];
        const TileEntry& e = vocab.entry(st.tile_id);
        std::string name = st.count > 1 ? detail::pluralize(e.display_name) : e.display_name;
        std::string pos = detail::position_word(st.row_sum / st.count, st.col_sum / st.count, H, W,
                                                horizontal_only);
        std::string count = detail::count_word(st.count);
        std::string mention = count.empty() ? name : count + " " + name;
        if (!pos.empty()) mention += " " + pos;
        if (!connective_style)
            text += " " + mention;
        else if (i == 0)
            text += " with " + mention;
        else if (i + 1 == mentions)
            text += " and " + mention;
        else
            text += ", " + mention;
    }
    return text;
}

// Rewrites every record's instruction with the stub annotator.
inline void annotate_dataset(Dataset& ds) {
    for (auto& s : ds.samples) s.instruction = stub_annotate(s.grid, ds.vocab);
}

} // namespace lvb
