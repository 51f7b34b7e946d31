#pragma once

#include <fstream>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "levelblend/common.hpp"

namespace lvb {

// The semantic categories every tile maps to. Order is fixed; it defines the
// category axis of proxy features and the render palette.
inline const std::vector<std::string>& tile_categories() {
    static const std::vector<std::string> cats = {
        "enemy",    "environment", "climbable", "collectable", "interactive",
        "hazard",   "empty",       "solid",     "agent",       "goal",
        "other"};
    return cats;
}

inline int category_index(const std::string& name) {
    const auto& cats = tile_categories();
    for (std::size_t i = 0; i < cats.size(); ++i)
        if (cats[i] == name) return static_cast<int>(i);
    fail("ConfigInvalid", "unknown tile category '" + name + "'");
}

enum class Genre { platformer, dungeon_crawler };

inline Genre genre_from_string(const std::string& s) {
    if (s == "platformer") return Genre::platformer;
    if (s == "dungeon_crawler") return Genre::dungeon_crawler;
    fail("ConfigInvalid", "unknown genre '" + s + "'");
}

inline std::string genre_to_string(Genre g) {
    return g == Genre::platformer ? "platformer" : "dungeon_crawler";
}

// Platformers flip horizontally; dungeon crawlers additionally rotate.
struct GameDomain {
    std::string name;
    Genre genre = Genre::platformer;

    bool uses_rotations() const { return genre == Genre::dungeon_crawler; }
};

struct TileEntry {
    int tile_id = 0;           // dense id in the merged vocabulary
    char glyph = '?';          // glyph within its game's legend
    std::string category;
    std::string display_name;  // word the stub annotator uses
    std::string game;          // owning game domain
};

// One legend per game; merged legends share a dense 0..C-1 id space in game
// load order, then per-game declaration order.
class TileVocabulary {
public:
    int size() const { return static_cast<int>(entries_.size()); }
    const std::vector<TileEntry>& entries() const { return entries_; }
    const TileEntry& entry(int tile_id) const {
        if (tile_id < 0 || tile_id >= size()) fail("TileIdOutOfRange", "tile id " + std::to_string(tile_id));
        return entries_[static_cast<std::size_t>(tile_id)];
    }

    const std::vector<GameDomain>& domains() const { return domains_; }

    const GameDomain& domain(const std::string& name) const {
        for (const auto& d : domains_)
            if (d.name == name) return d;
        fail("ConfigInvalid", "unknown game domain '" + name + "'");
    }

    bool has_domain(const std::string& name) const {
        for (const auto& d : domains_)
            if (d.name == name) return true;
        return false;
    }

    int tile_for(const std::string& game, char glyph) const {
        auto it = glyph_maps_.find(game);
        if (it == glyph_maps_.end()) fail("ConfigInvalid", "unknown game domain '" + game + "'");
        auto jt = it->second.find(glyph);
        if (jt == it->second.end()) return -1;
        return jt->second;
    }

    char glyph_for(int tile_id) const { return entry(tile_id).glyph; }
    int category_of(int tile_id) const { return category_index(entry(tile_id).category); }

    // Adds one game's legend. Glyphs must be unique within the game.
    void add_game(const GameDomain& domain,
                  const std::vector<std::tuple<char, std::string, std::string>>& tiles) {
        if (has_domain(domain.name)) fail("ConfigInvalid", "duplicate game domain '" + domain.name + "'");
        domains_.push_back(domain);
        auto& glyphs = glyph_maps_[domain.name];
        for (const auto& [glyph, category, name] : tiles) {
            if (glyphs.count(glyph))
                fail("ConfigInvalid", "duplicate glyph '" + std::string(1, glyph) + "' in legend for " + domain.name);
            category_index(category); // validates
            TileEntry e;
            e.tile_id = size();
            e.glyph = glyph;
            e.category = category;
            e.display_name = name;
            e.game = domain.name;
            glyphs[glyph] = e.tile_id;
            entries_.push_back(std::move(e));
        }
    }

    // Legend file format, one game per file:
    //   name=<game>
    //   genre=<platformer|dungeon_crawler>
    //   tile=<glyph>,<category>,<display name>
    // Lines starting with '#' are comments.
    void load_legend_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) fail("IoError", "cannot open legend '" + path + "'");
        GameDomain domain;
        bool have_name = false, have_genre = false;
        std::vector<std::tuple<char, std::string, std::string>> tiles;
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.empty() || line[0] == '#') continue;
            std::size_t eq = line.find('=');
            if (eq == std::string::npos)
                fail("ConfigInvalid", path + ":" + std::to_string(lineno) + ": expected key=value");
            std::string key = line.substr(0, eq), value = line.substr(eq + 1);
            if (key == "name") {
                domain.name = value;
                have_name = true;
            } else if (key == "genre") {
                domain.genre = genre_from_string(value);
                have_genre = true;
            } else if (key == "tile") {
                std::size_t c1 = value.find(',');
                std::size_t c2 = c1 == std::string::npos ? std::string::npos : value.find(',', c1 + 1);
                if (c1 != 1 || c2 == std::string::npos)
                    fail("ConfigInvalid", path + ":" + std::to_string(lineno) + ": expected tile=<glyph>,<category>,<name>");
                tiles.emplace_back(value[0], value.substr(2, c2 - 2), value.substr(c2 + 1));
            } else {
                fail("ConfigInvalid", path + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
            }
        }
        if (!have_name || !have_genre) fail("ConfigInvalid", path + ": legend needs name= and genre=");
        if (tiles.empty()) fail("ConfigInvalid", path + ": legend has no tiles");
        add_game(domain, tiles);
    }

    // Glyph usable for serializing mixed-game grids: the entry's own glyph
    // when globally unambiguous, otherwise a deterministic substitute.
    char global_glyph(int tile_id) const {
        build_global_glyphs();
        return global_glyphs_[static_cast<std::size_t>(tile_id)];
    }

private:
    void build_global_glyphs() const {
        if (!global_glyphs_.empty()) return;
        static const std::string pool =
            "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789.#^*+-=<>?!$%&";
        std::map<char, int> used;
        global_glyphs_.resize(entries_.size(), '?');
        for (const auto& e : entries_) {
            char g = e.glyph;
            if (!used.count(g)) {
                used[g] = e.tile_id;
                global_glyphs_[static_cast<std::size_t>(e.tile_id)] = g;
                continue;
            }
            for (char cand : pool)
                if (!used.count(cand)) {
                    used[cand] = e.tile_id;
                    global_glyphs_[static_cast<std::size_t>(e.tile_id)] = cand;
                    break;
                }
        }
    }

    std::vector<TileEntry> entries_;
    std::vector<GameDomain> domains_;
    std::map<std::string, std::map<char, int>> glyph_maps_;
    mutable std::vector<char> global_glyphs_;
};

} // namespace lvb
