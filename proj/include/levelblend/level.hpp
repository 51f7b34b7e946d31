#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "levelblend/vocab.hpp"

namespace lvb {

constexpr int kLevelSize = 16;

// H x W integer tile grid over the merged vocabulary, tagged with its game
// domain and a source id that tracks windowing/augmentation provenance.
struct LevelGrid {
    int height = 0;
    int width = 0;
    std::vector<int> tiles; // row-major tile ids
    std::string domain;
    std::string source_id;

    int at(int r, int c) const { return tiles[static_cast<std::size_t>(r) * width + c]; }
    int& at(int r, int c) { return tiles[static_cast<std::size_t>(r) * width + c]; }

    bool same_tiles(const LevelGrid& other) const {
        return height == other.height && width == other.width && tiles == other.tiles;
    }
};

inline LevelGrid parse_level_text(const std::string& text, const TileVocabulary& vocab,
                                  const GameDomain& domain, const std::string& source_id) {
    std::vector<std::string> rows;
    std::string cur;
    for (char c : text) {
        if (c == '\n') {
            if (!cur.empty() && cur.back() == '\r') cur.pop_back();
            rows.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!cur.empty()) rows.push_back(cur);
    while (!rows.empty() && rows.back().empty()) rows.pop_back();
    if (rows.empty()) fail("EmptyFile", "level '" + source_id + "' has no rows");

    LevelGrid g;
    g.height = static_cast<int>(rows.size());
    g.width = static_cast<int>(rows[0].size());
    g.domain = domain.name;
    g.source_id = source_id;
    g.tiles.reserve(static_cast<std::size_t>(g.height) * g.width);
    for (int r = 0; r < g.height; ++r) {
        if (static_cast<int>(rows[static_cast<std::size_t>(r)].size()) != g.width)
            fail("RaggedRows", "level '" + source_id + "' row " + std::to_string(r) + " has length " +
                                   std::to_string(rows[static_cast<std::size_t>(r)].size()) + ", expected " +
                                   std::to_string(g.width));
        for (int c = 0; c < g.width; ++c) {
            char glyph = rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
            int id = vocab.tile_for(domain.name, glyph);
            if (id < 0)
                fail("UnknownGlyph", "level '" + source_id + "' row " + std::to_string(r) + " col " +
                                         std::to_string(c) + ": glyph '" + std::string(1, glyph) + "'");
            g.tiles.push_back(id);
        }
    }
    return g;
}

// Inverse of parse_level_text for grids whose tiles all belong to one game.
inline std::string serialize_level(const LevelGrid& g, const TileVocabulary& vocab) {
    std::string out;
    out.reserve(static_cast<std::size_t>(g.height) * (g.width + 1));
    for (int r = 0; r < g.height; ++r) {
        for (int c = 0; c < g.width; ++c) out += vocab.glyph_for(g.at(r, c));
        out += '\n';
    }
    return out;
}

// Serialization for generated grids that may mix tiles from several games.
inline std::string serialize_level_global(const LevelGrid& g, const TileVocabulary& vocab) {
    std::string out;
    out.reserve(static_cast<std::size_t>(g.height) * (g.width + 1));
    for (int r = 0; r < g.height; ++r) {
        for (int c = 0; c < g.width; ++c) out += vocab.global_glyph(g.at(r, c));
        out += '\n';
    }
    return out;
}

namespace detail {

inline std::vector<int> window_offsets(int extent, int size, int stride) {
    std::vector<int> offsets;
    for (int o = 0; o + size <= extent; o += stride) offsets.push_back(o);
    if (offsets.empty() || offsets.back() + size < extent) {
        int flush = extent - size;
        if (flush >= 0 && (offsets.empty() || flush != offsets.back())) offsets.push_back(flush);
    }
    if (offsets.empty()) offsets.push_back(0); // axis shorter than the window
    return offsets;
}

inline LevelGrid crop(const LevelGrid& g, int r0, int c0, int h, int w, const std::string& suffix) {
    LevelGrid out;
    out.height = h;
    out.width = w;
    out.domain = g.domain;
    out.source_id = g.source_id + suffix;
    out.tiles.resize(static_cast<std::size_t>(h) * w);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) out.at(r, c) = g.at(r0 + r, c0 + c);
    return out;
}

} // namespace detail

// Sliding windows of `size` x `size` at stride offsets, with a final window
// flush to the far edge when the last step does not land on the boundary.
// An axis shorter than `size` yields a single clamped-extent slice there;
// pad_level completes those downstream.
inline std::vector<LevelGrid> window_level(const LevelGrid& g, int size = kLevelSize,
                                           int stride = kLevelSize) {
    if (stride < 1) fail("ConfigInvalid", "window stride must be >= 1");
    if (g.height < size && g.width < size)
        fail("WindowLargerThanLevel", "level '" + g.source_id + "' is " + std::to_string(g.height) + "x" +
                                          std::to_string(g.width) + ", window is " + std::to_string(size));
    auto row_offsets = detail::window_offsets(g.height, size, stride);
    auto col_offsets = detail::window_offsets(g.width, size, stride);
    const int wh = std::min(g.height, size);
    const int ww = std::min(g.width, size);
    std::vector<LevelGrid> out;
    out.reserve(row_offsets.size() * col_offsets.size());
    const bool single = row_offsets.size() == 1 && col_offsets.size() == 1;
    for (int r0 : row_offsets)
        for (int c0 : col_offsets) {
            std::string suffix = single ? std::string()
                                        : "@r" + std::to_string(r0) + "c" + std::to_string(c0);
            out.push_back(detail::crop(g, r0, c0, wh, ww, suffix));
        }
    return out;
}

// Pads up to size x size by centering the original (extra cell goes to the
// bottom/right on odd parity) and replicating the nearest edge row/column.
inline LevelGrid pad_level(const LevelGrid& g, int size = kLevelSize) {
    if (g.height > size || g.width > size)
        fail("InputLargerThanTarget", "level '" + g.source_id + "' is " + std::to_string(g.height) + "x" +
                                          std::to_string(g.width) + ", target is " + std::to_string(size));
    if (g.height == size && g.width == size) return g;
    const int top = (size - g.height) / 2;
    const int left = (size - g.width) / 2;
    LevelGrid out;
    out.height = size;
    out.width = size;
    out.domain = g.domain;
    out.source_id = g.source_id;
    out.tiles.resize(static_cast<std::size_t>(size) * size);
    for (int r = 0; r < size; ++r) {
        int sr = std::clamp(r - top, 0, g.height - 1);
        for (int c = 0; c < size; ++c) {
            int sc = std::clamp(c - left, 0, g.width - 1);
            out.at(r, c) = g.at(sr, sc);
        }
    }
    return out;
}

inline LevelGrid hflip(const LevelGrid& g, const std::string& suffix = "+hflip") {
    LevelGrid out = g;
    out.source_id = g.source_id + suffix;
    for (int r = 0; r < g.height; ++r)
        for (int c = 0; c < g.width; ++c) out.at(r, c) = g.at(r, g.width - 1 - c);
    return out;
}

inline LevelGrid rot90(const LevelGrid& g, const std::string& suffix = "+rot90") {
    LevelGrid out;
    out.height = g.width;
    out.width = g.height;
    out.domain = g.domain;
    out.source_id = g.source_id + suffix;
    out.tiles.resize(g.tiles.size());
    for (int r = 0; r < g.height; ++r)
        for (int c = 0; c < g.width; ++c) out.at(c, g.height - 1 - r) = g.at(r, c);
    return out;
}

// Domain-dependent augmentation. Platformers: identity + hflip. Dungeon
// crawlers: the 8 dihedral variants, deduplicated by exact tile equality.
// The original always comes first.
inline std::vector<LevelGrid> augment(const LevelGrid& g, const GameDomain& domain) {
    std::vector<LevelGrid> variants;
    variants.push_back(g);
    if (!domain.uses_rotations()) {
        LevelGrid flipped = hflip(g);
        if (!flipped.same_tiles(g)) variants.push_back(std::move(flipped));
        return variants;
    }
    LevelGrid cur = g;
    for (int k = 1; k < 4; ++k) {
        cur = rot90(cur, "");
        cur.source_id = g.source_id + "+rot" + std::to_string(90 * k);
        variants.push_back(cur);
    }
    LevelGrid flipped = hflip(g);
    variants.push_back(flipped);
    cur = flipped;
    for (int k = 1; k < 4; ++k) {
        cur = rot90(cur, "");
        cur.source_id = g.source_id + "+hflip+rot" + std::to_string(90 * k);
        variants.push_back(cur);
    }
    std::vector<LevelGrid> unique;
    for (auto& v : variants) {
        bool dup = false;
        for (const auto& u : unique)
            if (u.same_tiles(v)) {
                dup = true;
                break;
            }
        if (!dup) unique.push_back(std::move(v));
    }
    return unique;
}

// One-hot channels-last buffer [H][W][C]; each cell's channels sum to 1.
inline std::vector<float> one_hot_encode(const LevelGrid& g, int C) {
    std::vector<float> out(static_cast<std::size_t>(g.height) * g.width * C, 0.0f);
    for (int r = 0; r < g.height; ++r)
        for (int c = 0; c < g.width; ++c) {
            int id = g.at(r, c);
            if (id < 0 || id >= C)
                fail("TileIdOutOfRange", "tile id " + std::to_string(id) + " at (" + std::to_string(r) + "," +
                                             std::to_string(c) + ") with C=" + std::to_string(C));
            out[(static_cast<std::size_t>(r) * g.width + c) * C + id] = 1.0f;
        }
    return out;
}

// Channels-first buffer [C][H][W] for the conv stacks.
inline std::vector<float> one_hot_encode_chw(const LevelGrid& g, int C) {
    std::vector<float> out(static_cast<std::size_t>(C) * g.height * g.width, 0.0f);
    const std::size_t plane = static_cast<std::size_t>(g.height) * g.width;
    for (int r = 0; r < g.height; ++r)
        for (int c = 0; c < g.width; ++c) {
            int id = g.at(r, c);
            if (id < 0 || id >= C)
                fail("TileIdOutOfRange", "tile id " + std::to_string(id) + " with C=" + std::to_string(C));
            out[static_cast<std::size_t>(id) * plane + static_cast<std::size_t>(r) * g.width + c] = 1.0f;
        }
    return out;
}

// Argmax decode of channels-last scores back to a grid.
inline LevelGrid one_hot_decode(const std::vector<float>& data, int H, int W, int C,
                                const std::string& domain = {}, const std::string& source_id = {}) {
    if (data.size() != static_cast<std::size_t>(H) * W * C)
        fail("ShapeMismatch", "one_hot_decode: buffer size mismatch");
    LevelGrid g;
    g.height = H;
    g.width = W;
    g.domain = domain;
    g.source_id = source_id;
    g.tiles.resize(static_cast<std::size_t>(H) * W);
    for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c) {
            const float* cell = data.data() + (static_cast<std::size_t>(r) * W + c) * C;
            int best = 0;
            for (int k = 1; k < C; ++k)
                if (cell[k] > cell[best]) best = k;
            g.at(r, c) = best;
        }
    return g;
}

} // namespace lvb
