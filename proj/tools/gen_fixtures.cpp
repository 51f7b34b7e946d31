// Writes the synthetic two-game fixture corpus under data/fixtures/:
// per-game legends and plaintext level files. Deterministic; the shipped
// corpus is the committed output of this tool.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "levelblend/rng.hpp"

namespace fs = std::filesystem;
using lvb::Rng;

namespace {

struct Canvas {
    int h, w;
    std::vector<std::string> rows;
    Canvas(int h_, int w_, char fill) : h(h_), w(w_), rows(static_cast<std::size_t>(h_), std::string(static_cast<std::size_t>(w_), fill)) {}
    char& at(int r, int c) { return rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)]; }
    void hline(int r, int c0, int c1, char ch) {
        for (int c = c0; c <= c1; ++c)
            if (r >= 0 && r < h && c >= 0 && c < w) at(r, c) = ch;
    }
    void vline(int c, int r0, int r1, char ch) {
        for (int r = r0; r <= r1; ++r)
            if (r >= 0 && r < h && c >= 0 && c < w) at(r, c) = ch;
    }
    void box(int r0, int c0, int r1, int c1, char ch) {
        hline(r0, c0, c1, ch);
        hline(r1, c0, c1, ch);
        vline(c0, r0, r1, ch);
        vline(c1, r0, r1, ch);
    }
    void fill_rect(int r0, int c0, int r1, int c1, char ch) {
        for (int r = r0; r <= r1; ++r) hline(r, c0, c1, ch);
    }
    std::string str() const {
        std::string out;
        for (const auto& r : rows) out += r + "\n";
        return out;
    }
};

// --- skyreach: side-view platformer ---------------------------------------

void skyreach_structure(Canvas& g, int archetype, int x0, int x1, Rng& rng) {
    const int h = g.h;
    const int ground = h - 2;
    switch (archetype) {
        case 0: { // flat ground, coin cluster, goombas
            g.fill_rect(ground, x0, h - 1, x1, '#');
            int cx = x0 + 2 + static_cast<int>(rng.index(static_cast<std::size_t>(x1 - x0 - 4)));
            int n = 2 + static_cast<int>(rng.index(4));
            for (int i = 0; i < n; ++i) g.at(ground - 1 - (i % 2), std::min(cx + i / 2, x1)) = 'o';
            int gx = x0 + 1 + static_cast<int>(rng.index(static_cast<std::size_t>(x1 - x0 - 2)));
            g.at(ground - 1, gx) = 'g';
            if (rng.index(2)) g.at(ground - 1, std::min(gx + 3, x1)) = 'g';
            break;
        }
        case 1: { // gapped ground, koopas, coins over the gaps
            g.fill_rect(ground, x0, h - 1, x1, '#');
            int gaps = 2 + static_cast<int>(rng.index(2));
            for (int k = 0; k < gaps; ++k) {
                int gx = x0 + 2 + static_cast<int>(rng.index(static_cast<std::size_t>(std::max(2, x1 - x0 - 5))));
                g.fill_rect(ground, gx, h - 1, std::min(gx + 1, x1), '.');
            }
            g.at(ground - 1, x0 + 1) = 'k';
            g.at(ground - 1, x1 - 2) = 'k';
            break;
        }
        case 2: { // pillars with a cannon
            g.fill_rect(ground, x0, h - 1, x1, '#');
            int pillars = 3 + static_cast<int>(rng.index(2));
            for (int k = 0; k < pillars; ++k) {
                int px = x0 + 1 + static_cast<int>(rng.index(static_cast<std::size_t>(x1 - x0 - 2)));
                int ph = 3 + static_cast<int>(rng.index(4));
                g.vline(px, ground - ph, ground - 1, '#');
                if (k == 0) g.at(ground - ph - 1, px) = 'c';
            }
            break;
        }
        case 3: { // floating block platforms with coins
            g.fill_rect(ground, x0, h - 1, x1, '#');
            int rows = 2 + static_cast<int>(rng.index(2));
            for (int k = 0; k < rows; ++k) {
                int py = ground - 3 - 3 * k;
                int px = x0 + 1 + static_cast<int>(rng.index(static_cast<std::size_t>(std::max(2, x1 - x0 - 5))));
                char block = rng.index(2) ? 'B' : 'Q';
                g.hline(py, px, std::min(px + 3, x1), block);
                g.hline(py - 1, px, std::min(px + 2, x1), 'o');
            }
            break;
        }
        case 4: { // pipes and coins
            g.fill_rect(ground, x0, h - 1, x1, '#');
            int pipes = 2 + static_cast<int>(rng.index(2));
            for (int k = 0; k < pipes; ++k) {
                int px = x0 + 2 + static_cast<int>(rng.index(static_cast<std::size_t>(std::max(2, x1 - x0 - 5))));
                int ph = 2 + static_cast<int>(rng.index(3));
                g.fill_rect(ground - ph, px, ground - 1, px + 1, 'p');
            }
            break;
        }
        case 5: { // ladder tower with a question-block row
            g.fill_rect(ground, x0, h - 1, x1, '#');
            int lx = x0 + 2 + static_cast<int>(rng.index(static_cast<std::size_t>(x1 - x0 - 4)));
            int top = 3 + static_cast<int>(rng.index(3));
            g.vline(lx, top, ground - 1, 'l');
            g.hline(top, std::max(x0, lx - 2), std::min(x1, lx + 2), 'Q');
            break;
        }
        case 6: { // spike strip and floating coins
            g.fill_rect(ground, x0, h - 1, x1, '#');
            int sx = x0 + 2 + static_cast<int>(rng.index(static_cast<std::size_t>(std::max(2, x1 - x0 - 7))));
            g.hline(ground - 1, sx, std::min(sx + 4, x1), '^');
            g.at(ground - 1, x0 + 1) = 'g';
            break;
        }
        default: { // start/flag framing with a coin arc
            g.fill_rect(ground, x0, h - 1, x1, '#');
            g.at(ground - 1, x0 + 1) = 'S';
            g.at(ground - 1, x1 - 1) = 'F';
            g.at(ground - 2, x1 - 1) = 'F';
            for (int k = 0; k < 4; ++k) g.at(ground - 3 - (k % 2), x0 + 4 + 2 * k) = 'o';
            break;
        }
    }
}

std::string make_skyreach(int index, Rng rng) {
    int h = 16, w = 16;
    if (index >= 48 && index < 60) w = 32;
    if (index >= 60) h = w = 12;
    Canvas g(h, w, '.');
    if (w > 16) {
        // two halves with their own archetypes; windows land on each half
        skyreach_structure(g, index % 8, 0, 15, rng);
        skyreach_structure(g, (index + 3) % 8, 16, 31, rng);
    } else {
        skyreach_structure(g, index % 8, 0, w - 1, rng);
    }
    return g.str();
}

// --- caverns: top-down dungeon ---------------------------------------------

void scatter(Canvas& g, char ch, int n, int r0, int c0, int r1, int c1, Rng& rng) {
    for (int i = 0; i < n; ++i) {
        int r = r0 + static_cast<int>(rng.index(static_cast<std::size_t>(std::max(1, r1 - r0 + 1))));
        int c = c0 + static_cast<int>(rng.index(static_cast<std::size_t>(std::max(1, c1 - c0 + 1))));
        if (g.at(r, c) == '.') g.at(r, c) = ch;
    }
}

std::string make_caverns(int index, Rng rng) {
    int h = 16, w = 16;
    if (index >= 60) h = w = 12;
    Canvas g(h, w, '.');
    g.box(0, 0, h - 1, w - 1, '#');
    const int archetype = index % 8;
    switch (archetype) {
        case 0: { // open room, bats in one corner, gold opposite
            bool left = rng.index(2) != 0;
            int bc0 = left ? 1 : w - 5, bc1 = left ? 4 : w - 2;
            scatter(g, 'b', 3 + static_cast<int>(rng.index(3)), 1, bc0, 4, bc1, rng);
            scatter(g, 'G', 2 + static_cast<int>(rng.index(3)), h - 5, left ? w - 5 : 1, h - 2, left ? w - 2 : 4, rng);
            break;
        }
        case 1: { // central block cluster, bats on one side
            int cy = h / 2, cx = w / 2;
            int half = 1 + static_cast<int>(rng.index(2));
            g.fill_rect(cy - half, cx - half, cy + half, cx + half, '#');
            bool right = rng.index(2) != 0;
            scatter(g, 'b', 3 + static_cast<int>(rng.index(3)), 2, right ? w - 5 : 1, h - 3, right ? w - 2 : 4, rng);
            break;
        }
        case 2: { // spiral wall path toward a gold cache
            int r0 = 2, c0 = 2, r1 = h - 3, c1 = w - 3;
            int turn = 0;
            while (r1 - r0 > 2 && c1 - c0 > 2) {
                if (turn % 4 == 0) g.hline(r0, c0, c1 - 1, '#');
                if (turn % 4 == 1) g.vline(c1, r0, r1 - 1, '#');
                if (turn % 4 == 2) g.hline(r1, c0 + 1, c1, '#');
                if (turn % 4 == 3) g.vline(c0, r0 + 2, r1, '#');
                if (turn % 4 == 0) r0 += 2;
                if (turn % 4 == 1) c1 -= 2;
                if (turn % 4 == 2) r1 -= 2;
                if (turn % 4 == 3) c0 += 2;
                ++turn;
            }
            g.at(h / 2, w / 2) = 'G';
            if (rng.index(2)) g.at(h / 2 + 1, w / 2) = 'G';
            break;
        }
        case 3: { // four chambers joined by doors, key and gold apart
            int cy = h / 2, cx = w / 2;
            g.hline(cy, 1, w - 2, '#');
            g.vline(cx, 1, h - 2, '#');
            g.at(cy, 1 + static_cast<int>(rng.index(static_cast<std::size_t>(cx - 1)))) = 'D';
            g.at(cy, cx + 1 + static_cast<int>(rng.index(static_cast<std::size_t>(w - cx - 2)))) = 'D';
            g.at(1 + static_cast<int>(rng.index(static_cast<std::size_t>(cy - 1))), cx) = 'D';
            g.at(2 + static_cast<int>(rng.index(2)), 2) = 'K';
            g.at(cy + 2 + static_cast<int>(rng.index(2)), cx + 2) = 'T';
            break;
        }
        case 4: { // lava pool, rope crossing, bats above
            int pr = h - 5 + static_cast<int>(rng.index(2));
            g.fill_rect(pr, w / 2, h - 2, w - 2, 'L');
            int rc = 2 + static_cast<int>(rng.index(static_cast<std::size_t>(w / 2 - 3)));
            g.vline(rc, 1, h - 2, 'R');
            break;
        }
        case 5: { // corridors with statues and gold
            for (int r = 3; r < h - 2; r += 3) {
                g.hline(r, 1, w - 2, '#');
                g.at(r, 1 + static_cast<int>(rng.index(static_cast<std::size_t>(w - 2)))) = '.';
            }
            scatter(g, 'T', 2, 1, 1, h - 2, w - 2, rng);
            scatter(g, 'K', 2 + static_cast<int>(rng.index(2)), 1, 1, h - 2, w - 2, rng);
            break;
        }
        case 6: { // inner vault with a door, treasure inside, bats outside
            int r0 = h / 2 - 3, c0 = w / 2 - 3, r1 = h / 2 + 2, c1 = w / 2 + 2;
            g.box(r0, c0, r1, c1, '#');
            g.at(r1, (c0 + c1) / 2) = 'D';
            g.at(r0 + 2, c0 + 2) = 'G';
            g.at(r0 + 2, c0 + 3) = 'K';
            scatter(g, 'b', 3, 1, 1, r0 - 1, w - 2, rng);
            break;
        }
        default: { // mirror-symmetric pillar hall with exit and entrance
            for (int r = 3; r < h - 3; r += 3)
                for (int c = 3; c < w / 2; c += 3) {
                    g.at(r, c) = '#';
                    g.at(r, w - 1 - c) = '#';
                }
            g.at(1, w / 2) = 'E';
            g.at(h - 2, w / 2) = 'S';
            g.at(h / 2, 2) = 'T';
            g.at(h / 2, w - 3) = 'T';
            break;
        }
    }
    return g.str();
}

void write_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    out << text;
}

} // namespace

int main(int argc, char** argv) {
    fs::path root = argc > 1 ? argv[1] : "data/fixtures";
    fs::create_directories(root / "legends");
    fs::create_directories(root / "levels" / "skyreach");
    fs::create_directories(root / "levels" / "caverns");

    write_file(root / "legends" / "skyreach.legend",
               "# skyreach tile legend\n"
               "name=skyreach\n"
               "genre=platformer\n"
               "tile=.,empty,sky\n"
               "tile=#,solid,ground\n"
               "tile=B,interactive,breakable block\n"
               "tile=Q,interactive,question block\n"
               "tile=o,collectable,coin\n"
               "tile=g,enemy,goomba\n"
               "tile=k,enemy,koopa\n"
               "tile=c,enemy,cannon\n"
               "tile=p,environment,pipe\n"
               "tile=l,climbable,ladder\n"
               "tile=^,hazard,spike\n"
               "tile=F,goal,flag\n"
               "tile=S,agent,start\n");

    write_file(root / "legends" / "caverns.legend",
               "# caverns tile legend\n"
               "name=caverns\n"
               "genre=dungeon_crawler\n"
               "tile=.,empty,floor\n"
               "tile=#,solid,wall\n"
               "tile=b,enemy,bat\n"
               "tile=G,collectable,gold\n"
               "tile=K,collectable,key\n"
               "tile=D,interactive,door\n"
               "tile=L,hazard,lava\n"
               "tile=R,climbable,rope\n"
               "tile=T,other,statue\n"
               "tile=S,agent,entrance\n"
               "tile=E,goal,exit\n");

    Rng rng(20240917);
    char name[64];
    for (int i = 0; i < 64; ++i) {
        std::snprintf(name, sizeof(name), "sky_%03d.txt", i);
        write_file(root / "levels" / "skyreach" / name,
                   make_skyreach(i, rng.child("skyreach:" + std::to_string(i))));
    }
    for (int i = 0; i < 64; ++i) {
        std::snprintf(name, sizeof(name), "cav_%03d.txt", i);
        write_file(root / "levels" / "caverns" / name,
                   make_caverns(i, rng.child("caverns:" + std::to_string(i))));
    }
    std::cout << "fixture corpus written to " << root << "\n";
    return 0;
}
