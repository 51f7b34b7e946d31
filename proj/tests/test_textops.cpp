#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>

#include "levelblend/textops.hpp"
#include "helpers.hpp"

using namespace lvb;

TEST_CASE("abstraction rules") {
    auto rules = AbstractionRuleSet::default_rules();
    SECTION("the shipped table has exactly 15 rules") { CHECK(rules.rules().size() == 15); }
    SECTION("bat maps to enemy with number preserved") {
        CHECK(abstract_instruction("bats clustered on right side", rules) ==
              "enemies clustered on right side");
        CHECK(abstract_instruction("a bat sleeps", rules) == "a enemy sleeps");
    }
    SECTION("coin maps to collectable") {
        CHECK(abstract_instruction("flat ground with two coins", rules) ==
              "flat ground with two collectables");
    }
    SECTION("no rule fires, text unchanged") {
        CHECK(abstract_instruction("open path pockets", rules) == "open path pockets");
    }
    SECTION("multi-word patterns match before shorter ones and keep separators") {
        CHECK(abstract_instruction("a question block row, one breakable block", rules) ==
              "a interactive row, one interactive");
        CHECK(abstract_instruction("two question blocks up high", rules) ==
              "two interactives up high");
    }
    SECTION("replacements cover the six shared categories") {
        std::set<std::string> repl;
        for (const auto& r : rules.rules()) repl.insert(r.replacement);
        CHECK(repl == std::set<std::string>{"enemy", "environment", "climbable", "collectable",
                                            "interactive", "hazard"});
    }
    SECTION("idempotent on fixture instructions") {
        for (const auto& s : testutil::fixture_dataset().samples) {
            std::string once = abstract_instruction(s.instruction, rules);
            REQUIRE(abstract_instruction(once, rules) == once);
        }
    }
    SECTION("idempotent on random token strings") {
        std::vector<std::string> lexicon = {"bat",  "bats",  "coin", "coins", "question", "block",
                                            "blocks", "pipe", "lava", "gold",  "wall",     "left",
                                            "right",  "two",  "with", "and",  "ladder",   "spikes"};
        Rng rng(31);
        for (int trial = 0; trial < 1000; ++trial) {
            std::string s;
            int len = 1 + static_cast<int>(rng.index(10));
            for (int i = 0; i < len; ++i) {
                if (i) s += ' ';
                s += lexicon[rng.index(lexicon.size())];
            }
            std::string once = abstract_instruction(s, rules);
            REQUIRE(abstract_instruction(once, rules) == once);
        }
    }
    SECTION("rule file round-trip") {
        auto path = std::string("/tmp/lvb_rules_test.txt");
        rules.save(path);
        auto back = AbstractionRuleSet::load(path);
        REQUIRE(back.rules().size() == rules.rules().size());
        CHECK(back.version() == rules.version());
        CHECK(abstract_instruction("bats near the lava pipe", back) ==
              abstract_instruction("bats near the lava pipe", rules));
    }
}

TEST_CASE("tokenize") {
    CHECK(tokenize("Ground bottom-right, gold!") ==
          std::vector<std::string>{"ground", "bottom", "right", "gold"});
    CHECK(tokenize("").empty());
    SECTION("idempotent through join") {
        for (const auto& s : testutil::fixture_dataset().samples) {
            auto once = tokenize(s.instruction);
            REQUIRE(tokenize(join_tokens(once)) == once);
        }
    }
}

TEST_CASE("reference embeddings") {
    SECTION("identical token sequences have cosine 1") {
        auto a = reference_embed({"flat", "ground", "coins"});
        auto b = reference_embed({"flat", "ground", "coins"});
        CHECK(cosine_similarity(a, b) == Catch::Approx(1.0).margin(1e-9));
    }
    SECTION("disjoint token sets with distinct buckets are orthogonal") {
        std::vector<std::string> ta = {"alpha", "beta", "gamma"};
        std::vector<std::string> tb = {"delta", "epsilon", "zeta"};
        std::set<std::size_t> buckets;
        for (const auto& t : ta) buckets.insert(reference_bucket(t));
        for (const auto& t : tb) buckets.insert(reference_bucket(t));
        REQUIRE(buckets.size() == 6); // no collisions among these fixtures
        CHECK(cosine_similarity(reference_embed(ta), reference_embed(tb)) ==
              Catch::Approx(0.0).margin(1e-12));
    }
    SECTION("empty token sequence gives the zero vector") {
        auto v = reference_embed({});
        double norm = 0.0;
        for (float x : v) norm += static_cast<double>(x) * x;
        CHECK(norm == 0.0);
    }
    SECTION("stable across calls") {
        CHECK(reference_embed({"spiral", "walls"}) == reference_embed({"spiral", "walls"}));
    }
}

TEST_CASE("cosine similarity") {
    CHECK(cosine_similarity({1, 0}, {1, 0}) == Catch::Approx(1.0));
    CHECK(cosine_similarity({1, 0}, {0, 1}) == Catch::Approx(0.0));
    CHECK(cosine_similarity({1, 1}, {1, 0}) == Catch::Approx(0.70711).margin(1e-5));
    CHECK(cosine_similarity({0, 0}, {1, 0}) == 0.0);
    CHECK_THROWS_AS(cosine_similarity({1, 0}, {1, 0, 0}), Error);
}

TEST_CASE("positive mask") {
    auto rules = AbstractionRuleSet::default_rules();
    SECTION("single instruction gives the 1x1 true mask") {
        std::vector<Instruction> ins = {Instruction::make("flat ground", rules)};
        PositiveMask m = build_positive_mask(ins, 0.3);
        CHECK(m.n == 1);
        CHECK(m.at(0, 0));
    }
    SECTION("thresholding on constructed fixtures") {
        // rows 0 and 1 share most tokens, row 2 shares nothing
        std::vector<Instruction> ins = {
            Instruction::make("flat ground many coins left", rules),
            Instruction::make("flat ground many coins right", rules),
            Instruction::make("spiral walls", rules),
        };
        std::vector<std::vector<float>> embs;
        for (const auto& i : ins) embs.push_back(reference_embed(i.tokens));
        REQUIRE(cosine_similarity(embs[0], embs[1]) > 0.3);
        REQUIRE(cosine_similarity(embs[0], embs[2]) < 0.3);
        REQUIRE(cosine_similarity(embs[1], embs[2]) < 0.3);

        PositiveMask m = build_positive_mask(ins, 0.3);
        CHECK(m.at(0, 1));
        CHECK(m.at(1, 0));
        CHECK_FALSE(m.at(0, 2));
        CHECK_FALSE(m.at(1, 2));
        for (int i = 0; i < 3; ++i) CHECK(m.at(i, i));
    }
    SECTION("delta = 1 yields the identity mask") {
        std::vector<Instruction> ins;
        for (const auto& s : testutil::small_dataset(23).samples)
            ins.push_back(Instruction::make(s.instruction, rules));
        PositiveMask m = build_positive_mask(ins, 1.0);
        for (int i = 0; i < m.n; ++i)
            for (int j = 0; j < m.n; ++j) REQUIRE(m.at(i, j) == (i == j));
    }
    SECTION("symmetry, reflexive diagonal, and monotonicity in delta") {
        std::vector<Instruction> ins;
        for (const auto& s : testutil::small_dataset(13).samples)
            ins.push_back(Instruction::make(s.instruction, rules));
        PositiveMask loose = build_positive_mask(ins, 0.2);
        PositiveMask tight = build_positive_mask(ins, 0.5);
        for (int i = 0; i < loose.n; ++i) {
            REQUIRE(loose.at(i, i));
            for (int j = 0; j < loose.n; ++j) {
                REQUIRE(loose.at(i, j) == loose.at(j, i));
                if (tight.at(i, j)) REQUIRE(loose.at(i, j)); // tighter mask is a subset
            }
        }
    }
    SECTION("batch slicing matches the full matrix") {
        std::vector<Instruction> ins;
        for (const auto& s : testutil::small_dataset(29).samples)
            ins.push_back(Instruction::make(s.instruction, rules));
        PositiveMask m = build_positive_mask(ins, 0.3);
        std::vector<int> idx = {2, 0, 5};
        auto sliced = m.slice(idx);
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j)
                REQUIRE((sliced[static_cast<std::size_t>(i) * 3 + j] != 0) == m.at(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]));
    }
}

TEST_CASE("composite instructions") {
    auto rules = AbstractionRuleSet::default_rules();
    Instruction a = Instruction::make("square floor room with central block cluster and surrounding wall", rules);
    Instruction b = Instruction::make("spiral wall path with bats clustered on right side", rules);

    SECTION("concat is verbatim juxtaposition") {
        Instruction c = compose_instructions(a, b, Provenance::concat, rules);
        CHECK(c.raw ==
              "square floor room with central block cluster and surrounding wall spiral wall path "
              "with bats clustered on right side");
        CHECK(c.provenance == Provenance::concat);
    }
    SECTION("a_base uses the based-on/featuring template") {
        Instruction c = compose_instructions(a, b, Provenance::a_base, rules);
        CHECK(c.raw ==
              "based on square floor room with central block cluster and surrounding wall, "
              "featuring spiral wall path with bats clustered on right side.");
    }
    SECTION("b_base swaps the roles") {
        Instruction c = compose_instructions(a, b, Provenance::b_base, rules);
        CHECK(c.raw ==
              "based on spiral wall path with bats clustered on right side, featuring square floor "
              "room with central block cluster and surrounding wall.");
    }
    SECTION("mix interleaves clauses split on connectives") {
        Instruction x = Instruction::make("flat ground", rules);
        Instruction y = Instruction::make("spiral wall path", rules);
        CHECK(compose_instructions(x, y, Provenance::mix, rules).raw ==
              "flat ground and spiral wall path");

        Instruction c = compose_instructions(a, b, Provenance::mix, rules);
        CHECK(c.raw ==
              "square floor room and spiral wall path and central block cluster and bats clustered "
              "on right side and surrounding wall");
    }
    SECTION("composition requires original provenance") {
        Instruction c = compose_instructions(a, b, Provenance::concat, rules);
        CHECK_THROWS_AS(compose_instructions(c, b, Provenance::mix, rules), Error);
    }
    SECTION("concat length is the sum of the sources plus the separator") {
        Instruction c = compose_instructions(a, b, Provenance::concat, rules);
        CHECK(c.raw.size() == a.raw.size() + b.raw.size() + 1);
    }
}
