#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "levelblend/generator.hpp"
#include "helpers.hpp"

using namespace lvb;
using num::Tensor;

namespace {

// independent nearest-code scan for the quantization oracle
int oracle_nearest(const Codebook& cb, const float* v) {
    int best = -1;
    float best_d = 0.0f;
    for (int k = 0; k < cb.K; ++k) {
        float d = 0.0f;
        for (int j = 0; j < cb.D; ++j) {
            float diff = v[j] - cb.codes[static_cast<std::size_t>(k) * cb.D + j];
            d += diff * diff;
        }
        if (best < 0 || d < best_d) {
            best_d = d;
            best = k;
        }
    }
    return best;
}

ContrastiveModel quick_text_model(const Dataset& ds, int epochs = 2) {
    ContrastiveConfig cfg;
    cfg.variant = ClVariant::multiverse;
    cfg.epochs = epochs;
    cfg.batch = 64;
    cfg.seed = 1;
    return train_contrastive(ds, AbstractionRuleSet::default_rules(), cfg).model;
}

} // namespace

TEST_CASE("quantize") {
    SECTION("nearest by inspection") {
        Codebook cb = Codebook::zeros(2, 2);
        const float c0[] = {0.0f, 0.0f};
        const float c1[] = {1.0f, 1.0f};
        cb.set_code(0, c0);
        cb.set_code(1, c1);
        const float v[] = {0.2f, 0.1f};
        CHECK(nearest_code(cb, v) == 0);
    }
    SECTION("exact ties go to the lower index") {
        Codebook cb = Codebook::zeros(3, 1);
        const float a = -1.0f, b = 1.0f, c = 1.0f;
        cb.set_code(0, &a);
        cb.set_code(1, &b);
        cb.set_code(2, &c);
        const float mid = 0.0f; // equidistant from codes 0 and 1
        CHECK(nearest_code(cb, &mid) == 0);
        const float right = 1.0f; // codes 1 and 2 coincide
        CHECK(nearest_code(cb, &right) == 1);
    }
    SECTION("matches the brute-force scan on random batches") {
        Rng rng(17);
        Codebook cb = Codebook::zeros(16, 8);
        std::vector<float> code(8);
        for (int k = 0; k < 16; ++k) {
            for (auto& x : code) x = rng.uniform(-1.0f, 1.0f);
            cb.set_code(k, code.data());
        }
        std::vector<float> v(8);
        for (int trial = 0; trial < 100; ++trial) {
            for (auto& x : v) x = rng.uniform(-1.5f, 1.5f);
            REQUIRE(nearest_code(cb, v.data()) == oracle_nearest(cb, v.data()));
        }
    }
    SECTION("quantization is idempotent") {
        Rng rng(19);
        Codebook cb = Codebook::zeros(kCodebookSize, kLatentDim);
        std::vector<float> code(kLatentDim);
        for (int k = 0; k < cb.K; ++k) {
            for (auto& x : code) x = rng.uniform(-1.0f, 1.0f);
            cb.set_code(k, code.data());
        }
        std::vector<float> z(static_cast<std::size_t>(kLatentDim) * 16);
        for (auto& x : z) x = rng.uniform(-1.0f, 1.0f);
        QuantizeResult q1 = quantize(z, 1, cb);
        QuantizeResult q2 = quantize(q1.z_q, 1, cb);
        CHECK(q2.z_q == q1.z_q);
        CHECK(q2.assignments == q1.assignments);
    }
}

TEST_CASE("ema updates") {
    SECTION("count update by hand: gamma 0.99, prior 10, batch 2") {
        Codebook cb = Codebook::zeros(2, kLatentDim);
        cb.ema_counts[0] = 10.0;
        std::vector<float> z(static_cast<std::size_t>(kLatentDim) * 16, 0.0f);
        std::vector<int> assign(16, 1);
        assign[3] = 0;
        assign[7] = 0; // two vectors for code 0
        ema_update(cb, z, 1, assign);
        CHECK(cb.ema_counts[0] == Catch::Approx(0.99 * 10.0 + 0.01 * 2.0).margin(1e-12));
        CHECK(cb.ema_counts[0] == Catch::Approx(9.92).margin(1e-9));
    }
    SECTION("repeated identical assignments converge to the vector") {
        Codebook cb = Codebook::zeros(4, kLatentDim);
        Rng rng(23);
        std::vector<float> code(kLatentDim);
        for (int k = 0; k < 4; ++k) {
            for (auto& x : code) x = rng.uniform(-1.0f, 1.0f);
            cb.set_code(k, code.data());
        }
        std::vector<float> u(kLatentDim);
        for (auto& x : u) x = rng.uniform(-1.0f, 1.0f);
        std::vector<float> z(static_cast<std::size_t>(kLatentDim) * 16);
        const int spatial = 16;
        for (int d = 0; d < kLatentDim; ++d)
            for (int p = 0; p < spatial; ++p) z[static_cast<std::size_t>(d) * spatial + p] = u[static_cast<std::size_t>(d)];
        std::vector<int> assign(16, 2);
        int steps = 0;
        for (; steps < 2000; ++steps) {
            ema_update(cb, z, 1, assign);
            double err = 0.0;
            for (int d = 0; d < kLatentDim; ++d)
                err = std::max(err, std::abs(static_cast<double>(cb.code(2)[d]) - u[static_cast<std::size_t>(d)]));
            if (err < 1e-3) break;
        }
        CHECK(steps < 2000);
    }
    SECTION("a code with no assignments keeps its vector") {
        Codebook cb = Codebook::zeros(3, kLatentDim);
        Rng rng(29);
        std::vector<float> code(kLatentDim);
        for (int k = 0; k < 3; ++k) {
            for (auto& x : code) x = rng.uniform(-1.0f, 1.0f);
            cb.set_code(k, code.data());
        }
        std::vector<float> before(cb.code(2), cb.code(2) + kLatentDim);
        std::vector<float> z(static_cast<std::size_t>(kLatentDim) * 16, 0.5f);
        std::vector<int> assign(16, 0);
        ema_update(cb, z, 1, assign);
        std::vector<float> after(cb.code(2), cb.code(2) + kLatentDim);
        CHECK(after == before);
    }
    SECTION("total count is conserved under the decay rule") {
        Codebook cb = Codebook::zeros(8, kLatentDim);
        Rng rng(31);
        std::vector<float> z(static_cast<std::size_t>(kLatentDim) * 16 * 3);
        for (auto& x : z) x = rng.uniform(-1.0f, 1.0f);
        double before = 0.0;
        for (double c : cb.ema_counts) before += c;
        std::vector<int> assign(48);
        for (auto& a : assign) a = static_cast<int>(rng.index(8));
        ema_update(cb, z, 3, assign);
        double after = 0.0;
        for (double c : cb.ema_counts) after += c;
        CHECK(after == Catch::Approx(cb.gamma * before + (1.0 - cb.gamma) * 48.0).margin(1e-9));
    }
}

TEST_CASE("codebook perplexity range") {
    std::vector<int> uniform;
    for (int i = 0; i < 64; ++i) uniform.push_back(i % 8);
    CHECK(codebook_perplexity(uniform, 8) == Catch::Approx(8.0).margin(1e-9));
    std::vector<int> collapsed(64, 3);
    CHECK(codebook_perplexity(collapsed, 8) == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("commitment weight schedule") {
    BetaSchedule s;
    SECTION("boundary values from the reference constants") {
        CHECK(s.effective(0) == Catch::Approx(0.5).margin(1e-7));
        CHECK(s.effective(100) == Catch::Approx(0.5).margin(1e-7));
        CHECK(s.effective(1100) == Catch::Approx(0.3).margin(1e-7));
        CHECK(s.effective(5000) == Catch::Approx(0.3).margin(1e-7));
    }
    SECTION("non-increasing and never below the floor") {
        float prev = s.effective(0);
        for (long step = 0; step <= 2000; ++step) {
            float cur = s.effective(step);
            REQUIRE(cur <= prev + 1e-7f);
            REQUIRE(cur >= s.beta_min - 1e-7f);
            prev = cur;
        }
    }
}

TEST_CASE("generator loss") {
    SECTION("perfect logits with matching latents vanish") {
        std::vector<float> target = {1.0f, 0.0f, 0.0f, 1.0f};
        Tensor logits = Tensor::leaf({2, 2}, {30.0f, -30.0f, -30.0f, 30.0f}, true);
        Tensor z_e = Tensor::leaf({4}, {0.5f, 0.5f, 0.5f, 0.5f}, true);
        std::vector<float> z_q = {0.5f, 0.5f, 0.5f, 0.5f};
        BetaSchedule s;
        CHECK(generator_loss(logits, target, z_e, z_q, s, 0).item() ==
              Catch::Approx(0.0).margin(1e-6));
    }
    SECTION("commitment term by hand: z_e=(1,0), z_q=(0,0), beta=0.5") {
        std::vector<float> target = {1.0f};
        Tensor logits = Tensor::leaf({1}, {30.0f}, true);
        Tensor z_e = Tensor::leaf({2}, {1.0f, 0.0f}, true);
        std::vector<float> z_q = {0.0f, 0.0f};
        BetaSchedule s;
        // mean squared gap = (1 + 0) / 2 = 0.5, weighted by 0.5
        CHECK(generator_loss(logits, target, z_e, z_q, s, 0).item() ==
              Catch::Approx(0.25).margin(1e-6));
    }
}

TEST_CASE("encoder and decoder shapes") {
    const Dataset& ds = testutil::fixture_dataset();
    const int C = ds.vocab.size();
    Rng rng(37);
    GeneratorModel m = GeneratorModel::init(C, rng);

    Tensor x = Tensor::leaf({2, C, 16, 16},
                            [&] {
                                auto a = one_hot_encode_chw(ds.samples[0].grid, C);
                                auto b = one_hot_encode_chw(ds.samples[1].grid, C);
                                a.insert(a.end(), b.begin(), b.end());
                                return a;
                            }(),
                            false);
    Tensor z = m.encode(x);
    REQUIRE(z.shape() == num::Shape{2, 128, 4, 4});

    SECTION("deterministic") { CHECK(m.encode(x).data() == z.data()); }
    SECTION("distinct levels give distinct latents at init") {
        std::vector<float> za(z.data().begin(), z.data().begin() + 128 * 16);
        std::vector<float> zb(z.data().begin() + 128 * 16, z.data().end());
        CHECK(za != zb);
    }
    SECTION("decode upsamples to level logits and argmax is always a valid grid") {
        Rng r2(41);
        Tensor z_cond = testutil::random_tensor({2, kLatentDim + kCondDim, 4, 4}, r2, false);
        Tensor logits = m.decode(z_cond);
        REQUIRE(logits.shape() == num::Shape{2, C, 16, 16});
        const std::size_t plane = 256;
        for (std::size_t p = 0; p < plane; ++p) {
            int best = 0;
            for (int c = 1; c < C; ++c)
                if (logits.data()[static_cast<std::size_t>(c) * plane + p] >
                    logits.data()[static_cast<std::size_t>(best) * plane + p])
                    best = c;
            REQUIRE(best >= 0);
            REQUIRE(best < C);
        }
    }
}

TEST_CASE("straight-through estimator paths pass finite differences") {
    // tiny vocabulary keeps the parameter count small; gradients are checked
    // through every layer via the bias vectors
    const int C = 3;
    Rng rng(43);
    GeneratorModel m = GeneratorModel::init(C, rng);
    Codebook& cb = m.codebook;
    std::vector<float> code(kLatentDim);
    for (int k = 0; k < cb.K; ++k) {
        for (auto& x : code) x = rng.uniform(-0.5f, 0.5f);
        cb.set_code(k, code.data());
    }

    LevelGrid g;
    g.height = 16;
    g.width = 16;
    g.domain = "x";
    g.source_id = "x";
    for (int i = 0; i < 256; ++i) g.tiles.push_back(static_cast<int>(rng.index(C)));
    std::vector<float> x_onehot = one_hot_encode_chw(g, C);
    std::vector<float> cond(kEmbedDim);
    for (auto& v : cond) v = rng.uniform(-1.0f, 1.0f);

    // freeze the quantization at the base point: the estimator differentiates
    // around fixed z_q and a fixed straight-through offset
    Tensor x = Tensor::leaf({1, C, 16, 16}, x_onehot, false);
    Tensor base_ze = m.encode(x);
    QuantizeResult q = quantize(base_ze.data(), 1, cb);
    std::vector<float> st_offset(q.z_q.size());
    for (std::size_t i = 0; i < st_offset.size(); ++i) st_offset[i] = q.z_q[i] - base_ze.data()[i];

    BetaSchedule schedule;
    auto f = [&](const std::vector<Tensor>&) {
        Tensor z_e = m.encode(x);
        Tensor z_in = num::add(z_e, Tensor::leaf(z_e.shape(), st_offset, false));
        Tensor cond_t = Tensor::leaf({1, kEmbedDim}, cond, false);
        Tensor z_cond = num::concat_channels(z_in, m.project_condition(cond_t));
        Tensor logits = m.decode(z_cond);
        return generator_loss(logits, x_onehot, z_e, q.z_q, schedule, 0);
    };
    std::vector<Tensor> leaves = {m.enc1_b, m.enc2_b, m.cond_b, m.dec0_b, m.dec1_b, m.dec2_b};
    CHECK(num::grad_check(f, leaves) < 1e-3);
}

TEST_CASE("generator training on the fixture subset") {
    Dataset ds = testutil::small_dataset(6);
    ContrastiveModel text_model = quick_text_model(ds);
    auto rules = AbstractionRuleSet::default_rules();

    GeneratorConfig cfg;
    cfg.epochs = 25;
    cfg.batch = 64;
    cfg.seed = 0;
    GeneratorResult res = train_generator(ds, text_model, rules, cfg);

    SECTION("loss decreases, accuracy improves, perplexity stays in range") {
        REQUIRE(res.curve.size() == 25);
        CHECK(res.curve.back().loss < res.curve.front().loss);
        CHECK(res.curve.back().tile_accuracy > res.curve.front().tile_accuracy);
        for (const auto& s : res.curve) {
            CHECK(s.perplexity >= 1.0);
            CHECK(s.perplexity <= cfg.codebook_size);
        }
    }
    SECTION("same seed replays to the identical final loss") {
        GeneratorResult res2 = train_generator(ds, text_model, rules, cfg);
        CHECK(res2.curve.back().loss == res.curve.back().loss);
    }
    SECTION("checkpoint round-trip preserves generation") {
        auto path = (std::filesystem::temp_directory_path() / "lvb_gen_test.mvckpt").string();
        res.model.to_checkpoint().save(path);
        GeneratorModel back = GeneratorModel::from_checkpoint(Checkpoint::load(path));
        auto emb = text_model.embed_instruction(ds.samples[0].instruction, rules);
        LevelGrid a = generate_level(res.model, emb, LatentSampler::nearest_train_latent);
        LevelGrid b = generate_level(back, emb, LatentSampler::nearest_train_latent);
        CHECK(a.same_tiles(b));
        std::filesystem::remove(path);
    }
    SECTION("generation is deterministic and always yields a valid grid") {
        auto emb = text_model.embed_instruction("flat ground with two coins left", rules);
        LevelGrid a = generate_level(res.model, emb, LatentSampler::nearest_train_latent);
        LevelGrid b = generate_level(res.model, emb, LatentSampler::nearest_train_latent);
        CHECK(a.same_tiles(b));
        for (int t : a.tiles) {
            REQUIRE(t >= 0);
            REQUIRE(t < ds.vocab.size());
        }
    }
    SECTION("a zero conditioning embedding still decodes to a valid grid") {
        std::vector<float> zero(kEmbedDim, 0.0f);
        LevelGrid g = generate_level(res.model, zero, LatentSampler::nearest_train_latent);
        for (int t : g.tiles) {
            REQUIRE(t >= 0);
            REQUIRE(t < ds.vocab.size());
        }
    }
    SECTION("encode_reference reconstructs around the reference level") {
        const auto& sample = ds.samples[static_cast<std::size_t>(ds.split_indices(Split::train)[0])];
        auto emb = text_model.embed_instruction(sample.instruction, rules);
        LevelGrid g = generate_level(res.model, emb, LatentSampler::encode_reference, &sample.grid);
        CHECK(g.height == 16);
        CHECK(g.width == 16);
    }
    SECTION("missing latent index is reported") {
        GeneratorModel empty = GeneratorModel::init(ds.vocab.size(), Rng(5));
        std::vector<float> emb(kEmbedDim, 0.0f);
        emb[0] = 1.0f;
        try {
            generate_level(empty, emb, LatentSampler::nearest_train_latent);
            FAIL("expected EmptyLatentIndex");
        } catch (const Error& e) {
            CHECK(e.code() == "EmptyLatentIndex");
        }
    }
}
