#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "levelblend/checkpoint.hpp"
#include "levelblend/dataset.hpp"
#include "levelblend/optim.hpp"
#include "levelblend/tensor.hpp"
#include "levelblend/textops.hpp"

namespace lvb {

constexpr int kEmbedDim = 128;
constexpr int kTextBagDim = 512;

// ---------------------------------------------------------------------------
// frozen text featurizer
// ---------------------------------------------------------------------------

// Hashed token bag at dimension 512, L2-normalized. Tokens of a trailing
// "featuring ..." clause count at half weight so that base/auxiliary emphasis
// in composite instructions survives the bag representation; the marker word
// itself is dropped.
inline std::vector<float> text_bag_features(const std::vector<std::string>& tokens,
                                            int dim = kTextBagDim) {
    std::vector<float> v(static_cast<std::size_t>(dim), 0.0f);
    float weight = 1.0f;
    for (const auto& t : tokens) {
        if (t == "featuring") {
            weight = 0.5f;
            continue;
        }
        v[static_cast<std::size_t>(fnv1a64(t) % static_cast<std::uint64_t>(dim))] += weight;
    }
    double norm = 0.0;
    for (float x : v) norm += static_cast<double>(x) * x;
    norm = std::sqrt(norm);
    if (norm > 0.0)
        for (auto& x : v) x = static_cast<float>(x / norm);
    return v;
}

// ---------------------------------------------------------------------------
// encoders
// ---------------------------------------------------------------------------

// Conv stem plus three residual blocks at channels 32/64/128 with two
// stride-2 stages (16 -> 8 -> 4), global average pooling and a linear
// projection head; outputs unit-norm rows of dimension 128.
struct LevelEncoder {
    int channels = 0;
    num::Tensor stem_w, stem_b;     // 3x3 s2, C -> 32
    num::Tensor res1_w, res1_b;     // 3x3 s1, 32 -> 32
    num::Tensor down_w, down_b;     // 3x3 s2, 32 -> 64
    num::Tensor res2_w, res2_b;     // 3x3 s1, 64 -> 64
    num::Tensor expand_w, expand_b; // 1x1 s1, 64 -> 128
    num::Tensor res3_w, res3_b;     // 3x3 s1, 128 -> 128
    num::Tensor proj_w, proj_b;     // 128 -> 128

    static LevelEncoder init(int channels, Rng rng) {
        using num::Tensor;
        LevelEncoder e;
        e.channels = channels;
        e.stem_w = num::he_uniform({32, channels, 3, 3}, channels * 9, rng);
        e.stem_b = Tensor::zeros({32}, true);
        e.res1_w = num::he_uniform({32, 32, 3, 3}, 32 * 9, rng);
        e.res1_b = Tensor::zeros({32}, true);
        e.down_w = num::he_uniform({64, 32, 3, 3}, 32 * 9, rng);
        e.down_b = Tensor::zeros({64}, true);
        e.res2_w = num::he_uniform({64, 64, 3, 3}, 64 * 9, rng);
        e.res2_b = Tensor::zeros({64}, true);
        e.expand_w = num::he_uniform({128, 64, 1, 1}, 64, rng);
        e.expand_b = Tensor::zeros({128}, true);
        e.res3_w = num::he_uniform({128, 128, 3, 3}, 128 * 9, rng);
        e.res3_b = Tensor::zeros({128}, true);
        e.proj_w = num::he_uniform({kEmbedDim, 128}, 128, rng);
        e.proj_b = Tensor::zeros({kEmbedDim}, true);
        return e;
    }

    // x: [N, C, 16, 16] one-hot
    num::Tensor forward(const num::Tensor& x) const {
        using namespace num;
        if (x.shape().size() != 4 || x.shape()[1] != channels)
            fail("ShapeMismatch", "level encoder expects (N," + std::to_string(channels) + ",16,16)");
        Tensor h = relu(conv2d(x, stem_w, stem_b, 2, 1));
        h = relu(add(h, conv2d(h, res1_w, res1_b, 1, 1)));
        h = relu(conv2d(h, down_w, down_b, 2, 1));
        h = relu(add(h, conv2d(h, res2_w, res2_b, 1, 1)));
        h = relu(conv2d(h, expand_w, expand_b, 1, 0));
        h = relu(add(h, conv2d(h, res3_w, res3_b, 1, 1)));
        Tensor pooled = global_avg_pool(h);
        return l2_normalize_rows(linear(pooled, proj_w, proj_b));
    }

    std::vector<num::Tensor> params() {
        return {stem_w, stem_b, res1_w, res1_b, down_w, down_b, res2_w,
                res2_b, expand_w, expand_b, res3_w, res3_b, proj_w, proj_b};
    }

    void save(Checkpoint& ck, const std::string& prefix) const {
        const char* names[] = {"stem_w", "stem_b", "res1_w", "res1_b", "down_w", "down_b", "expand_w",
                               "expand_b", "res2_w", "res2_b", "res3_w", "res3_b", "proj_w", "proj_b"};
        const num::Tensor* tensors[] = {&stem_w, &stem_b, &res1_w, &res1_b, &down_w, &down_b, &expand_w,
                                        &expand_b, &res2_w, &res2_b, &res3_w, &res3_b, &proj_w, &proj_b};
        for (int i = 0; i < 14; ++i) ck.add_tensor(prefix + names[i], *tensors[i]);
    }

    static LevelEncoder load(const Checkpoint& ck, const std::string& prefix, bool trainable) {
        LevelEncoder e;
        e.stem_w = ck.tensor(prefix + "stem_w", trainable);
        e.stem_b = ck.tensor(prefix + "stem_b", trainable);
        e.res1_w = ck.tensor(prefix + "res1_w", trainable);
        e.res1_b = ck.tensor(prefix + "res1_b", trainable);
        e.down_w = ck.tensor(prefix + "down_w", trainable);
        e.down_b = ck.tensor(prefix + "down_b", trainable);
        e.res2_w = ck.tensor(prefix + "res2_w", trainable);
        e.res2_b = ck.tensor(prefix + "res2_b", trainable);
        e.expand_w = ck.tensor(prefix + "expand_w", trainable);
        e.expand_b = ck.tensor(prefix + "expand_b", trainable);
        e.res3_w = ck.tensor(prefix + "res3_w", trainable);
        e.res3_b = ck.tensor(prefix + "res3_b", trainable);
        e.proj_w = ck.tensor(prefix + "proj_w", trainable);
        e.proj_b = ck.tensor(prefix + "proj_b", trainable);
        e.channels = e.stem_w.shape()[1];
        return e;
    }
};

// Frozen hashed-bag stage plus a trainable linear projection to the shared
// space; outputs unit-norm rows.
struct TextEncoder {
    num::Tensor proj_w, proj_b; // 128 x 512, 128

    static TextEncoder init(Rng rng) {
        TextEncoder e;
        e.proj_w = num::he_uniform({kEmbedDim, kTextBagDim}, kTextBagDim, rng);
        e.proj_b = num::Tensor::zeros({kEmbedDim}, true);
        return e;
    }

    // bags: [N, 512] frozen features
    num::Tensor forward(const num::Tensor& bags) const {
        using namespace num;
        if (bags.shape().size() != 2 || bags.shape()[1] != kTextBagDim)
            fail("ShapeMismatch", "text encoder expects (N,512) bag features");
        return l2_normalize_rows(linear(bags, proj_w, proj_b));
    }

    std::vector<float> embed_tokens(const std::vector<std::string>& tokens) const {
        auto bag = text_bag_features(tokens);
        num::Tensor in = num::Tensor::leaf({1, kTextBagDim}, std::move(bag), false);
        return forward(in).data();
    }

    std::vector<num::Tensor> params() { return {proj_w, proj_b}; }

    void save(Checkpoint& ck, const std::string& prefix) const {
        ck.add_tensor(prefix + "proj_w", proj_w);
        ck.add_tensor(prefix + "proj_b", proj_b);
    }

    static TextEncoder load(const Checkpoint& ck, const std::string& prefix, bool trainable) {
        TextEncoder e;
        e.proj_w = ck.tensor(prefix + "proj_w", trainable);
        e.proj_b = ck.tensor(prefix + "proj_b", trainable);
        return e;
    }
};

// Learnable temperature as log tau; tau is clamped to [0.01, 1.0] after
// every optimizer step.
struct TemperatureParam {
    num::Tensor log_tau;
    static constexpr float kMin = 0.01f;
    static constexpr float kMax = 1.0f;

    static TemperatureParam init(float tau0) {
        TemperatureParam t;
        t.log_tau = num::Tensor::leaf({1}, {std::log(tau0)}, true);
        return t;
    }

    float tau() const { return std::exp(log_tau.data()[0]); }

    void clamp() {
        float& v = log_tau.data()[0];
        v = std::min(std::max(v, std::log(kMin)), std::log(kMax));
    }
};

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

// Symmetric InfoNCE over a logits matrix with diagonal targets: the mean of
// row-wise and column-wise cross-entropies.
inline num::Tensor info_nce_from_logits(const num::Tensor& logits) {
    using namespace num;
    Tensor lt = transpose2d(logits);
    Tensor row_term = mean_all(sub(row_logsumexp(logits), take_diag(logits)));
    Tensor col_term = mean_all(sub(row_logsumexp(lt), take_diag(lt)));
    return scale(add(row_term, col_term), 0.5f);
}

inline num::Tensor single_positive_loss(const num::Tensor& levels, const num::Tensor& texts, float tau) {
    using namespace num;
    if (levels.shape() != texts.shape() || levels.shape().size() != 2)
        fail("ShapeMismatch", "single_positive_loss expects matching (N,d) embeddings");
    Tensor logits = scale(matmul_nt(levels, texts), 1.0f / tau);
    return info_nce_from_logits(logits);
}

// Multi-positive objective: per direction and row, -log of the positive
// softmax mass, averaged over rows, then averaged across the two directions.
// Requires a reflexive mask.
inline num::Tensor meta_loss_from_logits(const num::Tensor& logits,
                                         const std::vector<std::uint8_t>& mask) {
    using namespace num;
    const int n = logits.shape()[0];
    if (logits.shape().size() != 2 || logits.shape()[1] != n)
        fail("ShapeMismatch", "meta loss expects a square logits matrix");
    if (mask.size() != static_cast<std::size_t>(n) * n) fail("ShapeMismatch", "mask size mismatch");
    for (int i = 0; i < n; ++i)
        if (!mask[static_cast<std::size_t>(i) * n + i])
            fail("EmptyPositiveSet", "positive mask must include the diagonal");
    std::vector<std::uint8_t> mask_t(mask.size());
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) mask_t[static_cast<std::size_t>(j) * n + i] = mask[static_cast<std::size_t>(i) * n + j];

    Tensor lt = transpose2d(logits);
    Tensor row_term = mean_all(sub(row_logsumexp(logits), row_logsumexp_masked(logits, mask)));
    Tensor col_term = mean_all(sub(row_logsumexp(lt), row_logsumexp_masked(lt, mask_t)));
    return scale(add(row_term, col_term), 0.5f);
}

inline num::Tensor meta_loss(const num::Tensor& levels, const num::Tensor& texts,
                             const std::vector<std::uint8_t>& mask, float tau) {
    using namespace num;
    if (levels.shape() != texts.shape() || levels.shape().size() != 2)
        fail("ShapeMismatch", "meta_loss expects matching (N,d) embeddings");
    Tensor logits = scale(matmul_nt(levels, texts), 1.0f / tau);
    return meta_loss_from_logits(logits, mask);
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

enum class ClVariant { single_cl, no_abstraction, no_threshold, multiverse };

inline std::string variant_to_string(ClVariant v) {
    switch (v) {
        case ClVariant::single_cl: return "single_cl";
        case ClVariant::no_abstraction: return "no_abstraction";
        case ClVariant::no_threshold: return "no_threshold";
        case ClVariant::multiverse: return "multiverse";
    }
    return "single_cl";
}

inline ClVariant variant_from_string(const std::string& s) {
    if (s == "single_cl") return ClVariant::single_cl;
    if (s == "no_abstraction") return ClVariant::no_abstraction;
    if (s == "no_threshold") return ClVariant::no_threshold;
    if (s == "multiverse") return ClVariant::multiverse;
    fail("ConfigInvalid", "unknown variant '" + s + "'");
}

// Meta-instructions reach the text encoder in the variants that keep the
// abstraction stage.
inline bool variant_uses_abstraction(ClVariant v) {
    return v == ClVariant::no_threshold || v == ClVariant::multiverse;
}

// Similarity-thresholded supervision only in the masked variants.
inline bool variant_uses_threshold(ClVariant v) {
    return v == ClVariant::no_abstraction || v == ClVariant::multiverse;
}

struct ContrastiveConfig {
    ClVariant variant = ClVariant::multiverse;
    double delta = 0.3;
    float tau_init = 0.14f;
    double lr = 5e-5;
    int batch = 64;
    int epochs = 500;
    std::uint64_t seed = 0;
    std::string curve_csv; // optional path for the per-epoch training curve
};

struct ContrastiveModel {
    LevelEncoder level_enc;
    TextEncoder text_enc;
    TemperatureParam temperature;
    ClVariant variant = ClVariant::multiverse;
    double delta = 0.3;
    int channels = 0;
    std::string vocab_json;
    std::string rules_version;

    // Tokens an instruction contributes to the text encoder under this
    // model's variant.
    std::vector<std::string> encoder_tokens(const std::string& raw,
                                            const AbstractionRuleSet& rules) const {
        if (variant_uses_abstraction(variant)) return tokenize(abstract_instruction(raw, rules));
        return tokenize(raw);
    }

    std::vector<float> embed_instruction(const std::string& raw, const AbstractionRuleSet& rules) const {
        return text_enc.embed_tokens(encoder_tokens(raw, rules));
    }

    Checkpoint to_checkpoint() const {
        Checkpoint ck;
        ck.set_meta("format", "contrastive.v1");
        ck.set_meta("variant", variant_to_string(variant));
        ck.set_meta("delta", std::to_string(delta));
        ck.set_meta("channels", std::to_string(channels));
        ck.set_meta("embed_dim", std::to_string(kEmbedDim));
        ck.set_meta("rules_version", rules_version);
        ck.set_meta("vocab", vocab_json);
        level_enc.save(ck, "level.");
        text_enc.save(ck, "text.");
        ck.add_tensor("temperature.log_tau", temperature.log_tau);
        return ck;
    }

    static ContrastiveModel from_checkpoint(const Checkpoint& ck, bool trainable = false) {
        if (ck.meta("format") != "contrastive.v1")
            fail("CheckpointIncompatible", "expected a contrastive checkpoint");
        ContrastiveModel m;
        m.variant = variant_from_string(ck.meta("variant"));
        m.delta = std::stod(ck.meta("delta"));
        m.channels = std::stoi(ck.meta("channels"));
        m.vocab_json = ck.meta("vocab");
        m.rules_version = ck.meta("rules_version");
        m.level_enc = LevelEncoder::load(ck, "level.", trainable);
        m.text_enc = TextEncoder::load(ck, "text.", trainable);
        m.temperature.log_tau = ck.tensor("temperature.log_tau", trainable);
        return m;
    }
};

struct EpochStat {
    int epoch = 0;
    double loss = 0.0;
    float tau = 0.0f;
};

struct ContrastiveResult {
    ContrastiveModel model;
    std::vector<EpochStat> curve;
};

namespace detail {

inline void write_curve_csv(const std::vector<EpochStat>& curve, const std::string& path) {
    if (path.empty()) return;
    std::ofstream out(path);
    if (!out) fail("IoError", "cannot open '" + path + "' for writing");
    out << "epoch,loss,tau\n";
    char buf[96];
    for (const auto& s : curve) {
        std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g\n", s.epoch, s.loss, static_cast<double>(s.tau));
        out << buf;
    }
}

} // namespace detail

// Trains the dual encoder on the train split. The positive mask is computed
// once over the whole split (instructions are static) and sliced per batch.
inline ContrastiveResult train_contrastive(const Dataset& ds, const AbstractionRuleSet& rules,
                                           const ContrastiveConfig& cfg) {
    using namespace num;
    if (cfg.batch < 1 || cfg.epochs < 0) fail("ConfigInvalid", "bad batch/epoch configuration");
    auto train_idx = ds.split_indices(Split::train);
    const int n_train = static_cast<int>(train_idx.size());
    if (n_train < 1) fail("ConfigInvalid", "dataset has no train split");
    const int C = ds.vocab.size();

    Rng rng(cfg.seed);
    ContrastiveModel model;
    model.variant = cfg.variant;
    model.delta = cfg.delta;
    model.channels = C;
    model.vocab_json = vocab_to_json(ds.vocab);
    model.rules_version = rules.version();
    model.level_enc = LevelEncoder::init(C, rng.child("level_encoder"));
    model.text_enc = TextEncoder::init(rng.child("text_encoder"));
    model.temperature = TemperatureParam::init(cfg.tau_init);

    // frozen per-sample inputs
    const std::size_t plane = static_cast<std::size_t>(kLevelSize) * kLevelSize;
    std::vector<std::vector<float>> level_inputs(static_cast<std::size_t>(n_train));
    std::vector<std::vector<float>> text_bags(static_cast<std::size_t>(n_train));
    std::vector<Instruction> instructions;
    instructions.reserve(static_cast<std::size_t>(n_train));
    for (int i = 0; i < n_train; ++i) {
        const auto& s = ds.samples[static_cast<std::size_t>(train_idx[static_cast<std::size_t>(i)])];
        level_inputs[static_cast<std::size_t>(i)] = one_hot_encode_chw(s.grid, C);
        instructions.push_back(Instruction::make(s.instruction, rules));
        const auto& ins = instructions.back();
        text_bags[static_cast<std::size_t>(i)] = text_bag_features(
            variant_uses_abstraction(cfg.variant) ? ins.tokens : tokenize(ins.raw));
    }

    PositiveMask mask = variant_uses_threshold(cfg.variant)
                            ? build_positive_mask(instructions, cfg.delta,
                                                  /*use_abstracted=*/cfg.variant == ClVariant::multiverse)
                            : PositiveMask::identity(n_train);

    Adam opt(cfg.lr);
    for (auto& p : model.level_enc.params()) opt.add_param(p);
    for (auto& p : model.text_enc.params()) opt.add_param(p);
    opt.add_param(model.temperature.log_tau);

    std::vector<int> order(static_cast<std::size_t>(n_train));
    for (int i = 0; i < n_train; ++i) order[static_cast<std::size_t>(i)] = i;
    Rng shuffle_rng = rng.child("batch_order");

    ContrastiveResult result;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double epoch_loss = 0.0;
        int steps = 0;
        for (int start = 0; start < n_train; start += cfg.batch) {
            const int b = std::min(cfg.batch, n_train - start);
            std::vector<int> batch_idx(order.begin() + start, order.begin() + start + b);

            std::vector<float> xbuf(static_cast<std::size_t>(b) * C * plane);
            std::vector<float> tbuf(static_cast<std::size_t>(b) * kTextBagDim);
            for (int i = 0; i < b; ++i) {
                const auto& lv = level_inputs[static_cast<std::size_t>(batch_idx[static_cast<std::size_t>(i)])];
                std::copy(lv.begin(), lv.end(), xbuf.begin() + static_cast<std::size_t>(i) * C * plane);
                const auto& bg = text_bags[static_cast<std::size_t>(batch_idx[static_cast<std::size_t>(i)])];
                std::copy(bg.begin(), bg.end(), tbuf.begin() + static_cast<std::size_t>(i) * kTextBagDim);
            }
            Tensor x = Tensor::leaf({b, C, kLevelSize, kLevelSize}, std::move(xbuf), false);
            Tensor bags = Tensor::leaf({b, kTextBagDim}, std::move(tbuf), false);

            Tensor v = model.level_enc.forward(x);
            Tensor t = model.text_enc.forward(bags);
            Tensor tau_node = num::exp(model.temperature.log_tau);
            Tensor logits = div_by_scalar(matmul_nt(v, t), tau_node);
            Tensor loss = meta_loss_from_logits(logits, mask.slice(batch_idx));

            if (!std::isfinite(loss.item()))
                fail("NonFiniteLoss", "contrastive loss diverged at epoch " + std::to_string(epoch));
            backward(loss);
            opt.step();
            model.temperature.clamp();
            epoch_loss += loss.item();
            ++steps;
        }
        result.curve.push_back({epoch, epoch_loss / std::max(1, steps), model.temperature.tau()});
    }

    lvb::detail::write_curve_csv(result.curve, cfg.curve_csv);
    result.model = std::move(model);
    return result;
}

// Embeds a set of samples with a trained model; rows are unit-norm.
inline std::vector<std::vector<float>> embed_levels(const ContrastiveModel& model, const Dataset& ds,
                                                    const std::vector<int>& indices, int batch = 64) {
    using namespace num;
    const int C = ds.vocab.size();
    const std::size_t plane = static_cast<std::size_t>(kLevelSize) * kLevelSize;
    std::vector<std::vector<float>> out;
    out.reserve(indices.size());
    for (std::size_t start = 0; start < indices.size(); start += static_cast<std::size_t>(batch)) {
        const int b = static_cast<int>(std::min(static_cast<std::size_t>(batch), indices.size() - start));
        std::vector<float> xbuf(static_cast<std::size_t>(b) * C * plane);
        for (int i = 0; i < b; ++i) {
            auto enc = one_hot_encode_chw(ds.samples[static_cast<std::size_t>(indices[start + static_cast<std::size_t>(i)])].grid, C);
            std::copy(enc.begin(), enc.end(), xbuf.begin() + static_cast<std::size_t>(i) * C * plane);
        }
        Tensor x = Tensor::leaf({b, C, kLevelSize, kLevelSize}, std::move(xbuf), false);
        Tensor v = model.level_enc.forward(x);
        for (int i = 0; i < b; ++i)
            out.emplace_back(v.data().begin() + static_cast<std::size_t>(i) * kEmbedDim,
                             v.data().begin() + static_cast<std::size_t>(i + 1) * kEmbedDim);
    }
    return out;
}

inline std::vector<std::vector<float>> embed_texts(const ContrastiveModel& model, const Dataset& ds,
                                                   const std::vector<int>& indices,
                                                   const AbstractionRuleSet& rules) {
    std::vector<std::vector<float>> out;
    out.reserve(indices.size());
    for (int idx : indices)
        out.push_back(model.embed_instruction(ds.samples[static_cast<std::size_t>(idx)].instruction, rules));
    return out;
}

// Fraction of instructions whose nearest level embedding is their own level.
inline double retrieval_top1(const std::vector<std::vector<float>>& levels,
                             const std::vector<std::vector<float>>& texts) {
    if (levels.size() != texts.size() || levels.empty())
        fail("DimensionMismatch", "retrieval_top1 expects matching non-empty sets");
    int hits = 0;
    for (std::size_t i = 0; i < texts.size(); ++i) {
        double best = -2.0;
        std::size_t best_j = 0;
        for (std::size_t j = 0; j < levels.size(); ++j) {
            double s = cosine_similarity(texts[i], levels[j]);
            if (s > best) {
                best = s;
                best_j = j;
            }
        }
        if (best_j == i) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(texts.size());
}

} // namespace lvb
