#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "levelblend/checkpoint.hpp"
#include "levelblend/contrastive.hpp"
#include "levelblend/dataset.hpp"
#include "levelblend/optim.hpp"
#include "levelblend/tensor.hpp"

namespace lvb {

constexpr int kLatentDim = 128; // D
constexpr int kLatentGrid = 4;  // 4x4 spatial latent
constexpr int kCodebookSize = 256;
constexpr int kCondDim = 32; // width of g(t)

// ---------------------------------------------------------------------------
// codebook
// ---------------------------------------------------------------------------

// K x D code vectors refreshed from exponential moving averages of encoder
// assignments; no gradients reach the codes.
struct Codebook {
    int K = kCodebookSize;
    int D = kLatentDim;
    double gamma = 0.99;
    double eps = 1e-5;
    std::vector<float> codes;       // K*D
    std::vector<double> ema_counts; // K
    std::vector<double> ema_sums;   // K*D

    static Codebook zeros(int K, int D, double gamma = 0.99, double eps = 1e-5) {
        Codebook cb;
        cb.K = K;
        cb.D = D;
        cb.gamma = gamma;
        cb.eps = eps;
        cb.codes.assign(static_cast<std::size_t>(K) * D, 0.0f);
        cb.ema_counts.assign(static_cast<std::size_t>(K), 1.0);
        cb.ema_sums.assign(static_cast<std::size_t>(K) * D, 0.0);
        return cb;
    }

    const float* code(int k) const { return codes.data() + static_cast<std::size_t>(k) * D; }

    void set_code(int k, const float* v) {
        for (int d = 0; d < D; ++d) codes[static_cast<std::size_t>(k) * D + d] = v[d];
        for (int d = 0; d < D; ++d) ema_sums[static_cast<std::size_t>(k) * D + d] = v[d];
        ema_counts[static_cast<std::size_t>(k)] = 1.0;
    }
};

// Nearest code for one D-vector; squared Euclidean distance, ties to the
// lowest index.
inline int nearest_code(const Codebook& cb, const float* v) {
    int best = 0;
    float best_dist = 0.0f;
    for (int k = 0; k < cb.K; ++k) {
        const float* c = cb.code(k);
        float dist = 0.0f;
        for (int d = 0; d < cb.D; ++d) {
            float diff = v[d] - c[d];
            dist += diff * diff;
        }
        if (k == 0 || dist < best_dist) {
            best_dist = dist;
            best = k;
        }
    }
    return best;
}

struct QuantizeResult {
    std::vector<float> z_q;     // same layout as the input batch [N,D,4,4]
    std::vector<int> assignments; // N*16 code indices
};

// z_e: [N, D, 4, 4] values; each spatial column vector maps to its nearest
// code.
inline QuantizeResult quantize(const std::vector<float>& z_e, int n_batch, const Codebook& cb) {
    const int spatial = kLatentGrid * kLatentGrid;
    QuantizeResult out;
    out.z_q.assign(z_e.size(), 0.0f);
    out.assignments.assign(static_cast<std::size_t>(n_batch) * spatial, 0);
    std::vector<float> v(static_cast<std::size_t>(cb.D));
    const std::size_t sample_stride = static_cast<std::size_t>(cb.D) * spatial;
    for (int i = 0; i < n_batch; ++i) {
        const float* base = z_e.data() + static_cast<std::size_t>(i) * sample_stride;
        float* qbase = out.z_q.data() + static_cast<std::size_t>(i) * sample_stride;
        for (int p = 0; p < spatial; ++p) {
            for (int d = 0; d < cb.D; ++d) v[static_cast<std::size_t>(d)] = base[static_cast<std::size_t>(d) * spatial + p];
            int k = nearest_code(cb, v.data());
            out.assignments[static_cast<std::size_t>(i) * spatial + p] = k;
            const float* c = cb.code(k);
            for (int d = 0; d < cb.D; ++d) qbase[static_cast<std::size_t>(d) * spatial + p] = c[d];
        }
    }
    return out;
}

// EMA refresh from one batch of assignments. Counts and sums decay by gamma;
// codes with assignments this batch are rebuilt from the Laplace-smoothed
// ratio, unassigned codes keep their vector.
inline void ema_update(Codebook& cb, const std::vector<float>& z_e, int n_batch,
                       const std::vector<int>& assignments) {
    const int spatial = kLatentGrid * kLatentGrid;
    std::vector<double> batch_counts(static_cast<std::size_t>(cb.K), 0.0);
    std::vector<double> batch_sums(static_cast<std::size_t>(cb.K) * cb.D, 0.0);
    const std::size_t sample_stride = static_cast<std::size_t>(cb.D) * spatial;
    for (int i = 0; i < n_batch; ++i) {
        const float* base = z_e.data() + static_cast<std::size_t>(i) * sample_stride;
        for (int p = 0; p < spatial; ++p) {
            int k = assignments[static_cast<std::size_t>(i) * spatial + p];
            batch_counts[static_cast<std::size_t>(k)] += 1.0;
            double* sums = batch_sums.data() + static_cast<std::size_t>(k) * cb.D;
            for (int d = 0; d < cb.D; ++d) sums[d] += base[static_cast<std::size_t>(d) * spatial + p];
        }
    }
    for (int k = 0; k < cb.K; ++k) {
        cb.ema_counts[static_cast<std::size_t>(k)] =
            cb.gamma * cb.ema_counts[static_cast<std::size_t>(k)] + (1.0 - cb.gamma) * batch_counts[static_cast<std::size_t>(k)];
        double* sums = cb.ema_sums.data() + static_cast<std::size_t>(k) * cb.D;
        const double* bsums = batch_sums.data() + static_cast<std::size_t>(k) * cb.D;
        for (int d = 0; d < cb.D; ++d) sums[d] = cb.gamma * sums[d] + (1.0 - cb.gamma) * bsums[d];
    }
    double total = 0.0;
    for (double c : cb.ema_counts) total += c;
    for (int k = 0; k < cb.K; ++k) {
        if (batch_counts[static_cast<std::size_t>(k)] <= 0.0) continue;
        double smoothed = (cb.ema_counts[static_cast<std::size_t>(k)] + cb.eps) /
                          (total + static_cast<double>(cb.K) * cb.eps) * total;
        const double* sums = cb.ema_sums.data() + static_cast<std::size_t>(k) * cb.D;
        float* code = cb.codes.data() + static_cast<std::size_t>(k) * cb.D;
        for (int d = 0; d < cb.D; ++d) code[d] = static_cast<float>(sums[d] / smoothed);
    }
}

// exp(entropy) of the assignment histogram; 1 means full collapse, K means
// uniform usage.
inline double codebook_perplexity(const std::vector<int>& assignments, int K) {
    if (assignments.empty()) return 1.0;
    std::vector<double> counts(static_cast<std::size_t>(K), 0.0);
    for (int a : assignments) counts[static_cast<std::size_t>(a)] += 1.0;
    double total = static_cast<double>(assignments.size());
    double entropy = 0.0;
    for (double c : counts)
        if (c > 0.0) {
            double p = c / total;
            entropy -= p * std::log(p);
        }
    return std::exp(entropy);
}

// ---------------------------------------------------------------------------
// commitment weight schedule
// ---------------------------------------------------------------------------

// Effective weight = max(beta * coef(step), beta_min) with coef decaying
// linearly from coef_start to coef_min between decay_start and decay_end.
struct BetaSchedule {
    float beta = 0.5f;
    float beta_min = 0.3f;
    float coef_start = 1.0f;
    float coef_min = 0.6f;
    long decay_start_step = 100;
    long decay_end_step = 1100;

    float coef(long step) const {
        if (step <= decay_start_step) return coef_start;
        if (step >= decay_end_step) return coef_min;
        double t = static_cast<double>(step - decay_start_step) /
                   static_cast<double>(decay_end_step - decay_start_step);
        return static_cast<float>(coef_start + (coef_min - coef_start) * t);
    }

    float effective(long step) const { return std::max(beta * coef(step), beta_min); }
};

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

// Two stride-2 conv stages encode 16x16 one-hot levels to a D x 4 x 4 latent
// grid; the decoder mirrors them with transposed convs after channel-wise
// concatenation of the projected conditioning vector.
struct GeneratorModel {
    int channels = 0;
    num::Tensor enc1_w, enc1_b; // 4x4 s2, C -> 64
    num::Tensor enc2_w, enc2_b; // 4x4 s2, 64 -> D
    num::Tensor cond_w, cond_b; // g(.): 128 -> 32
    num::Tensor dec0_w, dec0_b; // 1x1 s1, D+32 -> 128
    num::Tensor dec1_w, dec1_b; // tconv 4x4 s2, 128 -> 64
    num::Tensor dec2_w, dec2_b; // tconv 4x4 s2, 64 -> C
    Codebook codebook;
    std::string vocab_json;

    // generation-time latent index (instruction embedding -> train latent)
    std::vector<float> index_embeddings; // Nt * 128
    std::vector<int> index_codes;        // Nt * 16
    std::vector<std::string> index_domains;

    static GeneratorModel init(int channels, Rng rng, int K = kCodebookSize) {
        using num::Tensor;
        GeneratorModel m;
        m.channels = channels;
        m.enc1_w = num::he_uniform({64, channels, 4, 4}, channels * 16, rng);
        m.enc1_b = Tensor::zeros({64}, true);
        m.enc2_w = num::he_uniform({kLatentDim, 64, 4, 4}, 64 * 16, rng);
        m.enc2_b = Tensor::zeros({kLatentDim}, true);
        m.cond_w = num::he_uniform({kCondDim, kEmbedDim}, kEmbedDim, rng);
        m.cond_b = Tensor::zeros({kCondDim}, true);
        m.dec0_w = num::he_uniform({128, kLatentDim + kCondDim, 1, 1}, kLatentDim + kCondDim, rng);
        m.dec0_b = Tensor::zeros({128}, true);
        m.dec1_w = num::he_uniform({128, 64, 4, 4}, 128 * 16, rng);
        m.dec1_b = Tensor::zeros({64}, true);
        m.dec2_w = num::he_uniform({64, channels, 4, 4}, 64 * 16, rng);
        m.dec2_b = Tensor::zeros({channels}, true);
        m.codebook = Codebook::zeros(K, kLatentDim);
        return m;
    }

    // x: [N, C, 16, 16] -> z_e [N, D, 4, 4]
    num::Tensor encode(const num::Tensor& x) const {
        using namespace num;
        if (x.shape().size() != 4 || x.shape()[1] != channels || x.shape()[2] != kLevelSize ||
            x.shape()[3] != kLevelSize)
            fail("ShapeMismatch", "generator encoder expects (N," + std::to_string(channels) + ",16,16)");
        Tensor h = relu(conv2d(x, enc1_w, enc1_b, 2, 1));
        return conv2d(h, enc2_w, enc2_b, 2, 1);
    }

    // cond: [N, 128] unit embeddings -> [N, 32, 4, 4] broadcast planes
    num::Tensor project_condition(const num::Tensor& cond) const {
        using namespace num;
        Tensor g = linear(cond, cond_w, cond_b); // [N, 32]
        const int n = g.shape()[0];
        const int spatial = kLatentGrid * kLatentGrid;
        auto node = num::detail::make_op({n, kCondDim, kLatentGrid, kLatentGrid}, {g.node()});
        for (int i = 0; i < n; ++i)
            for (int c = 0; c < kCondDim; ++c) {
                float v = g.data()[static_cast<std::size_t>(i) * kCondDim + c];
                float* dst = node->value.data() + (static_cast<std::size_t>(i) * kCondDim + c) * spatial;
                for (int p = 0; p < spatial; ++p) dst[p] = v;
            }
        if (node->requires_grad)
            node->backprop = [n, spatial](num::Node& self) {
                auto& p = self.parents[0];
                if (!p->requires_grad) return;
                auto& grad = num::detail::grad_of(p);
                for (int i = 0; i < n; ++i)
                    for (int c = 0; c < kCondDim; ++c) {
                        const float* src = self.grad.data() + (static_cast<std::size_t>(i) * kCondDim + c) * spatial;
                        double acc = 0.0;
                        for (int q = 0; q < spatial; ++q) acc += src[q];
                        grad[static_cast<std::size_t>(i) * kCondDim + c] += static_cast<float>(acc);
                    }
            };
        return num::Tensor(node);
    }

    // z_cond: [N, D+32, 4, 4] -> logits [N, C, 16, 16]
    num::Tensor decode(const num::Tensor& z_cond) const {
        using namespace num;
        if (z_cond.shape().size() != 4 || z_cond.shape()[1] != kLatentDim + kCondDim)
            fail("ShapeMismatch", "decoder expects (N," + std::to_string(kLatentDim + kCondDim) + ",4,4)");
        Tensor h = relu(conv2d(z_cond, dec0_w, dec0_b, 1, 0));
        h = relu(transposed_conv2d(h, dec1_w, dec1_b, 2, 1));
        return transposed_conv2d(h, dec2_w, dec2_b, 2, 1);
    }

    std::vector<num::Tensor> params() {
        return {enc1_w, enc1_b, enc2_w, enc2_b, cond_w, cond_b,
                dec0_w, dec0_b, dec1_w, dec1_b, dec2_w, dec2_b};
    }

    Checkpoint to_checkpoint() const {
        Checkpoint ck;
        ck.set_meta("format", "generator.v1");
        ck.set_meta("channels", std::to_string(channels));
        ck.set_meta("latent_dim", std::to_string(kLatentDim));
        ck.set_meta("codebook_size", std::to_string(codebook.K));
        ck.set_meta("vocab", vocab_json);
        const char* names[] = {"enc1_w", "enc1_b", "enc2_w", "enc2_b", "cond_w", "cond_b",
                               "dec0_w", "dec0_b", "dec1_w", "dec1_b", "dec2_w", "dec2_b"};
        const num::Tensor* tensors[] = {&enc1_w, &enc1_b, &enc2_w, &enc2_b, &cond_w, &cond_b,
                                        &dec0_w, &dec0_b, &dec1_w, &dec1_b, &dec2_w, &dec2_b};
        for (int i = 0; i < 12; ++i) ck.add_tensor(std::string("gen.") + names[i], *tensors[i]);
        ck.add_tensor("codebook.codes", {codebook.K, codebook.D}, codebook.codes);
        std::vector<float> counts(codebook.ema_counts.begin(), codebook.ema_counts.end());
        ck.add_tensor("codebook.ema_counts", {codebook.K}, counts);
        std::vector<float> sums(codebook.ema_sums.begin(), codebook.ema_sums.end());
        ck.add_tensor("codebook.ema_sums", {codebook.K, codebook.D}, sums);
        if (!index_embeddings.empty()) {
            const int nt = static_cast<int>(index_embeddings.size()) / kEmbedDim;
            ck.add_tensor("latent_index.embeddings", {nt, kEmbedDim}, index_embeddings);
            std::vector<float> codes(index_codes.begin(), index_codes.end());
            ck.add_tensor("latent_index.codes", {nt, kLatentGrid * kLatentGrid}, codes);
            std::string domains;
            for (const auto& d : index_domains) domains += d + ";";
            ck.set_meta("latent_index.domains", domains);
        }
        return ck;
    }

    static GeneratorModel from_checkpoint(const Checkpoint& ck, bool trainable = false) {
        if (ck.meta("format") != "generator.v1")
            fail("CheckpointIncompatible", "expected a generator checkpoint");
        GeneratorModel m;
        m.channels = std::stoi(ck.meta("channels"));
        if (std::stoi(ck.meta("latent_dim")) != kLatentDim)
            fail("CheckpointIncompatible", "latent dimension mismatch");
        m.vocab_json = ck.meta("vocab");
        m.enc1_w = ck.tensor("gen.enc1_w", trainable);
        m.enc1_b = ck.tensor("gen.enc1_b", trainable);
        m.enc2_w = ck.tensor("gen.enc2_w", trainable);
        m.enc2_b = ck.tensor("gen.enc2_b", trainable);
        m.cond_w = ck.tensor("gen.cond_w", trainable);
        m.cond_b = ck.tensor("gen.cond_b", trainable);
        m.dec0_w = ck.tensor("gen.dec0_w", trainable);
        m.dec0_b = ck.tensor("gen.dec0_b", trainable);
        m.dec1_w = ck.tensor("gen.dec1_w", trainable);
        m.dec1_b = ck.tensor("gen.dec1_b", trainable);
        m.dec2_w = ck.tensor("gen.dec2_w", trainable);
        m.dec2_b = ck.tensor("gen.dec2_b", trainable);
        m.codebook = Codebook::zeros(std::stoi(ck.meta("codebook_size")), kLatentDim);
        m.codebook.codes = ck.tensor_data("codebook.codes");
        const auto& counts = ck.tensor_data("codebook.ema_counts");
        m.codebook.ema_counts.assign(counts.begin(), counts.end());
        const auto& sums = ck.tensor_data("codebook.ema_sums");
        m.codebook.ema_sums.assign(sums.begin(), sums.end());
        if (ck.has_tensor("latent_index.embeddings")) {
            m.index_embeddings = ck.tensor_data("latent_index.embeddings");
            const auto& codes = ck.tensor_data("latent_index.codes");
            m.index_codes.assign(codes.size(), 0);
            for (std::size_t i = 0; i < codes.size(); ++i) m.index_codes[i] = static_cast<int>(codes[i]);
            std::string domains = ck.meta("latent_index.domains");
            std::size_t pos = 0;
            while (pos < domains.size()) {
                std::size_t semi = domains.find(';', pos);
                if (semi == std::string::npos) break;
                m.index_domains.push_back(domains.substr(pos, semi - pos));
                pos = semi + 1;
            }
        }
        return m;
    }
};

// Eq.-style objective: mean BCE over all logits plus the scheduled
// commitment weight times the mean squared gap between z_e and the
// stop-gradded z_q. The codebook sees no gradient.
inline num::Tensor generator_loss(const num::Tensor& logits, const std::vector<float>& target_onehot,
                                  const num::Tensor& z_e, const std::vector<float>& z_q,
                                  const BetaSchedule& schedule, long step) {
    using namespace num;
    Tensor recon = bce_with_logits_mean(logits, target_onehot);
    Tensor commit = mse_against_const(z_e, z_q);
    Tensor loss = add(recon, scale(commit, schedule.effective(step)));
    if (!std::isfinite(loss.item())) fail("NonFiniteLoss", "generator loss is not finite");
    return loss;
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

struct GeneratorConfig {
    double lr = 4e-4;
    int batch = 64;
    int epochs = 500;
    std::uint64_t seed = 0;
    BetaSchedule schedule;
    int codebook_size = kCodebookSize;
    std::string curve_csv;
};

struct GeneratorEpochStat {
    int epoch = 0;
    double loss = 0.0;
    double perplexity = 0.0;
    double tile_accuracy = 0.0;
};

struct GeneratorResult {
    GeneratorModel model;
    std::vector<GeneratorEpochStat> curve;
};

namespace detail {

inline void write_gen_curve_csv(const std::vector<GeneratorEpochStat>& curve, const std::string& path) {
    if (path.empty()) return;
    std::ofstream out(path);
    if (!out) fail("IoError", "cannot open '" + path + "' for writing");
    out << "epoch,loss,perplexity,tile_accuracy\n";
    char buf[128];
    for (const auto& s : curve) {
        std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,%.9g\n", s.epoch, s.loss, s.perplexity, s.tile_accuracy);
        out << buf;
    }
}

} // namespace detail

// Trains the conditional EMA-VQ-VAE on the train split, conditioning on
// frozen text embeddings from the contrastive model. The codebook starts
// from random draws of the initial encoder's latents over one data pass.
inline GeneratorResult train_generator(const Dataset& ds, const ContrastiveModel& text_model,
                                       const AbstractionRuleSet& rules, const GeneratorConfig& cfg) {
    using namespace num;
    auto train_idx = ds.split_indices(Split::train);
    const int n_train = static_cast<int>(train_idx.size());
    if (n_train < 1) fail("ConfigInvalid", "dataset has no train split");
    const int C = ds.vocab.size();
    if (text_model.channels != C)
        fail("CheckpointIncompatible", "contrastive checkpoint was built for a different vocabulary");

    Rng rng(cfg.seed);
    GeneratorModel model = GeneratorModel::init(C, rng.child("generator"), cfg.codebook_size);
    model.vocab_json = vocab_to_json(ds.vocab);

    const std::size_t plane = static_cast<std::size_t>(kLevelSize) * kLevelSize;
    const int spatial = kLatentGrid * kLatentGrid;

    // frozen inputs and conditioning embeddings
    std::vector<std::vector<float>> level_chw(static_cast<std::size_t>(n_train));
    std::vector<std::vector<float>> cond_embs(static_cast<std::size_t>(n_train));
    for (int i = 0; i < n_train; ++i) {
        const auto& s = ds.samples[static_cast<std::size_t>(train_idx[static_cast<std::size_t>(i)])];
        level_chw[static_cast<std::size_t>(i)] = one_hot_encode_chw(s.grid, C);
        cond_embs[static_cast<std::size_t>(i)] = text_model.embed_instruction(s.instruction, rules);
    }

    // codebook init: random draws from the initial encoder's latents
    {
        std::vector<std::vector<float>> pool;
        for (int start = 0; start < n_train; start += cfg.batch) {
            const int b = std::min(cfg.batch, n_train - start);
            std::vector<float> xbuf(static_cast<std::size_t>(b) * C * plane);
            for (int i = 0; i < b; ++i)
                std::copy(level_chw[static_cast<std::size_t>(start + i)].begin(),
                          level_chw[static_cast<std::size_t>(start + i)].end(),
                          xbuf.begin() + static_cast<std::size_t>(i) * C * plane);
            Tensor x = Tensor::leaf({b, C, kLevelSize, kLevelSize}, std::move(xbuf), false);
            Tensor z = model.encode(x);
            for (int i = 0; i < b; ++i)
                for (int p = 0; p < spatial; ++p) {
                    std::vector<float> v(static_cast<std::size_t>(kLatentDim));
                    for (int d = 0; d < kLatentDim; ++d)
                        v[static_cast<std::size_t>(d)] =
                            z.data()[(static_cast<std::size_t>(i) * kLatentDim + d) * spatial + p];
                    pool.push_back(std::move(v));
                }
        }
        Rng init_rng = rng.child("codebook_init");
        for (int k = 0; k < model.codebook.K; ++k)
            model.codebook.set_code(k, pool[init_rng.index(pool.size())].data());
    }

    Adam opt(cfg.lr);
    for (auto& p : model.params()) opt.add_param(p);

    std::vector<int> order(static_cast<std::size_t>(n_train));
    for (int i = 0; i < n_train; ++i) order[static_cast<std::size_t>(i)] = i;
    Rng shuffle_rng = rng.child("batch_order");

    GeneratorResult result;
    long step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double epoch_loss = 0.0;
        long correct = 0, total = 0;
        std::vector<int> epoch_assignments;
        int steps = 0;
        for (int start = 0; start < n_train; start += cfg.batch) {
            const int b = std::min(cfg.batch, n_train - start);
            std::vector<float> xbuf(static_cast<std::size_t>(b) * C * plane);
            std::vector<float> target(static_cast<std::size_t>(b) * plane * C);
            std::vector<float> cbuf(static_cast<std::size_t>(b) * kEmbedDim);
            for (int i = 0; i < b; ++i) {
                int idx = order[static_cast<std::size_t>(start + i)];
                std::copy(level_chw[static_cast<std::size_t>(idx)].begin(), level_chw[static_cast<std::size_t>(idx)].end(),
                          xbuf.begin() + static_cast<std::size_t>(i) * C * plane);
                std::copy(cond_embs[static_cast<std::size_t>(idx)].begin(), cond_embs[static_cast<std::size_t>(idx)].end(),
                          cbuf.begin() + static_cast<std::size_t>(i) * kEmbedDim);
            }
            Tensor x = Tensor::leaf({b, C, kLevelSize, kLevelSize}, std::move(xbuf), false);
            Tensor cond = Tensor::leaf({b, kEmbedDim}, std::move(cbuf), false);

            Tensor z_e = model.encode(x);
            QuantizeResult q = quantize(z_e.data(), b, model.codebook);

            // straight-through: decoder input carries z_q values, gradients
            // flow into z_e unchanged
            std::vector<float> delta(q.z_q.size());
            for (std::size_t i = 0; i < delta.size(); ++i) delta[i] = q.z_q[i] - z_e.data()[i];
            Tensor z_in = add(z_e, Tensor::leaf(z_e.shape(), std::move(delta), false));

            Tensor z_cond = concat_channels(z_in, model.project_condition(cond));
            Tensor logits = model.decode(z_cond);

            // targets in the logits layout [N,C,16,16]
            for (int i = 0; i < b; ++i) {
                int idx = order[static_cast<std::size_t>(start + i)];
                std::copy(level_chw[static_cast<std::size_t>(idx)].begin(), level_chw[static_cast<std::size_t>(idx)].end(),
                          target.begin() + static_cast<std::size_t>(i) * C * plane);
            }

            Tensor loss = generator_loss(logits, target, z_e, q.z_q, cfg.schedule, step);
            backward(loss);
            opt.step();
            ema_update(model.codebook, z_e.data(), b, q.assignments);

            // tile accuracy of this batch's reconstructions
            for (int i = 0; i < b; ++i) {
                int idx = order[static_cast<std::size_t>(start + i)];
                const auto& s = ds.samples[static_cast<std::size_t>(train_idx[static_cast<std::size_t>(idx)])];
                const float* lg = logits.data().data() + static_cast<std::size_t>(i) * C * plane;
                for (int p = 0; p < static_cast<int>(plane); ++p) {
                    int best = 0;
                    for (int c = 1; c < C; ++c)
                        if (lg[static_cast<std::size_t>(c) * plane + p] > lg[static_cast<std::size_t>(best) * plane + p]) best = c;
                    if (best == s.grid.tiles[static_cast<std::size_t>(p)]) ++correct;
                    ++total;
                }
            }
            epoch_assignments.insert(epoch_assignments.end(), q.assignments.begin(), q.assignments.end());
            epoch_loss += loss.item();
            ++steps;
            ++step;
        }
        result.curve.push_back({epoch, epoch_loss / std::max(1, steps),
                                codebook_perplexity(epoch_assignments, model.codebook.K),
                                total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0});
    }

    // latent index for nearest-train-latent generation
    for (int start = 0; start < n_train; start += cfg.batch) {
        const int b = std::min(cfg.batch, n_train - start);
        std::vector<float> xbuf(static_cast<std::size_t>(b) * C * plane);
        for (int i = 0; i < b; ++i)
            std::copy(level_chw[static_cast<std::size_t>(start + i)].begin(), level_chw[static_cast<std::size_t>(start + i)].end(),
                      xbuf.begin() + static_cast<std::size_t>(i) * C * plane);
        Tensor x = Tensor::leaf({b, C, kLevelSize, kLevelSize}, std::move(xbuf), false);
        Tensor z = model.encode(x);
        QuantizeResult q = quantize(z.data(), b, model.codebook);
        for (int i = 0; i < b; ++i) {
            const auto& emb = cond_embs[static_cast<std::size_t>(start + i)];
            model.index_embeddings.insert(model.index_embeddings.end(), emb.begin(), emb.end());
            model.index_codes.insert(model.index_codes.end(), q.assignments.begin() + static_cast<std::size_t>(i) * spatial,
                                     q.assignments.begin() + static_cast<std::size_t>(i + 1) * spatial);
            model.index_domains.push_back(
                ds.samples[static_cast<std::size_t>(train_idx[static_cast<std::size_t>(start + i)])].grid.domain);
        }
    }

    lvb::detail::write_gen_curve_csv(result.curve, cfg.curve_csv);
    result.model = std::move(model);
    return result;
}

// ---------------------------------------------------------------------------
// generation
// ---------------------------------------------------------------------------

enum class LatentSampler { encode_reference, nearest_train_latent };

inline LatentSampler sampler_from_string(const std::string& s) {
    if (s == "encode_reference") return LatentSampler::encode_reference;
    if (s == "nearest_train_latent") return LatentSampler::nearest_train_latent;
    fail("ConfigInvalid", "unknown sampler '" + s + "'");
}

namespace detail {

inline LevelGrid decode_to_grid(const GeneratorModel& model, const std::vector<float>& z_q,
                                const std::vector<float>& embedding, const std::string& domain) {
    using namespace num;
    Tensor zq = Tensor::leaf({1, kLatentDim, kLatentGrid, kLatentGrid}, z_q, false);
    Tensor cond = Tensor::leaf({1, kEmbedDim}, embedding, false);
    Tensor z_cond = concat_channels(zq, model.project_condition(cond));
    Tensor logits = model.decode(z_cond);

    const int C = model.channels;
    const std::size_t plane = static_cast<std::size_t>(kLevelSize) * kLevelSize;
    LevelGrid g;
    g.height = kLevelSize;
    g.width = kLevelSize;
    g.domain = domain;
    g.source_id = "generated";
    g.tiles.resize(plane);
    for (std::size_t p = 0; p < plane; ++p) {
        int best = 0;
        for (int c = 1; c < C; ++c)
            if (logits.data()[static_cast<std::size_t>(c) * plane + p] >
                logits.data()[static_cast<std::size_t>(best) * plane + p])
                best = c;
        g.tiles[p] = best;
    }
    return g;
}

inline std::vector<float> zq_from_codes(const GeneratorModel& model, const int* codes) {
    const int spatial = kLatentGrid * kLatentGrid;
    std::vector<float> z_q(static_cast<std::size_t>(kLatentDim) * spatial);
    for (int p = 0; p < spatial; ++p) {
        const float* c = model.codebook.code(codes[p]);
        for (int d = 0; d < kLatentDim; ++d) z_q[static_cast<std::size_t>(d) * spatial + p] = c[d];
    }
    return z_q;
}

} // namespace detail

// Generates a level from a unit instruction embedding. encode_reference runs
// the encoder on a provided reference level (reconstruction-style);
// nearest_train_latent reuses the quantized latent of the training sample
// whose instruction embedding is closest to the conditioning.
inline LevelGrid generate_level(const GeneratorModel& model, const std::vector<float>& embedding,
                                LatentSampler sampler, const LevelGrid* reference = nullptr) {
    if (embedding.size() != kEmbedDim) fail("DimensionMismatch", "conditioning embedding must be 128-d");
    if (sampler == LatentSampler::encode_reference) {
        if (!reference) fail("ConfigInvalid", "encode_reference sampler needs a reference level");
        using namespace num;
        Tensor x = Tensor::leaf({1, model.channels, kLevelSize, kLevelSize},
                                one_hot_encode_chw(*reference, model.channels), false);
        Tensor z_e = model.encode(x);
        QuantizeResult q = quantize(z_e.data(), 1, model.codebook);
        return lvb::detail::decode_to_grid(model, q.z_q, embedding, reference->domain);
    }
    if (model.index_embeddings.empty()) fail("EmptyLatentIndex", "checkpoint carries no latent index");
    const int nt = static_cast<int>(model.index_embeddings.size()) / kEmbedDim;
    int best = 0;
    double best_sim = -2.0;
    for (int i = 0; i < nt; ++i) {
        double dot = 0.0;
        const float* e = model.index_embeddings.data() + static_cast<std::size_t>(i) * kEmbedDim;
        for (int d = 0; d < kEmbedDim; ++d) dot += static_cast<double>(e[d]) * embedding[static_cast<std::size_t>(d)];
        if (dot > best_sim) {
            best_sim = dot;
            best = i;
        }
    }
    auto z_q = lvb::detail::zq_from_codes(model, model.index_codes.data() + static_cast<std::size_t>(best) * kLatentGrid * kLatentGrid);
    std::string domain = best < static_cast<int>(model.index_domains.size())
                             ? model.index_domains[static_cast<std::size_t>(best)]
                             : std::string();
    return lvb::detail::decode_to_grid(model, z_q, embedding, domain);
}

} // namespace lvb
