#pragma once

// Subcommand implementations behind the `levelblend` binary. Kept callable
// in-process so the test suite can drive the same code paths.

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "levelblend/experiments.hpp"

namespace lvb::cli {

namespace fs = std::filesystem;

inline int find_sample(const Dataset& ds, const std::string& source_id) {
    for (int i = 0; i < static_cast<int>(ds.samples.size()); ++i)
        if (ds.samples[static_cast<std::size_t>(i)].grid.source_id == source_id) return i;
    fail("ConfigInvalid", "no sample with source id '" + source_id + "'");
}

// Generator checkpoints additionally carry the text projection and variant
// so `generate` can embed raw instructions from a single file.
inline void save_generator_checkpoint(const GeneratorModel& gen, const ContrastiveModel& text_model,
                                      const std::string& path) {
    Checkpoint ck = gen.to_checkpoint();
    text_model.text_enc.save(ck, "text.");
    ck.set_meta("text_variant", variant_to_string(text_model.variant));
    ck.set_meta("rules_version", text_model.rules_version);
    ck.save(path);
}

struct GeneratorBundle {
    GeneratorModel gen;
    TextEncoder text_enc;
    ClVariant variant = ClVariant::multiverse;

    std::vector<float> embed_instruction(const std::string& raw, const AbstractionRuleSet& rules) const {
        auto tokens = variant_uses_abstraction(variant) ? tokenize(abstract_instruction(raw, rules))
                                                        : tokenize(raw);
        return text_enc.embed_tokens(tokens);
    }
};

inline GeneratorBundle load_generator_bundle(const std::string& path) {
    Checkpoint ck = Checkpoint::load(path);
    GeneratorBundle b;
    b.gen = GeneratorModel::from_checkpoint(ck);
    b.text_enc = TextEncoder::load(ck, "text.", false);
    b.variant = variant_from_string(ck.meta("text_variant"));
    return b;
}

inline void write_level_outputs(const LevelGrid& g, const TileVocabulary& vocab,
                                const std::string& txt_path, const std::string& ppm_path) {
    if (!txt_path.empty()) {
        std::ofstream out(txt_path);
        if (!out) fail("IoError", "cannot open '" + txt_path + "' for writing");
        out << serialize_level_global(g, vocab);
    }
    if (!ppm_path.empty()) render_to_ppm(g, vocab, ppm_path);
}

// ---------------------------------------------------------------------------

inline int run_cli(std::vector<std::string> args) {
    CLI::App app{"language-conditioned multi-game level generation and blending"};
    app.require_subcommand(1);

    std::uint64_t seed = 0;
    std::string out_dir = ".";
    app.add_option("--seed", seed, "global random seed")->capture_default_str();
    app.add_option("--out-dir", out_dir, "output directory")->capture_default_str();

    // --- ingest ---
    auto* ingest = app.add_subcommand("ingest", "parse levels into a 16x16 dataset cache");
    std::string in_levels, in_annotations, in_out = "cache.jsonl";
    std::vector<std::string> in_legends;
    double in_fraction = 0.2;
    ingest->add_option("--levels", in_levels, "directory with <game>/<level>.txt files")->required();
    ingest->add_option("--legend", in_legends, "legend file (repeat per game)")->required();
    ingest->add_option("--annotations", in_annotations, "tab-separated source_id/instruction file");
    ingest->add_option("--out", in_out, "cache path")->capture_default_str();
    ingest->add_option("--test-fraction", in_fraction, "held-out fraction")->capture_default_str();

    // --- annotate-stub ---
    auto* annotate = app.add_subcommand("annotate-stub", "fill instructions from tile statistics");
    std::string an_cache, an_out, an_emit;
    annotate->add_option("--cache", an_cache, "dataset cache")->required();
    annotate->add_option("--out", an_out, "output cache (default: in place)");
    annotate->add_option("--emit-annotations", an_emit, "also write a source_id/instruction file");

    // --- train-contrastive ---
    auto* trainc = app.add_subcommand("train-contrastive", "train the dual-encoder representation");
    std::string tc_cache, tc_variant = "multiverse", tc_out = "contrastive.mvckpt", tc_curve, tc_rules;
    double tc_delta = 0.3, tc_lr = 5e-5;
    float tc_tau = 0.14f;
    int tc_epochs = 500, tc_batch = 64;
    trainc->add_option("--cache", tc_cache)->required();
    trainc->add_option("--variant", tc_variant, "single_cl|no_abstraction|no_threshold|multiverse")
        ->capture_default_str();
    trainc->add_option("--delta", tc_delta, "similarity threshold")->capture_default_str();
    trainc->add_option("--tau-init", tc_tau)->capture_default_str();
    trainc->add_option("--lr", tc_lr)->capture_default_str();
    trainc->add_option("--epochs", tc_epochs)->capture_default_str();
    trainc->add_option("--batch", tc_batch)->capture_default_str();
    trainc->add_option("--out", tc_out)->capture_default_str();
    trainc->add_option("--curve", tc_curve, "training-curve CSV path");
    trainc->add_option("--rules", tc_rules, "abstraction rule file (default: shipped table)");

    // --- train-generator ---
    auto* traing = app.add_subcommand("train-generator", "train the conditional quantized generator");
    std::string tg_cache, tg_contrastive, tg_out = "generator.mvckpt", tg_curve, tg_rules;
    double tg_lr = 4e-4;
    int tg_epochs = 500, tg_batch = 64, tg_codebook = kCodebookSize;
    traing->add_option("--cache", tg_cache)->required();
    traing->add_option("--contrastive", tg_contrastive, "contrastive checkpoint")->required();
    traing->add_option("--lr", tg_lr)->capture_default_str();
    traing->add_option("--epochs", tg_epochs)->capture_default_str();
    traing->add_option("--batch", tg_batch)->capture_default_str();
    traing->add_option("--codebook", tg_codebook)->capture_default_str();
    traing->add_option("--out", tg_out)->capture_default_str();
    traing->add_option("--curve", tg_curve, "training-curve CSV path");
    traing->add_option("--rules", tg_rules);

    // --- generate ---
    auto* generate = app.add_subcommand("generate", "generate a level from an instruction");
    std::string ge_gen, ge_instruction, ge_sampler = "nearest_train_latent", ge_out, ge_ppm, ge_cache,
                ge_reference, ge_rules;
    generate->add_option("--gen", ge_gen, "generator checkpoint")->required();
    generate->add_option("--instruction", ge_instruction)->required();
    generate->add_option("--sampler", ge_sampler, "encode_reference|nearest_train_latent")
        ->capture_default_str();
    generate->add_option("--out", ge_out, "level text output");
    generate->add_option("--png", ge_ppm, "raster output (binary PPM)");
    generate->add_option("--cache", ge_cache, "dataset cache (for --reference)");
    generate->add_option("--reference", ge_reference, "source id for encode_reference");
    generate->add_option("--rules", ge_rules);

    // --- blend ---
    auto* blend = app.add_subcommand("blend", "generate from an interpolated embedding");
    std::string bl_gen, bl_cache, bl_a, bl_b, bl_out, bl_ppm, bl_mode = "text_embedding", bl_contrastive,
                bl_rules;
    double bl_alpha = 0.5;
    blend->add_option("--gen", bl_gen)->required();
    blend->add_option("--cache", bl_cache)->required();
    blend->add_option("--a", bl_a, "source id of side A")->required();
    blend->add_option("--b", bl_b, "source id of side B")->required();
    blend->add_option("--alpha", bl_alpha)->capture_default_str();
    blend->add_option("--mode", bl_mode, "text_embedding|level_embedding")->capture_default_str();
    blend->add_option("--contrastive", bl_contrastive, "needed for level_embedding mode");
    blend->add_option("--out", bl_out);
    blend->add_option("--png", bl_ppm);
    blend->add_option("--rules", bl_rules);

    // --- evaluate ---
    auto* evaluate = app.add_subcommand("evaluate", "interpolation sweep over blending pairs");
    std::string ev_gen, ev_cache, ev_sweep, ev_rules;
    int ev_pairs = 24;
    evaluate->add_option("--gen", ev_gen)->required();
    evaluate->add_option("--cache", ev_cache)->required();
    evaluate->add_option("--sweep", ev_sweep, "pairs CSV (header pair,a,b); sampled when absent");
    evaluate->add_option("--pairs", ev_pairs, "number of sampled pairs")->capture_default_str();
    evaluate->add_option("--rules", ev_rules);

    // --- compose ---
    auto* compose = app.add_subcommand("compose", "compose a multi-game instruction");
    std::string co_cache, co_a, co_b, co_strategy = "concat", co_rules;
    compose->add_option("--cache", co_cache)->required();
    compose->add_option("--a", co_a)->required();
    compose->add_option("--b", co_b)->required();
    compose->add_option("--strategy", co_strategy, "concat|mix|a_base|b_base")->capture_default_str();
    compose->add_option("--rules", co_rules);

    // --- ablate ---
    auto* ablate = app.add_subcommand("ablate", "run the configured experiment suite");
    std::string ab_config;
    ablate->add_option("--config", ab_config, "flat key=value config file")->required();

    // --- project ---
    auto* project = app.add_subcommand("project", "2D projection of the shared embedding space");
    std::string pr_contrastive, pr_cache, pr_out = "projection.csv", pr_split = "test", pr_rules;
    project->add_option("--contrastive", pr_contrastive)->required();
    project->add_option("--cache", pr_cache)->required();
    project->add_option("--out", pr_out)->capture_default_str();
    project->add_option("--split", pr_split, "train|test|all")->capture_default_str();
    project->add_option("--rules", pr_rules);

    // --- report ---
    auto* report = app.add_subcommand("report", "concatenate run CSVs into a markdown summary");
    std::string re_out = "report.md";
    report->add_option("--out", re_out)->capture_default_str();

    for (CLI::App* sub : app.get_subcommands([](const CLI::App*) { return true; })) sub->fallthrough();

    std::reverse(args.begin(), args.end());
    try {
        app.parse(args);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    auto load_rules = [](const std::string& path) {
        return path.empty() ? AbstractionRuleSet::default_rules() : AbstractionRuleSet::load(path);
    };
    fs::create_directories(out_dir);
    auto in_out_dir = [&](const std::string& p) {
        return fs::path(p).is_absolute() || out_dir == "." ? p : (fs::path(out_dir) / p).string();
    };

    if (*ingest) {
        Dataset ds = ingest_corpus(in_levels, in_legends, in_annotations, in_fraction, seed);
        save_cache(ds, in_out_dir(in_out));
        std::cout << "wrote " << ds.samples.size() << " samples to " << in_out_dir(in_out) << "\n";
        return 0;
    }
    if (*annotate) {
        Dataset ds = load_cache(an_cache);
        annotate_dataset(ds);
        save_cache(ds, an_out.empty() ? an_cache : in_out_dir(an_out));
        if (!an_emit.empty()) {
            std::vector<std::pair<std::string, std::string>> rows;
            for (const auto& s : ds.samples) rows.emplace_back(s.grid.source_id, s.instruction);
            save_annotations(rows, in_out_dir(an_emit));
        }
        std::cout << "annotated " << ds.samples.size() << " samples\n";
        return 0;
    }
    if (*trainc) {
        Dataset ds = load_cache(tc_cache);
        AbstractionRuleSet rules = load_rules(tc_rules);
        ContrastiveConfig cfg;
        cfg.variant = variant_from_string(tc_variant);
        cfg.delta = tc_delta;
        cfg.tau_init = tc_tau;
        cfg.lr = tc_lr;
        cfg.epochs = tc_epochs;
        cfg.batch = tc_batch;
        cfg.seed = seed;
        cfg.curve_csv = tc_curve.empty() ? "" : in_out_dir(tc_curve);
        ContrastiveResult res = train_contrastive(ds, rules, cfg);
        res.model.to_checkpoint().save(in_out_dir(tc_out));
        std::cout << "final loss " << (res.curve.empty() ? 0.0 : res.curve.back().loss) << ", tau "
                  << res.model.temperature.tau() << "\n";
        return 0;
    }
    if (*traing) {
        Dataset ds = load_cache(tg_cache);
        AbstractionRuleSet rules = load_rules(tg_rules);
        ContrastiveModel text_model = ContrastiveModel::from_checkpoint(Checkpoint::load(tg_contrastive));
        GeneratorConfig cfg;
        cfg.lr = tg_lr;
        cfg.epochs = tg_epochs;
        cfg.batch = tg_batch;
        cfg.codebook_size = tg_codebook;
        cfg.seed = seed;
        cfg.curve_csv = tg_curve.empty() ? "" : in_out_dir(tg_curve);
        GeneratorResult res = train_generator(ds, text_model, rules, cfg);
        save_generator_checkpoint(res.model, text_model, in_out_dir(tg_out));
        if (!res.curve.empty())
            std::cout << "final loss " << res.curve.back().loss << ", tile accuracy "
                      << res.curve.back().tile_accuracy << ", perplexity " << res.curve.back().perplexity
                      << "\n";
        return 0;
    }
    if (*generate) {
        GeneratorBundle bundle = load_generator_bundle(ge_gen);
        AbstractionRuleSet rules = load_rules(ge_rules);
        TileVocabulary vocab = vocab_from_json(bundle.gen.vocab_json);
        auto emb = bundle.embed_instruction(ge_instruction, rules);
        LevelGrid g;
        if (sampler_from_string(ge_sampler) == LatentSampler::encode_reference) {
            if (ge_cache.empty() || ge_reference.empty())
                fail("ConfigInvalid", "encode_reference needs --cache and --reference");
            Dataset ds = load_cache(ge_cache);
            const LevelGrid& ref = ds.samples[static_cast<std::size_t>(find_sample(ds, ge_reference))].grid;
            g = generate_level(bundle.gen, emb, LatentSampler::encode_reference, &ref);
        } else {
            g = generate_level(bundle.gen, emb, LatentSampler::nearest_train_latent);
        }
        write_level_outputs(g, vocab, ge_out.empty() ? "" : in_out_dir(ge_out),
                            ge_ppm.empty() ? "" : in_out_dir(ge_ppm));
        std::cout << serialize_level_global(g, vocab);
        return 0;
    }
    if (*blend) {
        GeneratorBundle bundle = load_generator_bundle(bl_gen);
        AbstractionRuleSet rules = load_rules(bl_rules);
        Dataset ds = load_cache(bl_cache);
        TileVocabulary vocab = vocab_from_json(bundle.gen.vocab_json);
        int ia = find_sample(ds, bl_a), ib = find_sample(ds, bl_b);
        std::vector<float> ea, eb;
        if (bl_mode == "level_embedding") {
            if (bl_contrastive.empty()) fail("ConfigInvalid", "level_embedding mode needs --contrastive");
            ContrastiveModel cm = ContrastiveModel::from_checkpoint(Checkpoint::load(bl_contrastive));
            auto embs = embed_levels(cm, ds, {ia, ib});
            ea = embs[0];
            eb = embs[1];
        } else if (bl_mode == "text_embedding") {
            ea = bundle.embed_instruction(ds.samples[static_cast<std::size_t>(ia)].instruction, rules);
            eb = bundle.embed_instruction(ds.samples[static_cast<std::size_t>(ib)].instruction, rules);
        } else {
            fail("ConfigInvalid", "unknown blend mode '" + bl_mode + "'");
        }
        auto mix = interpolate(ea, eb, bl_alpha);
        LevelGrid g = generate_level(bundle.gen, mix.unit, LatentSampler::nearest_train_latent);
        write_level_outputs(g, vocab, bl_out.empty() ? "" : in_out_dir(bl_out),
                            bl_ppm.empty() ? "" : in_out_dir(bl_ppm));
        std::cout << serialize_level_global(g, vocab);
        return 0;
    }
    if (*evaluate) {
        GeneratorBundle bundle = load_generator_bundle(ev_gen);
        AbstractionRuleSet rules = load_rules(ev_rules);
        Dataset ds = load_cache(ev_cache);
        ContrastiveModel text_model;
        text_model.variant = bundle.variant;
        text_model.text_enc = bundle.text_enc;
        text_model.channels = ds.vocab.size();
        std::vector<BlendPair> pairs;
        if (!ev_sweep.empty()) {
            std::ifstream in(ev_sweep);
            if (!in) fail("IoError", "cannot open '" + ev_sweep + "'");
            std::string line;
            bool header = true;
            while (std::getline(in, line)) {
                if (line.empty()) continue;
                if (header) {
                    header = false;
                    continue;
                }
                auto fields = detail::split_list(line, ',');
                if (fields.size() < 3) fail("ConfigInvalid", "pairs CSV needs pair,a,b columns");
                BlendPair p;
                p.a_index = find_sample(ds, fields[1]);
                p.b_index = find_sample(ds, fields[2]);
                Genre ga = ds.vocab.domain(ds.samples[static_cast<std::size_t>(p.a_index)].grid.domain).genre;
                Genre gb = ds.vocab.domain(ds.samples[static_cast<std::size_t>(p.b_index)].grid.domain).genre;
                p.group = ga == gb ? "intra_genre" : "inter_genre";
                pairs.push_back(p);
            }
        } else {
            pairs = sample_blend_pairs(ds, ev_pairs, seed);
        }
        ScoreReport report = run_interpolation_sweep(bundle.gen, text_model, rules, ds, pairs);
        std::string detail_path = (fs::path(out_dir) / "sweep_detail.csv").string();
        std::string agg_path = (fs::path(out_dir) / "sweep_aggregate.csv").string();
        write_sweep_csv(report, detail_path, agg_path, hex64(fnv1a64(ev_gen)));
        for (const auto& a : report.aggregates)
            std::cout << a.group << ": r=" << a.pearson_r << " wgm_balance=" << a.wgm_balance
                      << " wgm_bias=" << a.wgm_bias << "\n";
        return 0;
    }
    if (*compose) {
        Dataset ds = load_cache(co_cache);
        AbstractionRuleSet rules = load_rules(co_rules);
        int ia = find_sample(ds, co_a), ib = find_sample(ds, co_b);
        Instruction a = Instruction::make(ds.samples[static_cast<std::size_t>(ia)].instruction, rules);
        Instruction b = Instruction::make(ds.samples[static_cast<std::size_t>(ib)].instruction, rules);
        Instruction c = compose_instructions(a, b, provenance_from_string(co_strategy), rules);
        std::cout << c.raw << "\n";
        return 0;
    }
    if (*ablate) {
        ExperimentConfig cfg = ExperimentConfig::load(ab_config);
        if (out_dir != ".") cfg.out_dir = out_dir;
        fs::create_directories(cfg.out_dir);
        Dataset ds = load_cache(cfg.cache_path);
        AbstractionRuleSet rules = AbstractionRuleSet::default_rules();
        RunManifest manifest = make_manifest(cfg, seed, {cfg.cache_path});
        cfg.save((fs::path(cfg.out_dir) / "resolved_config.txt").string());
        if (cfg.experiment == "interpolation") {
            AblationResult res = exp_interpolation(ds, rules, cfg, cfg.out_dir);
            std::string path = (fs::path(cfg.out_dir) / "ablation_summary.csv").string();
            write_ablation_csv(res, path, manifest.run_id);
            manifest.outputs.push_back(path);
        } else if (cfg.experiment == "single_game") {
            SingleGameTable table = exp_single_game(ds, rules, cfg);
            std::string path = (fs::path(cfg.out_dir) / "single_game.csv").string();
            write_single_game_csv(table, path, manifest.run_id);
            manifest.outputs.push_back(path);
        } else if (cfg.experiment == "composite") {
            auto stats = exp_composite_study(ds, rules, cfg, cfg.out_dir);
            std::string path = (fs::path(cfg.out_dir) / "composite.csv").string();
            write_composite_csv(stats, path, manifest.run_id);
            manifest.outputs.push_back(path);
        } else {
            fail("ConfigInvalid", "unknown experiment '" + cfg.experiment + "'");
        }
        save_manifest(manifest, (fs::path(cfg.out_dir) / ("manifest_" + manifest.run_id + ".txt")).string());
        std::cout << "run " << manifest.run_id << " complete\n";
        return 0;
    }
    if (*project) {
        ContrastiveModel model = ContrastiveModel::from_checkpoint(Checkpoint::load(pr_contrastive));
        Dataset ds = load_cache(pr_cache);
        AbstractionRuleSet rules = load_rules(pr_rules);
        std::vector<int> idx;
        if (pr_split == "all") {
            for (int i = 0; i < static_cast<int>(ds.samples.size()); ++i) idx.push_back(i);
        } else {
            idx = ds.split_indices(split_from_string(pr_split));
        }
        ProjectionResult res = project_embeddings(model, ds, rules, idx);
        write_projection_csv(res, in_out_dir(pr_out));
        std::cout << "projected " << res.rows.size() << " rows, variance captured "
                  << res.variance_captured << "\n";
        return 0;
    }
    if (*report) {
        write_report(out_dir, in_out_dir(re_out));
        std::cout << "wrote " << in_out_dir(re_out) << "\n";
        return 0;
    }
    return 0;
}

inline int run_main(int argc, char** argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    try {
        return run_cli(std::move(args));
    } catch (const Error& e) {
        std::cerr << "{\"error\":\"" << e.code() << "\",\"message\":\"" << e.what() << "\"}\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "{\"error\":\"Internal\",\"message\":\"" << e.what() << "\"}\n";
        return 3;
    }
}

} // namespace lvb::cli
