// SPDX-License-Identifier: Apache-2.0

// Command-line front end. Config keys map 1:1 onto flags; precedence is
// defaults < --config file < flags.

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <cstdio>
#include <iostream>
#include <optional>
#include <sstream>

#include "occmove/eval.hpp"
#include "occmove/io.hpp"
#include "occmove/latent_ops.hpp"
#include "occmove/pipeline.hpp"
#include "occmove/seed.hpp"
#include "occmove/service.hpp"

using namespace occmove;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// One optional per config key; only the ones given on the command line end up in the patch.
struct ConfigFlags {
    std::optional<std::string> config_file;
    std::optional<std::string> backbone, checkpoint;
    std::optional<int> toy_codec_factor, steps, t_m, lambda, opt_iters, map_side, dilation, inversion_refine;
    std::optional<std::uint64_t> seed;
    std::optional<double> eta, gamma, omega, opt_window, binarize_threshold, amodal_threshold;
    std::optional<int> lora_rank, lora_steps, lora_batch;
    std::optional<double> lora_lr, lora_scale;
    std::optional<std::vector<std::string>> lora_targets;
    std::optional<bool> cf, ag, lora, lr, ltg, background_guidance, masked_l2, save_caches;

    void attach(CLI::App& app) {
        app.add_option("--config", config_file, "JSON config (a manifest's \"config\" key also works)");
        app.add_option("--backbone", backbone, "toy | pretrained");
        app.add_option("--checkpoint", checkpoint, "pretrained checkpoint directory");
        app.add_option("--toy-codec-factor", toy_codec_factor);
        app.add_option("--seed", seed);
        app.add_option("--steps", steps, "DDIM steps T");
        app.add_option("--t-m", t_m, "de-occlusion start level");
        app.add_option("--lambda", lambda, "attention amplification");
        app.add_option("--eta", eta, "crop relaxation");
        app.add_option("--gamma", gamma, "movement step size");
        app.add_option("--omega", omega, "guidance scale");
        app.add_option("--opt-iters", opt_iters);
        app.add_option("--opt-window", opt_window);
        app.add_option("--lora-rank", lora_rank);
        app.add_option("--lora-steps", lora_steps);
        app.add_option("--lora-lr", lora_lr);
        app.add_option("--lora-batch", lora_batch);
        app.add_option("--lora-scale", lora_scale);
        app.add_option("--lora-targets", lora_targets)->delimiter(',');
        app.add_option("--cf", cf, "colour-fill init (true/false)");
        app.add_option("--ag", ag, "attention guidance (true/false)");
        app.add_option("--lora", lora, "LoRA fine-tuning (true/false)");
        app.add_option("--lr", lr, "latent resize (true/false)");
        app.add_option("--ltg", ltg, "local text guidance (true/false)");
        app.add_option("--background-guidance", background_guidance);
        app.add_option("--masked-l2", masked_l2);
        app.add_option("--map-side", map_side);
        app.add_option("--binarize-threshold", binarize_threshold);
        app.add_option("--dilation", dilation);
        app.add_option("--amodal-threshold", amodal_threshold);
        app.add_option("--inversion-refine", inversion_refine);
        app.add_option("--save-caches", save_caches);
    }

    json patch() const {
        json p = json::object();
        auto put = [&](json& dst, const char* key, const auto& v) {
            if (v) dst[key] = *v;
        };
        put(p, "backbone", backbone);
        put(p, "checkpoint", checkpoint);
        put(p, "toy_codec_factor", toy_codec_factor);
        put(p, "seed", seed);
        put(p, "steps", steps);
        put(p, "t_m", t_m);
        put(p, "lambda", lambda);
        put(p, "eta", eta);
        put(p, "gamma", gamma);
        put(p, "omega", omega);
        put(p, "opt_iters", opt_iters);
        put(p, "opt_window", opt_window);
        json l = json::object();
        put(l, "rank", lora_rank);
        put(l, "steps", lora_steps);
        put(l, "lr", lora_lr);
        put(l, "batch", lora_batch);
        put(l, "scale", lora_scale);
        put(l, "targets", lora_targets);
        if (!l.empty()) p["lora"] = l;
        json f = json::object();
        put(f, "CF", cf);
        put(f, "AG", ag);
        put(f, "LoRA", lora);
        put(f, "LR", lr);
        put(f, "LTG", ltg);
        if (!f.empty()) p["flags"] = f;
        put(p, "background_guidance", background_guidance);
        put(p, "masked_l2", masked_l2);
        put(p, "map_side", map_side);
        put(p, "binarize_threshold", binarize_threshold);
        put(p, "dilation", dilation);
        put(p, "amodal_threshold", amodal_threshold);
        put(p, "inversion_refine", inversion_refine);
        put(p, "save_caches", save_caches);
        return p;
    }

    PipelineConfig resolve() const {
        PipelineConfig c;
        if (config_file) {
            json doc;
            try {
                doc = json::parse(io::read_text(*config_file));
            } catch (const json::exception& e) {
                throw Error(ErrorKind::config, "cannot parse " + *config_file + ": " + e.what());
            }
            merge_json(c, doc.contains("config") ? doc["config"] : doc);
        }
        merge_json(c, patch());
        c.validate();
        return c;
    }
};

struct RequestFlags {
    std::string image, mask, category, target;
    std::optional<std::string> prompt;

    void attach(CLI::App& app) {
        app.add_option("--image", image, "input PNG")->required();
        app.add_option("--mask", mask, "visible-object mask PNG")->required();
        app.add_option("--category", category, "object category")->required();
        app.add_option("--target", target, "target point x,y in source pixels")->required();
        app.add_option("--prompt", prompt, "override the default prompt");
    }

    EditRequest load(bool need_target) const {
        EditRequest r;
        r.image = io::read_png_rgb(image);
        r.visible = io::read_png_mask(mask);
        r.category = category;
        r.prompt_override = prompt;
        if (need_target || !target.empty()) {
            char comma = 0;
            std::istringstream is(target);
            if (!(is >> r.target_x >> comma >> r.target_y) || comma != ',')
                throw Error(ErrorKind::input, "--target expects x,y, got '" + target + "'");
        }
        return r;
    }
};

std::shared_ptr<const Backbone> backbone_for(const PipelineConfig& c) {
    // Toy weights are fixed; the run seed only drives sampling.
    return load_backbone({c.backbone, c.checkpoint, 0, c.toy_codec_factor});
}

ProgressSink stderr_progress(bool quiet) {
    if (quiet) return {};
    return [](const ProgressEvent& e) {
        std::fprintf(stderr, "\r[%3d/%3d] %-12s", e.done, e.total, e.stage.c_str());
        if (e.done == e.total) std::fputc('\n', stderr);
    };
}

int cmd_edit(const ConfigFlags& cf, const RequestFlags& rf, const std::string& out, bool quiet) {
    const PipelineConfig c = cf.resolve();
    const auto bb = backbone_for(c);
    const EditResult r = run_edit(*bb, rf.load(true), c, out, stderr_progress(quiet));
    std::cout << (r.artifact_dir / "edited.png").string() << '\n';
    return 0;
}

int cmd_deocclude(const ConfigFlags& cf, RequestFlags rf, const std::string& out, bool quiet) {
    const PipelineConfig c = cf.resolve();
    const auto bb = backbone_for(c);
    EditRequest req = rf.load(false);
    if (rf.target.empty()) {  // unused by this branch; any in-bounds point passes validation
        req.target_x = 0;
        req.target_y = 0;
    }
    run_deocclude(*bb, req, c, out, stderr_progress(quiet));
    std::cout << (fs::path(out) / "completed_object.png").string() << '\n';
    return 0;
}

int cmd_invert(const ConfigFlags& cf, const std::string& image, const std::string& prompt, const std::string& out) {
    const PipelineConfig c = cf.resolve();
    const auto bb = backbone_for(c);
    const Tensor src = io::read_png_rgb(image);
    const Normalization n = make_normalization(src.height(), src.width(), bb->info().native_side);
    const Tensor z0 = bb->encode_image(normalize_image(src, n));
    const TextEmbedding cond = bb->embed_prompt(prompt);
    const NoiseSchedule schedule = bb->make_schedule(c.steps);
    InversionOptions o;
    o.refine_iters = c.inversion_refine;
    const InversionCache cache = ddim_invert(*bb, z0, cond, schedule, o);
    const Tensor recon = ddim_sample(*bb, cache.latent(c.steps), c.steps, cond, schedule);
    double err = 0.0;
    for (std::size_t i = 0; i < recon.size(); ++i) err = std::max(err, std::abs(recon.data()[i] - z0.data()[i]));
    fs::create_directories(out);
    cache.save(fs::path(out) / "inversion");
    io::write_png_rgb(fs::path(out) / "reconstruction.png", denormalize_image(bb->decode_latent(recon), n));
    io::write_npy(fs::path(out) / "inverted_latent.npy", cache.latent(c.steps));
    const json summary = {{"config", to_json(c)},
                          {"prompt", prompt},
                          {"steps", c.steps},
                          {"reconstruction_max_abs_error", err}};
    io::write_text(fs::path(out) / "inversion.json", summary.dump(2));
    std::cout << "reconstruction max |z0' - z0| = " << err << '\n';
    return 0;
}

struct EvalFlags {
    std::string annotations, dataset, images_dir, out = "occmove_eval";
    std::size_t limit = 0;
    int targets = 8;
    bool build_only = false, keep_runs = false;
    int kid_block = 50;
    int embed_dim = 64;
    std::optional<std::string> image_embedder_url, text_embedder_url;
};

int cmd_eval(const ConfigFlags& cf, const EvalFlags& ef) {
    const PipelineConfig c = cf.resolve();
    fs::create_directories(ef.out);
    std::vector<SampleRecord> samples;
    if (!ef.dataset.empty()) {
        samples = read_jsonl(ef.dataset);
    } else {
        if (ef.annotations.empty()) throw Error(ErrorKind::input, "eval needs --annotations or --dataset");
        DatasetFilters filters;
        filters.targets_per_sample = ef.targets;
        filters.relax = c.eta;
        const DatasetBuild built = build_dataset(load_cocoa(json::parse(io::read_text(ef.annotations))), filters, c.seed);
        for (const auto& line : built.log) spdlog::info("dropped: {}", line);
        samples = built.samples;
        write_jsonl(fs::path(ef.out) / "dataset.jsonl", samples);
    }
    spdlog::info("{} samples", samples.size());
    if (ef.build_only) return 0;

    std::unique_ptr<Embedder> image_emb, text_emb;
    if (ef.image_embedder_url) image_emb = std::make_unique<HttpEmbedder>(*ef.image_embedder_url);
    else image_emb = std::make_unique<StubEmbedder>(EmbedderKind::image, ef.embed_dim, derive_seed(c.seed, "embed:image"));
    if (ef.text_embedder_url) text_emb = std::make_unique<HttpEmbedder>(*ef.text_embedder_url);
    else
        text_emb = std::make_unique<StubEmbedder>(EmbedderKind::image_text, ef.embed_dim, derive_seed(c.seed, "embed:text"));

    EvalOptions o;
    o.images_dir = ef.images_dir.empty() ? fs::path(ef.annotations).parent_path() : fs::path(ef.images_dir);
    o.limit = ef.limit;
    o.kid.block_size = ef.kid_block;
    o.keep_runs = ef.keep_runs;
    const auto bb = backbone_for(c);
    const MetricReport report = run_evaluation(*bb, samples, c, *image_emb, *text_emb, o, ef.out);
    std::cout << report.to_json().dump(2) << '\n';
    return 0;
}

struct ServeFlags {
    std::string host = "127.0.0.1", artifacts = "occmove_jobs", cors = "*";
    int port = 8080, workers = 1;
    std::size_t queue = 8;
    bool no_segmenter = false;
};

int cmd_serve(const ConfigFlags& cf, const ServeFlags& sf) {
    ServiceOptions o;
    o.config = cf.resolve();
    o.host = sf.host;
    o.port = sf.port;
    o.workers = sf.workers;
    o.queue_capacity = sf.queue;
    o.artifact_root = sf.artifacts;
    o.cors_origin = sf.cors;
    o.segmenter = !sf.no_segmenter;
    EditService svc(backbone_for(o.config), o);
    svc.run();
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"occmove: move occluded objects in images"};
    app.require_subcommand(1);
    app.fallthrough();
    bool quiet = false;
    app.add_flag("-q,--quiet", quiet, "no progress output");

    ConfigFlags edit_cfg, deocc_cfg, inv_cfg, eval_cfg, serve_cfg;
    RequestFlags edit_req, deocc_req;
    std::string edit_out = "occmove_out", deocc_out = "occmove_out", inv_out = "occmove_out";

    auto* edit = app.add_subcommand("edit", "move the object to --target");
    edit_cfg.attach(*edit);
    edit_req.attach(*edit);
    edit->add_option("-o,--out", edit_out, "artifact directory");

    auto* deocc = app.add_subcommand("deocclude", "complete the occluded object only");
    deocc_cfg.attach(*deocc);
    deocc_req.attach(*deocc);
    deocc->get_option("--target")->required(false);
    deocc->add_option("-o,--out", deocc_out, "artifact directory");

    std::string inv_image, inv_prompt;
    auto* inv = app.add_subcommand("invert", "DDIM-invert an image and report the round trip");
    inv_cfg.attach(*inv);
    inv->add_option("--image", inv_image)->required();
    inv->add_option("--prompt", inv_prompt)->required();
    inv->add_option("-o,--out", inv_out);

    EvalFlags ef;
    auto* ev = app.add_subcommand("eval", "build the benchmark and score a config");
    eval_cfg.attach(*ev);
    ev->add_option("--annotations", ef.annotations, "COCOA-style annotation JSON");
    ev->add_option("--dataset", ef.dataset, "prebuilt dataset.jsonl");
    ev->add_option("--images-dir", ef.images_dir, "defaults to the annotation file's directory");
    ev->add_option("--limit", ef.limit, "0: all samples");
    ev->add_option("--targets", ef.targets, "targets per sample");
    ev->add_option("--kid-block", ef.kid_block);
    ev->add_option("--embed-dim", ef.embed_dim, "stub embedder width");
    ev->add_option("--image-embedder-url", ef.image_embedder_url);
    ev->add_option("--text-embedder-url", ef.text_embedder_url);
    ev->add_flag("--build-only", ef.build_only, "write dataset.jsonl and stop");
    ev->add_flag("--keep-runs", ef.keep_runs);
    ev->add_option("-o,--out", ef.out);

    ServeFlags sf;
    auto* serve = app.add_subcommand("serve", "HTTP edit service under /v1");
    serve_cfg.attach(*serve);
    serve->add_option("--host", sf.host);
    serve->add_option("--port", sf.port);
    serve->add_option("--workers", sf.workers);
    serve->add_option("--queue", sf.queue, "pending-job capacity");
    serve->add_option("--artifacts", sf.artifacts, "job artifact root");
    serve->add_option("--cors-origin", sf.cors);
    serve->add_flag("--no-segmenter", sf.no_segmenter);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n";
        const auto subs = app.get_subcommands();
        std::cerr << (subs.empty() ? app.help() : subs.front()->help());
        return 2;
    }

    try {
        if (*edit) return cmd_edit(edit_cfg, edit_req, edit_out, quiet);
        if (*deocc) return cmd_deocclude(deocc_cfg, deocc_req, deocc_out, quiet);
        if (*inv) return cmd_invert(inv_cfg, inv_image, inv_prompt, inv_out);
        if (*ev) return cmd_eval(eval_cfg, ef);
        if (*serve) return cmd_serve(serve_cfg, sf);
    } catch (const StageError& e) {
        std::cerr << "\nerror in stage '" << e.stage() << "' (" << to_string(e.kind()) << "): " << e.what() << '\n';
        return 1;
    } catch (const Error& e) {
        std::cerr << "\nerror (" << to_string(e.kind()) << "): " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "\nerror: " << e.what() << '\n';
        return 1;
    }
    return 2;
}
