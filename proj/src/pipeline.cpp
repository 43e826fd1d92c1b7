// SPDX-License-Identifier: Apache-2.0

#include "occmove/pipeline.hpp"

#include <cmath>
#include <exception>
#include <fstream>
#include <sstream>
#include <thread>

#include "occmove/io.hpp"
#include "occmove/seed.hpp"

namespace occmove {

int PipelineConfig::resolved_t_m() const {
    if (t_m) return *t_m;
    return std::min(static_cast<int>(std::ceil(0.8 * steps)), steps - 1);
}

void PipelineConfig::validate() const {
    OCCMOVE_CHECK(steps >= 2, config, "steps (T) must be >= 2, got ", steps);
    const int tm = resolved_t_m();
    OCCMOVE_CHECK(tm > 0 && tm <= steps, config, "t_m must lie in 1..T, got ", tm);
    OCCMOVE_CHECK(!flags.color_fill || tm < steps, config, "color fill needs t_m < T (t_m=", tm, ", T=", steps, ")");
    OCCMOVE_CHECK(lambda >= 0, config, "lambda must be >= 0");
    OCCMOVE_CHECK(eta >= 1.0, config, "eta must be >= 1");
    OCCMOVE_CHECK(gamma >= 0.0, config, "gamma must be >= 0");
    OCCMOVE_CHECK(omega >= 0.0, config, "omega must be >= 0");
    OCCMOVE_CHECK(opt_iters >= 0, config, "opt_iters must be >= 0");
    OCCMOVE_CHECK(opt_window >= 0.0 && opt_window <= 1.0, config, "opt_window must lie in [0, 1]");
    OCCMOVE_CHECK(lora.rank > 0 && lora.steps >= 0 && lora.learning_rate > 0 && lora.batch > 0, config,
                  "LoRA rank/steps/lr/batch must be positive");
    OCCMOVE_CHECK(map_side >= 0, config, "map_side must be >= 0");
    OCCMOVE_CHECK(binarize_threshold > 0 && binarize_threshold <= 1, config, "binarize_threshold must lie in (0, 1]");
    OCCMOVE_CHECK(amodal_threshold > 0 && amodal_threshold <= 1, config, "amodal_threshold must lie in (0, 1]");
    OCCMOVE_CHECK(dilation >= 0 && inversion_refine >= 0, config, "dilation and inversion_refine must be >= 0");
    OCCMOVE_CHECK(toy_codec_factor >= 1, config, "toy_codec_factor must be >= 1");
}

nlohmann::json to_json(const PipelineConfig& c) {
    return {{"backbone", c.backbone},
            {"checkpoint", c.checkpoint},
            {"toy_codec_factor", c.toy_codec_factor},
            {"seed", c.seed},
            {"steps", c.steps},
            {"t_m", c.resolved_t_m()},
            {"lambda", c.lambda},
            {"eta", c.eta},
            {"gamma", c.gamma},
            {"omega", c.omega},
            {"opt_iters", c.opt_iters},
            {"opt_window", c.opt_window},
            {"lora",
             {{"rank", c.lora.rank},
              {"steps", c.lora.steps},
              {"lr", c.lora.learning_rate},
              {"batch", c.lora.batch},
              {"scale", c.lora.scale},
              {"targets", c.lora.targets}}},
            {"flags",
             {{"CF", c.flags.color_fill},
              {"AG", c.flags.attention_guidance},
              {"LoRA", c.flags.lora},
              {"LR", c.flags.latent_resize},
              {"LTG", c.flags.local_text_guidance}}},
            {"background_guidance", c.background_guidance},
            {"masked_l2", c.masked_l2},
            {"map_side", c.map_side},
            {"binarize_threshold", c.binarize_threshold},
            {"dilation", c.dilation},
            {"amodal_threshold", c.amodal_threshold},
            {"inversion_refine", c.inversion_refine},
            {"save_caches", c.save_caches}};
}

namespace {

template <typename T>
void take(const nlohmann::json& j, const char* key, T& out) {
    try {
        out = j.get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::config, std::string("config key '") + key + "': " + e.what());
    }
}

}  // namespace

void merge_json(PipelineConfig& c, const nlohmann::json& patch) {
    OCCMOVE_CHECK(patch.is_object(), config, "config must be a JSON object");
    for (const auto& [key, v] : patch.items()) {
        const char* k = key.c_str();
        if (key == "backbone") take(v, k, c.backbone);
        else if (key == "checkpoint") take(v, k, c.checkpoint);
        else if (key == "toy_codec_factor") take(v, k, c.toy_codec_factor);
        else if (key == "seed") take(v, k, c.seed);
        else if (key == "steps") take(v, k, c.steps);
        else if (key == "t_m") {
            if (v.is_null()) c.t_m.reset();
            else { int t = 0; take(v, k, t); c.t_m = t; }
        }
        else if (key == "lambda") take(v, k, c.lambda);
        else if (key == "eta") take(v, k, c.eta);
        else if (key == "gamma") take(v, k, c.gamma);
        else if (key == "omega") take(v, k, c.omega);
        else if (key == "opt_iters") take(v, k, c.opt_iters);
        else if (key == "opt_window") take(v, k, c.opt_window);
        else if (key == "background_guidance") take(v, k, c.background_guidance);
        else if (key == "masked_l2") take(v, k, c.masked_l2);
        else if (key == "map_side") take(v, k, c.map_side);
        else if (key == "binarize_threshold") take(v, k, c.binarize_threshold);
        else if (key == "dilation") take(v, k, c.dilation);
        else if (key == "amodal_threshold") take(v, k, c.amodal_threshold);
        else if (key == "inversion_refine") take(v, k, c.inversion_refine);
        else if (key == "save_caches") take(v, k, c.save_caches);
        else if (key == "lora") {
            OCCMOVE_CHECK(v.is_object(), config, "'lora' must be an object");
            for (const auto& [lk, lv] : v.items()) {
                const char* n = lk.c_str();
                if (lk == "rank") take(lv, n, c.lora.rank);
                else if (lk == "steps") take(lv, n, c.lora.steps);
                else if (lk == "lr") take(lv, n, c.lora.learning_rate);
                else if (lk == "batch") take(lv, n, c.lora.batch);
                else if (lk == "scale") take(lv, n, c.lora.scale);
                else if (lk == "targets") take(lv, n, c.lora.targets);
                else throw Error(ErrorKind::config, "unknown config key 'lora." + lk + "'");
            }
        } else if (key == "flags") {
            OCCMOVE_CHECK(v.is_object(), config, "'flags' must be an object");
            for (const auto& [fk, fv] : v.items()) {
                const char* n = fk.c_str();
                if (fk == "CF") take(fv, n, c.flags.color_fill);
                else if (fk == "AG") take(fv, n, c.flags.attention_guidance);
                else if (fk == "LoRA") take(fv, n, c.flags.lora);
                else if (fk == "LR") take(fv, n, c.flags.latent_resize);
                else if (fk == "LTG") take(fv, n, c.flags.local_text_guidance);
                else throw Error(ErrorKind::config, "unknown ablation flag '" + fk + "'");
            }
        } else {
            throw Error(ErrorKind::config, "unknown config key '" + key + "'");
        }
    }
}

PipelineConfig config_from_json(const nlohmann::json& j) {
    PipelineConfig c;
    merge_json(c, j);
    return c;
}

std::string EditRequest::prompt() const {
    if (prompt_override && !prompt_override->empty()) return *prompt_override;
    return "A photo of " + category;
}

void EditRequest::validate() const {
    OCCMOVE_CHECK(image.channels() == 3 && !image.empty(), input, "source image must be a non-empty RGB image");
    OCCMOVE_CHECK(visible.height() == image.height() && visible.width() == image.width(), input, "mask ",
                  visible.height(), "x", visible.width(), " does not match image ", image.height(), "x",
                  image.width());
    OCCMOVE_CHECK(visible.any(), input, "visible mask is empty");
    OCCMOVE_CHECK(target_x >= 0 && target_x < image.width() && target_y >= 0 && target_y < image.height(), input,
                  "target point (", target_x, ",", target_y, ") outside the ", image.width(), "x", image.height(),
                  " image");
    OCCMOVE_CHECK(!category.empty() || (prompt_override && !prompt_override->empty()), input,
                  "category is required");
}

Normalization make_normalization(int height, int width, int side) {
    Normalization n;
    n.source_height = height;
    n.source_width = width;
    n.side = side;
    n.scale = static_cast<double>(side) / std::max(height, width);
    n.content_height = std::clamp(static_cast<int>(std::lround(height * n.scale)), 1, side);
    n.content_width = std::clamp(static_cast<int>(std::lround(width * n.scale)), 1, side);
    return n;
}

namespace {

Tensor resize_any(const Tensor& t, int h, int w) {
    if (h <= t.height() && w <= t.width()) return area_resize(t, h, w);
    return bilinear_resize(t, h, w);
}

}  // namespace

Tensor normalize_image(const Tensor& image, const Normalization& n) {
    const Tensor content = resize_any(image, n.content_height, n.content_width);
    if (n.content_height == n.side && n.content_width == n.side) return content;
    Tensor out(image.channels(), n.side, n.side);
    paste(out, content, 0, 0);
    return out;
}

Mask normalize_mask(const Mask& mask, const Normalization& n) {
    const Mask content = resample_mask(mask, n.content_height, n.content_width, MaskSpace::pixel);
    return zero_pad(content, 0, n.side - n.content_height, 0, n.side - n.content_width);
}

Tensor denormalize_image(const Tensor& image, const Normalization& n) {
    const Tensor content = crop(image, 0, 0, n.content_height, n.content_width);
    return resize_any(content, n.source_height, n.source_width);
}

namespace {

class Progress {
public:
    Progress(ProgressSink sink, int total) : m_sink(std::move(sink)), m_total(total) {}
    void advance(const std::string& stage, int units = 1) {
        m_done += units;
        if (m_sink && units > 0) m_sink({stage, m_done, m_total});
    }

private:
    ProgressSink m_sink;
    int m_total;
    int m_done = 0;
};

template <typename F>
auto staged(const char* stage, F&& fn) -> decltype(fn()) {
    try {
        return fn();
    } catch (const StageError&) {
        throw;
    } catch (const Error& e) {
        throw StageError(stage, e);
    } catch (const std::exception& e) {
        throw StageError(stage, ErrorKind::contract, e.what());
    }
}

nlohmann::json frame_json(const CropFrame& f) {
    return {{"center", {f.center_x, f.center_y}},
            {"tight_side", f.tight_side},
            {"relax", f.relax},
            {"side", f.side},
            {"source_dims", {f.source_height, f.source_width}},
            {"window", {f.window.x0, f.window.y0, f.window.x1, f.window.y1}},
            {"padding", {f.pad_top, f.pad_bottom, f.pad_left, f.pad_right}},
            {"output_side", f.output_side}};
}

void write_loss_csv(const std::filesystem::path& path, const std::vector<std::vector<double>>& per_step,
                    int steps) {
    std::ostringstream os;
    os << "t,iteration,loss\n";
    os.precision(17);
    for (std::size_t k = 0; k < per_step.size(); ++k) {
        const int t = steps - 1 - static_cast<int>(k);
        for (std::size_t i = 0; i < per_step[k].size(); ++i) os << t << ',' << i << ',' << per_step[k][i] << '\n';
    }
    io::write_text(path, os.str());
}

struct Prepared {
    explicit Prepared(NoiseSchedule s) : schedule(std::move(s)) {}

    Normalization norm;
    Tensor image_n;
    Mask mask_n;
    int gx = 0;
    int gy = 0;
    TextEmbedding cond;
    TokenSpan span;
    PreparedInput crop;
    Tensor z_crop;
    std::optional<FinetuneResult> lora;
    std::optional<InversionCache> inv_crop;
    NoiseSchedule schedule;
    DeoccConfig deocc;
    nlohmann::json manifest;
    std::vector<std::string> warnings;
};

Prepared prepare(const Backbone& backbone, const EditRequest& request, const PipelineConfig& config,
                 Progress& progress, const std::filesystem::path& dir) {
    staged("validate", [&] {
        request.validate();
        config.validate();
        return 0;
    });
    const BackboneInfo& info = backbone.info();
    const int latent_side = info.native_latent_side();
    const int f = info.latent_downsample;

    Prepared p(staged("schedule", [&] { return backbone.make_schedule(config.steps); }));
    staged("normalize", [&] {
        p.norm = make_normalization(request.image.height(), request.image.width(), info.native_side);
        p.image_n = normalize_image(request.image, p.norm);
        p.mask_n = normalize_mask(request.visible, p.norm);
        OCCMOVE_CHECK(p.mask_n.any(), input, "visible mask vanishes at the native resolution");
        p.gx = std::clamp(static_cast<int>(std::floor(request.target_x * p.norm.scale)), 0, info.native_side - 1);
        p.gy = std::clamp(static_cast<int>(std::floor(request.target_y * p.norm.scale)), 0, info.native_side - 1);
        return 0;
    });
    staged("prompt", [&] {
        p.cond = backbone.embed_prompt(request.prompt());
        if (p.cond.truncated) {
            std::string dropped;
            for (const auto& w : p.cond.dropped_words) dropped += " " + w;
            p.warnings.push_back("prompt truncated; dropped:" + dropped);
        }
        const std::string phrase = request.category.empty() ? request.prompt() : request.category;
        const auto span = p.cond.find_span(phrase);
        OCCMOVE_CHECK(span.has_value(), input, "category '", phrase, "' not found in prompt '", request.prompt(), "'");
        p.span = *span;
        return 0;
    });
    staged("prepare_input", [&] {
        p.crop = prepare_input(p.image_n, p.mask_n, config.eta, info.native_side, latent_side);
        p.z_crop = backbone.encode_image(p.crop.image);
        return 0;
    });

    const std::uint64_t seed = config.seed;
    if (config.flags.lora) {
        p.lora = staged("lora", [&] {
            return finetune_lora(backbone, p.z_crop, p.crop.visible_latent, p.cond, config.lora,
                                 derive_seed(seed, "lora"));
        });
        progress.advance("lora", config.lora.steps + 1);
    }
    const LoRAAdapter* adapter = p.lora ? &p.lora->adapter : nullptr;

    p.inv_crop = staged("invert_crop", [&] {
        InversionOptions o;
        o.refine_iters = config.inversion_refine;
        o.lora = adapter;
        auto cache = ddim_invert(backbone, p.z_crop, p.cond, p.schedule, o);
        cache.seed = derive_seed(seed, "inversion");
        return cache;
    });
    progress.advance("invert_crop", config.steps);

    p.deocc.t_m = config.resolved_t_m();
    p.deocc.lambda = config.lambda;
    p.deocc.map_side = config.map_side > 0 ? config.map_side : std::max(1, latent_side / 2);
    p.deocc.binarize_threshold = config.binarize_threshold;
    p.deocc.dilation = config.dilation;
    p.deocc.amodal_threshold = config.amodal_threshold;
    p.deocc.color_fill = config.flags.color_fill;
    p.deocc.attention_guidance = config.flags.attention_guidance;

    const auto rgb = fill_color(derive_seed(derive_seed(derive_seed(seed, "deocclusion"), "color-fill"), "color"));
    auto& m = p.manifest;
    m["format_version"] = 1;
    m["config"] = to_json(config);
    m["request"] = {{"source_dims", {request.image.height(), request.image.width()}},
                    {"target", {request.target_x, request.target_y}},
                    {"category", request.category},
                    {"prompt", request.prompt()},
                    {"prompt_override", request.prompt_override.has_value()},
                    {"image_fingerprint", io::fingerprint(io::encode_png_rgb(request.image))},
                    {"mask_fingerprint", io::fingerprint(io::encode_png_mask(request.visible))}};
    m["backbone"] = {{"name", info.name},
                     {"fingerprint", info.fingerprint},
                     {"latent_channels", info.latent_channels},
                     {"latent_downsample", f},
                     {"native_side", info.native_side},
                     {"codec", backbone.codec().name()}};
    m["seeds"] = {{"root", seed},
                  {"lora", derive_seed(seed, "lora")},
                  {"inversion", derive_seed(seed, "inversion")},
                  {"deocclusion", derive_seed(seed, "deocclusion")},
                  {"noise_fill", derive_seed(seed, "noise-fill")}};
    m["normalization"] = {{"scale", p.norm.scale},
                          {"content", {p.norm.content_height, p.norm.content_width}},
                          {"side", p.norm.side},
                          {"target_native", {p.gx, p.gy}}};
    m["schedule"] = {{"alphas", p.schedule.alphas()}, {"timesteps", p.schedule.timesteps()}};
    m["crop_frame"] = frame_json(p.crop.frame);
    m["token_span"] = {p.span.begin, p.span.end};
    m["fill_color"] = config.flags.color_fill ? nlohmann::json(rgb) : nlohmann::json(nullptr);
    m["decisions"] = {{"inversion_source", "cropped_original"},
                      {"lora_during_crop_inversion", adapter != nullptr},
                      {"lora_during_movement", false},
                      {"inversion", config.inversion_refine > 0 ? "fixed_point_refined" : "plain"},
                      {"restriction", "additive_logit_mask"},
                      {"restriction_scope", "decoder self-attention, side >= latent/2"},
                      {"movement_start", "T with stand-in before the de-occlusion start level"},
                      {"loss_form", config.masked_l2 ? "masked_l2" : "l2"}};
    if (p.lora) {
        m["lora"] = {{"initial_loss", p.lora->initial_loss},
                     {"final_loss", p.lora->final_loss},
                     {"parameters", p.lora->adapter.parameter_count()}};
        p.lora->adapter.save(dir / "lora");
        std::ostringstream os;
        os.precision(17);
        os << "step,loss\n";
        for (std::size_t i = 0; i < p.lora->loss_trace.size(); ++i) os << i << ',' << p.lora->loss_trace[i] << '\n';
        io::write_text(dir / "lora_loss.csv", os.str());
    } else {
        m["lora"] = nullptr;
    }
    if (config.save_caches) p.inv_crop->save(dir / "cache_crop");
    return p;
}

void persist_completed(const std::filesystem::path& dir, const CompletedObject& obj) {
    io::write_png_rgb(dir / "completed_object.png", obj.image);
    io::write_png_mask(dir / "amodal_mask.png", obj.amodal_mask);
    io::write_npy(dir / "completed_latent.npy", obj.latent);
    export_refined_maps(dir / "refined_maps", obj.maps);
}

int total_units(const PipelineConfig& config, int deocc_steps, bool movement) {
    int total = config.steps + deocc_steps;
    if (config.flags.lora) total += config.lora.steps + 1;
    if (movement) total += 3 * config.steps;
    return total;
}

}  // namespace

EditResult run_edit(const Backbone& backbone, const EditRequest& request, const PipelineConfig& config,
                    const std::filesystem::path& dir, const ProgressSink& sink) {
    staged("persist", [&] {
        std::filesystem::create_directories(dir);
        return 0;
    });
    const int deocc_steps = config.flags.color_fill ? config.resolved_t_m() + 1 : config.steps + 1;
    Progress progress(sink, total_units(config, deocc_steps, true));
    try {
        Prepared p = prepare(backbone, request, config, progress, dir);
        const BackboneInfo& info = backbone.info();
        const int latent_side = info.native_latent_side();
        const int f = info.latent_downsample;
        const int T = config.steps;
        const std::uint64_t seed = config.seed;
        const LoRAAdapter* adapter = p.lora ? &p.lora->adapter : nullptr;

        const Tensor z_full = staged("invert_full", [&] { return backbone.encode_image(p.image_n); });
        const Mask mv_full = to_latent_mask(p.mask_n, latent_side);
        const InversionCache inv_full = staged("invert_full", [&] {
            InversionOptions o;
            o.capture_kv = true;
            o.refine_iters = config.inversion_refine;
            auto cache = ddim_invert(backbone, z_full, p.cond, p.schedule, o);
            cache.seed = derive_seed(seed, "inversion");
            return cache;
        });
        progress.advance("invert_full", T);
        if (config.save_caches) inv_full.save(dir / "cache_full");

        const int r_prime = (p.crop.frame.side + f - 1) / f;
        const TargetMask q = staged("movement", [&] {
            return make_target_mask(p.gx, p.gy, std::min(r_prime, latent_side), latent_side, f);
        });
        MoveConfig mc;
        mc.gx = p.gx;
        mc.gy = p.gy;
        mc.r_prime = q.box.width();
        mc.gamma = config.gamma;
        mc.omega = config.omega;
        mc.opt_iters = config.opt_iters;
        mc.opt_window = config.opt_window;
        mc.latent_resize = config.flags.latent_resize;
        mc.local_text_guidance = config.flags.local_text_guidance;
        mc.background_guidance = config.background_guidance;
        mc.masked_l2 = config.masked_l2;

        // De-occlusion runs on a producer thread; movement consumes in lockstep.
        const std::uint64_t deocc_seed = derive_seed(seed, "deocclusion");
        const int start = staged("deocclusion", [&] { return deocclusion_start(p.deocc, p.schedule); });
        HandoffChannel<DeoccStepOutput> channel(1);
        std::exception_ptr producer_error;
        CompletedObject completed;
        std::thread producer([&] {
            try {
                completed = run_deocclusion(backbone, p.crop, p.cond, p.span, *p.inv_crop, p.deocc, adapter,
                                            deocc_seed, [&](const DeoccStepOutput& s) { channel.push(s); });
            } catch (...) {
                producer_error = std::current_exception();
            }
            channel.close();
        });
        struct Joiner {
            std::thread& th;
            HandoffChannel<DeoccStepOutput>& ch;
            ~Joiner() {
                ch.cancel();
                if (th.joinable()) th.join();
            }
        } joiner{producer, channel};

        auto rethrow_producer = [&] {
            producer.join();
            if (producer_error) {
                try {
                    std::rethrow_exception(producer_error);
                } catch (const Error& e) {
                    throw StageError("deocclusion", e);
                } catch (const std::exception& e) {
                    throw StageError("deocclusion", ErrorKind::contract, e.what());
                }
            }
        };

        Tensor z = noise_fill_init(inv_full.latent(T), mv_full, derive_seed(seed, "noise-fill"));
        DeoccStepOutput standin;
        if (start < T - 1) {
            standin.z_bar = deocclusion_init(backbone, *p.inv_crop, p.crop.visible_latent, p.deocc, deocc_seed);
            standin.refined = map_from_mask(p.crop.visible_latent, p.deocc.map_side, p.span, start);
        }
        std::vector<std::vector<double>> losses;
        std::vector<std::string> move_warnings;
        int optimized_steps = 0;
        for (int t = T - 1; t >= 0; --t) {
            DeoccStepOutput current;
            if (t > start) {
                current = standin;
                current.timestep = t;
                current.refined.timestep = t;
            } else {
                std::optional<DeoccStepOutput> next;
                do {
                    next = channel.pop();
                    if (!next) rethrow_producer();
                    OCCMOVE_CHECK(next.has_value(), lockstep, "de-occlusion branch ended before step ", t);
                } while (next->timestep > t);
                current = std::move(*next);
            }
            auto step = staged("movement", [&] {
                return run_move_step(backbone, t, z, current, inv_full, mv_full, q, p.cond, mc);
            });
            z = std::move(step.z);
            if (step.optimized) ++optimized_steps;
            losses.push_back(std::move(step.losses));
            for (auto& w : step.warnings) move_warnings.push_back(std::move(w));
            progress.advance("movement", 2);
            if (t <= start) progress.advance("deocclusion", t == 0 ? 1 + (start == T ? 1 : 0) : 1);
        }
        rethrow_producer();

        EditResult result;
        result.artifact_dir = dir;
        staged("decode", [&] {
            result.edited_native = backbone.decode_latent(z);
            result.edited_image = denormalize_image(result.edited_native, p.norm);
            return 0;
        });
        result.completed = std::move(completed);

        staged("persist", [&] {
            io::write_png_rgb(dir / "edited.png", result.edited_image);
            io::write_png_rgb(dir / "edited_native.png", result.edited_native);
            io::write_npy(dir / "edited_latent.npy", z);
            io::write_png_rgb(dir / "crop_input.png", p.crop.image);
            io::write_png_mask(dir / "visible_latent_mask.png", p.crop.visible_latent);
            io::write_png_mask(dir / "q_mask.png", q.grid);
            write_loss_csv(dir / "loss_trace.csv", losses, T);
            persist_completed(dir, result.completed);
            auto& m = p.manifest;
            m["target_box"] = {{"latent", {q.box.x0, q.box.y0, q.box.x1, q.box.y1}},
                               {"r", p.crop.frame.side},
                               {"r_prime", r_prime},
                               {"shifted", q.shifted}};
            m["deocclusion"] = {{"start_level", start}, {"steps_emitted", result.completed.maps.size()}};
            m["movement"] = {{"start_level", T}, {"optimized_steps", optimized_steps}};
            auto warnings = p.warnings;
            for (const auto& w : result.completed.warnings) warnings.push_back("deocclusion " + w);
            for (const auto& w : move_warnings) warnings.push_back("movement " + w);
            m["warnings"] = warnings;
            m["outputs"] = {{"edited", "edited.png"},
                            {"edited_fingerprint", io::fingerprint(io::read_bytes(dir / "edited.png"))},
                            {"completed_object", "completed_object.png"},
                            {"amodal_mask", "amodal_mask.png"}};
            io::write_text(dir / "manifest.json", m.dump(2));
            result.manifest = m;
            return 0;
        });
        return result;
    } catch (const StageError& e) {
        io::write_text(dir / "failure.json",
                       nlohmann::json{{"stage", e.stage()}, {"kind", to_string(e.kind())}, {"message", e.what()}}
                           .dump(2));
        throw;
    }
}

CompletedObject run_deocclude(const Backbone& backbone, const EditRequest& request, const PipelineConfig& config,
                              const std::filesystem::path& dir, const ProgressSink& sink) {
    staged("persist", [&] {
        std::filesystem::create_directories(dir);
        return 0;
    });
    const int deocc_steps = config.flags.color_fill ? config.resolved_t_m() + 1 : config.steps + 1;
    Progress progress(sink, total_units(config, deocc_steps, false));
    try {
        Prepared p = prepare(backbone, request, config, progress, dir);
        CompletedObject obj = staged("deocclusion", [&] {
            return run_deocclusion(backbone, p.crop, p.cond, p.span, *p.inv_crop, p.deocc,
                                   p.lora ? &p.lora->adapter : nullptr, derive_seed(config.seed, "deocclusion"),
                                   [&](const DeoccStepOutput&) { progress.advance("deocclusion"); });
        });
        staged("persist", [&] {
            io::write_png_rgb(dir / "crop_input.png", p.crop.image);
            io::write_png_mask(dir / "visible_latent_mask.png", p.crop.visible_latent);
            persist_completed(dir, obj);
            auto& m = p.manifest;
            m["deocclusion"] = {{"start_level", deocclusion_start(p.deocc, p.schedule)},
                                {"steps_emitted", obj.maps.size()}};
            auto warnings = p.warnings;
            for (const auto& w : obj.warnings) warnings.push_back("deocclusion " + w);
            m["warnings"] = warnings;
            io::write_text(dir / "manifest.json", m.dump(2));
            return 0;
        });
        return obj;
    } catch (const StageError& e) {
        io::write_text(dir / "failure.json",
                       nlohmann::json{{"stage", e.stage()}, {"kind", to_string(e.kind())}, {"message", e.what()}}
                           .dump(2));
        throw;
    }
}

}  // namespace occmove
