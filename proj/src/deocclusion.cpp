// SPDX-License-Identifier: Apache-2.0

#include "occmove/deocclusion.hpp"

#include <cmath>
#include <random>

#include "occmove/seed.hpp"

namespace occmove {

CropFrame make_crop_frame(const Mask& visible, double relax, int output_side) {
    OCCMOVE_CHECK(visible.any(), input, "visible mask is empty");
    OCCMOVE_CHECK(relax >= 1.0, config, "relax ratio must be >= 1, got ", relax);
    OCCMOVE_CHECK(output_side > 0, config, "output side must be positive");
    const Box b = bounding_box(visible);
    CropFrame f;
    f.source_height = visible.height();
    f.source_width = visible.width();
    f.center_x = (b.x0 + b.x1) / 2;
    f.center_y = (b.y0 + b.y1) / 2;
    f.tight_side = std::max(b.width(), b.height());
    f.relax = relax;
    f.side = std::max(f.tight_side, static_cast<int>(std::lround(relax * f.tight_side)));
    f.window = {f.center_x - f.side / 2, f.center_y - f.side / 2, 0, 0};
    f.window.x1 = f.window.x0 + f.side;
    f.window.y1 = f.window.y0 + f.side;
    f.pad_left = std::max(0, -f.window.x0);
    f.pad_top = std::max(0, -f.window.y0);
    f.pad_right = std::max(0, f.window.x1 - f.source_width);
    f.pad_bottom = std::max(0, f.window.y1 - f.source_height);
    f.output_side = output_side;
    return f;
}

PreparedInput prepare_input(const Tensor& image, const Mask& visible, double relax, int output_side, int latent_side) {
    OCCMOVE_CHECK(image.height() == visible.height() && image.width() == visible.width(), shape,
                  "mask ", visible.height(), "x", visible.width(), " does not match image ", image.height(), "x",
                  image.width());
    PreparedInput in;
    in.frame = make_crop_frame(visible, relax, output_side);
    const CropFrame& f = in.frame;
    const Tensor padded = reflect_pad(image, f.pad_top, f.pad_bottom, f.pad_left, f.pad_right);
    const Mask mpad = zero_pad(visible, f.pad_top, f.pad_bottom, f.pad_left, f.pad_right);
    const int y0 = f.window.y0 + f.pad_top;
    const int x0 = f.window.x0 + f.pad_left;
    const Tensor cropped = crop(padded, y0, x0, f.side, f.side);
    const Mask mcrop = crop(mpad, y0, x0, f.side, f.side);
    in.image = f.side > output_side ? area_resize(cropped, output_side, output_side)
                                    : bilinear_resize(cropped, output_side, output_side);
    in.visible_pixel = resample_mask(mcrop, output_side, output_side, MaskSpace::pixel);
    in.visible_latent = resample_mask(mcrop, latent_side, latent_side, MaskSpace::latent);
    OCCMOVE_CHECK(in.visible_latent.any(), input, "visible region vanishes at latent resolution");
    return in;
}

double masked_diffusion_loss(const Backbone& backbone, const Tensor& z0, const Mask& mv, const TextEmbedding& cond,
                             const LoRAAdapter* lora, int train_timestep, const Tensor& noise) {
    const double a = backbone.train_alphas().at(static_cast<std::size_t>(train_timestep));
    Tensor zt(z0.channels(), z0.height(), z0.width());
    for (std::size_t i = 0; i < zt.size(); ++i)
        zt.data()[i] = std::sqrt(a) * z0.data()[i] + std::sqrt(1 - a) * noise.data()[i];
    HookSet h;
    h.lora = lora;
    const Tensor pred = backbone.predict_noise(zt, train_timestep, &cond, h).epsilon;
    double sum = 0.0;
    const auto bits = mv.bits();
    for (int c = 0; c < z0.channels(); ++c) {
        const auto p = pred.plane(c);
        const auto n = noise.plane(c);
        for (std::size_t i = 0; i < p.size(); ++i)
            if (bits[i]) sum += (n[i] - p[i]) * (n[i] - p[i]);
    }
    return sum / (static_cast<double>(mv.count()) * z0.channels());
}

namespace {

struct Draw {
    int timestep;
    Tensor noise;
    Tensor noisy;
};

struct AdamState {
    Matrix m, v;
};

void adam_update(Matrix& param, const Matrix& grad, AdamState& st, double lr, int step) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    if (st.m.size() == 0) {
        st.m = Matrix::Zero(param.rows(), param.cols());
        st.v = Matrix::Zero(param.rows(), param.cols());
    }
    st.m = b1 * st.m + (1 - b1) * grad;
    st.v = b2 * st.v + (1 - b2) * grad.cwiseProduct(grad);
    const double c1 = 1 - std::pow(b1, step);
    const double c2 = 1 - std::pow(b2, step);
    param.array() -= lr * (st.m.array() / c1) / ((st.v.array() / c2).sqrt() + eps);
}

}  // namespace

FinetuneResult finetune_lora(const Backbone& backbone, const Tensor& z0, const Mask& mv, const TextEmbedding& cond,
                             const LoraConfig& config, std::uint64_t seed) {
    OCCMOVE_CHECK(config.steps >= 0, config, "LoRA steps must be >= 0");
    OCCMOVE_CHECK(config.batch >= 1, config, "LoRA batch must be >= 1");
    OCCMOVE_CHECK(config.learning_rate > 0, config, "LoRA learning rate must be positive");
    OCCMOVE_CHECK(mv.space() == MaskSpace::latent && mv.height() == z0.height() && mv.width() == z0.width(), contract,
                  "LoRA loss mask must be a latent mask matching the latent");
    OCCMOVE_CHECK(mv.any(), input, "LoRA loss mask is empty");
    FinetuneResult out;
    out.adapter = backbone.make_lora(config.rank, config.targets, derive_seed(seed, "lora-init"), config.scale);
    if (config.steps > 0) {
        OCCMOVE_CHECK(backbone.supports_lora_training(), unavailable, "backbone '", backbone.info().name,
                      "' cannot train LoRA adapters");
    }

    std::mt19937_64 rng(derive_seed(seed, "lora-draws"));
    const int train_steps = static_cast<int>(backbone.train_alphas().size());
    std::uniform_int_distribution<int> pick(1, train_steps - 1);
    std::vector<Draw> draws;
    for (int b = 0; b < config.batch; ++b) {
        Draw d;
        d.timestep = pick(rng);
        d.noise = gaussian(z0.channels(), z0.height(), z0.width(), rng());
        const double a = backbone.train_alphas()[static_cast<std::size_t>(d.timestep)];
        d.noisy = Tensor(z0.channels(), z0.height(), z0.width());
        for (std::size_t i = 0; i < z0.size(); ++i)
            d.noisy.data()[i] = std::sqrt(a) * z0.data()[i] + std::sqrt(1 - a) * d.noise.data()[i];
        draws.push_back(std::move(d));
    }
    const double denom = static_cast<double>(mv.count()) * z0.channels() * config.batch;
    const auto bits = mv.bits();

    std::vector<AdamState> adam_down(out.adapter.deltas.size()), adam_up(out.adapter.deltas.size());
    HookSet hooks;
    hooks.lora = &out.adapter;
    for (int step = 0; step <= config.steps; ++step) {
        double loss = 0.0;
        std::vector<Matrix> g_down, g_up;
        for (const auto& d : draws) {
            auto upstream_of = [&](const Tensor& pred) {
                Tensor upstream(z0.channels(), z0.height(), z0.width());
                for (int c = 0; c < z0.channels(); ++c) {
                    const auto p = pred.plane(c);
                    const auto n = d.noise.plane(c);
                    auto u = upstream.plane(c);
                    for (std::size_t i = 0; i < p.size(); ++i) {
                        if (!bits[i]) continue;
                        const double r = n[i] - p[i];
                        loss += r * r / denom;
                        u[i] = -2.0 * r / denom;
                    }
                }
                return upstream;
            };
            if (step == config.steps) {
                upstream_of(backbone.predict_noise(d.noisy, d.timestep, &cond, hooks).epsilon);
                continue;
            }
            auto g = backbone.lora_gradient(d.noisy, d.timestep, &cond, hooks, upstream_of);
            if (g_down.empty()) {
                g_down = std::move(g.down);
                g_up = std::move(g.up);
            } else {
                for (std::size_t k = 0; k < g_down.size(); ++k) {
                    g_down[k] += g.down[k];
                    g_up[k] += g.up[k];
                }
            }
        }
        out.loss_trace.push_back(loss);
        if (step == 0) out.initial_loss = loss;
        OCCMOVE_CHECK(std::isfinite(loss) && loss <= 10.0 * out.initial_loss, numeric,
                      "LoRA fine-tuning diverged at step ", step, ": loss ", loss, " vs initial ", out.initial_loss,
                      " (lr ", config.learning_rate, ", rank ", config.rank, ")");
        if (step == config.steps) break;
        for (std::size_t k = 0; k < g_down.size(); ++k) {
            adam_update(out.adapter.deltas[k].down, g_down[k], adam_down[k], config.learning_rate, step + 1);
            adam_update(out.adapter.deltas[k].up, g_up[k], adam_up[k], config.learning_rate, step + 1);
        }
    }
    out.final_loss = out.loss_trace.back();
    return out;
}

int deocclusion_start(const DeoccConfig& config, const NoiseSchedule& schedule) {
    if (!config.color_fill) return schedule.steps();
    OCCMOVE_CHECK(config.t_m >= 1 && config.t_m < schedule.steps(), config, "T_m=", config.t_m,
                  " must lie in 1..T-1 (T=", schedule.steps(), ")");
    return config.t_m;
}

Tensor deocclusion_init(const Backbone& backbone, const InversionCache& cache, const Mask& mv,
                        const DeoccConfig& config, std::uint64_t seed) {
    const int start = deocclusion_start(config, cache.schedule());
    if (config.color_fill)
        return color_fill_init(backbone.codec(), cache.latent(start), mv, derive_seed(seed, "color-fill"), start,
                               cache.schedule());
    return noise_fill_init(cache.latent(start), mv.inverted(), derive_seed(seed, "deocc-noise"));
}

RefinedMap map_from_mask(const Mask& mask, int side, TokenSpan span, int timestep) {
    RefinedMap m;
    m.grid = area_resize(mask_to_tensor(mask), side, side);
    m.span = span;
    m.timestep = timestep;
    return m;
}

CompletedObject run_deocclusion(const Backbone& backbone, const PreparedInput& input, const TextEmbedding& cond,
                                TokenSpan span, const InversionCache& cache, const DeoccConfig& config,
                                const LoRAAdapter* lora, std::uint64_t seed, const DeoccCallback& on_step) {
    const NoiseSchedule& schedule = cache.schedule();
    const Mask& mv = input.visible_latent;
    OCCMOVE_CHECK(config.lambda >= 0, config, "lambda must be >= 0");
    OCCMOVE_CHECK(config.map_side > 0, config, "map side must be positive");
    const int start = deocclusion_start(config, schedule);

    CompletedObject out;
    out.frame = input.frame;
    Tensor z = deocclusion_init(backbone, cache, mv, config, seed);
    Mask guide = dilate(mv, config.dilation);
    const Mask generation = mv.inverted();

    for (int t = start; t >= 0; --t) {
        HookSet hooks;
        hooks.lora = lora;
        hooks.capture_maps = true;
        if (config.attention_guidance) hooks.directives.push_back({RestrictSelfAttention{guide, generation}, {}});
        const auto pred = backbone.predict_noise(z, schedule.timestep(t), &cond, hooks);
        for (const auto& w : pred.report.warnings) out.warnings.push_back("t=" + std::to_string(t) + ": " + w);

        const auto avg = average_maps(*pred.snapshot, config.map_side);
        RefinedMap refined = refine(avg.self, select_token_map(avg.cross, span), config.lambda, config.map_side);
        refined.span = span;
        refined.timestep = t;
        out.maps.push_back(refined);
        if (on_step) on_step(DeoccStepOutput{z, refined, t});

        guide = resample_mask(binarize_map(refined, config.binarize_threshold, config.dilation), mv.height(),
                              mv.width(), MaskSpace::latent);
        if (t > 0) z = latent_hold(ddim_step(z, pred.epsilon, t, schedule), cache.latent(t - 1), mv);
    }

    out.latent = z;
    out.image = backbone.decode_latent(z);
    out.amodal_mask = extract_amodal_mask(out.maps.back(), input.visible_pixel, config.amodal_threshold);
    return out;
}

Mask extract_amodal_mask(const RefinedMap& final_map, const Mask& visible_pixel, double threshold) {
    const Tensor up = bilinear_resize(final_map.grid, visible_pixel.height(), visible_pixel.width());
    return threshold_to_mask(up, threshold, MaskSpace::pixel).united(visible_pixel);
}

}  // namespace occmove
