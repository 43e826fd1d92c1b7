// SPDX-License-Identifier: Apache-2.0

#include "occmove/movement.hpp"

#include <cmath>

namespace occmove {

TargetMask make_target_mask(int gx, int gy, int r_prime, int latent_side, int downsample) {
    OCCMOVE_CHECK(r_prime >= 1 && r_prime <= latent_side, range, "target side ", r_prime, " outside 1..",
                  latent_side);
    OCCMOVE_CHECK(downsample >= 1, config, "downsample must be >= 1");
    const int cx = gx / downsample;
    const int cy = gy / downsample;
    TargetMask q;
    const int x0 = cx - r_prime / 2;
    const int y0 = cy - r_prime / 2;
    const int cx0 = std::clamp(x0, 0, latent_side - r_prime);
    const int cy0 = std::clamp(y0, 0, latent_side - r_prime);
    q.shifted = cx0 != x0 || cy0 != y0;
    q.box = {cx0, cy0, cx0 + r_prime, cy0 + r_prime};
    q.grid = Mask(MaskSpace::latent, latent_side, latent_side);
    for (int y = q.box.y0; y < q.box.y1; ++y)
        for (int x = q.box.x0; x < q.box.x1; ++x) q.grid.set(y, x, true);
    return q;
}

MovementTarget make_movement_target(const DeoccStepOutput& deocc, const Box& box, const Codec& codec,
                                    bool latent_resize, bool masked_l2) {
    const Tensor& z = deocc.z_bar;
    const Tensor up = bilinear_resize(deocc.refined.grid, z.height(), z.width());
    Tensor masked = z;
    for (int c = 0; c < z.channels(); ++c) {
        auto p = masked.plane(c);
        const auto w = up.plane(0);
        for (std::size_t i = 0; i < p.size(); ++i) p[i] *= w[i];
    }
    const int r = box.width();
    OCCMOVE_CHECK(box.height() == r && r >= 1, shape, "target box must be a non-empty square");
    MovementTarget target;
    target.box = box;
    target.object = latent_resize ? l_resize(masked, r, codec) : bilinear_resize(masked, r, r);
    OCCMOVE_CHECK(target.object.channels() == z.channels(), shape, "codec changed the latent channel count");
    if (masked_l2) {
        const Tensor w = bilinear_resize(up, r, r);
        target.weight = Tensor(z.channels(), r, r);
        for (int c = 0; c < z.channels(); ++c)
            for (std::size_t i = 0; i < w.plane_size(); ++i) target.weight.plane(c)[i] = w.plane(0)[i];
    } else {
        target.weight = Tensor(z.channels(), r, r, 1.0);
    }
    return target;
}

LossGrad movement_loss(const Tensor& z_prime, const MovementTarget& target) {
    const Box& b = target.box;
    OCCMOVE_CHECK(b.x0 >= 0 && b.y0 >= 0 && b.x1 <= z_prime.width() && b.y1 <= z_prime.height(), range,
                  "target box exceeds the latent grid");
    const Tensor patch = crop(z_prime, b.y0, b.x0, b.height(), b.width());
    OCCMOVE_CHECK(patch.same_shape(target.object), shape, "target object does not match the box");
    Tensor diff(patch.channels(), patch.height(), patch.width());
    double sq = 0.0;
    for (std::size_t i = 0; i < diff.size(); ++i) {
        const double d = target.weight.data()[i] * (patch.data()[i] - target.object.data()[i]);
        diff.data()[i] = d;
        sq += d * d;
    }
    LossGrad out;
    out.value = std::sqrt(sq);
    out.gradient = Tensor(z_prime.channels(), z_prime.height(), z_prime.width());
    if (out.value > 0.0) {
        for (std::size_t i = 0; i < diff.size(); ++i) diff.data()[i] *= target.weight.data()[i] / out.value;
        paste(out.gradient, diff, b.y0, b.x0);
    }
    return out;
}

OptimizeResult latent_optimize(const Tensor& z_prime, const std::function<LossGrad(const Tensor&)>& loss_fn,
                               double gamma, int iters) {
    OCCMOVE_CHECK(gamma >= 0.0, config, "step size must be >= 0");
    OptimizeResult out;
    out.z = z_prime;
    for (int k = 0; k < iters; ++k) {
        const LossGrad lg = loss_fn(out.z);
        out.losses.push_back(lg.value);
        bool finite = std::isfinite(lg.value);
        for (double g : lg.gradient.data()) finite = finite && std::isfinite(g);
        if (!finite) {
            out.aborted = true;
            out.z = z_prime;
            return out;
        }
        if (gamma == 0.0) continue;
        for (std::size_t i = 0; i < out.z.size(); ++i) out.z.data()[i] -= gamma * lg.gradient.data()[i];
    }
    if (iters > 0) out.losses.push_back(loss_fn(out.z).value);
    return out;
}

Tensor compose_cfg(const Tensor& eps_uncond, const Tensor& eps_cond, const Mask& q, double omega) {
    OCCMOVE_CHECK(eps_uncond.same_shape(eps_cond), shape, "guidance operands differ in shape");
    OCCMOVE_CHECK(q.space() == MaskSpace::latent && q.height() == eps_cond.height() && q.width() == eps_cond.width(),
                  contract, "guidance region must be a latent mask matching the latent");
    Tensor out = eps_uncond;
    const auto bits = q.bits();
    for (int c = 0; c < out.channels(); ++c) {
        auto o = out.plane(c);
        const auto u = eps_uncond.plane(c);
        const auto k = eps_cond.plane(c);
        for (std::size_t i = 0; i < o.size(); ++i)
            if (bits[i]) o[i] = (1.0 - omega) * u[i] + omega * k[i];
    }
    return out;
}

NoisePrediction local_cfg(const Backbone& backbone, const Tensor& z, int timestep, const TextEmbedding& cond,
                          const Mask& q, double omega, const HookSet& hooks) {
    auto u = backbone.predict_noise(z, timestep, nullptr, hooks);
    auto c = backbone.predict_noise(z, timestep, &cond, hooks);
    NoisePrediction out;
    out.epsilon = compose_cfg(u.epsilon, c.epsilon, q, omega);
    out.report = std::move(c.report);
    for (auto& w : u.report.warnings) out.report.warnings.push_back(std::move(w));
    return out;
}

bool optimization_active(int t, int total_steps, double window) {
    const int skip = static_cast<int>(std::lround(total_steps * (1.0 - window) / 2.0));
    return t >= skip && t < total_steps - skip;
}

MoveStepResult run_move_step(const Backbone& backbone, int t, const Tensor& z_next, const DeoccStepOutput& deocc,
                             const InversionCache& cache, const Mask& visible_latent, const TargetMask& q,
                             const TextEmbedding& cond, const MoveConfig& config) {
    OCCMOVE_CHECK(deocc.timestep == t, lockstep, "movement step ", t, " received de-occlusion output for step ",
                  deocc.timestep);
    const NoiseSchedule& schedule = cache.schedule();
    OCCMOVE_CHECK(t >= 0 && t < schedule.steps(), range, "movement step ", t, " outside 0..", schedule.steps() - 1);

    HookSet hooks;
    ReplaceKV kv{cache.kv(t + 1), std::nullopt};
    if (config.background_guidance && visible_latent.any()) kv.background_guidance = visible_latent;
    hooks.directives.push_back({kv, {}});

    const int tau = schedule.timestep(t + 1);
    const NoisePrediction pred = config.local_text_guidance
                                     ? local_cfg(backbone, z_next, tau, cond, q.grid, config.omega, hooks)
                                     : backbone.predict_noise(z_next, tau, &cond, hooks);
    MoveStepResult out;
    out.warnings = pred.report.warnings;
    out.z = ddim_step(z_next, pred.epsilon, t + 1, schedule);

    if (config.gamma > 0.0 && config.opt_iters > 0 && optimization_active(t, schedule.steps(), config.opt_window)) {
        const MovementTarget target =
            make_movement_target(deocc, q.box, backbone.codec(), config.latent_resize, config.masked_l2);
        auto res = latent_optimize(
            out.z, [&](const Tensor& z) { return movement_loss(z, target); }, config.gamma, config.opt_iters);
        if (res.aborted) out.warnings.push_back("t=" + std::to_string(t) + ": non-finite gradient, step kept");
        out.z = std::move(res.z);
        out.losses = std::move(res.losses);
        out.optimized = true;
    }
    return out;
}

}  // namespace occmove
