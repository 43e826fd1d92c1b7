// SPDX-License-Identifier: Apache-2.0

#include "occmove/latent_ops.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdio>
#include <random>

#include "occmove/io.hpp"
#include "occmove/seed.hpp"

namespace occmove {

namespace {

void check_level(int t, const NoiseSchedule& schedule) {
    OCCMOVE_CHECK(t >= 1 && t <= schedule.steps(), range, "step level ", t, " outside 1..", schedule.steps());
}

// Moves z from level `from` to level `to` along the deterministic trajectory of `eps`.
Tensor reproject(const Tensor& z, const Tensor& eps, int from, int to, const NoiseSchedule& schedule) {
    OCCMOVE_CHECK(z.same_shape(eps), shape, "noise estimate does not match the latent shape");
    const double a_from = schedule.signal(from);
    const double s_from = schedule.noise(from);
    const double a_to = schedule.signal(to);
    const double s_to = schedule.noise(to);
    Tensor out(z.channels(), z.height(), z.width());
    auto o = out.data();
    const auto zv = z.data();
    const auto ev = eps.data();
    for (std::size_t i = 0; i < o.size(); ++i) {
        const double x0 = (zv[i] - s_from * ev[i]) / a_from;
        o[i] = a_to * x0 + s_to * ev[i];
    }
    return out;
}

void check_latent_mask(const Tensor& z, const Mask& m) {
    OCCMOVE_CHECK(m.space() == MaskSpace::latent, contract, "expected a latent-space mask, got a pixel mask");
    OCCMOVE_CHECK(m.height() == z.height() && m.width() == z.width(), shape, "mask ", m.height(), "x", m.width(),
                  " does not match latent ", z.height(), "x", z.width());
}

std::string level_name(const char* prefix, int level) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s%03d", prefix, level);
    return buf;
}

}  // namespace

Tensor ddim_step(const Tensor& z_next, const Tensor& eps, int t, const NoiseSchedule& schedule) {
    check_level(t, schedule);
    return reproject(z_next, eps, t, t - 1, schedule);
}

Tensor ddim_inversion_step(const Tensor& z_prev, const Tensor& eps, int t, const NoiseSchedule& schedule) {
    check_level(t, schedule);
    return reproject(z_prev, eps, t - 1, t, schedule);
}

const Tensor& InversionCache::latent(int level) const {
    OCCMOVE_CHECK(level >= 0 && level < static_cast<int>(m_latents.size()), range, "inversion cache has no level ",
                  level);
    return m_latents[static_cast<std::size_t>(level)];
}

std::shared_ptr<const KVStore> InversionCache::kv(int level) const {
    OCCMOVE_CHECK(has_kv(), contract, "inversion cache was built without key/value capture");
    OCCMOVE_CHECK(level >= 1 && level < static_cast<int>(m_kv.size()) && m_kv[static_cast<std::size_t>(level)],
                  contract, "inversion cache has no keys/values for level ", level);
    return m_kv[static_cast<std::size_t>(level)];
}

InversionCache ddim_invert(const Backbone& backbone, const Tensor& z0, const TextEmbedding& cond,
                           const NoiseSchedule& schedule, const InversionOptions& options) {
    OCCMOVE_CHECK(schedule.steps() >= 2, config, "inversion needs T >= 2");
    OCCMOVE_CHECK(options.refine_iters >= 0, config, "refine_iters must be >= 0");
    InversionCache cache(schedule);
    cache.refine_iters = options.refine_iters;
    cache.prompt_fingerprint = io::fingerprint(backbone.info().fingerprint + "|" + cond.prompt);
    cache.m_latents.push_back(z0);
    if (options.capture_kv) cache.m_kv.emplace_back();

    HookSet plain;
    plain.lora = options.lora;
    for (int t = 1; t <= schedule.steps(); ++t) {
        const Tensor& prev = cache.m_latents.back();
        const int tau = schedule.timestep(t);
        Tensor z = ddim_inversion_step(prev, backbone.predict_noise(prev, tau, &cond, plain).epsilon, t, schedule);
        for (int i = 0; i < options.refine_iters; ++i) {
            Tensor next = ddim_inversion_step(prev, backbone.predict_noise(z, tau, &cond, plain).epsilon, t, schedule);
            const double change = max_abs_diff(next, z);
            z = std::move(next);
            if (change <= options.refine_tolerance) break;
        }
        if (options.capture_kv) {
            HookSet capture = plain;
            capture.capture_kv = true;
            auto pred = backbone.predict_noise(z, tau, &cond, capture);
            cache.m_kv.push_back(std::make_shared<const KVStore>(std::move(*pred.kv)));
        }
        cache.m_latents.push_back(std::move(z));
    }
    return cache;
}

Tensor ddim_sample(const Backbone& backbone, const Tensor& z_from, int from, const TextEmbedding& cond,
                   const NoiseSchedule& schedule, const LoRAAdapter* lora) {
    OCCMOVE_CHECK(from >= 0 && from <= schedule.steps(), range, "start level ", from, " outside schedule");
    HookSet hooks;
    hooks.lora = lora;
    Tensor z = z_from;
    for (int t = from; t >= 1; --t) {
        const auto eps = backbone.predict_noise(z, schedule.timestep(t), &cond, hooks).epsilon;
        z = ddim_step(z, eps, t, schedule);
    }
    return z;
}

void InversionCache::save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    nlohmann::json levels = nlohmann::json::array();
    for (std::size_t k = 0; k < m_latents.size(); ++k) {
        const int level = static_cast<int>(k);
        nlohmann::json entry{{"level", level}, {"timestep", m_schedule.timestep(level)}};
        const auto name = level_name("latent_", level) + ".npy";
        io::write_npy(dir / name, m_latents[k]);
        entry["latent"] = name;
        if (has_kv() && k >= 1) {
            nlohmann::json layers = nlohmann::json::object();
            for (const auto& [layer, kv] : *m_kv[k]) {
                const auto base = level_name("kv_", level) + "_" + layer;
                io::write_matrix(dir / (base + ".k.npy"), kv.keys);
                io::write_matrix(dir / (base + ".v.npy"), kv.values);
                layers[layer] = {{"keys", base + ".k.npy"}, {"values", base + ".v.npy"}};
            }
            entry["kv"] = layers;
        }
        levels.push_back(entry);
    }
    nlohmann::json manifest{{"format", "npy-v1 <f8"},
                            {"prompt_fingerprint", prompt_fingerprint},
                            {"seed", seed},
                            {"refine_iters", refine_iters},
                            {"alphas", m_schedule.alphas()},
                            {"timesteps", m_schedule.timesteps()},
                            {"has_kv", has_kv()},
                            {"levels", levels}};
    io::write_text(dir / "manifest.json", manifest.dump(2));
}

InversionCache InversionCache::load(const std::filesystem::path& dir) {
    const auto j = nlohmann::json::parse(io::read_text(dir / "manifest.json"));
    InversionCache cache(
        NoiseSchedule(j.at("alphas").get<std::vector<double>>(), j.at("timesteps").get<std::vector<int>>()));
    cache.prompt_fingerprint = j.at("prompt_fingerprint").get<std::string>();
    cache.seed = j.at("seed").get<std::uint64_t>();
    cache.refine_iters = j.at("refine_iters").get<int>();
    const bool kv = j.at("has_kv").get<bool>();
    if (kv) cache.m_kv.emplace_back();
    for (const auto& entry : j.at("levels")) {
        cache.m_latents.push_back(io::read_npy(dir / entry.at("latent").get<std::string>()));
        if (kv && entry.at("level").get<int>() >= 1) {
            KVStore store;
            for (const auto& [layer, files] : entry.at("kv").items()) {
                store[layer] = {io::read_matrix(dir / files.at("keys").get<std::string>()),
                                io::read_matrix(dir / files.at("values").get<std::string>())};
            }
            cache.m_kv.push_back(std::make_shared<const KVStore>(std::move(store)));
        }
    }
    OCCMOVE_CHECK(static_cast<int>(cache.m_latents.size()) == cache.steps() + 1, io,
                  "inversion cache at ", dir.string(), " is incomplete");
    return cache;
}

Tensor latent_hold(const Tensor& z_prime, const Tensor& z_inv, const Mask& mv) {
    OCCMOVE_CHECK(z_prime.same_shape(z_inv), shape, "latent_hold operands differ in shape");
    check_latent_mask(z_prime, mv);
    Tensor out = z_prime;
    const auto bits = mv.bits();
    for (int c = 0; c < out.channels(); ++c) {
        auto o = out.plane(c);
        const auto src = z_inv.plane(c);
        for (std::size_t i = 0; i < o.size(); ++i)
            if (bits[i]) o[i] = src[i];
    }
    return out;
}

Tensor forward_noise(const Tensor& z, int t, std::uint64_t seed, const NoiseSchedule& schedule) {
    const double a = schedule.signal(t);
    const double s = schedule.noise(t);
    if (t == 0) return z;
    const Tensor eps = gaussian(z.channels(), z.height(), z.width(), seed);
    Tensor out(z.channels(), z.height(), z.width());
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = a * z.data()[i] + s * eps.data()[i];
    return out;
}

std::array<double, 3> fill_color(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    std::array<double, 3> rgb{};
    for (auto& v : rgb) v = uni(rng);
    return rgb;
}

Tensor color_fill_init(const Codec& codec, const Tensor& z_inv_tm, const Mask& mv, std::uint64_t seed, int t_m,
                       const NoiseSchedule& schedule) {
    OCCMOVE_CHECK(t_m >= 0 && t_m < schedule.steps(), range, "T_m=", t_m, " must be below T=", schedule.steps());
    check_latent_mask(z_inv_tm, mv);
    const auto rgb = fill_color(derive_seed(seed, "color"));
    const int f = codec.downsample();
    Tensor flat(codec.image_channels(), z_inv_tm.height() * f, z_inv_tm.width() * f);
    for (int c = 0; c < flat.channels(); ++c)
        for (auto& v : flat.plane(c)) v = rgb[static_cast<std::size_t>(c % 3)];
    const Tensor j = forward_noise(codec.encode(flat), t_m, derive_seed(seed, "color-noise"), schedule);
    return latent_hold(j, z_inv_tm, mv);
}

Tensor noise_fill_init(const Tensor& z_inv_T, const Mask& mv, std::uint64_t seed) {
    check_latent_mask(z_inv_T, mv);
    const Tensor eps = gaussian(z_inv_T.channels(), z_inv_T.height(), z_inv_T.width(), seed);
    return latent_hold(z_inv_T, eps, mv);
}

Tensor l_resize(const Tensor& z, int r_prime, const Codec& codec) {
    OCCMOVE_CHECK(r_prime >= 1, range, "target side must be >= 1");
    const int f = codec.downsample();
    const Tensor pixels = codec.decode(z);
    return codec.encode(bilinear_resize(pixels, r_prime * f, r_prime * f));
}

Mask to_latent_mask(const Mask& pixel_mask, int latent_side) {
    return resample_mask(pixel_mask, latent_side, latent_side, MaskSpace::latent);
}

}  // namespace occmove
