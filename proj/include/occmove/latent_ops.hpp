// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "occmove/backbone.hpp"

namespace occmove {

/// Deterministic DDIM update from level `t` (z_next) to level t-1.
Tensor ddim_step(const Tensor& z_next, const Tensor& eps, int t, const NoiseSchedule& schedule);

/// Inverse update from level t-1 to level t with the given noise estimate.
Tensor ddim_inversion_step(const Tensor& z_prev, const Tensor& eps, int t, const NoiseSchedule& schedule);

struct InversionOptions {
    bool capture_kv = false;
    /// Fixed-point refinements per step: the noise estimate for level t is
    /// re-evaluated at the current guess of z_t. 0 gives plain DDIM inversion.
    int refine_iters = 8;
    double refine_tolerance = 1e-12;
    const LoRAAdapter* lora = nullptr;
};

/// Inverted latents for levels 0..T plus, optionally, the self-attention
/// keys/values of the forward pass at (z_t, t) for levels 1..T.
class InversionCache {
public:
    explicit InversionCache(NoiseSchedule schedule) : m_schedule(std::move(schedule)) {}

    const NoiseSchedule& schedule() const noexcept { return m_schedule; }
    int steps() const noexcept { return m_schedule.steps(); }

    const Tensor& latent(int level) const;
    bool has_kv() const noexcept { return !m_kv.empty(); }
    /// Throws `contract` if keys/values were not captured for `level`.
    std::shared_ptr<const KVStore> kv(int level) const;

    std::string prompt_fingerprint;
    std::uint64_t seed = 0;
    int refine_iters = 0;

    void save(const std::filesystem::path& dir) const;
    static InversionCache load(const std::filesystem::path& dir);

private:
    friend InversionCache ddim_invert(const Backbone&, const Tensor&, const TextEmbedding&, const NoiseSchedule&,
                                      const InversionOptions&);

    NoiseSchedule m_schedule;
    std::vector<Tensor> m_latents;                       // index = level
    std::vector<std::shared_ptr<const KVStore>> m_kv;    // index = level, [0] unused
};

InversionCache ddim_invert(const Backbone& backbone, const Tensor& z0, const TextEmbedding& cond,
                           const NoiseSchedule& schedule, const InversionOptions& options = {});

/// Runs the sampler from level `from` down to 0 with the conditional prediction.
Tensor ddim_sample(const Backbone& backbone, const Tensor& z_from, int from, const TextEmbedding& cond,
                   const NoiseSchedule& schedule, const LoRAAdapter* lora = nullptr);

/// out = z_prime where mv is 0, z_inv where mv is 1.
Tensor latent_hold(const Tensor& z_prime, const Tensor& z_inv, const Mask& mv);

/// sqrt(alpha_t) z + sqrt(1 - alpha_t) eps with eps ~ N(0, 1) drawn from `seed`.
Tensor forward_noise(const Tensor& z, int t, std::uint64_t seed, const NoiseSchedule& schedule);

/// Seeded flat RGB color in [0, 1).
std::array<double, 3> fill_color(std::uint64_t seed);

/// Encoded flat-color image at `t_m`, held to z_inv inside the visible mask.
Tensor color_fill_init(const Codec& codec, const Tensor& z_inv_tm, const Mask& mv, std::uint64_t seed, int t_m,
                       const NoiseSchedule& schedule);

/// Seeded unit Gaussian inside mv, z_inv_T outside.
Tensor noise_fill_init(const Tensor& z_inv_T, const Mask& mv, std::uint64_t seed);

/// Decode, bilinear-resize to r_prime * downsample pixels, re-encode.
Tensor l_resize(const Tensor& z, int r_prime, const Codec& codec);

/// Pixel mask -> latent mask by area downsampling and a 0.5 threshold.
Mask to_latent_mask(const Mask& pixel_mask, int latent_side);

}  // namespace occmove
