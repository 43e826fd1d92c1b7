// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "occmove/latent_ops.hpp"

namespace occmove {

/// Object-centred square crop of the (normalized) source image.
struct CropFrame {
    int center_x = 0;  // b, pixels
    int center_y = 0;
    int tight_side = 0;  // r-hat
    double relax = 1.0;  // eta
    int side = 0;        // r = round(eta * r-hat)
    int source_height = 0;
    int source_width = 0;
    Box window;  // in source pixels; may extend past the image
    int pad_top = 0;
    int pad_bottom = 0;
    int pad_left = 0;
    int pad_right = 0;
    int output_side = 0;  // native side the crop is resized to

    bool padded() const noexcept { return pad_top + pad_bottom + pad_left + pad_right > 0; }
};

struct PreparedInput {
    Tensor image;          // crop resized to output_side (3 channels)
    Mask visible_pixel;    // visible mask at output_side, pixel space
    Mask visible_latent;   // M-bar_v at latent side
    CropFrame frame;
};

CropFrame make_crop_frame(const Mask& visible, double relax, int output_side);

/// Crops (reflect-padding on overflow) and resizes the image and mask.
PreparedInput prepare_input(const Tensor& image, const Mask& visible, double relax, int output_side, int latent_side);

struct LoraConfig {
    int rank = 16;
    int steps = 80;
    double learning_rate = 2e-4;
    int batch = 2;  // fixed (timestep, noise) draws averaged per step
    double scale = 1.0;
    std::vector<std::string> targets;  // empty: every attention projection
};

struct FinetuneResult {
    LoRAAdapter adapter;
    std::vector<double> loss_trace;  // batch loss before each update, then the final loss
    double initial_loss = 0.0;
    double final_loss = 0.0;
};

/// Mean squared error between drawn and predicted noise over the masked cells.
double masked_diffusion_loss(const Backbone& backbone, const Tensor& z0, const Mask& mv, const TextEmbedding& cond,
                             const LoRAAdapter* lora, int train_timestep, const Tensor& noise);

/// Fits a LoRA with Adam on the masked diffusion loss. Throws `numeric` when
/// the loss exceeds ten times its initial value.
FinetuneResult finetune_lora(const Backbone& backbone, const Tensor& z0, const Mask& mv, const TextEmbedding& cond,
                             const LoraConfig& config, std::uint64_t seed);

struct DeoccConfig {
    int t_m = 8;
    int lambda = 2;
    int map_side = 32;
    double binarize_threshold = 0.5;
    int dilation = 1;
    double amodal_threshold = 0.5;
    bool color_fill = true;           // off: noise fill at T
    bool attention_guidance = true;   // self-attention restriction
};

struct DeoccStepOutput {
    Tensor z_bar;  // latent-held latent at this level
    RefinedMap refined;
    int timestep = 0;  // schedule level
};

struct CompletedObject {
    Tensor image;      // decoded Z-bar_0 at the crop's output side
    Tensor latent;     // Z-bar_0
    Mask amodal_mask;  // pixel space, output side
    CropFrame frame;
    std::vector<RefinedMap> maps;  // one per level, decreasing
    std::vector<std::string> warnings;
};

using DeoccCallback = std::function<void(const DeoccStepOutput&)>;

/// First level the branch emits: T_m with color fill, T without.
int deocclusion_start(const DeoccConfig& config, const NoiseSchedule& schedule);

/// Initial latent at the start level (color fill at T_m or noise fill at T).
Tensor deocclusion_init(const Backbone& backbone, const InversionCache& cache, const Mask& mv,
                        const DeoccConfig& config, std::uint64_t seed);

CompletedObject run_deocclusion(const Backbone& backbone, const PreparedInput& input, const TextEmbedding& cond,
                                TokenSpan span, const InversionCache& cache, const DeoccConfig& config,
                                const LoRAAdapter* lora, std::uint64_t seed, const DeoccCallback& on_step);

/// Bilinear upsample of the final map to the crop's output side, threshold,
/// union with the visible mask.
Mask extract_amodal_mask(const RefinedMap& final_map, const Mask& visible_pixel, double threshold = 0.5);

/// Refined map on a latent mask, resampled to `side` (used before the first map exists).
RefinedMap map_from_mask(const Mask& mask, int side, TokenSpan span, int timestep);

}  // namespace occmove
