// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "occmove/deocclusion.hpp"

namespace occmove {

/// Square target region in latent cells, shifted inside the grid if needed.
struct TargetMask {
    Mask grid;  // latent space, exactly the box set
    Box box;    // latent cells
    bool shifted = false;
};

/// Box of side `r_prime` cells centred on the latent cell under pixel point (gx, gy).
TargetMask make_target_mask(int gx, int gy, int r_prime, int latent_side, int downsample);

struct MoveConfig {
    int gx = 0;  // target point g, pixels of the normalized image
    int gy = 0;
    int r_prime = 1;  // ceil(r / downsample)
    double gamma = 0.1;
    double omega = 7.5;
    int opt_iters = 3;
    double opt_window = 0.6;  // middle fraction of steps with optimization
    bool latent_resize = true;         // LR: L-Resize vs raw latent bilinear
    bool local_text_guidance = true;   // LTG: Q-masked CFG vs global conditional
    bool background_guidance = true;   // hide object keys during key/value replacement
    bool masked_l2 = false;            // weight the distance by the resized map
};

/// Precomputed right-hand side of the movement loss for one step.
struct MovementTarget {
    Tensor object;   // resized masked object, r' x r'
    Tensor weight;   // per-cell weight (all ones unless masked_l2)
    Box box;
};

MovementTarget make_movement_target(const DeoccStepOutput& deocc, const Box& box, const Codec& codec,
                                    bool latent_resize, bool masked_l2);

struct LossGrad {
    double value = 0.0;
    Tensor gradient;  // same shape as z'
};

/// ||Crop(z', box) - target||_2 and its gradient with respect to z'.
LossGrad movement_loss(const Tensor& z_prime, const MovementTarget& target);

struct OptimizeResult {
    Tensor z;
    std::vector<double> losses;  // before each iteration, then after the last
    bool aborted = false;
};

OptimizeResult latent_optimize(const Tensor& z_prime, const std::function<LossGrad(const Tensor&)>& loss_fn,
                               double gamma, int iters);

/// eps_u outside Q; (1 - omega) eps_u + omega eps_c inside Q.
Tensor compose_cfg(const Tensor& eps_uncond, const Tensor& eps_cond, const Mask& q, double omega);

NoisePrediction local_cfg(const Backbone& backbone, const Tensor& z, int timestep, const TextEmbedding& cond,
                          const Mask& q, double omega, const HookSet& hooks);

/// Whether latent optimization runs at movement step t (level t+1 -> t).
bool optimization_active(int t, int total_steps, double window);

struct MoveStepResult {
    Tensor z;
    std::vector<double> losses;
    bool optimized = false;
    std::vector<std::string> warnings;
};

/// One movement step: level t+1 -> t.
MoveStepResult run_move_step(const Backbone& backbone, int t, const Tensor& z_next, const DeoccStepOutput& deocc,
                             const InversionCache& cache, const Mask& visible_latent, const TargetMask& q,
                             const TextEmbedding& cond, const MoveConfig& config);

}  // namespace occmove
