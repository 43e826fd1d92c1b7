// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <memory>
#include <vector>

#include "occmove/backbone.hpp"

namespace occmove {

struct ToyBackboneOptions {
    std::uint64_t seed = 0;
    int codec_factor = 1;  // 1: identity-style RGB codec at 64x64; 8: 512-pixel images
    int latent_side = 64;
    int head_dim = 8;
    int text_dim = 16;
    int token_limit = 77;
    /// Strength of the latent-dependent (attention) part of the prediction.
    double response_gain = 0.1;
};

/// Deterministic stand-in for a latent-diffusion U-Net.
///
/// epsilon(z, t, c) = base(t, c) + gain * sum_l up(tanh(W_r h3_l)), where each
/// attention level l average-pools z, embeds it with the timestep, and runs a
/// residual self-attention block followed by a cross-attention block over the
/// prompt tokens. Levels: "down" (1/2), "mid" (1/4), "up" (1/2, decoder).
/// A pixel's prediction depends only on the pooled cells covering it plus the
/// attention keys/values, so key/value replacement localizes the dependence.
class ToyBackbone final : public Backbone {
public:
    explicit ToyBackbone(ToyBackboneOptions options = {});
    ~ToyBackbone() override;

    const BackboneInfo& info() const override { return m_info; }
    const Codec& codec() const override { return m_codec; }
    const std::vector<double>& train_alphas() const override { return m_train_alphas; }
    std::vector<LayerInfo> layers() const override;
    std::vector<ProjectionInfo> projections() const override;

    TextEmbedding embed_prompt(std::string_view prompt) const override;
    TextEmbedding null_embedding() const override;

    NoisePrediction predict_noise(const Tensor& z, int timestep, const TextEmbedding* cond,
                                  const HookSet& hooks) const override;

    bool supports_lora_training() const override { return true; }
    using Backbone::lora_gradient;
    LoRAGradient lora_gradient(const Tensor& z, int timestep, const TextEmbedding* cond, const HookSet& hooks,
                               const UpstreamFn& upstream_fn) const override;

    const ToyBackboneOptions& options() const noexcept { return m_options; }

    /// Self-attention queries of every level for (z, t, cond, hooks); for
    /// offline recomputation of injected attention in tests and diagnostics.
    std::map<std::string, Matrix> self_queries(const Tensor& z, int timestep, const TextEmbedding* cond,
                                               const HookSet& hooks) const;

    /// Radius (in latent cells) of the pooled neighbourhood a prediction reads.
    int receptive_cell() const noexcept { return 4; }

    struct Level;

private:
    struct Forward;
    Forward run(const Tensor& z, int timestep, const TextEmbedding& cond, const HookSet& hooks, bool keep) const;
    TextEmbedding embed_words(const std::string& prompt, const std::vector<std::string>& words) const;
    Matrix token_vector(int id, int position) const;

    ToyBackboneOptions m_options;
    BackboneInfo m_info;
    ToyCodec m_codec;
    std::vector<double> m_train_alphas;
    std::vector<Level> m_levels;
    Matrix m_cond_proj;      // 4 x text_dim
    Matrix m_base_freq;      // 4 x 4: fy, fx, phase, time rate
};

}  // namespace occmove
