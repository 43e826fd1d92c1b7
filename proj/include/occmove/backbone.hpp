// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "occmove/attention.hpp"
#include "occmove/tensor.hpp"

namespace occmove {

/// Discretized DDIM ladder. Level 0 is the clean latent (signal 1); level k in
/// 1..T maps to training timestep `timesteps[k]`.
class NoiseSchedule {
public:
    /// Scaled-linear betas (the latent-diffusion default) over `train_steps`.
    static std::vector<double> scaled_linear_alphas(int train_steps = 1000, double beta_start = 0.00085,
                                                    double beta_end = 0.012);

    /// Samples `steps` levels from the training alphas with trailing spacing.
    NoiseSchedule(int steps, const std::vector<double>& train_alphas);

    /// Explicit per-level cumulative alphas (level 0 first) and timestep labels.
    NoiseSchedule(std::vector<double> level_alphas, std::vector<int> timesteps);

    int steps() const noexcept { return static_cast<int>(m_alphas.size()) - 1; }
    double alpha(int level) const;
    double signal(int level) const;  // sqrt(alpha)
    double noise(int level) const;   // sqrt(1 - alpha)
    int timestep(int level) const;
    const std::vector<double>& alphas() const noexcept { return m_alphas; }
    const std::vector<int>& timesteps() const noexcept { return m_timesteps; }

private:
    void validate() const;

    std::vector<double> m_alphas;
    std::vector<int> m_timesteps;
};

/// Image <-> latent transform. Pixel-space side = latent side * downsample().
class Codec {
public:
    virtual ~Codec() = default;
    virtual std::string name() const = 0;
    virtual int downsample() const = 0;
    virtual int latent_channels() const = 0;
    virtual int image_channels() const = 0;
    virtual Tensor encode(const Tensor& image) const = 0;
    virtual Tensor decode(const Tensor& latent) const = 0;
};

/// Pixels are latents: no downsampling, channel count passed through unchanged.
class IdentityCodec final : public Codec {
public:
    explicit IdentityCodec(int channels = 4) : m_channels(channels) {}
    std::string name() const override { return "identity"; }
    int downsample() const override { return 1; }
    int latent_channels() const override { return m_channels; }
    int image_channels() const override { return m_channels; }
    Tensor encode(const Tensor& image) const override;
    Tensor decode(const Tensor& latent) const override;

private:
    int m_channels;
};

/// RGB <-> 4-channel codec for the toy backbone. Channels 0..2 carry the RGB
/// values unchanged, channel 3 the mean intensity; `factor` > 1 averages
/// factor x factor blocks and decodes by nearest upsampling.
class ToyCodec final : public Codec {
public:
    explicit ToyCodec(int factor = 1) : m_factor(factor) {}
    std::string name() const override { return "toy-rgb" + std::to_string(m_factor); }
    int downsample() const override { return m_factor; }
    int latent_channels() const override { return 4; }
    int image_channels() const override { return 3; }
    Tensor encode(const Tensor& image) const override;
    Tensor decode(const Tensor& latent) const override;

private:
    int m_factor;
};

struct WordSpan {
    std::string word;
    TokenSpan tokens;
};

struct TextEmbedding {
    std::string prompt;
    std::vector<int> tokens;
    Matrix embedding;  // tokens x text_dim
    std::vector<WordSpan> token_spans;
    bool truncated = false;
    std::vector<std::string> dropped_words;

    int token_count() const noexcept { return static_cast<int>(tokens.size()); }

    /// Token range of the last occurrence of `phrase` (word sequence) in the prompt.
    std::optional<TokenSpan> find_span(std::string_view phrase) const;
};

/// Splits a prompt into lowercase words the way the toy tokenizer does.
std::vector<std::string> split_words(std::string_view text);

/// Low-rank update W' = W + scale * up * down for one attention projection.
struct LoRADelta {
    std::string target;  // "<layer>.<attn1|attn2>.<to_q|to_k|to_v|to_out>"
    Matrix down;         // rank x in
    Matrix up;           // out x rank
};

struct LoRAAdapter {
    int rank = 0;
    double scale = 1.0;
    std::vector<std::string> target_layers;
    std::vector<LoRADelta> deltas;

    const LoRADelta* find(std::string_view target) const;
    std::size_t parameter_count() const;

    void save(const std::filesystem::path& dir) const;
    static LoRAAdapter load(const std::filesystem::path& dir);
};

/// Gradient of a scalar objective with respect to every LoRA factor, in
/// adapter delta order.
struct LoRAGradient {
    std::vector<Matrix> down;
    std::vector<Matrix> up;
    Tensor epsilon;  // prediction the gradient was taken at
};

/// Maps a prediction to d(objective)/d(epsilon).
using UpstreamFn = std::function<Tensor(const Tensor& epsilon)>;

struct HookSet {
    bool capture_maps = false;
    bool capture_kv = false;
    std::vector<InjectionDirective> directives;
    const LoRAAdapter* lora = nullptr;
};

struct NoisePrediction {
    Tensor epsilon;
    std::optional<AttentionSnapshot> snapshot;
    std::optional<KVStore> kv;
    HookReport report;
};

struct LayerInfo {
    std::string id;
    int downsample = 1;  // layer side = latent side / downsample
    bool decoder = false;
    int head_dim = 0;
};

struct ProjectionInfo {
    std::string target;
    int in = 0;
    int out = 0;
};

struct BackboneInfo {
    std::string name;
    int latent_channels = 4;
    int latent_downsample = 8;
    int native_side = 512;
    int text_token_limit = 77;
    int train_steps = 1000;
    std::string fingerprint;

    int native_latent_side() const noexcept { return native_side / latent_downsample; }
};

/// Uniform interface over a latent-diffusion backbone. Implementations are
/// reentrant for inference: all hook state lives in the per-call HookSet.
class Backbone {
public:
    virtual ~Backbone() = default;

    virtual const BackboneInfo& info() const = 0;
    virtual const Codec& codec() const = 0;
    virtual const std::vector<double>& train_alphas() const = 0;
    virtual std::vector<LayerInfo> layers() const = 0;
    virtual std::vector<ProjectionInfo> projections() const = 0;

    Tensor encode_image(const Tensor& image) const;
    Tensor decode_latent(const Tensor& latent) const;

    virtual TextEmbedding embed_prompt(std::string_view prompt) const = 0;
    virtual TextEmbedding null_embedding() const = 0;

    /// `cond == nullptr` gives the unconditional prediction.
    virtual NoisePrediction predict_noise(const Tensor& z, int timestep, const TextEmbedding* cond,
                                          const HookSet& hooks) const = 0;

    virtual bool supports_lora_training() const { return false; }

    /// Gradient of <upstream, epsilon(z, t, cond)> with respect to the factors of `*hooks.lora`.
    LoRAGradient lora_gradient(const Tensor& z, int timestep, const TextEmbedding* cond, const HookSet& hooks,
                               const Tensor& upstream) const;

    /// Same, with the upstream gradient computed from the prediction of the same pass.
    virtual LoRAGradient lora_gradient(const Tensor& z, int timestep, const TextEmbedding* cond,
                                       const HookSet& hooks, const UpstreamFn& upstream) const;

    NoiseSchedule make_schedule(int steps) const { return NoiseSchedule(steps, train_alphas()); }

    /// Zero-initialized `up` factors and seeded `down` factors (standard LoRA init).
    LoRAAdapter make_lora(int rank, const std::vector<std::string>& targets, std::uint64_t seed,
                          double scale = 1.0) const;
};

/// Which backbone to instantiate.
struct BackboneSelection {
    std::string kind = "toy";  // toy | pretrained
    std::filesystem::path checkpoint;
    std::uint64_t seed = 0;
    int toy_codec_factor = 1;
};

std::shared_ptr<const Backbone> load_backbone(const BackboneSelection& selection);

/// Writes every captured map as .npy plus an index.json describing the files.
void export_snapshot(const std::filesystem::path& dir, const AttentionSnapshot& snapshot);
AttentionSnapshot import_snapshot(const std::filesystem::path& dir);

}  // namespace occmove
