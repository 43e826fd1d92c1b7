// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "occmove/tensor.hpp"

namespace occmove {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Softmax attention maps captured at one attention layer. Rows index query
/// pixels in row-major order of a side x side grid.
struct LayerMaps {
    std::string layer;
    int side = 0;
    bool decoder = false;
    Matrix cross;  // side^2 x tokens
    Matrix self;   // side^2 x side^2
};

struct AttentionSnapshot {
    std::vector<LayerMaps> layers;
    int head_dim = 0;
    int tokens = 0;

    bool empty() const noexcept { return layers.empty(); }
};

/// Self-attention keys and values of every layer for one latent level.
struct LayerKV {
    Matrix keys;
    Matrix values;
};
using KVStore = std::map<std::string, LayerKV>;

struct TokenSpan {
    int begin = 0;
    int end = 0;  // exclusive

    int size() const noexcept { return end - begin; }
};

/// Refined cross-attention map for the target token(s): max-normalized, in [0, 1].
struct RefinedMap {
    Tensor grid;  // (1, side, side)
    TokenSpan span;
    int timestep = 0;

    int side() const noexcept { return grid.height(); }
};

/// Queries inside `query_region` may only attend to keys where `permitted` is set.
struct RestrictSelfAttention {
    Mask permitted;     // binarized guidance map (any resolution, resampled per layer)
    Mask query_region;  // generation region, i.e. outside the visible mask
};

/// Self-attention keys/values come from `source` instead of the current latent.
/// When `background_guidance` is set, keys inside that mask are hidden so
/// queries retrieve background content only.
struct ReplaceKV {
    std::shared_ptr<const KVStore> source;
    std::optional<Mask> background_guidance;
};

struct InjectionDirective {
    std::variant<RestrictSelfAttention, ReplaceKV> payload;
    std::vector<std::string> layers;  // empty: the default scope for the kind
};

/// Per-call warnings raised while applying hooks (degenerate guidance etc.).
struct HookReport {
    std::vector<std::string> warnings;
};

/// Additive logit used for forbidden keys; exp() of it underflows to exactly 0.
inline constexpr double masked_logit = -1e9;

/// Row-wise softmax of `logits`; entries where `allowed(i, j)` is false receive
/// `masked_logit` before normalization.
Matrix masked_softmax(const Matrix& logits, const Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>& allowed);
Matrix softmax_rows(const Matrix& logits);

/// Resamples a snapshot layer to `side` on every spatial axis. Rows of the
/// self map are renormalized after key-axis resampling.
LayerMaps resample_layer(const LayerMaps& layer, int side);

struct AveragedMaps {
    Matrix cross;  // side^2 x tokens
    Matrix self;   // side^2 x side^2
    int side = 0;
};

/// Arithmetic mean of cross/self maps over all layers at `side` resolution.
AveragedMaps average_maps(const AttentionSnapshot& snapshot, int side = 32);

/// Mean over the span's token columns.
Vector select_token_map(const Matrix& avg_cross, TokenSpan span);

/// R = (A_s)^lambda * a, max-normalized to [0, 1].
RefinedMap refine(const Matrix& avg_self, const Vector& token_map, int lambda, int side);

/// Binarizes at `threshold` of the max-normalized map, then dilates by `dilation` cells.
Mask binarize_map(const RefinedMap& map, double threshold = 0.5, int dilation = 1);

/// Writes per-step refined maps as grayscale PNGs plus a JSON time series.
void export_refined_maps(const std::filesystem::path& dir, const std::vector<RefinedMap>& maps);

}  // namespace occmove
