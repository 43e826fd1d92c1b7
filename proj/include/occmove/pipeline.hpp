// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <nlohmann/json.hpp>

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <mutex>
#include <optional>
#include <string>

#include "occmove/movement.hpp"

namespace occmove {

struct AblationFlags {
    bool color_fill = true;          // CF
    bool attention_guidance = true;  // AG
    bool lora = true;                // LoRA
    bool latent_resize = true;       // LR
    bool local_text_guidance = true; // LTG
};

struct PipelineConfig {
    std::string backbone = "toy";
    std::string checkpoint;
    int toy_codec_factor = 1;

    std::uint64_t seed = 0;
    int steps = 50;                 // T
    std::optional<int> t_m;         // default min(ceil(0.8 T), T - 1)
    int lambda = 2;
    double eta = 1.3;
    double gamma = 0.1;
    double omega = 7.5;
    int opt_iters = 3;
    double opt_window = 0.6;
    LoraConfig lora;
    AblationFlags flags;

    bool background_guidance = true;
    bool masked_l2 = false;
    int map_side = 0;  // 0: half the latent side
    double binarize_threshold = 0.5;
    int dilation = 1;
    double amodal_threshold = 0.5;
    int inversion_refine = 8;
    bool save_caches = false;

    int resolved_t_m() const;
    void validate() const;
};

/// Keys are the snake_case field names; flags live under "flags" and LoRA
/// settings under "lora". Unknown keys are configuration errors.
nlohmann::json to_json(const PipelineConfig& config);
void merge_json(PipelineConfig& config, const nlohmann::json& patch);
PipelineConfig config_from_json(const nlohmann::json& j);

struct EditRequest {
    Tensor image;  // RGB in [0, 1], any size
    Mask visible;  // pixel space, same size as image
    int target_x = 0;
    int target_y = 0;
    std::string category;
    std::optional<std::string> prompt_override;

    std::string prompt() const;
    void validate() const;
};

struct ProgressEvent {
    std::string stage;
    int done = 0;   // completed units, strictly increasing across events
    int total = 0;
};
using ProgressSink = std::function<void(const ProgressEvent&)>;

/// Native-resolution view of a request: long side scaled to `side`, padded
/// bottom/right to a square.
struct Normalization {
    int source_height = 0;
    int source_width = 0;
    int side = 0;
    double scale = 1.0;
    int content_height = 0;
    int content_width = 0;
};

Normalization make_normalization(int height, int width, int side);
Tensor normalize_image(const Tensor& image, const Normalization& n);
Mask normalize_mask(const Mask& mask, const Normalization& n);
Tensor denormalize_image(const Tensor& image, const Normalization& n);

struct EditResult {
    Tensor edited_image;  // source resolution
    Tensor edited_native;
    CompletedObject completed;
    nlohmann::json manifest;
    std::filesystem::path artifact_dir;
};

/// Blocking, in-order hand-off between the two branches; closed by the producer.
template <typename T>
class HandoffChannel {
public:
    explicit HandoffChannel(std::size_t capacity = 1) : m_capacity(capacity == 0 ? 1 : capacity) {}

    void push(T value) {
        std::unique_lock lock(m_mutex);
        m_cv.wait(lock, [&] { return m_items.size() < m_capacity || m_cancelled; });
        if (m_cancelled) return;
        m_items.push_back(std::move(value));
        m_cv.notify_all();
    }

    /// Empty optional once closed and drained, or after cancel.
    std::optional<T> pop() {
        std::unique_lock lock(m_mutex);
        m_cv.wait(lock, [&] { return !m_items.empty() || m_closed || m_cancelled; });
        if (m_cancelled || m_items.empty()) return std::nullopt;
        T v = std::move(m_items.front());
        m_items.pop_front();
        m_cv.notify_all();
        return v;
    }

    void close() {
        std::lock_guard lock(m_mutex);
        m_closed = true;
        m_cv.notify_all();
    }

    /// Unblocks a producer whose consumer has gone away.
    void cancel() {
        std::lock_guard lock(m_mutex);
        m_cancelled = true;
        m_cv.notify_all();
    }

private:
    std::size_t m_capacity;
    std::deque<T> m_items;
    bool m_closed = false;
    bool m_cancelled = false;
    std::mutex m_mutex;
    std::condition_variable m_cv;
};

/// Full edit. Every failure is rethrown as a StageError naming the stage.
EditResult run_edit(const Backbone& backbone, const EditRequest& request, const PipelineConfig& config,
                    const std::filesystem::path& artifact_dir, const ProgressSink& progress = {});

/// De-occlusion branch only.
CompletedObject run_deocclude(const Backbone& backbone, const EditRequest& request, const PipelineConfig& config,
                              const std::filesystem::path& artifact_dir, const ProgressSink& progress = {});

}  // namespace occmove
