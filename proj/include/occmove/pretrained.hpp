// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "occmove/backbone.hpp"

namespace occmove {

/// Result of inspecting a checkpoint directory in the diffusers layout.
struct CheckpointProbe {
    bool layout_ok = false;
    std::vector<std::string> missing;  // required entries not found
    std::vector<std::string> found;
};

/// Checks for model_index.json and the unet / vae / text_encoder subfolders
/// with their config files.
CheckpointProbe probe_checkpoint(const std::filesystem::path& dir);

/// Loads a pretrained backbone. This build ships no tensor runtime, so a
/// valid layout still ends in an `unavailable` error naming the probe result.
std::shared_ptr<const Backbone> load_pretrained_backbone(const std::filesystem::path& dir);

}  // namespace occmove
