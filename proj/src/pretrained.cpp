// SPDX-License-Identifier: Apache-2.0

#include "occmove/pretrained.hpp"

#include <nlohmann/json.hpp>

#include "occmove/io.hpp"

namespace occmove {

CheckpointProbe probe_checkpoint(const std::filesystem::path& dir) {
    CheckpointProbe probe;
    const char* required[] = {"model_index.json", "unet/config.json", "vae/config.json",
                              "text_encoder/config.json", "tokenizer"};
    for (const char* entry : required) {
        if (std::filesystem::exists(dir / entry))
            probe.found.emplace_back(entry);
        else
            probe.missing.emplace_back(entry);
    }
    if (probe.missing.empty()) {
        try {
            const auto index = nlohmann::json::parse(io::read_text(dir / "model_index.json"));
            if (!index.contains("unet") || !index.contains("vae")) probe.missing.emplace_back("model_index.json:unet/vae");
        } catch (const nlohmann::json::exception&) {
            probe.missing.emplace_back("model_index.json (unparseable)");
        }
    }
    probe.layout_ok = probe.missing.empty();
    return probe;
}

std::shared_ptr<const Backbone> load_pretrained_backbone(const std::filesystem::path& dir) {
    OCCMOVE_CHECK(!dir.empty(), config, "backbone 'pretrained' needs a checkpoint path");
    OCCMOVE_CHECK(std::filesystem::is_directory(dir), io, "checkpoint directory not found: ", dir.string());
    const auto probe = probe_checkpoint(dir);
    if (!probe.layout_ok) {
        std::string list;
        for (const auto& m : probe.missing) list += (list.empty() ? "" : ", ") + m;
        throw Error(ErrorKind::config, "checkpoint " + dir.string() + " is missing: " + list);
    }
    throw Error(ErrorKind::unavailable, "checkpoint " + dir.string() +
                                            " has a hookable latent-diffusion layout, but this build has no "
                                            "tensor runtime for pretrained weights; use backbone 'toy'");
}

}  // namespace occmove
