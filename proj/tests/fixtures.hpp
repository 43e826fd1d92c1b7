// SPDX-License-Identifier: Apache-2.0

// Synthetic scenes shared by the tests and the acceptance runner.

#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "occmove/eval.hpp"
#include "occmove/io.hpp"

namespace occmove::fixtures {

/// Rectangle object partly hidden behind a vertical bar, on a soft gradient.
inline EditRequest occluded_scene(int side, const std::string& category = "cup") {
    EditRequest r;
    r.image = Tensor(3, side, side);
    r.visible = Mask(MaskSpace::pixel, side, side);
    const int a = side / 4, b = side / 2;
    for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x) {
            const bool object = y >= a && y < b + 2 && x >= a && x < b + 2;
            const bool occluder = x >= b - 1 && x < b + 3 && y >= a - 2;
            r.image.at(0, y, x) = occluder ? 0.2 : object ? 0.9 : 0.3 + 0.3 * x / side;
            r.image.at(1, y, x) = occluder ? 0.2 : object ? 0.1 : 0.4;
            r.image.at(2, y, x) = occluder ? 0.8 : object ? 0.1 : 0.5 - 0.2 * y / side;
            r.visible.set(y, x, object && !occluder);
        }
    r.target_x = side * 3 / 4;
    r.target_y = side * 3 / 4;
    r.category = category;
    return r;
}

inline nlohmann::json rect_polygon(int x0, int y0, int x1, int y1) {
    return nlohmann::json::array({nlohmann::json::array({x0, y0, x1, y0, x1, y1, x0, y1})});
}

/// Writes three 32x32 images and a COCOA-style annotation file into `dir`.
/// Five regions: three retained, one never occluded, one too small.
inline std::filesystem::path write_cocoa_fixture(const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json doc;
    doc["images"] = nlohmann::json::array();
    doc["annotations"] = nlohmann::json::array();
    const char* names[] = {"cup", "donut", "bear"};
    for (int i = 0; i < 3; ++i) {
        const std::string file = "scene" + std::to_string(i) + ".png";
        EditRequest s = occluded_scene(32, names[i]);
        io::write_png_rgb(dir / file, s.image);
        doc["images"].push_back({{"id", i + 1}, {"file_name", file}, {"height", 32}, {"width", 32}});

        // Amodal square 8..18 and the visible part left of the bar at 15.
        nlohmann::json regions = nlohmann::json::array();
        const Rle vis = encode_rle(s.visible);
        nlohmann::json rle = {{"size", {32, 32}}};
        if (i == 0) rle["counts"] = encode_rle_string(vis.counts);
        else rle["counts"] = vis.counts;
        regions.push_back({{"name", names[i]}, {"segmentation", rect_polygon(8, 8, 18, 18)}, {"visible_mask", rle}});
        if (i == 1)  // fully visible: filtered
            regions.push_back({{"name", "plate"}, {"segmentation", rect_polygon(22, 22, 30, 30)}});
        if (i == 2) {  // 2x2 visible pixels: below 1% of the image
            Mask tiny(MaskSpace::pixel, 32, 32);
            for (int y = 26; y < 28; ++y)
                for (int x = 26; x < 28; ++x) tiny.set(y, x, true);
            regions.push_back({{"name", "spoon"},
                               {"segmentation", rect_polygon(24, 24, 30, 30)},
                               {"visible_mask", {{"size", {32, 32}}, {"counts", encode_rle(tiny).counts}}}});
        }
        doc["annotations"].push_back({{"id", 100 + i}, {"image_id", i + 1}, {"regions", regions}});
    }
    const auto path = dir / "annotations.json";
    io::write_text(path, doc.dump(1));
    return path;
}

}  // namespace occmove::fixtures
