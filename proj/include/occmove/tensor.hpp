// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "occmove/error.hpp"

namespace occmove {

/// Planar channel-major (C, H, W) array of doubles. Used for images (3 channels,
/// values in [0, 1]) as well as latent grids (backbone latent channels).
class Tensor {
public:
    Tensor() = default;
    Tensor(int channels, int height, int width, double fill = 0.0);
    Tensor(int channels, int height, int width, std::vector<double> data);

    int channels() const noexcept { return m_channels; }
    int height() const noexcept { return m_height; }
    int width() const noexcept { return m_width; }
    std::size_t plane_size() const noexcept {
        return static_cast<std::size_t>(m_height) * static_cast<std::size_t>(m_width);
    }
    std::size_t size() const noexcept { return m_data.size(); }
    bool empty() const noexcept { return m_data.empty(); }

    double& at(int c, int y, int x) noexcept { return m_data[index(c, y, x)]; }
    double at(int c, int y, int x) const noexcept { return m_data[index(c, y, x)]; }

    std::span<double> data() noexcept { return m_data; }
    std::span<const double> data() const noexcept { return m_data; }
    std::span<double> plane(int c) noexcept { return {m_data.data() + c * plane_size(), plane_size()}; }
    std::span<const double> plane(int c) const noexcept {
        return {m_data.data() + c * plane_size(), plane_size()};
    }

    const std::vector<double>& values() const noexcept { return m_data; }

    bool same_shape(const Tensor& other) const noexcept {
        return m_channels == other.m_channels && m_height == other.m_height &&
               m_width == other.m_width;
    }

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    std::size_t index(int c, int y, int x) const noexcept {
        return (static_cast<std::size_t>(c) * m_height + y) * m_width + x;
    }

    int m_channels = 0;
    int m_height = 0;
    int m_width = 0;
    std::vector<double> m_data;
};

enum class MaskSpace { pixel, latent };

/// Binary spatial field. Values are always 0 or 1.
class Mask {
public:
    Mask() = default;
    Mask(MaskSpace space, int height, int width, std::uint8_t fill = 0);

    MaskSpace space() const noexcept { return m_space; }
    int height() const noexcept { return m_height; }
    int width() const noexcept { return m_width; }
    bool empty() const noexcept { return m_bits.empty(); }

    bool get(int y, int x) const noexcept { return m_bits[y * m_width + x] != 0; }
    void set(int y, int x, bool value) noexcept { m_bits[y * m_width + x] = value ? 1 : 0; }

    std::span<const std::uint8_t> bits() const noexcept { return m_bits; }

    std::size_t count() const noexcept;
    bool any() const noexcept { return count() > 0; }
    bool all() const noexcept { return count() == m_bits.size(); }

    /// Same grid reinterpreted in another space (no resampling).
    Mask with_space(MaskSpace space) const;

    Mask inverted() const;
    Mask united(const Mask& other) const;
    bool contains(const Mask& other) const;

    friend bool operator==(const Mask&, const Mask&) = default;

private:
    MaskSpace m_space = MaskSpace::pixel;
    int m_height = 0;
    int m_width = 0;
    std::vector<std::uint8_t> m_bits;
};

struct Box {
    int x0 = 0;
    int y0 = 0;
    int x1 = 0;  // exclusive
    int y1 = 0;  // exclusive

    int width() const noexcept { return x1 - x0; }
    int height() const noexcept { return y1 - y0; }
    bool empty() const noexcept { return x1 <= x0 || y1 <= y0; }
};

/// Tight bounding box of the set pixels; empty box for an empty mask.
Box bounding_box(const Mask& mask);

/// Bilinear resize with half-pixel centers (no antialiasing). Same-size calls
/// return an exact copy.
Tensor bilinear_resize(const Tensor& src, int height, int width);

/// Box-filter resample with exact fractional overlap; works in both directions.
Tensor area_resize(const Tensor& src, int height, int width);

/// Area-resample a mask, then keep cells whose covered fraction is >= threshold.
Mask resample_mask(const Mask& mask, int height, int width, MaskSpace space, double threshold = 0.5);

Tensor mask_to_tensor(const Mask& mask);
Mask threshold_to_mask(const Tensor& field, double threshold, MaskSpace space);

/// Copies the window [y0, y0+h) x [x0, x0+w); the window must lie inside src.
Tensor crop(const Tensor& src, int y0, int x0, int height, int width);
Mask crop(const Mask& src, int y0, int x0, int height, int width);

/// Writes `patch` into `dst` at (y0, x0); the patch must fit.
void paste(Tensor& dst, const Tensor& patch, int y0, int x0);

/// Reflect-pads (edge pixel not repeated) on each side.
Tensor reflect_pad(const Tensor& src, int top, int bottom, int left, int right);
Mask zero_pad(const Mask& src, int top, int bottom, int left, int right);

Tensor avg_pool(const Tensor& src, int factor);
Tensor upsample_nearest(const Tensor& src, int factor);

/// One-cell (8-neighbour) dilation.
Mask dilate(const Mask& mask, int radius = 1);

double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace occmove
