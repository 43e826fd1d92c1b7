// SPDX-License-Identifier: Apache-2.0

#include "occmove/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace occmove {

std::string_view to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::dimension: return "dimension";
        case ErrorKind::shape: return "shape";
        case ErrorKind::config: return "config";
        case ErrorKind::input: return "input";
        case ErrorKind::range: return "range";
        case ErrorKind::contract: return "contract";
        case ErrorKind::index: return "index";
        case ErrorKind::lockstep: return "lockstep";
        case ErrorKind::numeric: return "numeric";
        case ErrorKind::io: return "io";
        case ErrorKind::unavailable: return "unavailable";
    }
    return "unknown";
}

Tensor::Tensor(int channels, int height, int width, double fill)
    : m_channels(channels), m_height(height), m_width(width) {
    OCCMOVE_CHECK(channels >= 0 && height >= 0 && width >= 0, shape, "negative tensor extent");
    m_data.assign(static_cast<std::size_t>(channels) * height * width, fill);
}

Tensor::Tensor(int channels, int height, int width, std::vector<double> data)
    : m_channels(channels), m_height(height), m_width(width), m_data(std::move(data)) {
    OCCMOVE_CHECK(m_data.size() == static_cast<std::size_t>(channels) * height * width, shape,
                  "tensor data size ", m_data.size(), " does not match ", channels, "x", height,
                  "x", width);
}

Mask::Mask(MaskSpace space, int height, int width, std::uint8_t fill)
    : m_space(space), m_height(height), m_width(width) {
    OCCMOVE_CHECK(height >= 0 && width >= 0, shape, "negative mask extent");
    m_bits.assign(static_cast<std::size_t>(height) * width, fill ? 1 : 0);
}

std::size_t Mask::count() const noexcept {
    return static_cast<std::size_t>(std::count(m_bits.begin(), m_bits.end(), std::uint8_t{1}));
}

Mask Mask::with_space(MaskSpace space) const {
    Mask out = *this;
    out.m_space = space;
    return out;
}

Mask Mask::inverted() const {
    Mask out = *this;
    for (auto& b : out.m_bits) b = b ? 0 : 1;
    return out;
}

Mask Mask::united(const Mask& other) const {
    OCCMOVE_CHECK(m_height == other.m_height && m_width == other.m_width, shape,
                  "mask union of different extents");
    Mask out = *this;
    for (std::size_t i = 0; i < m_bits.size(); ++i) out.m_bits[i] = m_bits[i] | other.m_bits[i];
    return out;
}

bool Mask::contains(const Mask& other) const {
    if (m_height != other.m_height || m_width != other.m_width) return false;
    for (std::size_t i = 0; i < m_bits.size(); ++i) {
        if (other.m_bits[i] && !m_bits[i]) return false;
    }
    return true;
}

Box bounding_box(const Mask& mask) {
    Box box{mask.width(), mask.height(), 0, 0};
    for (int y = 0; y < mask.height(); ++y) {
        for (int x = 0; x < mask.width(); ++x) {
            if (!mask.get(y, x)) continue;
            box.x0 = std::min(box.x0, x);
            box.y0 = std::min(box.y0, y);
            box.x1 = std::max(box.x1, x + 1);
            box.y1 = std::max(box.y1, y + 1);
        }
    }
    if (box.x1 <= box.x0) return Box{};
    return box;
}

namespace {

struct LinearTap {
    int i0;
    int i1;
    double w1;
};

std::vector<LinearTap> linear_taps(int src, int dst) {
    std::vector<LinearTap> taps(dst);
    const double scale = static_cast<double>(src) / dst;
    for (int i = 0; i < dst; ++i) {
        double s = (i + 0.5) * scale - 0.5;
        s = std::clamp(s, 0.0, static_cast<double>(src - 1));
        const int i0 = static_cast<int>(std::floor(s));
        const int i1 = std::min(i0 + 1, src - 1);
        taps[i] = {i0, i1, s - i0};
    }
    return taps;
}

// Weight of source cell j inside destination cell i for a box filter.
std::vector<std::vector<std::pair<int, double>>> area_taps(int src, int dst) {
    std::vector<std::vector<std::pair<int, double>>> taps(dst);
    const double scale = static_cast<double>(src) / dst;
    for (int i = 0; i < dst; ++i) {
        const double lo = i * scale;
        const double hi = (i + 1) * scale;
        const int j0 = static_cast<int>(std::floor(lo));
        const int j1 = std::min(src, static_cast<int>(std::ceil(hi)));
        for (int j = j0; j < j1; ++j) {
            const double overlap = std::min(hi, j + 1.0) - std::max(lo, static_cast<double>(j));
            if (overlap > 0) taps[i].emplace_back(j, overlap / scale);
        }
    }
    return taps;
}

int mirror(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * (n - 1);
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - i;
}

}  // namespace

Tensor bilinear_resize(const Tensor& src, int height, int width) {
    OCCMOVE_CHECK(height > 0 && width > 0, dimension, "resize target must be positive");
    OCCMOVE_CHECK(!src.empty(), shape, "resize of an empty tensor");
    if (src.height() == height && src.width() == width) return src;
    const auto ty = linear_taps(src.height(), height);
    const auto tx = linear_taps(src.width(), width);
    Tensor out(src.channels(), height, width);
    for (int c = 0; c < src.channels(); ++c) {
        for (int y = 0; y < height; ++y) {
            const auto& a = ty[y];
            for (int x = 0; x < width; ++x) {
                const auto& b = tx[x];
                const double top = src.at(c, a.i0, b.i0) * (1 - b.w1) + src.at(c, a.i0, b.i1) * b.w1;
                const double bot = src.at(c, a.i1, b.i0) * (1 - b.w1) + src.at(c, a.i1, b.i1) * b.w1;
                out.at(c, y, x) = top * (1 - a.w1) + bot * a.w1;
            }
        }
    }
    return out;
}

Tensor area_resize(const Tensor& src, int height, int width) {
    OCCMOVE_CHECK(height > 0 && width > 0, dimension, "resize target must be positive");
    if (src.height() == height && src.width() == width) return src;
    const auto ty = area_taps(src.height(), height);
    const auto tx = area_taps(src.width(), width);
    Tensor out(src.channels(), height, width);
    for (int c = 0; c < src.channels(); ++c) {
        for (int y = 0; y < height; ++y) {
            for (int x = 0; x < width; ++x) {
                double acc = 0.0;
                for (const auto& [sy, wy] : ty[y]) {
                    for (const auto& [sx, wx] : tx[x]) acc += src.at(c, sy, sx) * wy * wx;
                }
                out.at(c, y, x) = acc;
            }
        }
    }
    return out;
}

Tensor mask_to_tensor(const Mask& mask) {
    Tensor t(1, mask.height(), mask.width());
    for (int y = 0; y < mask.height(); ++y)
        for (int x = 0; x < mask.width(); ++x) t.at(0, y, x) = mask.get(y, x) ? 1.0 : 0.0;
    return t;
}

Mask threshold_to_mask(const Tensor& field, double threshold, MaskSpace space) {
    Mask m(space, field.height(), field.width());
    for (int y = 0; y < field.height(); ++y)
        for (int x = 0; x < field.width(); ++x) m.set(y, x, field.at(0, y, x) >= threshold);
    return m;
}

Mask resample_mask(const Mask& mask, int height, int width, MaskSpace space, double threshold) {
    if (mask.height() == height && mask.width() == width) return mask.with_space(space);
    // Guard against 0.5 coverage landing a hair below threshold through rounding.
    return threshold_to_mask(area_resize(mask_to_tensor(mask), height, width), threshold - 1e-12,
                             space);
}

Tensor crop(const Tensor& src, int y0, int x0, int height, int width) {
    OCCMOVE_CHECK(y0 >= 0 && x0 >= 0 && y0 + height <= src.height() && x0 + width <= src.width(),
                  range, "crop window [", y0, ",", x0, ") size ", height, "x", width,
                  " outside ", src.height(), "x", src.width());
    Tensor out(src.channels(), height, width);
    for (int c = 0; c < src.channels(); ++c)
        for (int y = 0; y < height; ++y)
            for (int x = 0; x < width; ++x) out.at(c, y, x) = src.at(c, y0 + y, x0 + x);
    return out;
}

Mask crop(const Mask& src, int y0, int x0, int height, int width) {
    OCCMOVE_CHECK(y0 >= 0 && x0 >= 0 && y0 + height <= src.height() && x0 + width <= src.width(),
                  range, "mask crop window outside mask");
    Mask out(src.space(), height, width);
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) out.set(y, x, src.get(y0 + y, x0 + x));
    return out;
}

void paste(Tensor& dst, const Tensor& patch, int y0, int x0) {
    OCCMOVE_CHECK(patch.channels() == dst.channels() && y0 >= 0 && x0 >= 0 &&
                      y0 + patch.height() <= dst.height() && x0 + patch.width() <= dst.width(),
                  range, "paste window outside destination");
    for (int c = 0; c < patch.channels(); ++c)
        for (int y = 0; y < patch.height(); ++y)
            for (int x = 0; x < patch.width(); ++x) dst.at(c, y0 + y, x0 + x) = patch.at(c, y, x);
}

Tensor reflect_pad(const Tensor& src, int top, int bottom, int left, int right) {
    OCCMOVE_CHECK(top >= 0 && bottom >= 0 && left >= 0 && right >= 0, range, "negative padding");
    const int h = src.height() + top + bottom;
    const int w = src.width() + left + right;
    Tensor out(src.channels(), h, w);
    for (int c = 0; c < src.channels(); ++c)
        for (int y = 0; y < h; ++y) {
            const int sy = mirror(y - top, src.height());
            for (int x = 0; x < w; ++x) out.at(c, y, x) = src.at(c, sy, mirror(x - left, src.width()));
        }
    return out;
}

Mask zero_pad(const Mask& src, int top, int bottom, int left, int right) {
    Mask out(src.space(), src.height() + top + bottom, src.width() + left + right);
    for (int y = 0; y < src.height(); ++y)
        for (int x = 0; x < src.width(); ++x) out.set(y + top, x + left, src.get(y, x));
    return out;
}

Tensor avg_pool(const Tensor& src, int factor) {
    OCCMOVE_CHECK(factor > 0 && src.height() % factor == 0 && src.width() % factor == 0, dimension,
                  "avg_pool factor ", factor, " does not divide ", src.height(), "x", src.width());
    if (factor == 1) return src;
    const int h = src.height() / factor;
    const int w = src.width() / factor;
    const double norm = 1.0 / (factor * factor);
    Tensor out(src.channels(), h, w);
    for (int c = 0; c < src.channels(); ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double acc = 0.0;
                for (int dy = 0; dy < factor; ++dy)
                    for (int dx = 0; dx < factor; ++dx) acc += src.at(c, y * factor + dy, x * factor + dx);
                out.at(c, y, x) = acc * norm;
            }
    return out;
}

Tensor upsample_nearest(const Tensor& src, int factor) {
    OCCMOVE_CHECK(factor > 0, dimension, "upsample factor must be positive");
    if (factor == 1) return src;
    Tensor out(src.channels(), src.height() * factor, src.width() * factor);
    for (int c = 0; c < src.channels(); ++c)
        for (int y = 0; y < out.height(); ++y)
            for (int x = 0; x < out.width(); ++x) out.at(c, y, x) = src.at(c, y / factor, x / factor);
    return out;
}

Mask dilate(const Mask& mask, int radius) {
    Mask out(mask.space(), mask.height(), mask.width());
    for (int y = 0; y < mask.height(); ++y)
        for (int x = 0; x < mask.width(); ++x) {
            if (!mask.get(y, x)) continue;
            for (int dy = -radius; dy <= radius; ++dy)
                for (int dx = -radius; dx <= radius; ++dx) {
                    const int yy = y + dy;
                    const int xx = x + dx;
                    if (yy >= 0 && yy < mask.height() && xx >= 0 && xx < mask.width()) out.set(yy, xx, true);
                }
        }
    return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    OCCMOVE_CHECK(a.same_shape(b), shape, "max_abs_diff of differently shaped tensors");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

}  // namespace occmove
