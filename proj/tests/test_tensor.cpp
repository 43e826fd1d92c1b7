// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>

#include "occmove/seed.hpp"
#include "occmove/tensor.hpp"

using namespace occmove;

namespace {

// Independent bilinear sample with half-pixel centers and edge clamping.
double bilinear_oracle(const Tensor& src, int c, double sy, double sx) {
    auto clampi = [](int v, int hi) { return v < 0 ? 0 : (v > hi ? hi : v); };
    sy = std::max(0.0, sy);
    sx = std::max(0.0, sx);
    const int y0 = static_cast<int>(std::floor(sy));
    const int x0 = static_cast<int>(std::floor(sx));
    const double fy = sy - y0;
    const double fx = sx - x0;
    const int h = src.height() - 1;
    const int w = src.width() - 1;
    const double a = src.at(c, clampi(y0, h), clampi(x0, w));
    const double b = src.at(c, clampi(y0, h), clampi(x0 + 1, w));
    const double d = src.at(c, clampi(y0 + 1, h), clampi(x0, w));
    const double e = src.at(c, clampi(y0 + 1, h), clampi(x0 + 1, w));
    return (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * d + fx * e);
}

}  // namespace

TEST_CASE("bilinear resize matches a per-pixel oracle") {
    const Tensor src = gaussian(2, 7, 5, 11);
    const Tensor out = bilinear_resize(src, 12, 9);
    for (int c = 0; c < 2; ++c)
        for (int y = 0; y < 12; ++y)
            for (int x = 0; x < 9; ++x) {
                const double sy = (y + 0.5) * 7.0 / 12.0 - 0.5;
                const double sx = (x + 0.5) * 5.0 / 9.0 - 0.5;
                CHECK(out.at(c, y, x) == doctest::Approx(bilinear_oracle(src, c, sy, sx)).epsilon(1e-12));
            }
}

TEST_CASE("same-size bilinear resize is the identity") {
    const Tensor src = gaussian(3, 6, 6, 2);
    CHECK(bilinear_resize(src, 6, 6) == src);
}

TEST_CASE("area resize of an integer factor equals block averaging") {
    const Tensor src = gaussian(1, 8, 8, 5);
    const Tensor pooled = avg_pool(src, 2);
    const Tensor area = area_resize(src, 4, 4);
    CHECK(max_abs_diff(pooled, area) < 1e-12);
}

TEST_CASE("resample_mask keeps cells at least half covered") {
    Mask m(MaskSpace::pixel, 8, 8);
    m.set(0, 0, true);
    m.set(0, 1, true);  // half of the 2x2 block at (0, 0)
    m.set(4, 4, true);  // a quarter of its block
    const Mask r = resample_mask(m, 4, 4, MaskSpace::latent);
    CHECK(r.space() == MaskSpace::latent);
    CHECK(r.get(0, 0));
    CHECK_FALSE(r.get(2, 2));
    CHECK(r.count() == 1);
}

TEST_CASE("bounding box and dilation") {
    Mask m(MaskSpace::latent, 6, 6);
    m.set(2, 3, true);
    const Box b = bounding_box(m);
    CHECK(b.x0 == 3);
    CHECK(b.y0 == 2);
    CHECK(b.width() == 1);
    const Mask d = dilate(m, 1);
    CHECK(d.count() == 9);
    CHECK(d.contains(m));
    CHECK(bounding_box(Mask(MaskSpace::pixel, 3, 3)).empty());
}

TEST_CASE("crop outside the source is a range error") {
    const Tensor t(1, 4, 4);
    CHECK_THROWS_AS(crop(t, 2, 2, 4, 4), Error);
    const Tensor c = crop(gaussian(1, 4, 4, 1), 1, 1, 2, 2);
    CHECK(c.height() == 2);
}

TEST_CASE("reflect padding mirrors without repeating the edge") {
    Tensor t(1, 1, 4);
    for (int x = 0; x < 4; ++x) t.at(0, 0, x) = x;
    const Tensor p = reflect_pad(t, 0, 0, 2, 2);
    const double expect[] = {2, 1, 0, 1, 2, 3, 2, 1};
    for (int x = 0; x < 8; ++x) CHECK(p.at(0, 0, x) == expect[x]);
}

TEST_CASE("upsample_nearest inverts avg_pool on block-constant data") {
    const Tensor small = gaussian(2, 3, 3, 4);
    const Tensor big = upsample_nearest(small, 4);
    CHECK(max_abs_diff(avg_pool(big, 4), small) < 1e-15);
}
