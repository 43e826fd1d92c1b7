// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <filesystem>

#include "occmove/io.hpp"
#include "occmove/seed.hpp"

using namespace occmove;

namespace {

std::filesystem::path scratch(const char* name) {
    auto dir = std::filesystem::temp_directory_path() / "occmove_test_io";
    std::filesystem::create_directories(dir);
    return dir / name;
}

}  // namespace

TEST_CASE("npy round trip is exact and carries the header") {
    const Tensor t = gaussian(4, 5, 6, 3);
    const auto path = scratch("t.npy");
    io::write_npy(path, t);
    CHECK(io::read_npy(path) == t);
    const auto bytes = io::read_bytes(path);
    REQUIRE(bytes.size() > 10);
    CHECK(bytes[0] == 0x93);
    const std::string header(bytes.begin() + 10, bytes.begin() + 128);
    CHECK(header.find("'descr': '<f8'") != std::string::npos);
    CHECK(header.find("(4, 5, 6)") != std::string::npos);
}

TEST_CASE("matrix npy round trip keeps row-major order") {
    Eigen::MatrixXd m(2, 3);
    m << 1, 2, 3, 4, 5, 6;
    const auto path = scratch("m.npy");
    io::write_matrix(path, m);
    const auto arr = io::read_npy_array(path);
    CHECK(arr.values == std::vector<double>{1, 2, 3, 4, 5, 6});
    CHECK(io::read_matrix(path) == m);
}

TEST_CASE("png rgb round trip on 8-bit levels") {
    Tensor img(3, 4, 5);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 5; ++x) img.at(c, y, x) = ((c * 37 + y * 11 + x * 5) % 256) / 255.0;
    const auto bytes = io::encode_png_rgb(img);
    CHECK(io::decode_png_rgb(bytes) == img);
}

TEST_CASE("png masks use 0 and 255") {
    Mask m(MaskSpace::pixel, 3, 4);
    m.set(1, 2, true);
    const auto path = scratch("m.png");
    io::write_png_mask(path, m);
    CHECK(io::read_png_mask(path) == m);
}

TEST_CASE("fingerprint is stable and content-sensitive") {
    CHECK(io::fingerprint(std::string("abc")) == io::fingerprint(std::string("abc")));
    CHECK(io::fingerprint(std::string("abc")) != io::fingerprint(std::string("abd")));
    CHECK(io::fingerprint(std::string("abc")).size() == 16);
}
