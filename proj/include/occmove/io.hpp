// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "occmove/tensor.hpp"

namespace occmove::io {

/// Arrays are stored as NumPy .npy v1.0 files, little-endian '<f8' (or '<f4'
/// when `single_precision` is set), C order, shape (C, H, W).
void write_npy(const std::filesystem::path& path, const Tensor& tensor, bool single_precision = false);
void write_npy(const std::filesystem::path& path, const std::vector<double>& values,
               const std::vector<std::size_t>& shape);
Tensor read_npy(const std::filesystem::path& path);

/// 2-D matrices, row-major on disk.
void write_matrix(const std::filesystem::path& path, const Eigen::MatrixXd& m);
Eigen::MatrixXd read_matrix(const std::filesystem::path& path);

struct NpyArray {
    std::vector<std::size_t> shape;
    std::vector<double> values;
};
NpyArray read_npy_array(const std::filesystem::path& path);

/// PNG helpers. RGB images are (3, H, W) tensors with values in [0, 1];
/// quantization rounds to the nearest 8-bit level.
Tensor read_png_rgb(const std::filesystem::path& path);
void write_png_rgb(const std::filesystem::path& path, const Tensor& image);
std::vector<std::uint8_t> encode_png_rgb(const Tensor& image);
Tensor decode_png_rgb(const std::vector<std::uint8_t>& bytes);

/// Single-channel PNG masks with values {0, 255}. Reading thresholds at 128.
Mask read_png_mask(const std::filesystem::path& path);
void write_png_mask(const std::filesystem::path& path, const Mask& mask);
std::vector<std::uint8_t> encode_png_mask(const Mask& mask);
Mask decode_png_mask(const std::vector<std::uint8_t>& bytes);

/// Grayscale PNG of a single-channel field in [0, 1].
void write_png_gray(const std::filesystem::path& path, const Tensor& field);

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);
void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

/// Hex SHA-free content fingerprint (FNV-1a 64).
std::string fingerprint(const std::vector<std::uint8_t>& bytes);
std::string fingerprint(const std::string& text);

}  // namespace occmove::io
