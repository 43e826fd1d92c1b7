// SPDX-License-Identifier: Apache-2.0

#include "occmove/io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace occmove::io {

namespace {

std::string shape_tuple(const std::vector<std::size_t>& shape) {
    std::string s = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        s += std::to_string(shape[i]);
        if (shape.size() == 1 || i + 1 < shape.size()) s += ",";
        if (i + 1 < shape.size()) s += " ";
    }
    return s + ")";
}

void write_npy_raw(const std::filesystem::path& path, const std::vector<double>& values,
                   const std::vector<std::size_t>& shape, bool single_precision) {
    std::string header = std::string("{'descr': '") + (single_precision ? "<f4" : "<f8") +
                         "', 'fortran_order': False, 'shape': " + shape_tuple(shape) + ", }";
    // Magic (6) + version (2) + header length (2) + header, padded to 64 bytes.
    const std::size_t unpadded = 10 + header.size() + 1;
    header.append((64 - unpadded % 64) % 64, ' ');
    header.push_back('\n');

    std::ofstream out(path, std::ios::binary);
    OCCMOVE_CHECK(out.good(), io, "cannot open ", path.string(), " for writing");
    out.write("\x93NUMPY\x01\x00", 8);
    const auto len = static_cast<std::uint16_t>(header.size());
    const char len_bytes[2] = {static_cast<char>(len & 0xff), static_cast<char>(len >> 8)};
    out.write(len_bytes, 2);
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    if (single_precision) {
        std::vector<float> f(values.begin(), values.end());
        out.write(reinterpret_cast<const char*>(f.data()), static_cast<std::streamsize>(f.size() * 4));
    } else {
        out.write(reinterpret_cast<const char*>(values.data()),
                  static_cast<std::streamsize>(values.size() * 8));
    }
    OCCMOVE_CHECK(out.good(), io, "failed writing ", path.string());
}

}  // namespace

void write_npy(const std::filesystem::path& path, const Tensor& tensor, bool single_precision) {
    write_npy_raw(path, tensor.values(),
                  {static_cast<std::size_t>(tensor.channels()), static_cast<std::size_t>(tensor.height()),
                   static_cast<std::size_t>(tensor.width())},
                  single_precision);
}

void write_npy(const std::filesystem::path& path, const std::vector<double>& values,
               const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    OCCMOVE_CHECK(n == values.size(), shape, "npy shape does not match value count");
    write_npy_raw(path, values, shape, false);
}

NpyArray read_npy_array(const std::filesystem::path& path) {
    const auto bytes = read_bytes(path);
    OCCMOVE_CHECK(bytes.size() >= 10 && std::memcmp(bytes.data(), "\x93NUMPY", 6) == 0, io,
                  path.string(), " is not an npy file");
    const int major = bytes[6];
    std::size_t header_len = 0;
    std::size_t offset = 0;
    if (major == 1) {
        header_len = bytes[8] | (bytes[9] << 8);
        offset = 10;
    } else {
        OCCMOVE_CHECK(bytes.size() >= 12, io, "truncated npy header");
        header_len = bytes[8] | (bytes[9] << 8) | (bytes[10] << 16) | (static_cast<std::size_t>(bytes[11]) << 24);
        offset = 12;
    }
    OCCMOVE_CHECK(offset + header_len <= bytes.size(), io, "truncated npy header");
    const std::string header(bytes.begin() + static_cast<long>(offset),
                             bytes.begin() + static_cast<long>(offset + header_len));
    OCCMOVE_CHECK(header.find("'fortran_order': False") != std::string::npos, io,
                  "fortran-ordered npy arrays are not supported");
    const bool f8 = header.find("'<f8'") != std::string::npos;
    const bool f4 = header.find("'<f4'") != std::string::npos;
    OCCMOVE_CHECK(f8 || f4, io, "npy dtype must be <f8 or <f4");

    NpyArray arr;
    const auto lp = header.find('(', header.find("'shape'"));
    const auto rp = header.find(')', lp);
    std::stringstream ss(header.substr(lp + 1, rp - lp - 1));
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        tok.erase(std::remove_if(tok.begin(), tok.end(), ::isspace), tok.end());
        if (!tok.empty()) arr.shape.push_back(std::stoul(tok));
    }
    std::size_t n = 1;
    for (auto s : arr.shape) n *= s;
    const std::size_t data_off = offset + header_len;
    OCCMOVE_CHECK(bytes.size() - data_off >= n * (f8 ? 8 : 4), io, "truncated npy payload");
    arr.values.resize(n);
    if (f8) {
        std::memcpy(arr.values.data(), bytes.data() + data_off, n * 8);
    } else {
        std::vector<float> f(n);
        std::memcpy(f.data(), bytes.data() + data_off, n * 4);
        std::copy(f.begin(), f.end(), arr.values.begin());
    }
    return arr;
}

Tensor read_npy(const std::filesystem::path& path) {
    auto arr = read_npy_array(path);
    OCCMOVE_CHECK(arr.shape.size() == 3, shape, path.string(), " is not a (C, H, W) array");
    return Tensor(static_cast<int>(arr.shape[0]), static_cast<int>(arr.shape[1]),
                  static_cast<int>(arr.shape[2]), std::move(arr.values));
}

void write_matrix(const std::filesystem::path& path, const Eigen::MatrixXd& m) {
    std::vector<double> v(static_cast<std::size_t>(m.size()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) v[static_cast<std::size_t>(r * m.cols() + c)] = m(r, c);
    write_npy(path, v, {static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
}

Eigen::MatrixXd read_matrix(const std::filesystem::path& path) {
    const auto a = read_npy_array(path);
    OCCMOVE_CHECK(a.shape.size() == 2, shape, path.string(), " is not a 2-D array");
    Eigen::MatrixXd m(static_cast<Eigen::Index>(a.shape[0]), static_cast<Eigen::Index>(a.shape[1]));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = a.values[static_cast<std::size_t>(r * m.cols() + c)];
    return m;
}

namespace {

struct PngReadBuffer {
    const std::vector<std::uint8_t>* bytes;
    std::size_t pos;
};

void png_read_cb(png_structp png, png_bytep out, png_size_t len) {
    auto* buf = static_cast<PngReadBuffer*>(png_get_io_ptr(png));
    if (buf->pos + len > buf->bytes->size()) png_error(png, "read past end of PNG data");
    std::memcpy(out, buf->bytes->data() + buf->pos, len);
    buf->pos += len;
}

void png_write_cb(png_structp png, png_bytep data, png_size_t len) {
    auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
    out->insert(out->end(), data, data + len);
}

void png_flush_cb(png_structp) {}

struct RawImage {
    int width = 0;
    int height = 0;
    int channels = 0;  // 1 or 3 after normalization
    std::vector<std::uint8_t> pixels;
};

RawImage decode_png(const std::vector<std::uint8_t>& bytes, bool want_gray) {
    OCCMOVE_CHECK(bytes.size() >= 8 && png_sig_cmp(bytes.data(), 0, 8) == 0, io, "not a PNG stream");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    RawImage img;
    std::vector<png_bytep> rows;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw Error(ErrorKind::io, "corrupt PNG stream");
    }
    PngReadBuffer buf{&bytes, 0};
    png_set_read_fn(png, &buf, png_read_cb);
    png_read_info(png, info);
    const auto color = png_get_color_type(png, info);
    const auto depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color & PNG_COLOR_MASK_ALPHA || png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
    const bool is_gray = color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA;
    if (want_gray && !is_gray) png_set_rgb_to_gray_fixed(png, 1, -1, -1);
    if (!want_gray && is_gray) png_set_gray_to_rgb(png);
    png_read_update_info(png, info);

    img.width = static_cast<int>(png_get_image_width(png, info));
    img.height = static_cast<int>(png_get_image_height(png, info));
    img.channels = png_get_channels(png, info);
    const auto stride = png_get_rowbytes(png, info);
    img.pixels.resize(stride * img.height);
    rows.resize(img.height);
    for (int y = 0; y < img.height; ++y) rows[y] = img.pixels.data() + y * stride;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

std::vector<std::uint8_t> encode_png(const std::vector<std::uint8_t>& pixels, int width, int height,
                                     int channels) {
    std::vector<std::uint8_t> out;
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw Error(ErrorKind::io, "PNG encoding failed");
    }
    png_set_write_fn(png, &out, png_write_cb, png_flush_cb);
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
                 channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < height; ++y) {
        png_write_row(png, const_cast<png_bytep>(pixels.data() + static_cast<std::size_t>(y) * width * channels));
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    return out;
}

std::uint8_t quantize(double v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace

Tensor decode_png_rgb(const std::vector<std::uint8_t>& bytes) {
    const auto raw = decode_png(bytes, false);
    Tensor t(3, raw.height, raw.width);
    for (int y = 0; y < raw.height; ++y)
        for (int x = 0; x < raw.width; ++x)
            for (int c = 0; c < 3; ++c)
                t.at(c, y, x) = raw.pixels[(static_cast<std::size_t>(y) * raw.width + x) * 3 + c] / 255.0;
    return t;
}

std::vector<std::uint8_t> encode_png_rgb(const Tensor& image) {
    OCCMOVE_CHECK(image.channels() == 3, shape, "RGB PNG needs 3 channels, got ", image.channels());
    std::vector<std::uint8_t> px(static_cast<std::size_t>(image.width()) * image.height() * 3);
    for (int y = 0; y < image.height(); ++y)
        for (int x = 0; x < image.width(); ++x)
            for (int c = 0; c < 3; ++c)
                px[(static_cast<std::size_t>(y) * image.width() + x) * 3 + c] = quantize(image.at(c, y, x));
    return encode_png(px, image.width(), image.height(), 3);
}

Tensor read_png_rgb(const std::filesystem::path& path) { return decode_png_rgb(read_bytes(path)); }

void write_png_rgb(const std::filesystem::path& path, const Tensor& image) {
    write_bytes(path, encode_png_rgb(image));
}

Mask decode_png_mask(const std::vector<std::uint8_t>& bytes) {
    const auto raw = decode_png(bytes, true);
    Mask m(MaskSpace::pixel, raw.height, raw.width);
    for (int y = 0; y < raw.height; ++y)
        for (int x = 0; x < raw.width; ++x) m.set(y, x, raw.pixels[static_cast<std::size_t>(y) * raw.width + x] >= 128);
    return m;
}

std::vector<std::uint8_t> encode_png_mask(const Mask& mask) {
    std::vector<std::uint8_t> px(static_cast<std::size_t>(mask.width()) * mask.height());
    for (int y = 0; y < mask.height(); ++y)
        for (int x = 0; x < mask.width(); ++x) px[static_cast<std::size_t>(y) * mask.width() + x] = mask.get(y, x) ? 255 : 0;
    return encode_png(px, mask.width(), mask.height(), 1);
}

Mask read_png_mask(const std::filesystem::path& path) { return decode_png_mask(read_bytes(path)); }

void write_png_mask(const std::filesystem::path& path, const Mask& mask) {
    write_bytes(path, encode_png_mask(mask));
}

void write_png_gray(const std::filesystem::path& path, const Tensor& field) {
    OCCMOVE_CHECK(field.channels() == 1, shape, "grayscale PNG needs 1 channel");
    std::vector<std::uint8_t> px(field.size());
    for (std::size_t i = 0; i < field.size(); ++i) px[i] = quantize(field.data()[i]);
    write_bytes(path, encode_png(px, field.width(), field.height(), 1));
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    OCCMOVE_CHECK(in.good(), io, "cannot open ", path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary);
    OCCMOVE_CHECK(out.good(), io, "cannot open ", path.string(), " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    OCCMOVE_CHECK(out.good(), io, "cannot open ", path.string(), " for writing");
    out << text;
}

std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    OCCMOVE_CHECK(in.good(), io, "cannot open ", path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

namespace {
std::string fnv1a(const std::uint8_t* data, std::size_t n) {
    std::uint64_t h = 1469598103934665603ull;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= data[i];
        h *= 1099511628211ull;
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}
}  // namespace

std::string fingerprint(const std::vector<std::uint8_t>& bytes) { return fnv1a(bytes.data(), bytes.size()); }

std::string fingerprint(const std::string& text) {
    return fnv1a(reinterpret_cast<const std::uint8_t*>(text.data()), text.size());
}

}  // namespace occmove::io
