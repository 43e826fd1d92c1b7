// SPDX-License-Identifier: Apache-2.0

#include "occmove/attention.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdio>

#include "occmove/io.hpp"

namespace occmove {

Matrix softmax_rows(const Matrix& logits) {
    const Vector row_max = logits.rowwise().maxCoeff();
    Matrix out = (logits.colwise() - row_max).array().exp().matrix();
    const Vector sums = out.rowwise().sum();
    out.array().colwise() /= sums.array();
    return out;
}

Matrix masked_softmax(const Matrix& logits, const Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>& allowed) {
    OCCMOVE_CHECK(allowed.rows() == logits.rows() && allowed.cols() == logits.cols(), shape,
                  "softmax mask shape mismatch");
    const Matrix shifted = (allowed).select(logits, logits.array() + masked_logit);
    return softmax_rows(shifted);
}

namespace {

Tensor column_as_grid(const Matrix& m, Eigen::Index col, int side) {
    Tensor t(1, side, side);
    for (int i = 0; i < side * side; ++i) t.data()[i] = m(i, col);
    return t;
}

Tensor row_as_grid(const Matrix& m, Eigen::Index row, int side) {
    Tensor t(1, side, side);
    for (int i = 0; i < side * side; ++i) t.data()[i] = m(row, i);
    return t;
}

}  // namespace

LayerMaps resample_layer(const LayerMaps& layer, int side) {
    if (layer.side == side) return layer;
    const int n = side * side;
    LayerMaps out;
    out.layer = layer.layer;
    out.side = side;
    out.decoder = layer.decoder;

    out.cross.resize(n, layer.cross.cols());
    for (Eigen::Index c = 0; c < layer.cross.cols(); ++c) {
        const auto g = bilinear_resize(column_as_grid(layer.cross, c, layer.side), side, side);
        for (int i = 0; i < n; ++i) out.cross(i, c) = g.data()[i];
    }

    const int n_src = layer.side * layer.side;
    Matrix query_resampled(n, n_src);
    for (int k = 0; k < n_src; ++k) {
        const auto g = bilinear_resize(column_as_grid(layer.self, k, layer.side), side, side);
        for (int i = 0; i < n; ++i) query_resampled(i, k) = g.data()[i];
    }
    out.self.resize(n, n);
    for (int i = 0; i < n; ++i) {
        const auto g = bilinear_resize(row_as_grid(query_resampled, i, layer.side), side, side);
        double sum = 0.0;
        for (int k = 0; k < n; ++k) sum += g.data()[k];
        for (int k = 0; k < n; ++k) out.self(i, k) = sum > 0 ? g.data()[k] / sum : 0.0;
    }
    return out;
}

AveragedMaps average_maps(const AttentionSnapshot& snapshot, int side) {
    OCCMOVE_CHECK(!snapshot.empty(), contract, "average_maps on an empty snapshot");
    OCCMOVE_CHECK(side > 0, dimension, "averaging resolution must be positive");
    const int n = side * side;
    AveragedMaps avg;
    avg.side = side;
    avg.cross = Matrix::Zero(n, snapshot.layers.front().cross.cols());
    avg.self = Matrix::Zero(n, n);
    for (const auto& layer : snapshot.layers) {
        OCCMOVE_CHECK(layer.cross.cols() == avg.cross.cols(), shape, "layers disagree on token count");
        if (layer.side == side) {
            avg.cross += layer.cross;
            avg.self += layer.self;
        } else {
            const auto r = resample_layer(layer, side);
            avg.cross += r.cross;
            avg.self += r.self;
        }
    }
    const double inv = 1.0 / static_cast<double>(snapshot.layers.size());
    avg.cross *= inv;
    avg.self *= inv;
    return avg;
}

Vector select_token_map(const Matrix& avg_cross, TokenSpan span) {
    OCCMOVE_CHECK(span.size() > 0, index, "empty token span");
    OCCMOVE_CHECK(span.begin >= 0 && span.end <= avg_cross.cols(), index, "token span [", span.begin,
                  ",", span.end, ") outside ", avg_cross.cols(), " columns");
    Vector v = avg_cross.middleCols(span.begin, span.size()).rowwise().sum();
    return v / static_cast<double>(span.size());
}

RefinedMap refine(const Matrix& avg_self, const Vector& token_map, int lambda, int side) {
    OCCMOVE_CHECK(lambda >= 0, range, "lambda must be a non-negative integer");
    OCCMOVE_CHECK(avg_self.rows() == avg_self.cols() && avg_self.cols() == token_map.size(), shape,
                  "self-attention map and token map disagree");
    OCCMOVE_CHECK(token_map.size() == static_cast<Eigen::Index>(side) * side, shape,
                  "token map is not a ", side, "x", side, " grid");
    Vector r = token_map;
    for (int p = 0; p < lambda; ++p) r = avg_self * r;
    RefinedMap out;
    out.grid = Tensor(1, side, side);
    const double peak = r.size() > 0 ? r.maxCoeff() : 0.0;
    for (Eigen::Index i = 0; i < r.size(); ++i) {
        out.grid.data()[i] = peak > 0 ? std::max(0.0, r(i) / peak) : 0.0;
    }
    return out;
}

Mask binarize_map(const RefinedMap& map, double threshold, int dilation) {
    auto m = threshold_to_mask(map.grid, threshold, MaskSpace::latent);
    return dilation > 0 ? dilate(m, dilation) : m;
}

void export_refined_maps(const std::filesystem::path& dir, const std::vector<RefinedMap>& maps) {
    std::filesystem::create_directories(dir);
    nlohmann::json series = nlohmann::json::array();
    for (const auto& m : maps) {
        char name[32];
        std::snprintf(name, sizeof(name), "refined_t%03d.png", m.timestep);
        io::write_png_gray(dir / name, m.grid);
        series.push_back({{"timestep", m.timestep},
                          {"file", name},
                          {"side", m.side()},
                          {"span", {m.span.begin, m.span.end}},
                          {"binarized_area", binarize_map(m, 0.5, 0).count()}});
    }
    io::write_text(dir / "refined_maps.json", nlohmann::json{{"maps", series}}.dump(2));
}

}  // namespace occmove
