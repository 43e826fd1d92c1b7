// SPDX-License-Identifier: Apache-2.0

#include "occmove/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "occmove/io.hpp"
#include "occmove/seed.hpp"

// After Eigen: resolv.h defines _res.
#include <httplib.h>

namespace occmove {

// ---------------------------------------------------------------- masks

Rle encode_rle(const Mask& mask) {
    Rle r;
    r.height = mask.height();
    r.width = mask.width();
    bool current = false;
    std::uint32_t run = 0;
    for (int x = 0; x < mask.width(); ++x)
        for (int y = 0; y < mask.height(); ++y) {
            const bool v = mask.get(y, x);
            if (v != current) {
                r.counts.push_back(run);
                run = 0;
                current = v;
            }
            ++run;
        }
    r.counts.push_back(run);
    return r;
}

Mask decode_rle(const Rle& rle, MaskSpace space) {
    OCCMOVE_CHECK(rle.height > 0 && rle.width > 0, input, "RLE has an empty size");
    Mask m(space, rle.height, rle.width);
    const std::size_t total = static_cast<std::size_t>(rle.height) * rle.width;
    std::size_t pos = 0;
    bool value = false;
    for (const auto c : rle.counts) {
        OCCMOVE_CHECK(pos + c <= total, input, "RLE counts exceed the mask size");
        if (value)
            for (std::size_t i = pos; i < pos + c; ++i)
                m.set(static_cast<int>(i % rle.height), static_cast<int>(i / rle.height), true);
        pos += c;
        value = !value;
    }
    OCCMOVE_CHECK(pos == total, input, "RLE counts cover ", pos, " of ", total, " pixels");
    return m;
}

std::vector<std::uint32_t> decode_rle_string(const std::string& s) {
    std::vector<std::uint32_t> counts;
    std::vector<long long> raw;
    std::size_t p = 0;
    while (p < s.size()) {
        long long x = 0;
        int k = 0;
        bool more = true;
        while (more) {
            OCCMOVE_CHECK(p < s.size(), input, "truncated RLE string");
            const long long c = static_cast<long long>(s[p]) - 48;
            x |= (c & 0x1f) << (5 * k);
            more = (c & 0x20) != 0;
            ++p;
            ++k;
            if (!more && (c & 0x10)) x |= -1LL << (5 * k);
        }
        if (raw.size() > 2) x += raw[raw.size() - 2];
        OCCMOVE_CHECK(x >= 0, input, "negative run in RLE string");
        raw.push_back(x);
    }
    for (auto v : raw) counts.push_back(static_cast<std::uint32_t>(v));
    return counts;
}

std::string encode_rle_string(const std::vector<std::uint32_t>& counts) {
    std::string s;
    for (std::size_t i = 0; i < counts.size(); ++i) {
        long long x = counts[i];
        if (i > 2) x -= counts[i - 2];
        bool more = true;
        while (more) {
            long long c = x & 0x1f;
            x >>= 5;
            more = (c & 0x10) ? x != -1 : x != 0;
            if (more) c |= 0x20;
            s.push_back(static_cast<char>(c + 48));
        }
    }
    return s;
}

Mask rasterize_polygons(const std::vector<std::vector<double>>& polygons, int height, int width) {
    Mask m(MaskSpace::pixel, height, width);
    for (const auto& poly : polygons) {
        OCCMOVE_CHECK(poly.size() >= 6 && poly.size() % 2 == 0, input, "polygon needs at least three x,y pairs");
        const std::size_t n = poly.size() / 2;
        for (int y = 0; y < height; ++y) {
            const double py = y + 0.5;
            for (int x = 0; x < width; ++x) {
                const double px = x + 0.5;
                bool inside = false;
                for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
                    const double xi = poly[2 * i], yi = poly[2 * i + 1];
                    const double xj = poly[2 * j], yj = poly[2 * j + 1];
                    if ((yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi) inside = !inside;
                }
                if (inside) m.set(y, x, true);
            }
        }
    }
    return m;
}

Mask mask_from_json(const nlohmann::json& seg, int height, int width) {
    if (seg.is_object()) {
        OCCMOVE_CHECK(seg.contains("counts") && seg.contains("size"), input, "RLE object needs 'size' and 'counts'");
        Rle r;
        r.height = seg["size"].at(0).get<int>();
        r.width = seg["size"].at(1).get<int>();
        OCCMOVE_CHECK(r.height == height && r.width == width, input, "RLE size ", r.height, "x", r.width,
                      " does not match image ", height, "x", width);
        if (seg["counts"].is_string()) r.counts = decode_rle_string(seg["counts"].get<std::string>());
        else r.counts = seg["counts"].get<std::vector<std::uint32_t>>();
        return decode_rle(r);
    }
    OCCMOVE_CHECK(seg.is_array() && !seg.empty(), input, "segmentation must be a polygon list or an RLE object");
    std::vector<std::vector<double>> polys;
    if (seg[0].is_number()) polys.push_back(seg.get<std::vector<double>>());
    else polys = seg.get<std::vector<std::vector<double>>>();
    return rasterize_polygons(polys, height, width);
}

// ---------------------------------------------------------------- dataset

namespace {

std::string id_string(const nlohmann::json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); }

}  // namespace

std::vector<AnnotatedObject> load_cocoa(const nlohmann::json& doc) {
    OCCMOVE_CHECK(doc.contains("images") && doc.contains("annotations"), input,
                  "annotation file needs 'images' and 'annotations'");
    struct ImageInfo {
        std::string file;
        int h, w;
    };
    std::map<std::string, ImageInfo> images;
    for (const auto& im : doc["images"])
        images[id_string(im.at("id"))] = {im.at("file_name").get<std::string>(), im.at("height").get<int>(),
                                          im.at("width").get<int>()};
    std::map<std::string, std::string> categories;
    if (doc.contains("categories"))
        for (const auto& c : doc["categories"]) categories[id_string(c.at("id"))] = c.at("name").get<std::string>();

    std::vector<AnnotatedObject> out;
    for (const auto& ann : doc["annotations"]) {
        const std::string image_id = id_string(ann.at("image_id"));
        const auto it = images.find(image_id);
        OCCMOVE_CHECK(it != images.end(), input, "annotation references unknown image ", image_id);
        const auto& regions = ann.contains("regions") ? ann["regions"] : nlohmann::json::array({ann});
        int index = 0;
        for (const auto& reg : regions) {
            AnnotatedObject o;
            o.image_id = image_id;
            o.file_name = it->second.file;
            o.height = it->second.h;
            o.width = it->second.w;
            o.region_index = index++;
            if (reg.contains("name")) o.category = reg["name"].get<std::string>();
            else if (reg.contains("category_name")) o.category = reg["category_name"].get<std::string>();
            else if (reg.contains("category_id")) o.category = categories.at(id_string(reg["category_id"]));
            OCCMOVE_CHECK(!o.category.empty(), input, "region without a category in image ", image_id);
            const Mask amodal = mask_from_json(reg.at("segmentation"), o.height, o.width);
            o.amodal = amodal;
            o.visible = reg.contains("visible_mask") && !reg["visible_mask"].is_null()
                            ? mask_from_json(reg["visible_mask"], o.height, o.width)
                            : amodal;
            out.push_back(std::move(o));
        }
    }
    return out;
}

Box box_around(int cx, int cy, int side, int height, int width) {
    OCCMOVE_CHECK(side >= 1 && side <= height && side <= width, contract, "box side ", side, " does not fit ",
                  height, "x", width);
    const int x0 = std::clamp(cx - side / 2, 0, width - side);
    const int y0 = std::clamp(cy - side / 2, 0, height - side);
    return {x0, y0, x0 + side, y0 + side};
}

Box SampleRecord::target_box(std::size_t k) const {
    const auto& t = targets.at(k);
    return box_around(t.x, t.y, box_side, height, width);
}

DatasetBuild build_dataset(const std::vector<AnnotatedObject>& objects, const DatasetFilters& filters,
                           std::uint64_t seed) {
    OCCMOVE_CHECK(filters.targets_per_sample >= 1, config, "targets_per_sample must be >= 1");
    DatasetBuild out;
    for (const auto& o : objects) {
        const std::string tag = o.image_id + "#" + std::to_string(o.region_index) + " (" + o.category + ")";
        const double area = static_cast<double>(o.height) * o.width;
        const double visible = static_cast<double>(o.visible.count());
        if (visible < filters.min_visible_fraction * area || visible == 0) {
            out.log.push_back("dropped " + tag + ": visible area below threshold");
            continue;
        }
        if (o.amodal) {
            const double amodal = static_cast<double>(o.amodal->united(o.visible).count());
            if (1.0 - visible / amodal < filters.min_occluded_fraction) {
                out.log.push_back("dropped " + tag + ": not occluded enough");
                continue;
            }
        }
        const CropFrame frame = make_crop_frame(o.visible, filters.relax, 1);
        const int r = frame.side;
        if (r > o.height || r > o.width) {
            out.log.push_back("dropped " + tag + ": no target box of side " + std::to_string(r) + " fits");
            continue;
        }
        SampleRecord s;
        s.image_path = o.file_name;
        s.image_id = o.image_id;
        s.region_index = o.region_index;
        s.height = o.height;
        s.width = o.width;
        s.category = o.category;
        s.prompt = "A photo of " + o.category;
        s.visible = o.visible;
        s.amodal = o.amodal;
        s.box_side = r;
        s.original_box = box_around(frame.center_x, frame.center_y, r, o.height, o.width);
        // Centres whose box [c - r/2, c - r/2 + r) stays inside the image.
        std::mt19937_64 rng(derive_seed(seed, "targets:" + o.image_id + ":" + std::to_string(o.region_index)));
        std::uniform_int_distribution<int> px(r / 2, o.width - r + r / 2);
        std::uniform_int_distribution<int> py(r / 2, o.height - r + r / 2);
        for (int k = 0; k < filters.targets_per_sample; ++k) s.targets.push_back({px(rng), py(rng)});
        out.samples.push_back(std::move(s));
    }
    return out;
}

namespace {

nlohmann::json rle_json(const Mask& m) {
    const Rle r = encode_rle(m);
    return {{"size", {r.height, r.width}}, {"counts", r.counts}};
}

nlohmann::json box_json(const Box& b) { return {b.x0, b.y0, b.x1, b.y1}; }

Box box_from(const nlohmann::json& j) {
    return {j.at(0).get<int>(), j.at(1).get<int>(), j.at(2).get<int>(), j.at(3).get<int>()};
}

}  // namespace

nlohmann::json to_json(const SampleRecord& s) {
    nlohmann::json targets = nlohmann::json::array();
    for (const auto& t : s.targets) targets.push_back({t.x, t.y});
    return {{"image", s.image_path},
            {"image_id", s.image_id},
            {"region", s.region_index},
            {"size", {s.height, s.width}},
            {"category", s.category},
            {"prompt", s.prompt},
            {"visible_mask", rle_json(s.visible)},
            {"amodal_mask", s.amodal ? rle_json(*s.amodal) : nlohmann::json(nullptr)},
            {"box_side", s.box_side},
            {"original_box", box_json(s.original_box)},
            {"targets", targets}};
}

SampleRecord sample_from_json(const nlohmann::json& j) {
    try {
        SampleRecord s;
        s.image_path = j.at("image");
        s.image_id = j.at("image_id");
        s.region_index = j.at("region");
        s.height = j.at("size").at(0);
        s.width = j.at("size").at(1);
        s.category = j.at("category");
        s.prompt = j.at("prompt");
        s.visible = mask_from_json(j.at("visible_mask"), s.height, s.width);
        if (!j.at("amodal_mask").is_null()) s.amodal = mask_from_json(j["amodal_mask"], s.height, s.width);
        s.box_side = j.at("box_side");
        s.original_box = box_from(j.at("original_box"));
        for (const auto& t : j.at("targets")) s.targets.push_back({t.at(0), t.at(1)});
        for (const auto& t : s.targets)
            OCCMOVE_CHECK(t.x >= 0 && t.x < s.width && t.y >= 0 && t.y < s.height, input, "target point outside ",
                          s.image_path);
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::input, std::string("malformed sample record: ") + e.what());
    }
}

void write_jsonl(const std::filesystem::path& path, const std::vector<SampleRecord>& samples) {
    std::string text;
    for (const auto& s : samples) text += to_json(s).dump() + "\n";
    io::write_text(path, text);
}

std::vector<SampleRecord> read_jsonl(const std::filesystem::path& path) {
    std::istringstream in(io::read_text(path));
    std::vector<SampleRecord> out;
    std::string line;
    int n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorKind::input, path.string() + ":" + std::to_string(n) + ": " + e.what());
        }
        out.push_back(sample_from_json(j));
    }
    return out;
}

// ---------------------------------------------------------------- embedders

Vector Embedder::embed_text(const std::string&) const {
    throw Error(ErrorKind::contract, "embedder " + fingerprint() + " has no text tower");
}

StubEmbedder::StubEmbedder(EmbedderKind kind, int dim, std::uint64_t seed, int grid)
    : m_kind(kind), m_dim(dim), m_grid(grid), m_seed(seed) {
    OCCMOVE_CHECK(dim > 0 && grid > 0, config, "stub embedder needs positive dim and grid");
    const int in = 3 * grid * grid;
    const Tensor g = gaussian(1, dim, in, derive_seed(seed, "stub-image"));
    m_image_proj = Matrix(dim, in);
    for (int r = 0; r < dim; ++r)
        for (int c = 0; c < in; ++c) m_image_proj(r, c) = g.at(0, r, c) / std::sqrt(static_cast<double>(in));
    m_fingerprint = "stub:" + std::string(kind == EmbedderKind::image ? "image" : "image_text") + ":d" +
                    std::to_string(dim) + ":g" + std::to_string(grid) + ":s" + std::to_string(seed);
}

Vector StubEmbedder::embed_image(const Tensor& rgb) const {
    OCCMOVE_CHECK(rgb.channels() == 3 && !rgb.empty(), shape, "embedder expects a non-empty RGB image");
    const Tensor small = area_resize(rgb, m_grid, m_grid);
    Vector x(small.size());
    for (std::size_t i = 0; i < small.size(); ++i) x(static_cast<Eigen::Index>(i)) = small.data()[i] - 0.5;
    return m_image_proj * x;
}

Vector StubEmbedder::embed_text(const std::string& text) const {
    OCCMOVE_CHECK(m_kind == EmbedderKind::image_text, contract, "embedder ", m_fingerprint, " has no text tower");
    Vector v = Vector::Zero(m_dim);
    for (const auto& w : split_words(text)) {
        const Tensor g = gaussian(1, 1, m_dim, derive_seed(m_seed, "stub-word:" + w));
        for (int i = 0; i < m_dim; ++i) v(i) += g.data()[static_cast<std::size_t>(i)];
    }
    return v;
}

HttpEmbedder::HttpEmbedder(std::string base_url) : m_url(std::move(base_url)) {
    httplib::Client cli(m_url);
    cli.set_connection_timeout(5);
    auto res = cli.Get("/info");
    OCCMOVE_CHECK(res && res->status == 200, unavailable, "embedder at ", m_url, " did not answer /info");
    nlohmann::json info;
    try {
        info = nlohmann::json::parse(res->body);
        m_dim = info.at("dim").get<int>();
        const std::string kind = info.at("kind").get<std::string>();
        OCCMOVE_CHECK(kind == "image" || kind == "image_text", input, "unknown embedder kind '", kind, "'");
        m_kind = kind == "image" ? EmbedderKind::image : EmbedderKind::image_text;
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::input, "bad /info reply from " + m_url + ": " + e.what());
    }
    m_fingerprint = "http:" + io::fingerprint(info.dump());
}

nlohmann::json HttpEmbedder::post(const std::string& path, const std::string& body, const std::string& type) const {
    httplib::Client cli(m_url);
    auto res = cli.Post(path, body, type);
    OCCMOVE_CHECK(res && res->status == 200, unavailable, "embedder request ", path, " failed");
    try {
        return nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::input, "bad embedder reply: " + std::string(e.what()));
    }
}

namespace {

Vector vector_from(const nlohmann::json& j, int dim) {
    const auto v = j.at("embedding").get<std::vector<double>>();
    OCCMOVE_CHECK(static_cast<int>(v.size()) == dim, shape, "embedding has ", v.size(), " entries, expected ", dim);
    return Eigen::Map<const Vector>(v.data(), dim);
}

}  // namespace

Vector HttpEmbedder::embed_image(const Tensor& rgb) const {
    const auto png = io::encode_png_rgb(rgb);
    return vector_from(post("/embed/image", std::string(png.begin(), png.end()), "image/png"), m_dim);
}

Vector HttpEmbedder::embed_text(const std::string& text) const {
    OCCMOVE_CHECK(m_kind == EmbedderKind::image_text, contract, "embedder ", m_fingerprint, " has no text tower");
    return vector_from(post("/embed/text", text, "text/plain"), m_dim);
}

// ---------------------------------------------------------------- metrics

double cosine(const Vector& a, const Vector& b) {
    OCCMOVE_CHECK(a.size() == b.size(), shape, "cosine of vectors with different sizes");
    const double na = a.norm(), nb = b.norm();
    OCCMOVE_CHECK(na > 0 && nb > 0, numeric, "cosine of a zero vector");
    return a.dot(b) / (na * nb);
}

namespace {

double mmd_unbiased(const Matrix& kxx, const Matrix& kyy, const Matrix& kxy, bool paired) {
    const double m = static_cast<double>(kxx.rows());
    const double n = static_cast<double>(kyy.rows());
    const double sxx = (kxx.sum() - kxx.trace()) / (m * (m - 1));
    const double syy = (kyy.sum() - kyy.trace()) / (n * (n - 1));
    const double sxy = paired ? (kxy.sum() - kxy.trace()) / (m * (m - 1)) : kxy.sum() / (m * n);
    return sxx + syy - 2.0 * sxy;
}

}  // namespace

KidResult kid_features(const Matrix& a, const Matrix& b, const KidOptions& o) {
    OCCMOVE_CHECK(a.rows() >= 2 && b.rows() >= 2, contract, "KID needs at least two samples per set");
    OCCMOVE_CHECK(a.cols() == b.cols(), shape, "KID feature widths differ");
    OCCMOVE_CHECK(o.block_size >= 2, config, "KID block size must be >= 2");
    const double gamma = o.gamma > 0 ? o.gamma : 1.0 / static_cast<double>(a.cols());
    auto kernel = [&](const Matrix& x, const Matrix& y) {
        return ((gamma * (x * y.transpose())).array() + o.coef0).pow(o.degree).matrix();
    };
    const bool paired = a.rows() == b.rows();
    KidResult r;
    r.value = mmd_unbiased(kernel(a, a), kernel(b, b), kernel(a, b), paired);

    const Eigen::Index n = std::min(a.rows(), b.rows());
    r.block_size = static_cast<int>(std::min<Eigen::Index>(o.block_size, n));
    if (n < o.block_size)
        r.warnings.push_back("set of " + std::to_string(n) + " is smaller than the block size " +
                             std::to_string(o.block_size) + "; single block used");
    r.blocks = static_cast<int>(n / r.block_size);
    std::vector<double> est;
    for (int k = 0; k < r.blocks; ++k) {
        const Matrix x = a.middleRows(k * r.block_size, r.block_size);
        const Matrix y = b.middleRows(k * r.block_size, r.block_size);
        est.push_back(mmd_unbiased(kernel(x, x), kernel(y, y), kernel(x, y), true));
    }
    if (est.size() > 1) {
        double mean = 0;
        for (double e : est) mean += e;
        mean /= est.size();
        double var = 0;
        for (double e : est) var += (e - mean) * (e - mean);
        r.block_std = std::sqrt(var / (est.size() - 1));
    }
    return r;
}

namespace {

Matrix embed_all(const std::vector<Tensor>& set, const Embedder& e) {
    Matrix m(static_cast<Eigen::Index>(set.size()), e.dim());
    for (std::size_t i = 0; i < set.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = e.embed_image(set[i]).transpose();
    return m;
}

Tensor crop_box(const Tensor& img, const Box& b) {
    OCCMOVE_CHECK(!b.empty(), contract, "degenerate metric box");
    OCCMOVE_CHECK(b.x0 >= 0 && b.y0 >= 0 && b.x1 <= img.width() && b.y1 <= img.height(), contract,
                  "metric box [", b.x0, ",", b.y0, ",", b.x1, ",", b.y1, ") outside the ", img.width(), "x",
                  img.height(), " image");
    return crop(img, b.y0, b.x0, b.height(), b.width());
}

}  // namespace

KidResult kid(const std::vector<Tensor>& set_a, const std::vector<Tensor>& set_b, const Embedder& embedder,
              const KidOptions& options) {
    OCCMOVE_CHECK(!set_a.empty() && !set_b.empty(), contract, "KID needs non-empty sets");
    return kid_features(embed_all(set_a, embedder), embed_all(set_b, embedder), options);
}

Tensor composite_on_white(const Tensor& image, const Mask& mask) {
    OCCMOVE_CHECK(mask.height() == image.height() && mask.width() == image.width(), shape,
                  "composite mask does not match the image");
    Tensor out(image.channels(), image.height(), image.width(), 1.0);
    const auto bits = mask.bits();
    for (int c = 0; c < image.channels(); ++c) {
        auto o = out.plane(c);
        const auto s = image.plane(c);
        for (std::size_t i = 0; i < o.size(); ++i)
            if (bits[i]) o[i] = s[i];
    }
    return out;
}

double clip_t(const std::vector<Tensor>& images, const std::vector<std::string>& prompts, const Embedder& embedder) {
    OCCMOVE_CHECK(images.size() == prompts.size(), contract, "clip_t got ", images.size(), " images and ",
                  prompts.size(), " prompts");
    OCCMOVE_CHECK(!images.empty(), contract, "clip_t needs at least one pair");
    double sum = 0;
    for (std::size_t i = 0; i < images.size(); ++i)
        sum += cosine(embedder.embed_image(images[i]), embedder.embed_text(prompts[i]));
    return 100.0 * sum / static_cast<double>(images.size());
}

double dino_op(const Tensor& source, const Tensor& edited, const Box& original, const Embedder& embedder) {
    return cosine(embedder.embed_image(crop_box(source, original)), embedder.embed_image(crop_box(edited, original)));
}

double dino_tp(const Tensor& source, const Tensor& edited, const Box& original, const Box& target,
               const Embedder& embedder) {
    return cosine(embedder.embed_image(crop_box(source, original)), embedder.embed_image(crop_box(edited, target)));
}

double clip_tp(const Tensor& source, const Tensor& edited, const Box& original, const Box& target,
               const Embedder& embedder) {
    OCCMOVE_CHECK(embedder.kind() == EmbedderKind::image_text, contract, "clip_tp needs an image-text embedder");
    return dino_tp(source, edited, original, target, embedder);
}

// ---------------------------------------------------------------- reports

void MetricReport::aggregate() {
    auto mean = [](const std::vector<double>& v) {
        if (v.empty()) return std::nan("");
        double s = 0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
    };
    std::vector<double> op, tp, ctp;
    for (const auto& c : cases) {
        op.push_back(c.dino_op);
        tp.push_back(c.dino_tp);
        ctp.push_back(c.clip_tp);
    }
    dino_op = mean(op);
    dino_tp = mean(tp);
    clip_tp = mean(ctp);
    clip_t = mean(clip_t_per_sample);
}

nlohmann::json MetricReport::to_json() const {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& c : cases)
        rows.push_back({{"sample", c.sample}, {"target", c.target}, {"dino_op", c.dino_op}, {"dino_tp", c.dino_tp},
                        {"clip_tp", c.clip_tp}});
    auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
    return {{"config_fingerprint", config_fingerprint},
            {"embedders", {{"image", image_embedder}, {"image_text", image_text_embedder}}},
            {"kid",
             {{"value", kid.value},
              {"block_std", kid.block_std},
              {"blocks", kid.blocks},
              {"block_size", kid.block_size},
              {"kernel", "polynomial degree 3, gamma 1/dim, coef0 1"},
              {"warnings", kid.warnings}}},
            {"clip_t", {{"mean", num(clip_t)}, {"per_sample", clip_t_per_sample}}},
            {"dino_op", num(dino_op)},
            {"dino_tp", num(dino_tp)},
            {"clip_tp", num(clip_tp)},
            {"cases", rows},
            {"warnings", warnings}};
}

std::string MetricReport::to_csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "sample,target,dino_op,dino_tp,clip_tp\n";
    for (const auto& c : cases)
        os << c.sample << ',' << c.target << ',' << c.dino_op << ',' << c.dino_tp << ',' << c.clip_tp << '\n';
    return os.str();
}

bool comparable(const nlohmann::json& a, const nlohmann::json& b) {
    return a.at("embedders") == b.at("embedders");
}

namespace {

/// Crops a pixel mask through a frame built for the same image.
Mask crop_mask_to_frame(const Mask& mask, const CropFrame& f) {
    const Mask padded = zero_pad(mask, f.pad_top, f.pad_bottom, f.pad_left, f.pad_right);
    const Mask c = crop(padded, f.window.y0 + f.pad_top, f.window.x0 + f.pad_left, f.side, f.side);
    return resample_mask(c, f.output_side, f.output_side, MaskSpace::pixel);
}

}  // namespace

MetricReport run_evaluation(const Backbone& backbone, const std::vector<SampleRecord>& samples,
                            const PipelineConfig& config, const Embedder& image_embedder,
                            const Embedder& image_text_embedder, const EvalOptions& options,
                            const std::filesystem::path& out_dir) {
    OCCMOVE_CHECK(image_text_embedder.kind() == EmbedderKind::image_text, config,
                  "the CLIP role needs an image-text embedder");
    MetricReport report;
    report.config_fingerprint = io::fingerprint(to_json(config).dump());
    report.image_embedder = image_embedder.fingerprint();
    report.image_text_embedder = image_text_embedder.fingerprint();
    std::filesystem::create_directories(out_dir);

    const BackboneInfo& info = backbone.info();
    std::vector<Tensor> completed, reference;
    std::vector<std::string> prompts;
    const std::size_t count = options.limit ? std::min(options.limit, samples.size()) : samples.size();
    for (std::size_t si = 0; si < count; ++si) {
        const SampleRecord& s = samples[si];
        const Tensor image = io::read_png_rgb(options.images_dir / s.image_path);
        OCCMOVE_CHECK(image.height() == s.height && image.width() == s.width, input, s.image_path, " is ",
                      image.height(), "x", image.width(), ", annotation says ", s.height, "x", s.width);
        EditRequest req;
        req.image = image;
        req.visible = s.visible;
        req.category = s.category;
        bool have_object = false;
        for (std::size_t k = 0; k < s.targets.size(); ++k) {
            req.target_x = s.targets[k].x;
            req.target_y = s.targets[k].y;
            const auto dir = out_dir / "runs" / ("s" + std::to_string(si) + "_t" + std::to_string(k));
            try {
                const EditResult res = run_edit(backbone, req, config, dir);
                CaseMetrics c;
                c.sample = si;
                c.target = static_cast<int>(k);
                c.dino_op = dino_op(image, res.edited_image, s.original_box, image_embedder);
                c.dino_tp = dino_tp(image, res.edited_image, s.original_box, s.target_box(k), image_embedder);
                c.clip_tp = clip_tp(image, res.edited_image, s.original_box, s.target_box(k), image_text_embedder);
                report.cases.push_back(c);
                if (!have_object) {
                    // The completed object does not depend on the target point.
                    const CompletedObject& obj = res.completed;
                    completed.push_back(composite_on_white(obj.image, obj.amodal_mask));
                    prompts.push_back(s.prompt);
                    const Normalization n = make_normalization(s.height, s.width, info.native_side);
                    const PreparedInput ref = prepare_input(normalize_image(image, n), normalize_mask(s.visible, n),
                                                            config.eta, info.native_side, info.native_latent_side());
                    const Mask ref_mask =
                        s.amodal ? crop_mask_to_frame(normalize_mask(*s.amodal, n), ref.frame) : ref.visible_pixel;
                    reference.push_back(composite_on_white(ref.image, ref_mask));
                    have_object = true;
                }
            } catch (const Error& e) {
                report.warnings.push_back("sample " + std::to_string(si) + " target " + std::to_string(k) + ": " +
                                          e.what());
            }
            if (!options.keep_runs) std::filesystem::remove_all(dir);
        }
    }
    if (!options.keep_runs) std::filesystem::remove_all(out_dir / "runs");

    for (std::size_t i = 0; i < completed.size(); ++i)
        report.clip_t_per_sample.push_back(100.0 * cosine(image_text_embedder.embed_image(completed[i]),
                                                          image_text_embedder.embed_text(prompts[i])));
    if (completed.size() >= 2) report.kid = kid(completed, reference, image_embedder, options.kid);
    else report.warnings.push_back("KID needs at least two completed objects");
    report.aggregate();
    io::write_text(out_dir / "report.json", report.to_json().dump(2));
    io::write_text(out_dir / "report.csv", report.to_csv());
    return report;
}

}  // namespace occmove
