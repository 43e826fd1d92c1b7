// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <thread>

#include "fixtures.hpp"
#include "occmove/eval.hpp"
#include "occmove/seed.hpp"
#include "occmove/toy_backbone.hpp"

// After Eigen: resolv.h defines _res.
#include <httplib.h>

using namespace occmove;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("occmove_eval_" + name);
    fs::remove_all(p);
    return p;
}

Matrix cloud(int n, int dim, double offset, std::uint64_t seed) {
    const Tensor g = gaussian(1, n, dim, seed);
    Matrix m(n, dim);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < dim; ++j) m(i, j) = g.at(0, i, j) + offset;
    return m;
}

double poly_k(const Matrix& a, int i, const Matrix& b, int j) {
    double dot = 0;
    for (int d = 0; d < a.cols(); ++d) dot += a(i, d) * b(j, d);
    return std::pow(dot / a.cols() + 1.0, 3);
}

// Textbook double loops, no matrix algebra.
double naive_mmd(const Matrix& x, const Matrix& y) {
    const int m = static_cast<int>(x.rows()), n = static_cast<int>(y.rows());
    if (m == n) {
        double s = 0;
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < m; ++j)
                if (i != j) s += poly_k(x, i, x, j) + poly_k(y, i, y, j) - poly_k(x, i, y, j) - poly_k(x, j, y, i);
        return s / (m * (m - 1.0));
    }
    double sxx = 0, syy = 0, sxy = 0;
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < m; ++j)
            if (i != j) sxx += poly_k(x, i, x, j);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            if (i != j) syy += poly_k(y, i, y, j);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) sxy += poly_k(x, i, y, j);
    return sxx / (m * (m - 1.0)) + syy / (n * (n - 1.0)) - 2 * sxy / (double(m) * n);
}

// Embedder returning fixed vectors keyed by the top-left red value.
class TableEmbedder final : public Embedder {
public:
    std::map<int, Vector> images;
    std::map<std::string, Vector> texts;
    EmbedderKind kind() const override { return EmbedderKind::image_text; }
    int dim() const override { return 3; }
    std::string fingerprint() const override { return "table"; }
    Vector embed_image(const Tensor& rgb) const override {
        return images.at(static_cast<int>(std::lround(rgb.at(0, 0, 0) * 10)));
    }
    Vector embed_text(const std::string& t) const override { return texts.at(t); }
};

Vector vec3(double a, double b, double c) {
    Vector v(3);
    v << a, b, c;
    return v;
}

}  // namespace

TEST_CASE("compressed RLE strings") {
    CHECK(encode_rle_string({0, 5, 3}) == "053");
    CHECK(encode_rle_string({2, 3, 4, 1}) == "234N");
    CHECK(decode_rle_string("234N") == std::vector<std::uint32_t>{2, 3, 4, 1});
    const std::vector<std::uint32_t> big{7, 1000, 3, 70000, 12, 5, 99999};
    CHECK(decode_rle_string(encode_rle_string(big)) == big);
}

TEST_CASE("mask RLE is column-major and round-trips") {
    Mask m(MaskSpace::pixel, 3, 2);
    m.set(1, 0, true);
    m.set(0, 1, true);
    const Rle r = encode_rle(m);
    // column-major: (0,0)=0 (1,0)=1 (2,0)=0 (0,1)=1 (1,1)=0 (2,1)=0
    CHECK(r.counts == std::vector<std::uint32_t>{1, 1, 1, 1, 2});
    const Mask back = decode_rle(r);
    CHECK(back.count() == 2);
    CHECK(back.get(1, 0));
    CHECK(back.get(0, 1));

    Mask rnd(MaskSpace::pixel, 17, 9);
    const Tensor g = gaussian(1, 17, 9, 5);
    for (int y = 0; y < 17; ++y)
        for (int x = 0; x < 9; ++x) rnd.set(y, x, g.at(0, y, x) > 0);
    const Mask rt = decode_rle(encode_rle(rnd));
    CHECK(rt.bits().size() == rnd.bits().size());
    CHECK(std::equal(rt.bits().begin(), rt.bits().end(), rnd.bits().begin()));
    CHECK_THROWS_AS(decode_rle({2, 2, {1, 5}}), Error);
}

TEST_CASE("polygon rasterization samples pixel centres") {
    const Mask m = rasterize_polygons({{2, 2, 6, 2, 6, 6, 2, 6}}, 8, 8);
    CHECK(m.count() == 16);
    CHECK(m.get(2, 2));
    CHECK(m.get(5, 5));
    CHECK_FALSE(m.get(6, 6));
    const Mask tri = rasterize_polygons({{0, 0, 8, 0, 0, 8}}, 8, 8);
    CHECK(tri.count() == 28);  // centres with x + y < 7
}

TEST_CASE("dataset protocol") {
    const fs::path dir = scratch("dataset");
    const auto path = fixtures::write_cocoa_fixture(dir);
    const auto objects = load_cocoa(nlohmann::json::parse(io::read_text(path)));
    REQUIRE(objects.size() == 5);
    const auto built = build_dataset(objects, {}, 7);
    CHECK(built.samples.size() == 3);
    CHECK(built.log.size() == 2);

    std::size_t cases = 0;
    for (const auto& s : built.samples) {
        CHECK(s.targets.size() == 8);
        cases += s.targets.size();
        CHECK(s.prompt == "A photo of " + s.category);
        for (std::size_t k = 0; k < s.targets.size(); ++k) {
            const Box b = s.target_box(k);
            CHECK(b.x0 >= 0);
            CHECK(b.y0 >= 0);
            CHECK(b.x1 <= s.width);
            CHECK(b.y1 <= s.height);
            // the box is centred on the point, not shifted
            CHECK(b.x0 == s.targets[k].x - s.box_side / 2);
            CHECK(b.y0 == s.targets[k].y - s.box_side / 2);
        }
    }
    CHECK(cases == 24);
    CHECK(built.samples[0].prompt == "A photo of cup");

    const auto again = build_dataset(objects, {}, 7);
    const auto other = build_dataset(objects, {}, 8);
    bool differs = false;
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t k = 0; k < 8; ++k) {
            CHECK(again.samples[i].targets[k].x == built.samples[i].targets[k].x);
            CHECK(again.samples[i].targets[k].y == built.samples[i].targets[k].y);
            differs = differs || other.samples[i].targets[k].x != built.samples[i].targets[k].x;
        }
    CHECK(differs);

    write_jsonl(dir / "dataset.jsonl", built.samples);
    const auto read = read_jsonl(dir / "dataset.jsonl");
    REQUIRE(read.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) CHECK(to_json(read[i]) == to_json(built.samples[i]));
}

TEST_CASE("KID against the double-loop oracle") {
    const Matrix a = cloud(40, 64, 0.0, 1);
    const Matrix b = cloud(40, 64, 0.3, 2);
    const Matrix c = cloud(25, 64, 0.3, 3);
    KidOptions o;
    o.block_size = 10;
    CHECK(std::abs(kid_features(a, b, o).value - naive_mmd(a, b)) < 1e-8);
    CHECK(std::abs(kid_features(a, c, o).value - naive_mmd(a, c)) < 1e-8);
    CHECK(kid_features(a, b, o).value > 0);
    CHECK(std::abs(kid_features(a, a, o).value) <= 1e-9);
    CHECK(std::abs(kid_features(a, b, o).value - kid_features(b, a, o).value) <= 1e-12);
    CHECK(std::abs(kid_features(a, c, o).value - kid_features(c, a, o).value) <= 1e-12);
    const auto r = kid_features(a, b, o);
    CHECK(r.blocks == 4);
    CHECK(r.block_std > 0);
    CHECK(r.warnings.empty());

    const auto small = kid_features(a, b, {});
    CHECK(small.blocks == 1);
    CHECK(small.block_size == 40);
    CHECK(small.warnings.size() == 1);
}

TEST_CASE("clip_t against hand-computed cosines") {
    TableEmbedder e;
    e.images[1] = vec3(1, 0, 0);
    e.images[2] = vec3(1, 1, 0);
    e.images[3] = vec3(0, 0, 2);
    e.texts["a"] = vec3(1, 0, 0);
    e.texts["b"] = vec3(0, 1, 0);
    e.texts["c"] = vec3(0, 3, 4);
    const std::vector<Tensor> imgs{Tensor(3, 2, 2, 0.1), Tensor(3, 2, 2, 0.2), Tensor(3, 2, 2, 0.3)};
    // cosines: 1, 1/sqrt(2), 4/5
    const double expect = 100.0 * (1.0 + 1.0 / std::sqrt(2.0) + 0.8) / 3.0;
    CHECK(std::abs(clip_t(imgs, {"a", "b", "c"}, e) - expect) < 1e-9);
    CHECK(std::abs(clip_t({imgs[0]}, {"a"}, e) - 100.0) < 1e-12);
    CHECK(std::abs(clip_t({imgs[0]}, {"b"}, e)) < 1e-12);
    CHECK_THROWS_AS(clip_t(imgs, {"a"}, e), Error);
}

TEST_CASE("crop metrics") {
    const StubEmbedder dino(EmbedderKind::image, 32, 5);
    const StubEmbedder clip(EmbedderKind::image_text, 32, 6);
    const Tensor src = fixtures::occluded_scene(32).image;
    const Box orig{4, 4, 16, 16};
    const Box target{18, 10, 30, 22};

    CHECK(std::abs(dino_op(src, src, orig, dino) - 1.0) < 1e-12);

    Tensor edited = gaussian(3, 32, 32, 9);
    paste(edited, crop(src, 4, 4, 12, 12), 10, 18);
    CHECK(std::abs(dino_tp(src, edited, orig, target, dino) - 1.0) < 1e-12);

    // direct cosine of the stub projections
    const Vector u = dino.embed_image(crop(src, 4, 4, 12, 12));
    const Vector v = dino.embed_image(crop(edited, 4, 4, 12, 12));
    double dot = 0, nu = 0, nv = 0;
    for (int i = 0; i < 32; ++i) {
        dot += u(i) * v(i);
        nu += u(i) * u(i);
        nv += v(i) * v(i);
    }
    CHECK(std::abs(dino_op(src, edited, orig, dino) - dot / std::sqrt(nu * nv)) < 1e-9);
    CHECK(std::abs(clip_tp(src, edited, orig, target, clip) - 1.0) < 1e-12);

    CHECK_THROWS_AS(dino_op(src, src, Box{3, 3, 3, 8}, dino), Error);
    CHECK_THROWS_AS(dino_tp(src, src, orig, Box{25, 25, 37, 37}, dino), Error);
    CHECK_THROWS_AS(clip_tp(src, src, orig, target, dino), Error);
}

TEST_CASE("stub embedder is deterministic and seed-dependent") {
    const StubEmbedder a(EmbedderKind::image_text, 16, 1), b(EmbedderKind::image_text, 16, 1),
        c(EmbedderKind::image_text, 16, 2);
    const Tensor img = gaussian(3, 10, 10, 4);
    CHECK((a.embed_image(img) - b.embed_image(img)).norm() == 0.0);
    CHECK((a.embed_text("A photo of cup") - b.embed_text("A photo of cup")).norm() == 0.0);
    CHECK((a.embed_image(img) - c.embed_image(img)).norm() > 0.0);
    CHECK(a.fingerprint() == b.fingerprint());
    CHECK(a.fingerprint() != c.fingerprint());
    CHECK_THROWS_AS(StubEmbedder(EmbedderKind::image, 4, 1).embed_text("x"), Error);
}

TEST_CASE("HTTP embedder client") {
    httplib::Server srv;
    srv.Get("/info", [](const httplib::Request&, httplib::Response& res) {
        res.set_content(R"({"kind":"image_text","dim":2,"name":"fake"})", "application/json");
    });
    srv.Post("/embed/image", [](const httplib::Request& req, httplib::Response& res) {
        const bool png = req.body.size() > 8 && req.body.substr(1, 3) == "PNG";
        res.set_content(nlohmann::json{{"embedding", {png ? 1.0 : 0.0, 1.0}}}.dump(), "application/json");
    });
    srv.Post("/embed/text", [](const httplib::Request& req, httplib::Response& res) {
        res.set_content(nlohmann::json{{"embedding", {1.0, static_cast<double>(req.body.size())}}}.dump(),
                        "application/json");
    });
    const int port = srv.bind_to_any_port("127.0.0.1");
    std::thread th([&] { srv.listen_after_bind(); });
    srv.wait_until_ready();

    const HttpEmbedder e("http://127.0.0.1:" + std::to_string(port));
    CHECK(e.dim() == 2);
    CHECK(e.kind() == EmbedderKind::image_text);
    CHECK(e.fingerprint().rfind("http:", 0) == 0);
    CHECK(e.embed_image(Tensor(3, 4, 4, 0.5))(0) == 1.0);
    CHECK(e.embed_text("abc")(1) == 3.0);
    srv.stop();
    th.join();

    CHECK_THROWS_AS(HttpEmbedder("http://127.0.0.1:1"), Error);
}

TEST_CASE("evaluation run") {
    const fs::path dir = scratch("run");
    const auto path = fixtures::write_cocoa_fixture(dir);
    DatasetFilters f;
    f.targets_per_sample = 2;
    auto samples = build_dataset(load_cocoa(nlohmann::json::parse(io::read_text(path))), f, 3).samples;
    REQUIRE(samples.size() == 3);

    ToyBackboneOptions bo;
    bo.latent_side = 16;
    const ToyBackbone backbone(bo);
    PipelineConfig cfg;
    cfg.steps = 2;
    cfg.lora.steps = 1;
    cfg.lora.rank = 2;
    const StubEmbedder dino(EmbedderKind::image, 16, 1), clip(EmbedderKind::image_text, 16, 2);
    EvalOptions opts;
    opts.images_dir = dir;
    opts.kid.block_size = 2;

    const auto report = run_evaluation(backbone, samples, cfg, dino, clip, opts, dir / "out");
    CHECK(report.warnings.empty());
    REQUIRE(report.cases.size() == 6);
    CHECK(report.clip_t_per_sample.size() == 3);
    double op = 0;
    for (const auto& c : report.cases) op += c.dino_op;
    CHECK(std::abs(report.dino_op - op / 6) < 1e-9);
    CHECK(fs::exists(dir / "out" / "report.json"));
    CHECK(fs::exists(dir / "out" / "report.csv"));
    CHECK_FALSE(fs::exists(dir / "out" / "runs"));
    const auto j = nlohmann::json::parse(io::read_text(dir / "out" / "report.json"));
    CHECK(j["embedders"]["image"] == dino.fingerprint());
    CHECK(comparable(j, j));
    nlohmann::json other = j;
    other["embedders"]["image"] = "something else";
    CHECK_FALSE(comparable(j, other));

    // Reordering the samples leaves every aggregate unchanged.
    std::reverse(samples.begin(), samples.end());
    const auto rev = run_evaluation(backbone, samples, cfg, dino, clip, opts, dir / "out_rev");
    CHECK(std::abs(rev.dino_op - report.dino_op) < 1e-12);
    CHECK(std::abs(rev.dino_tp - report.dino_tp) < 1e-12);
    CHECK(std::abs(rev.clip_tp - report.clip_tp) < 1e-12);
    CHECK(std::abs(rev.clip_t - report.clip_t) < 1e-12);
    CHECK(std::abs(rev.kid.value - report.kid.value) < 1e-12);
}
