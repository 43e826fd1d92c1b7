// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "occmove/backbone.hpp"
#include "occmove/pretrained.hpp"
#include "occmove/seed.hpp"
#include "occmove/toy_backbone.hpp"

using namespace occmove;

namespace {

ToyBackbone small_toy(std::uint64_t seed = 3) {
    ToyBackboneOptions o;
    o.seed = seed;
    o.latent_side = 16;
    return ToyBackbone(o);
}

double inner(const Tensor& a, const Tensor& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a.data()[i] * b.data()[i];
    return s;
}

}  // namespace

TEST_CASE("schedule ladder") {
    const auto alphas = NoiseSchedule::scaled_linear_alphas(1000);
    const NoiseSchedule s(10, alphas);
    CHECK(s.steps() == 10);
    CHECK(s.alpha(0) == 1.0);
    CHECK(s.timestep(10) == 999);
    CHECK(s.timestep(1) == 99);
    CHECK(s.alpha(3) == alphas[299]);
    // beta_0 = 0.00085 from the scaled-linear rule
    CHECK(alphas[0] == doctest::Approx(1 - 0.00085).epsilon(1e-12));
    CHECK_THROWS_AS(NoiseSchedule(1, alphas), Error);
    CHECK_THROWS_AS(s.alpha(11), Error);
}

TEST_CASE("toy codec shapes and exact round trip") {
    const ToyCodec c1(1);
    const Tensor img = [] {
        Tensor t(3, 8, 8);
        for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = (i % 17) / 16.0;
        return t;
    }();
    const Tensor z = c1.encode(img);
    CHECK(z.channels() == 4);
    CHECK(c1.decode(z) == img);

    const ToyCodec c8(8);
    Tensor big(3, 512, 512, 0.25);
    const Tensor zb = c8.encode(big);
    CHECK(zb.height() == 64);
    CHECK(c8.decode(zb).height() == 512);
    CHECK(c8.decode(zb).channels() == 3);
    Tensor odd(3, 250, 256);
    CHECK_THROWS_AS(c8.encode(odd), Error);

    const IdentityCodec id;
    const Tensor g = gaussian(4, 5, 5, 1);
    CHECK(id.decode(id.encode(g)) == g);
}

TEST_CASE("backbone encode/decode checks") {
    const auto toy = small_toy();
    CHECK_THROWS_AS(toy.decode_latent(Tensor(3, 16, 16)), Error);
    ToyBackboneOptions o;
    o.codec_factor = 8;
    const ToyBackbone big(o);
    CHECK(big.info().native_side == 512);
    CHECK(big.info().native_latent_side() == 64);
    CHECK(big.encode_image(Tensor(3, 256, 256)).height() == 32);
    CHECK_THROWS_AS(big.encode_image(Tensor(3, 100, 100)), Error);
}

TEST_CASE("prompt embedding spans") {
    const auto toy = small_toy();
    const auto e = toy.embed_prompt("A photo of donut");
    CHECK(e.embedding.rows() == e.token_count());
    REQUIRE(e.token_spans.size() == 4);
    const auto span = e.find_span("donut");
    REQUIRE(span.has_value());
    CHECK(span->begin == 4);
    CHECK(span->size() == 1);

    const auto f = toy.embed_prompt("A photo of fire hydrant");
    const auto fs = f.find_span("fire hydrant");
    REQUIRE(fs.has_value());
    CHECK(fs->size() == 2);
    // words longer than 8 characters split into pieces
    const auto w = toy.embed_prompt("motorcycle");
    CHECK(w.find_span("motorcycle")->size() == 2);

    CHECK_THROWS_AS(toy.embed_prompt(""), Error);
    CHECK_THROWS_AS(toy.embed_prompt("  ,, "), Error);

    std::string longp;
    for (int i = 0; i < 90; ++i) longp += "w" + std::to_string(i) + " ";
    const auto t = toy.embed_prompt(longp);
    CHECK(t.truncated);
    CHECK(t.token_count() == 77);
    CHECK(t.dropped_words.size() == 15);
}

TEST_CASE("toy predictions are deterministic and seed-dependent") {
    const auto a = small_toy(3);
    const auto b = small_toy(3);
    const auto c = small_toy(4);
    const Tensor z = gaussian(4, 16, 16, 9);
    const auto cond = a.embed_prompt("A photo of cat");
    const auto ea = a.predict_noise(z, 500, &cond, {}).epsilon;
    CHECK(ea == a.predict_noise(z, 500, &cond, {}).epsilon);
    CHECK(ea == b.predict_noise(z, 500, &cond, {}).epsilon);
    CHECK(ea != c.predict_noise(z, 500, &cond, {}).epsilon);
    CHECK(ea.same_shape(z));
    CHECK(ea != a.predict_noise(z, 500, nullptr, {}).epsilon);
    CHECK_THROWS_AS(a.predict_noise(z, 1000, &cond, {}), Error);
    CHECK_THROWS_AS(a.predict_noise(gaussian(4, 14, 14, 1), 10, &cond, {}), Error);
}

TEST_CASE("captured maps are row-stochastic with one column per token") {
    const auto toy = small_toy();
    const auto cond = toy.embed_prompt("A photo of fire hydrant");
    HookSet h;
    h.capture_maps = true;
    const auto pred = toy.predict_noise(gaussian(4, 16, 16, 2), 300, &cond, h);
    REQUIRE(pred.snapshot.has_value());
    CHECK(pred.snapshot->layers.size() == 3);
    for (const auto& l : pred.snapshot->layers) {
        CHECK(l.cross.cols() == cond.token_count());
        CHECK(l.self.rows() == l.side * l.side);
        for (Eigen::Index i = 0; i < l.self.rows(); ++i) {
            CHECK(std::abs(l.self.row(i).sum() - 1.0) < 1e-5);
            CHECK(std::abs(l.cross.row(i).sum() - 1.0) < 1e-5);
            CHECK(l.self.row(i).minCoeff() >= 0.0);
        }
    }
}

TEST_CASE("zero-scale or zero-delta LoRA reproduces the baseline exactly") {
    const auto toy = small_toy();
    const auto cond = toy.embed_prompt("A photo of dog");
    const Tensor z = gaussian(4, 16, 16, 5);
    const auto base = toy.predict_noise(z, 700, &cond, {}).epsilon;
    auto lora = toy.make_lora(4, {}, 1);
    HookSet h;
    h.lora = &lora;
    CHECK(toy.predict_noise(z, 700, &cond, h).epsilon == base);  // up = 0
    for (auto& d : lora.deltas) d.up.setConstant(0.3);
    CHECK(toy.predict_noise(z, 700, &cond, h).epsilon != base);
    lora.scale = 0.0;
    CHECK(toy.predict_noise(z, 700, &cond, h).epsilon == base);
    CHECK_THROWS_AS(toy.make_lora(4, {"nonexistent"}, 1), Error);
    CHECK(toy.make_lora(2, {"up.attn1"}, 1).deltas.size() == 4);
}

TEST_CASE("LoRA gradient matches central finite differences") {
    const auto toy = small_toy();
    const auto cond = toy.embed_prompt("A photo of dog");
    const Tensor z = gaussian(4, 16, 16, 6);
    const Tensor up = gaussian(4, 16, 16, 7);
    auto lora = toy.make_lora(2, {}, 4, 0.7);
    std::mt19937_64 rng(8);
    std::normal_distribution<double> normal(0, 0.3);
    for (auto& d : lora.deltas)
        for (Eigen::Index i = 0; i < d.up.size(); ++i) d.up.data()[i] = normal(rng);
    HookSet h;
    h.lora = &lora;
    const int t = 400;
    const auto g = toy.lora_gradient(z, t, &cond, h, up);
    REQUIRE(g.up.size() == lora.deltas.size());

    auto objective = [&] { return inner(up, toy.predict_noise(z, t, &cond, h).epsilon); };
    const double eps = 1e-5;
    double worst = 0;
    for (std::size_t k = 0; k < lora.deltas.size(); k += 3) {
        for (int which = 0; which < 2; ++which) {
            Matrix& m = which ? lora.deltas[k].up : lora.deltas[k].down;
            const Matrix& an = which ? g.up[k] : g.down[k];
            for (Eigen::Index i = 0; i < m.size(); i += 5) {
                const double keep = m.data()[i];
                m.data()[i] = keep + eps;
                const double fp = objective();
                m.data()[i] = keep - eps;
                const double fm = objective();
                m.data()[i] = keep;
                const double fd = (fp - fm) / (2 * eps);
                const double rel = std::abs(fd - an.data()[i]) / std::max(1e-3, std::abs(fd));
                worst = std::max(worst, rel);
            }
        }
    }
    CHECK(worst < 1e-3);
}

TEST_CASE("hooks naming unknown layers are configuration errors") {
    const auto toy = small_toy();
    HookSet h;
    h.directives.push_back({RestrictSelfAttention{Mask(MaskSpace::latent, 16, 16, 1), Mask(MaskSpace::latent, 16, 16, 1)},
                            {"nope"}});
    try {
        toy.predict_noise(gaussian(4, 16, 16, 1), 10, nullptr, h);
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::config);
    }
}

TEST_CASE("restriction with an all-ones map is a no-op; empty map warns") {
    const auto toy = small_toy();
    const Tensor z = gaussian(4, 16, 16, 1);
    const auto cond = toy.embed_prompt("A photo of cat");
    const auto base = toy.predict_noise(z, 200, &cond, {}).epsilon;
    HookSet h;
    h.directives.push_back({RestrictSelfAttention{Mask(MaskSpace::latent, 16, 16, 1), Mask(MaskSpace::latent, 16, 16, 1)}, {}});
    CHECK(toy.predict_noise(z, 200, &cond, h).epsilon == base);
    HookSet e;
    e.directives.push_back({RestrictSelfAttention{Mask(MaskSpace::latent, 16, 16, 0), Mask(MaskSpace::latent, 16, 16, 1)}, {}});
    const auto pe = toy.predict_noise(z, 200, &cond, e);
    CHECK(pe.epsilon == base);
    CHECK(pe.report.warnings.size() == 1);
}

TEST_CASE("restricted self rows match a masked-softmax recomputation") {
    const auto toy = small_toy();
    const Tensor z = gaussian(4, 16, 16, 12);
    Mask permitted(MaskSpace::latent, 16, 16);
    Mask queries(MaskSpace::latent, 16, 16);
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) {
            permitted.set(y, x, ((x / 2) + (y / 2)) % 3 == 0);
            queries.set(y, x, x >= 8);
        }
    HookSet h;
    h.capture_maps = true;
    h.directives.push_back({RestrictSelfAttention{permitted, queries}, {}});
    const auto pred = toy.predict_noise(z, 600, nullptr, h);
    HookSet plain;
    plain.capture_maps = true;
    plain.capture_kv = true;
    const auto ref = toy.predict_noise(z, 600, nullptr, plain);
    const auto q = toy.self_queries(z, 600, nullptr, {});
    for (const auto& l : pred.snapshot->layers) {
        if (l.layer != "up") {
            // default scope excludes encoder and coarse layers
            for (const auto& r : ref.snapshot->layers)
                if (r.layer == l.layer) CHECK((r.self - l.self).cwiseAbs().maxCoeff() == 0.0);
            continue;
        }
        const Matrix& K = ref.kv->at("up").keys;
        const Matrix logits = q.at("up") * K.transpose() / std::sqrt(8.0);
        const int side = l.side;
        const Mask pm = resample_mask(permitted, side, side, MaskSpace::latent);
        const Mask qm = resample_mask(queries, side, side, MaskSpace::latent);
        for (int i = 0; i < side * side; ++i) {
            const bool restricted = qm.get(i / side, i % side);
            double mx = -INFINITY;
            for (int j = 0; j < side * side; ++j)
                if (!restricted || pm.get(j / side, j % side)) mx = std::max(mx, logits(i, j));
            double s = 0;
            std::vector<double> row(side * side, 0.0);
            for (int j = 0; j < side * side; ++j)
                if (!restricted || pm.get(j / side, j % side)) s += (row[j] = std::exp(logits(i, j) - mx));
            for (int j = 0; j < side * side; ++j) CHECK(std::abs(l.self(i, j) - row[j] / s) < 1e-5);
        }
    }
}

TEST_CASE("key/value replacement") {
    const auto toy = small_toy();
    const auto cond = toy.embed_prompt("A photo of cat");
    const Tensor za = gaussian(4, 16, 16, 21);
    const Tensor zb = gaussian(4, 16, 16, 22);
    HookSet cap;
    cap.capture_kv = true;
    cap.capture_maps = true;
    const auto pa = toy.predict_noise(za, 500, &cond, cap);
    auto store = std::make_shared<const KVStore>(*pa.kv);

    SUBCASE("identical latent gives the uninjected output") {
        HookSet h;
        h.directives.push_back({ReplaceKV{store, std::nullopt}, {}});
        CHECK(toy.predict_noise(za, 500, &cond, h).epsilon == pa.epsilon);
    }
    SUBCASE("injected maps match offline recomputation with cached keys") {
        HookSet h;
        h.capture_maps = true;
        h.directives.push_back({ReplaceKV{store, std::nullopt}, {}});
        const auto pb = toy.predict_noise(zb, 500, &cond, h);
        const auto q = toy.self_queries(zb, 500, &cond, {});
        for (const auto& l : pb.snapshot->layers) {
            const Matrix logits = q.at(l.layer) * store->at(l.layer).keys.transpose() / std::sqrt(8.0);
            CHECK((softmax_rows(logits) - l.self).cwiseAbs().maxCoeff() < 1e-12);
        }
    }
    SUBCASE("constant latent yields constant cached values") {
        const auto pc = toy.predict_noise(Tensor(4, 16, 16, 0.3), 500, &cond, cap);
        for (const auto& [layer, kv] : *pc.kv) {
            const double spread = (kv.values.rowwise() - kv.values.row(0)).cwiseAbs().maxCoeff();
            CHECK(spread < 1e-12);
        }
    }
    SUBCASE("missing layer entry is a hard error") {
        KVStore partial = *pa.kv;
        partial.erase("mid");
        HookSet h;
        h.directives.push_back({ReplaceKV{std::make_shared<const KVStore>(partial), std::nullopt}, {}});
        CHECK_THROWS_AS(toy.predict_noise(zb, 500, &cond, h), Error);
    }
    SUBCASE("background guidance hides keys inside the object mask") {
        Mask obj(MaskSpace::latent, 16, 16);
        for (int y = 4; y < 12; ++y)
            for (int x = 4; x < 12; ++x) obj.set(y, x, true);
        HookSet h;
        h.capture_maps = true;
        h.directives.push_back({ReplaceKV{store, obj}, {}});
        const auto pb = toy.predict_noise(zb, 500, &cond, h);
        for (const auto& l : pb.snapshot->layers) {
            const Mask m = resample_mask(obj, l.side, l.side, MaskSpace::latent);
            for (int j = 0; j < l.side * l.side; ++j)
                if (m.bits()[j]) CHECK(l.self.col(j).cwiseAbs().maxCoeff() == 0.0);
        }
    }
}

TEST_CASE("snapshot export round trip") {
    const auto toy = small_toy();
    HookSet h;
    h.capture_maps = true;
    const auto pred = toy.predict_noise(gaussian(4, 16, 16, 2), 300, nullptr, h);
    const auto dir = std::filesystem::temp_directory_path() / "occmove_snapshot_test";
    export_snapshot(dir, *pred.snapshot);
    const auto back = import_snapshot(dir);
    REQUIRE(back.layers.size() == pred.snapshot->layers.size());
    CHECK(back.layers[1].self == pred.snapshot->layers[1].self);
    CHECK(back.tokens == pred.snapshot->tokens);
}

TEST_CASE("backbone selection") {
    CHECK(load_backbone({"toy", {}, 1, 1})->info().name == "toy");
    CHECK_THROWS_AS(load_backbone({"nope", {}, 1, 1}), Error);
    const auto dir = std::filesystem::temp_directory_path() / "occmove_fake_ckpt";
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    try {
        load_backbone({"pretrained", dir, 1, 1});
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::config);
    }
    const auto probe = probe_checkpoint(dir);
    CHECK_FALSE(probe.layout_ok);
    CHECK(probe.missing.size() == 5);
}
