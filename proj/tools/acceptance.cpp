// SPDX-License-Identifier: Apache-2.0

// Acceptance runner: one PASS/FAIL line per criterion, tolerances pinned here.
// Exits non-zero on any failure not listed with --known-red.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "../tests/fixtures.hpp"
#include "occmove/attention.hpp"
#include "occmove/eval.hpp"
#include "occmove/io.hpp"
#include "occmove/latent_ops.hpp"
#include "occmove/pipeline.hpp"
#include "occmove/seed.hpp"
#include "occmove/toy_backbone.hpp"

using namespace occmove;
namespace fs = std::filesystem;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("occmove_acceptance_" + name);
    fs::remove_all(p);
    return p;
}

Mask random_mask(int h, int w, std::mt19937_64& rng) {
    std::bernoulli_distribution coin(std::uniform_real_distribution<double>(0.05, 0.95)(rng));
    Mask m(MaskSpace::latent, h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) m.set(y, x, coin(rng));
    return m;
}

std::shared_ptr<const ToyBackbone> toy(int side, std::uint64_t seed = 1) {
    ToyBackboneOptions o;
    o.latent_side = side;
    o.seed = seed;
    return std::make_shared<ToyBackbone>(o);
}

// ------------------------------------------------------------------ 1

Outcome compositing() {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(2024);
    const ToyCodec codec(1);
    const NoiseSchedule s(10, NoiseSchedule::scaled_linear_alphas());
    long mismatches = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const int side = 4 + static_cast<int>(rng() % 29);
        const Tensor a = gaussian(4, side, side, rng());
        const Tensor b = gaussian(4, side, side, rng());
        const Mask m = random_mask(side, side, rng);
        const std::uint64_t seed = rng();
        const int t_m = static_cast<int>(rng() % 10);

        // latent hold: select b where m, else a
        const Tensor held = latent_hold(a, b, m);
        // noise fill: fresh N(0,1) from `seed` inside m, b elsewhere
        const Tensor nf = noise_fill_init(b, m, seed);
        const Tensor noise = gaussian(4, side, side, seed);
        // colour fill: keep b where m, forward-noised colour latent elsewhere
        const Tensor cf = color_fill_init(codec, b, m, seed, t_m, s);
        const auto rgb = fill_color(derive_seed(seed, "color"));
        Tensor fill(3, side, side);
        for (int c = 0; c < 3; ++c)
            for (std::size_t i = 0; i < fill.plane_size(); ++i) fill.plane(c)[i] = rgb[c];
        const Tensor fill_noised = forward_noise(codec.encode(fill), t_m, derive_seed(seed, "color-noise"), s);

        for (int c = 0; c < 4; ++c)
            for (int y = 0; y < side; ++y)
                for (int x = 0; x < side; ++x) {
                    const bool in = m.get(y, x);
                    mismatches += held.at(c, y, x) != (in ? b.at(c, y, x) : a.at(c, y, x));
                    mismatches += nf.at(c, y, x) != (in ? noise.at(c, y, x) : b.at(c, y, x));
                    mismatches += cf.at(c, y, x) != (in ? b.at(c, y, x) : fill_noised.at(c, y, x));
                }
    }
    const double secs = seconds_since(t0);
    return {mismatches == 0 && secs < 5.0, fmt("100 pairs, %ld mismatching elements, %.2f s (limit 5 s)", mismatches, secs)};
}

// ------------------------------------------------------------------ 2, 3

Matrix random_stochastic(int rows, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> uni(0.01, 1.0);
    Matrix m(rows, rows);
    for (int i = 0; i < rows; ++i) {
        double s = 0;
        for (int j = 0; j < rows; ++j) s += (m(i, j) = uni(rng));
        for (int j = 0; j < rows; ++j) m(i, j) /= s;
    }
    return m;
}

Outcome attention_algebra() {
    const int side = 32, n = side * side;
    const Matrix s = random_stochastic(n, 77);
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> uni(0, 1);
    Vector a(n);
    for (auto& v : a) v = uni(rng);
    double worst = 0;
    for (int lambda = 0; lambda <= 3; ++lambda) {
        Vector r = a;
        for (int p = 0; p < lambda; ++p) {  // explicit loops
            Vector next = Vector::Zero(n);
            for (int i = 0; i < n; ++i) {
                double acc = 0;
                for (int j = 0; j < n; ++j) acc += s(i, j) * r(j);
                next(i) = acc;
            }
            r = next;
        }
        r /= r.maxCoeff();
        const auto refined = refine(s, a, lambda, side);
        for (int i = 0; i < n; ++i) worst = std::max(worst, std::abs(refined.grid.data()[i] - r(i)));
    }
    const auto zero = refine(s, a, 0, side);
    double zero_err = 0;
    for (int i = 0; i < n; ++i) zero_err = std::max(zero_err, std::abs(zero.grid.data()[i] - a(i) / a.maxCoeff()));
    const auto fixed = refine(Matrix::Identity(n, n), a, 3, side);
    double fixed_err = 0;
    for (int i = 0; i < n; ++i) fixed_err = std::max(fixed_err, std::abs(fixed.grid.data()[i] - a(i) / a.maxCoeff()));
    const bool ok = worst <= 1e-5 && zero_err <= 1e-5 && fixed_err <= 1e-5;
    return {ok, fmt("lambda 0..3 on %dx%d: max err %.2e; lambda=0 %.2e; identity %.2e (tol 1e-5)", n, n, worst, zero_err,
                    fixed_err)};
}

Outcome masked_softmax_check() {
    std::mt19937_64 rng(31);
    std::normal_distribution<double> normal(0, 3);
    std::bernoulli_distribution coin(0.5);
    const int rows = 256, cols = 256;
    Matrix logits(rows, cols);
    for (Eigen::Index i = 0; i < logits.size(); ++i) logits.data()[i] = normal(rng);
    Eigen::Array<bool, -1, -1> allowed(rows, cols);
    for (int i = 0; i < rows; ++i) {
        for (int j = 0; j < cols; ++j) allowed(i, j) = coin(rng);
        allowed(i, i) = true;
    }
    Matrix oracle = Matrix::Zero(rows, cols);
    for (int i = 0; i < rows; ++i) {
        double mx = -INFINITY, sum = 0;
        for (int j = 0; j < cols; ++j)
            if (allowed(i, j)) mx = std::max(mx, logits(i, j));
        for (int j = 0; j < cols; ++j)
            if (allowed(i, j)) sum += (oracle(i, j) = std::exp(logits(i, j) - mx));
        for (int j = 0; j < cols; ++j) oracle(i, j) /= sum;
    }
    const double err = (masked_softmax(logits, allowed) - oracle).cwiseAbs().maxCoeff();
    const Eigen::Array<bool, -1, -1> ones = Eigen::Array<bool, -1, -1>::Constant(rows, cols, true);
    const double noop = (masked_softmax(logits, ones) - softmax_rows(logits)).cwiseAbs().maxCoeff();
    return {err <= 1e-5 && noop == 0.0, fmt("oracle max err %.2e (tol 1e-5); all-ones diff %.1e", err, noop)};
}

// ------------------------------------------------------------------ 4

Outcome gradient_check() {
    const auto t0 = Clock::now();
    const IdentityCodec codec;
    DeoccStepOutput d;
    d.z_bar = gaussian(4, 8, 8, 11);
    d.refined.grid = Tensor(1, 8, 8, 1.0);
    const Box box{1, 2, 6, 7};
    const Tensor z = gaussian(4, 8, 8, 12);
    double worst = 0;
    for (bool masked : {false, true}) {
        if (masked)
            for (int y = 0; y < 8; ++y)
                for (int x = 0; x < 8; ++x) d.refined.grid.at(0, y, x) = (x + y) % 3 ? 1.0 : 0.25;
        const MovementTarget target = make_movement_target(d, box, codec, true, masked);
        const LossGrad lg = movement_loss(z, target);
        const double h = 1e-5;
        for (std::size_t i = 0; i < z.size(); ++i) {
            Tensor zp = z, zm = z;
            zp.data()[i] += h;
            zm.data()[i] -= h;
            const double fd = (movement_loss(zp, target).value - movement_loss(zm, target).value) / (2 * h);
            const double g = lg.gradient.data()[i];
            const double scale = std::max({std::abs(fd), std::abs(g), 1e-8});
            worst = std::max(worst, std::abs(fd - g) / scale);
        }
    }
    const double secs = seconds_since(t0);
    return {worst <= 1e-4 && secs < 30.0,
            fmt("4x8x8, plain and masked: max relative error %.2e (tol 1e-4), %.2f s (limit 30 s)", worst, secs)};
}

// ------------------------------------------------------------------ 5

Outcome cfg_identities() {
    const Tensor u = gaussian(4, 16, 16, 1);
    const Tensor c = gaussian(4, 16, 16, 2);
    const Mask full(MaskSpace::latent, 16, 16, 1), none(MaskSpace::latent, 16, 16, 0);
    std::mt19937_64 rng(3);
    const Mask q = random_mask(16, 16, rng);
    const bool w0 = compose_cfg(u, c, q, 0.0) == u;
    const bool q0 = compose_cfg(u, c, none, 7.5) == u;
    const bool q1 = compose_cfg(u, c, full, 1.0) == c;
    return {w0 && q0 && q1, fmt("omega=0 -> uncond %s; Q=0 -> uncond %s; Q=1,omega=1 -> cond %s (exact equality)",
                                w0 ? "yes" : "no", q0 ? "yes" : "no", q1 ? "yes" : "no")};
}

// ------------------------------------------------------------------ 6

Outcome l_resize_check() {
    const IdentityCodec id;
    double worst = 0;
    bool same = true;
    for (int trial = 0; trial < 20; ++trial) {
        const int side = 6 + trial;
        const Tensor z = gaussian(4, side, side, 100 + trial);
        for (int r : {1, 3, side / 2, side + 5}) worst = std::max(worst, max_abs_diff(l_resize(z, r, id), bilinear_resize(z, r, r)));
        same = same && l_resize(z, side, id) == z;
    }
    return {worst <= 1e-6 && same, fmt("max diff vs bilinear %.2e (tol 1e-6); same-size identity %s", worst, same ? "exact" : "broken")};
}

// ------------------------------------------------------------------ 7

Outcome ddim_round_trip() {
    const auto b = toy(16, 5);
    const auto cond = b->embed_prompt("A photo of cat");
    const Tensor z0 = b->encode_image(fixtures::occluded_scene(16).image);
    double err[2] = {0, 0};
    const int steps[2] = {2, 10};
    for (int k = 0; k < 2; ++k) {
        const NoiseSchedule s = b->make_schedule(steps[k]);
        const auto cache = ddim_invert(*b, z0, cond, s, {});
        err[k] = max_abs_diff(ddim_sample(*b, cache.latent(steps[k]), steps[k], cond, s), z0);
    }
    return {err[0] <= 1e-4 && err[1] <= 1e-3, fmt("T=2: %.2e (tol 1e-4); T=10: %.2e (tol 1e-3)", err[0], err[1])};
}

// ------------------------------------------------------------------ 8

Outcome e2e_determinism() {
    const auto b = toy(64);
    const EditRequest req = fixtures::occluded_scene(64);
    PipelineConfig cfg;
    cfg.steps = 10;
    cfg.seed = 1234;
    const fs::path d1 = scratch("e2e_a"), d2 = scratch("e2e_b");
    auto t0 = Clock::now();
    run_edit(*b, req, cfg, d1);
    const double first = seconds_since(t0);
    t0 = Clock::now();
    run_edit(*b, req, cfg, d2);
    const double second = seconds_since(t0);
    int differing = 0, compared = 0;
    for (const auto& e : fs::recursive_directory_iterator(d1)) {
        if (!e.is_regular_file()) continue;
        const auto rel = fs::relative(e.path(), d1);
        ++compared;
        if (!fs::exists(d2 / rel) || io::read_bytes(e.path()) != io::read_bytes(d2 / rel)) ++differing;
    }
    const double slowest = std::max(first, second);
    return {differing == 0 && compared > 0 && slowest < 60.0,
            fmt("%d files compared, %d differ; run times %.1f s / %.1f s (limit 60 s)", compared, differing, first, second)};
}

// ------------------------------------------------------------------ 9

Outcome null_move() {
    const int side = 32;
    const auto b = toy(side);
    EditRequest req = fixtures::occluded_scene(side);
    const Box box = bounding_box(req.visible);
    req.target_x = (box.x0 + box.x1) / 2;
    req.target_y = (box.y0 + box.y1) / 2;
    PipelineConfig cfg;
    cfg.steps = 5;
    cfg.seed = 9;
    cfg.lora.steps = 3;
    cfg.gamma = 0.0;
    cfg.background_guidance = false;
    cfg.flags = {false, false, false, false, false};
    const auto res = run_edit(*b, req, cfg, scratch("null"));

    // Reference: DDIM reconstruction of the source with the same inversion settings.
    const auto cond = b->embed_prompt(req.prompt());
    const auto s = b->make_schedule(cfg.steps);
    InversionOptions o;
    o.refine_iters = cfg.inversion_refine;
    const Tensor z0 = b->encode_image(req.image);
    const auto cache = ddim_invert(*b, z0, cond, s, o);
    const Tensor ref = b->decode_latent(ddim_sample(*b, cache.latent(cfg.steps), cfg.steps, cond, s));
    const double codec_tol = max_abs_diff(b->decode_latent(z0), req.image) + 1e-3;
    const double diff = max_abs_diff(res.edited_native, ref);

    // Split by the object's footprint: inside it the movement branch starts from fresh noise.
    const Mask mv = to_latent_mask(req.visible, side);
    double outside = 0.0;
    for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x) {
            bool touched = false;
            for (int yy = y / 4 * 4; yy < y / 4 * 4 + 4; ++yy)
                for (int xx = x / 4 * 4; xx < x / 4 * 4 + 4; ++xx) touched = touched || mv.get(yy, xx);
            if (touched) continue;
            for (int c = 0; c < 3; ++c) outside = std::max(outside, std::abs(res.edited_native.at(c, y, x) - ref.at(c, y, x)));
        }
    return {diff <= codec_tol, fmt("max |edited - reconstruction| %.2e (codec tolerance %.2e); outside the object "
                                   "footprint %.2e",
                                   diff, codec_tol, outside)};
}

// ------------------------------------------------------------------ 10

Outcome latent_hold_consequence() {
    const int side = 32;
    const auto b = toy(side);
    const EditRequest req = fixtures::occluded_scene(side);
    PipelineConfig cfg;
    cfg.steps = 6;
    cfg.seed = 4;
    cfg.lora.steps = 5;
    const fs::path dir = scratch("hold");
    const CompletedObject obj = run_deocclude(*b, req, cfg, dir);

    // Independent of the branch: the crop it worked on, through the codec alone.
    const PreparedInput in = prepare_input(req.image, req.visible, cfg.eta, side, side);
    const Tensor codec_rt = b->decode_latent(b->encode_image(in.image));
    double codec_err = 0, hold_err = 0;
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < side; ++y)
            for (int x = 0; x < side; ++x) {
                if (!in.visible_pixel.get(y, x)) continue;
                codec_err = std::max(codec_err, std::abs(codec_rt.at(c, y, x) - in.image.at(c, y, x)));
                hold_err = std::max(hold_err, std::abs(obj.image.at(c, y, x) - in.image.at(c, y, x)));
            }
    const double tol = codec_err + 1e-9;
    return {hold_err <= tol, fmt("inside visible mask max err %.2e (codec reconstruction %.2e)", hold_err, codec_err)};
}

// ------------------------------------------------------------------ 11

Matrix cloud(int n, int dim, double offset, std::uint64_t seed) {
    const Tensor g = gaussian(1, n, dim, seed);
    Matrix m(n, dim);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < dim; ++j) m(i, j) = g.at(0, i, j) + offset;
    return m;
}

double naive_mmd(const Matrix& x, const Matrix& y) {
    auto k = [](const Matrix& a, int i, const Matrix& b, int j) {
        double dot = 0;
        for (int d = 0; d < a.cols(); ++d) dot += a(i, d) * b(j, d);
        return std::pow(dot / a.cols() + 1.0, 3);
    };
    const int m = static_cast<int>(x.rows()), n = static_cast<int>(y.rows());
    if (m == n) {
        double s = 0;
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < m; ++j)
                if (i != j) s += k(x, i, x, j) + k(y, i, y, j) - k(x, i, y, j) - k(x, j, y, i);
        return s / (m * (m - 1.0));
    }
    double sxx = 0, syy = 0, sxy = 0;
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < m; ++j)
            if (i != j) sxx += k(x, i, x, j);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            if (i != j) syy += k(y, i, y, j);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) sxy += k(x, i, y, j);
    return sxx / (m * (m - 1.0)) + syy / (n * (n - 1.0)) - 2 * sxy / (double(m) * n);
}

double hand_cosine(const Vector& a, const Vector& b) {
    double dot = 0, na = 0, nb = 0;
    for (Eigen::Index i = 0; i < a.size(); ++i) {
        dot += a(i) * b(i);
        na += a(i) * a(i);
        nb += b(i) * b(i);
    }
    return dot / std::sqrt(na * nb);
}

Outcome metrics_oracles() {
    const Matrix a = cloud(60, 48, 0.0, 1), b = cloud(60, 48, 0.25, 2), c = cloud(35, 48, 0.25, 3);
    KidOptions ko;
    ko.block_size = 20;
    const double kid_err = std::max(std::abs(kid_features(a, b, ko).value - naive_mmd(a, b)),
                                    std::abs(kid_features(a, c, ko).value - naive_mmd(a, c)));
    const double self = std::abs(kid_features(a, a, ko).value);

    const StubEmbedder dino(EmbedderKind::image, 32, 5);
    const StubEmbedder clip(EmbedderKind::image_text, 32, 6);
    const Tensor src = fixtures::occluded_scene(32).image;
    const Tensor edited = gaussian(3, 32, 32, 7);
    const Box orig{4, 4, 16, 16}, target{18, 10, 30, 22};
    auto emb = [&](const Embedder& e, const Tensor& img, const Box& bx) {
        return e.embed_image(crop(img, bx.y0, bx.x0, bx.height(), bx.width()));
    };
    double crop_err = 0;
    crop_err = std::max(crop_err, std::abs(dino_op(src, edited, orig, dino) - hand_cosine(emb(dino, src, orig), emb(dino, edited, orig))));
    crop_err = std::max(crop_err, std::abs(dino_tp(src, edited, orig, target, dino) -
                                           hand_cosine(emb(dino, src, orig), emb(dino, edited, target))));
    crop_err = std::max(crop_err, std::abs(clip_tp(src, edited, orig, target, clip) -
                                           hand_cosine(emb(clip, src, orig), emb(clip, edited, target))));
    const double ct = clip_t({edited, src}, {"A photo of cup", "A photo of bear"}, clip);
    const double ct_hand = 100.0 * (hand_cosine(clip.embed_image(edited), clip.embed_text("A photo of cup")) +
                                    hand_cosine(clip.embed_image(src), clip.embed_text("A photo of bear"))) / 2.0;
    crop_err = std::max(crop_err, std::abs(ct - ct_hand) / 100.0);
    const bool ok = kid_err <= 1e-8 && self <= 1e-9 && crop_err <= 1e-9;
    return {ok, fmt("KID vs double loop %.2e (tol 1e-8); KID(A,A) %.2e (tol 1e-9); cosine metrics %.2e (tol 1e-9)", kid_err,
                    self, crop_err)};
}

// ------------------------------------------------------------------ 12

Outcome dataset_protocol() {
    const fs::path dir = scratch("dataset");
    const auto path = fixtures::write_cocoa_fixture(dir);
    const auto objects = load_cocoa(json::parse(io::read_text(path)));
    const auto built = build_dataset(objects, {}, 17);
    const auto again = build_dataset(objects, {}, 17);
    bool eight = !built.samples.empty(), prompts = true, seeded = built.samples.size() == again.samples.size();
    for (std::size_t i = 0; i < built.samples.size(); ++i) {
        const auto& s = built.samples[i];
        eight = eight && s.targets.size() == 8;
        prompts = prompts && s.prompt == "A photo of " + s.category;
        if (seeded) seeded = to_json(s) == to_json(again.samples[i]);
    }
    const bool kept = built.samples.size() == 3 && built.log.size() == 2;
    return {eight && prompts && seeded && kept,
            fmt("%zu of %zu regions retained; 8 targets each %s; prompts verbatim %s; seeded repeat %s",
                built.samples.size(), objects.size(), eight ? "yes" : "no", prompts ? "yes" : "no", seeded ? "yes" : "no")};
}

// ------------------------------------------------------------------ 13

std::vector<std::string> changed_paths(const json& a, const json& b) {
    std::vector<std::string> out;
    for (const auto& op : json::diff(a, b)) out.push_back(op["path"].get<std::string>());
    return out;
}

Outcome ablation_wiring() {
    const int side = 32;
    const auto b = toy(side);
    const EditRequest req = fixtures::occluded_scene(side);
    PipelineConfig base;
    base.steps = 5;
    base.seed = 42;
    base.lora.steps = 3;
    base.lora.rank = 2;
    base.lora.learning_rate = 1e-3;
    base.opt_iters = 2;

    const fs::path base_dir = scratch("ablate_base");
    const EditResult ref = run_edit(*b, req, base, base_dir);
    const json ref_m = json::parse(io::read_text(base_dir / "manifest.json"));

    struct Flag {
        const char* name;
        bool AblationFlags::*member;
        std::vector<std::string> allowed;  // manifest paths besides the flag and output fingerprints
        bool touches_completion;           // de-occlusion result changes too
    };
    const std::vector<Flag> flags = {
        {"CF", &AblationFlags::color_fill, {"/fill_color", "/deocclusion/"}, true},
        {"AG", &AblationFlags::attention_guidance, {}, true},
        {"LoRA", &AblationFlags::lora, {"/lora", "/decisions/lora_during_crop_inversion"}, true},
        {"LR", &AblationFlags::latent_resize, {}, false},
        {"LTG", &AblationFlags::local_text_guidance, {}, false},
    };
    std::string detail;
    bool ok = true;
    int pixels_differ = 0;
    for (const auto& f : flags) {
        PipelineConfig cfg = base;
        cfg.flags.*(f.member) = false;
        const fs::path dir = scratch(std::string("ablate_") + f.name);
        const EditResult r = run_edit(*b, req, cfg, dir);
        const json m = json::parse(io::read_text(dir / "manifest.json"));
        bool flag_seen = false, stray = false;
        for (const auto& p : changed_paths(ref_m, m)) {
            if (p == std::string("/config/flags/") + f.name) {
                flag_seen = true;
                continue;
            }
            if (p.rfind("/outputs/", 0) == 0 || p.rfind("/warnings", 0) == 0) continue;
            bool allowed = false;
            for (const auto& a : f.allowed) allowed = allowed || p.rfind(a, 0) == 0;
            if (!allowed) {
                stray = true;
                std::fprintf(stderr, "  %s: unexpected manifest change at %s\n", f.name, p.c_str());
            }
        }
        // The toy codec clamps on decode, so saturated regions can hide a change; the edited latent cannot.
        const bool output_differs = max_abs_diff(io::read_npy(dir / "edited_latent.npy"),
                                                 io::read_npy(base_dir / "edited_latent.npy")) > 0.0;
        pixels_differ += max_abs_diff(r.edited_native, ref.edited_native) > 0.0;
        const bool completion_differs = max_abs_diff(r.completed.latent, ref.completed.latent) > 0.0;
        const bool good = flag_seen && !stray && output_differs && completion_differs == f.touches_completion;
        ok = ok && good;
        if (!good)
            std::fprintf(stderr, "  %s: flag_seen=%d stray=%d output_differs=%d completion_differs=%d\n", f.name, flag_seen,
                         stray, output_differs, completion_differs);
        detail += fmt("%s:%s ", f.name, good ? "ok" : "BAD");
    }
    return {ok, detail + fmt("(manifest diff confined to the flag; edited latent differs; decoded image differs for %d/5)",
                             pixels_differ)};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"occmove acceptance runner"};
    std::vector<std::string> only, known_red;
    app.add_option("--only", only, "run just these criteria");
    app.add_option("--known-red", known_red,
                   "criteria recorded as unattainable; the exit status ignores them while they stay red");
    CLI11_PARSE(app, argc, argv);

    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
        {"compositing-exactness", compositing},
        {"attention-algebra", attention_algebra},
        {"masked-softmax", masked_softmax_check},
        {"gradient-check", gradient_check},
        {"cfg-identities", cfg_identities},
        {"l-resize", l_resize_check},
        {"ddim-round-trip", ddim_round_trip},
        {"e2e-determinism", e2e_determinism},
        {"null-move", null_move},
        {"latent-hold", latent_hold_consequence},
        {"metrics-oracles", metrics_oracles},
        {"dataset-protocol", dataset_protocol},
        {"ablation-wiring", ablation_wiring},
    };
    auto listed = [](const std::vector<std::string>& v, const std::string& n) {
        return std::find(v.begin(), v.end(), n) != v.end();
    };
    int run = 0, passed = 0, unexpected = 0;
    for (const auto& [name, fn] : criteria) {
        if (!only.empty() && !listed(only, name)) continue;
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        ++run;
        passed += o.pass;
        const bool red_ok = listed(known_red, name);
        if (o.pass == red_ok) ++unexpected;  // a failure, or a known-red criterion that started passing
        std::printf("%s %-22s %s%s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str(),
                    !o.pass && red_ok ? " [known red]" : "");
        std::fflush(stdout);
    }
    std::printf("%d/%d criteria passed\n", passed, run);
    return unexpected == 0 ? 0 : 1;
}
