// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <limits>

#include "occmove/movement.hpp"
#include "occmove/seed.hpp"
#include "occmove/toy_backbone.hpp"

using namespace occmove;

namespace {

double norm2(const Tensor& a, const Tensor& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::pow(a.data()[i] - b.data()[i], 2);
    return std::sqrt(s);
}

MovementTarget simple_target(const Box& box, std::uint64_t seed, bool weighted) {
    MovementTarget t;
    t.box = box;
    t.object = gaussian(4, box.height(), box.width(), seed);
    t.weight = weighted ? gaussian(4, box.height(), box.width(), seed + 1) : Tensor(4, box.height(), box.width(), 1.0);
    return t;
}

}  // namespace

TEST_CASE("target mask is centred on the latent cell under the point") {
    const auto q = make_target_mask(40, 24, 4, 16, 4);  // cell (10, 6)
    CHECK(q.box.x0 == 8);
    CHECK(q.box.y0 == 4);
    CHECK(q.box.width() == 4);
    CHECK(q.grid.count() == 16);
    CHECK_FALSE(q.shifted);

    const auto edge = make_target_mask(63, 0, 5, 16, 4);
    CHECK(edge.shifted);
    CHECK(edge.box.x1 == 16);
    CHECK(edge.box.y0 == 0);
    CHECK(edge.grid.count() == 25);
    CHECK_THROWS_AS(make_target_mask(0, 0, 17, 16, 4), Error);
}

TEST_CASE("movement loss gradient matches central differences") {
    const Tensor z = gaussian(4, 8, 8, 3);
    for (bool weighted : {false, true}) {
        const auto target = simple_target({2, 1, 6, 5}, 7, weighted);
        const auto lg = movement_loss(z, target);
        CHECK(lg.value > 0);
        double worst = 0;
        const double h = 1e-6;
        for (std::size_t i = 0; i < z.size(); ++i) {
            Tensor zp = z, zm = z;
            zp.data()[i] += h;
            zm.data()[i] -= h;
            const double fd = (movement_loss(zp, target).value - movement_loss(zm, target).value) / (2 * h);
            worst = std::max(worst, std::abs(fd - lg.gradient.data()[i]));
        }
        CHECK(worst < 1e-6);
    }
}

TEST_CASE("movement loss vanishes at the target") {
    Tensor z = gaussian(4, 8, 8, 3);
    const auto target = simple_target({0, 0, 3, 3}, 4, false);
    paste(z, target.object, 0, 0);
    const auto lg = movement_loss(z, target);
    CHECK(lg.value == 0.0);
    for (double g : lg.gradient.data()) CHECK(g == 0.0);
}

TEST_CASE("gradient steps on closed-form losses") {
    const Tensor a = gaussian(4, 8, 8, 11);
    const Tensor z = gaussian(4, 8, 8, 12);
    auto squared = [&](const Tensor& x) {
        LossGrad lg;
        lg.gradient = Tensor(4, 8, 8);
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double d = x.data()[i] - a.data()[i];
            lg.value += d * d;
            lg.gradient.data()[i] = 2 * d;
        }
        return lg;
    };
    SUBCASE("half step on the squared distance lands on the target") {
        CHECK(norm2(latent_optimize(z, squared, 0.5, 1).z, a) < 1e-12);
    }
    SUBCASE("quarter step reaches the midpoint") {
        const Tensor out = latent_optimize(z, squared, 0.25, 1).z;
        double worst = 0;
        for (std::size_t i = 0; i < z.size(); ++i)
            worst = std::max(worst, std::abs(out.data()[i] - 0.5 * (z.data()[i] + a.data()[i])));
        CHECK(worst < 1e-12);
    }
    SUBCASE("unsquared norm moves exactly gamma closer per step") {
        MovementTarget t;
        t.box = {0, 0, 8, 8};
        t.object = a;
        t.weight = Tensor(4, 8, 8, 1.0);
        const auto res = latent_optimize(z, [&](const Tensor& x) { return movement_loss(x, t); }, 0.1, 3);
        REQUIRE(res.losses.size() == 4);
        const double d0 = norm2(z, a);
        for (int k = 0; k < 4; ++k) CHECK(res.losses[k] == doctest::Approx(d0 - 0.1 * k).epsilon(1e-10));
    }
    SUBCASE("gamma zero and zero iterations leave the latent alone") {
        CHECK(max_abs_diff(latent_optimize(z, squared, 0.0, 3).z, z) == 0.0);
        CHECK(latent_optimize(z, squared, 0.3, 0).losses.empty());
    }
    SUBCASE("non-finite gradient aborts") {
        auto bad = [&](const Tensor& x) {
            LossGrad lg = squared(x);
            lg.value = std::numeric_limits<double>::quiet_NaN();
            return lg;
        };
        const auto res = latent_optimize(z, bad, 0.1, 3);
        CHECK(res.aborted);
        CHECK(max_abs_diff(res.z, z) == 0.0);
    }
}

TEST_CASE("local guidance identities") {
    const Tensor u = gaussian(4, 8, 8, 1);
    const Tensor c = gaussian(4, 8, 8, 2);
    Mask q(MaskSpace::latent, 8, 8);
    q.set(2, 3, true);
    q.set(5, 5, true);
    const Mask full(MaskSpace::latent, 8, 8, true);
    const Mask none(MaskSpace::latent, 8, 8);

    CHECK(max_abs_diff(compose_cfg(u, c, full, 1.0), c) == 0.0);
    CHECK(max_abs_diff(compose_cfg(u, c, full, 0.0), u) == 0.0);
    CHECK(max_abs_diff(compose_cfg(u, c, none, 7.5), u) == 0.0);

    const Tensor out = compose_cfg(u, c, q, 7.5);
    for (int ch = 0; ch < 4; ++ch)
        for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 8; ++x) {
                const double expect = q.get(y, x) ? u.at(ch, y, x) + 7.5 * (c.at(ch, y, x) - u.at(ch, y, x)) : u.at(ch, y, x);
                CHECK(out.at(ch, y, x) == doctest::Approx(expect).epsilon(1e-12));
            }
    CHECK_THROWS_AS(compose_cfg(u, c, Mask(MaskSpace::pixel, 8, 8), 1.0), Error);
}

TEST_CASE("optimization window") {
    int active = 0;
    for (int t = 0; t < 50; ++t) active += optimization_active(t, 50, 0.6);
    CHECK(active == 30);
    CHECK_FALSE(optimization_active(9, 50, 0.6));
    CHECK(optimization_active(10, 50, 0.6));
    CHECK(optimization_active(39, 50, 0.6));
    CHECK_FALSE(optimization_active(40, 50, 0.6));
    for (int t = 0; t < 10; ++t) {
        CHECK(optimization_active(t, 10, 1.0));
        CHECK_FALSE(optimization_active(t, 10, 0.0));
    }
}

TEST_CASE("movement target resizing") {
    ToyBackboneOptions o;
    o.latent_side = 16;
    const ToyBackbone b(o);
    DeoccStepOutput d;
    d.z_bar = b.encode_image(gaussian(3, 16, 16, 5));
    d.refined.grid = Tensor(1, 8, 8, 1.0);
    const Box box{2, 2, 8, 8};

    const auto raw = make_movement_target(d, box, b.codec(), false, false);
    CHECK(max_abs_diff(raw.object, bilinear_resize(d.z_bar, 6, 6)) < 1e-15);
    const auto lr = make_movement_target(d, box, b.codec(), true, false);
    CHECK(max_abs_diff(lr.object, b.codec().encode(bilinear_resize(b.codec().decode(d.z_bar), 6, 6))) < 1e-15);
    for (double w : lr.weight.data()) CHECK(w == 1.0);

    d.refined.grid = Tensor(1, 8, 8, 0.0);
    const auto empty = make_movement_target(d, box, b.codec(), false, true);
    for (double v : empty.object.data()) CHECK(v == 0.0);
    for (double w : empty.weight.data()) CHECK(w == 0.0);
}

TEST_CASE("movement step") {
    ToyBackboneOptions o;
    o.latent_side = 16;
    o.seed = 2;
    const ToyBackbone b(o);
    const auto s = b.make_schedule(4);
    const auto cond = b.embed_prompt("A photo of cup");
    InversionOptions io;
    io.capture_kv = true;
    const auto cache = ddim_invert(b, b.encode_image(gaussian(3, 16, 16, 1)), cond, s, io);
    const auto q = make_target_mask(8, 8, 4, 16, 1);
    Mask mv(MaskSpace::latent, 16, 16);
    mv.set(3, 3, true);
    DeoccStepOutput d;
    d.z_bar = cache.latent(2);
    d.refined.grid = Tensor(1, 8, 8, 1.0);
    d.timestep = 2;
    const Tensor z = cache.latent(3);

    SUBCASE("without optimization it is one guided DDIM step") {
        MoveConfig mc;
        mc.gamma = 0.0;
        mc.local_text_guidance = false;
        mc.background_guidance = false;
        const auto r = run_move_step(b, 2, z, d, cache, mv, q, cond, mc);
        HookSet h;
        h.directives.push_back({ReplaceKV{cache.kv(3), std::nullopt}, {}});
        const Tensor expect = ddim_step(z, b.predict_noise(z, s.timestep(3), &cond, h).epsilon, 3, s);
        CHECK(max_abs_diff(r.z, expect) == 0.0);
        CHECK_FALSE(r.optimized);
    }
    SUBCASE("local guidance with unit scale is conditional inside the box only") {
        HookSet h;
        const auto lc = local_cfg(b, z, s.timestep(3), cond, q.grid, 1.0, h);
        const Tensor c = b.predict_noise(z, s.timestep(3), &cond, h).epsilon;
        const Tensor u = b.predict_noise(z, s.timestep(3), nullptr, h).epsilon;
        for (int ch = 0; ch < 4; ++ch)
            for (int y = 0; y < 16; ++y)
                for (int x = 0; x < 16; ++x)
                    CHECK(lc.epsilon.at(ch, y, x) == (q.grid.get(y, x) ? c.at(ch, y, x) : u.at(ch, y, x)));
    }
    SUBCASE("optimization lowers the loss") {
        MoveConfig mc;
        mc.gamma = 0.2;
        mc.opt_window = 1.0;
        const auto r = run_move_step(b, 2, z, d, cache, mv, q, cond, mc);
        CHECK(r.optimized);
        REQUIRE(r.losses.size() == 4);
        CHECK(r.losses.back() < r.losses.front());
    }
    SUBCASE("lockstep and range checks") {
        d.timestep = 1;
        try {
            run_move_step(b, 2, z, d, cache, mv, q, cond, {});
            FAIL("expected a lockstep error");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::lockstep);
        }
        d.timestep = 4;
        CHECK_THROWS_AS(run_move_step(b, 4, z, d, cache, mv, q, cond, {}), Error);
    }
}
