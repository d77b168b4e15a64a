#include "doctest.h"
#include "gradcheck.hpp"

#include "ssdnf/field.hpp"

#include <cmath>

using namespace ssdnf;

namespace {

RenderOptions det_opts(int n_samples = 8) {
    RenderOptions o;
    o.n_samples = n_samples;
    o.deterministic = true;
    return o;
}

Ray axis_ray() {
    Ray r;
    r.origin = {0, 0, 2.5};
    r.dir = {0, 0, -1};
    r.near = 0.8;
    r.far = 4.2;
    return r;
}

} // namespace

TEST_CASE("tanh_map basics") {
    CHECK(tanh_map(Tensor::scalar(0), 2).item() == doctest::Approx(0));

    // large raw inputs approach but never reach the bound s=2
    Tensor big = tanh_map(Tensor::scalar(50), 2);
    CHECK(big.item() == doctest::Approx(2.0));
    CHECK(big.item() <= real(2));

    Tensor half = tanh_map(Tensor::scalar(real(std::atanh(0.5))), 2);
    CHECK(half.item() == doctest::Approx(1.0));

    Rng rng(1);
    Tensor raw = randn({32}, rng, 5);
    Tensor bounded = tanh_map(raw, 2);
    for (real v : bounded.data()) {
        CHECK(v > real(-2));
        CHECK(v < real(2));
    }
}

TEST_CASE("triplane feature aggregation sums the three planes") {
    const int C = 3, R = 4;
    Tensor positions = Tensor::from({2, 3}, {0.1, -0.2, 0.3, 0, 0, 0});

    Tensor zero_code = Tensor::zeros({3, C, R, R});
    Tensor f0 = triplane_features(zero_code, positions);
    for (real v : f0.data()) CHECK(v == doctest::Approx(0));

    // XY plane constant one, others zero
    Tensor code = Tensor::zeros({3, C, R, R});
    for (int64_t i = 0; i < C * R * R; ++i) code.data()[size_t(i)] = 1;
    Tensor f1 = triplane_features(code, positions);
    for (real v : f1.data()) CHECK(v == doctest::Approx(1));

    // planes constant 1, 2, 3 -> sum 6 everywhere
    Tensor code123({3, C, R, R});
    for (int p = 0; p < 3; ++p)
        for (int64_t i = 0; i < C * R * R; ++i) code123.data()[size_t(p * C * R * R + i)] = real(p + 1);
    Tensor f6 = triplane_features(code123, positions);
    for (real v : f6.data()) CHECK(v == doctest::Approx(6));
}

TEST_CASE("decode at zero weights gives the activation values at zero") {
    Rng rng(3);
    DecoderParams dec = DecoderParams::init(4, 16, 4, rng);
    dec.for_each_param([](const std::string&, Tensor& t) {
        for (auto& v : t.data()) v = 0;
    });
    Tensor features = Tensor::zeros({1, 4});
    Tensor dir_enc = Tensor::zeros({1, dir_encoding_dim(4)});
    DecodeOut out = decode(dec, features, dir_enc);
    CHECK(out.density.item() == doctest::Approx(std::log(2.0)).epsilon(1e-4)); // softplus(0)
    for (real v : out.rgb.data()) CHECK(v == doctest::Approx(0.5));
}

TEST_CASE("decode ranges: density nonnegative, colors in (0,1)") {
    Rng rng(9);
    DecoderParams dec = DecoderParams::init(4, 16, 4, rng);
    Tensor features = randn({32, 4}, rng, 3);
    Tensor dir_enc = randn({32, dir_encoding_dim(4)}, rng);
    DecodeOut out = decode(dec, features, dir_enc);
    for (real v : out.density.data()) CHECK(v >= 0);
    for (real v : out.rgb.data()) {
        CHECK(v > 0);
        CHECK(v < 1);
    }
}

TEST_CASE("zero density renders the white background") {
    Rng rng(4);
    DecoderParams dec = DecoderParams::init(2, 8, 2, rng);
    dec.bd.data()[0] = -100; // softplus(-100) ~ 0
    Tensor code = Tensor::zeros({3, 2, 4, 4});
    Vec3 y = render_ray(code, dec, axis_ray(), det_opts());
    CHECK(y.x == doctest::Approx(1.0));
    CHECK(y.y == doctest::Approx(1.0));
    CHECK(y.z == doctest::Approx(1.0));
}

TEST_CASE("an opaque first sample wins the whole ray") {
    Rng rng(4);
    DecoderParams dec = DecoderParams::init(2, 8, 2, rng);
    dec.for_each_param([](const std::string&, Tensor& t) {
        for (auto& v : t.data()) v = 0;
    });
    dec.bd.data()[0] = 1e6; // effectively infinite density everywhere
    dec.bc2.data()[0] = 40; // sigmoid -> (1, 0, 0)
    dec.bc2.data()[1] = -40;
    dec.bc2.data()[2] = -40;
    Tensor code = Tensor::zeros({3, 2, 4, 4});
    Vec3 y = render_ray(code, dec, axis_ray(), det_opts());
    CHECK(y.x == doctest::Approx(1.0));
    CHECK(y.y == doctest::Approx(0.0));
    CHECK(y.z == doctest::Approx(0.0));
}

TEST_CASE("single segment quadrature: density*length = ln 2, black color") {
    Rng rng(4);
    DecoderParams dec = DecoderParams::init(2, 8, 2, rng);
    dec.for_each_param([](const std::string&, Tensor& t) {
        for (auto& v : t.data()) v = 0;
    });
    // cube chord along the axis ray has length 2, so want density = ln2 / 2
    double rho = 0.5 * std::log(2.0);
    dec.bd.data()[0] = real(std::log(std::exp(rho) - 1.0)); // softplus^{-1}
    dec.bc2.data()[0] = dec.bc2.data()[1] = dec.bc2.data()[2] = -40;

    RenderOptions opt = det_opts(2); // two equal half-chord segments
    // with constant density the total weight is 1 - exp(-rho * 2) = 0.5
    Tensor code = Tensor::zeros({3, 2, 4, 4});
    Vec3 y = render_ray(code, dec, axis_ray(), opt);
    CHECK(y.x == doctest::Approx(0.5).epsilon(1e-4));
    CHECK(y.y == doctest::Approx(0.5).epsilon(1e-4));
    CHECK(y.z == doctest::Approx(0.5).epsilon(1e-4));
}

TEST_CASE("transmittance is non-increasing and weights sum below one") {
    Rng rng(12);
    DecoderParams dec = DecoderParams::init(2, 8, 2, rng);
    Tensor code = randn({3, 2, 8, 8}, rng);

    std::vector<SceneRayBatch> batch(1);
    batch[0].bounded_code = tanh_map(code, 2);
    Intrinsics intr = Intrinsics::from_fov(50, 8, 8);
    Pose pose = Pose::look_at({1.2, 1.4, 1.8}, {0, 0, 0}, {0, 1, 0});
    batch[0].rays = rays_for_pose(pose, intr, 8, 8, 0.8, 4.2);

    RenderOptions opt = det_opts(16);
    auto colors = render_scenes(batch, dec, opt, 0)[0];
    for (real v : colors.data()) {
        CHECK(v >= real(-1e-5));
        CHECK(v <= real(1 + 1e-5));
    }

    // direct check of the quadrature internals on one ray
    auto plan_rays = std::vector<Ray>{batch[0].rays[21]};
    std::vector<SceneRayBatch> one(1);
    one[0].bounded_code = tanh_map(code, 2);
    one[0].rays = plan_rays;
    // recompute weights manually at midpoints
    double t0, t1;
    REQUIRE(clip_to_unit_cube(plan_rays[0], t0, t1));
    // transmittance through exp of a running nonnegative sum is monotone by
    // construction; verify numerically via the composite pieces
    Tensor density_probe;
    {
        auto plan = std::vector<Ray>{plan_rays[0]};
        // sample positions at midpoints
        int S = 16;
        Tensor pos({S, 3});
        double seg = (t1 - t0) / S;
        for (int k = 0; k < S; ++k) {
            Vec3 p = plan_rays[0].origin + plan_rays[0].dir * (t0 + (k + 0.5) * seg);
            pos.data()[size_t(3 * k)] = real(p.x);
            pos.data()[size_t(3 * k) + 1] = real(p.y);
            pos.data()[size_t(3 * k) + 2] = real(p.z);
        }
        Tensor feat = triplane_features(tanh_map(code, 2), pos);
        Tensor dir_enc({S, dir_encoding_dim(dec.dir_bands)});
        for (int k = 0; k < S; ++k)
            encode_dir(plan_rays[0].dir, dec.dir_bands, dir_enc.data().data() + k * dir_encoding_dim(dec.dir_bands));
        DecodeOut out = decode(dec, feat, dir_enc);
        double T = 1, wsum = 0;
        double prevT = 1;
        for (int k = 0; k < S; ++k) {
            double a = double(out.density.data()[size_t(k)]) * seg;
            double alpha = 1 - std::exp(-a);
            wsum += T * alpha;
            CHECK(T <= prevT + 1e-12);
            prevT = T;
            T *= std::exp(-a);
        }
        CHECK(wsum >= 0);
        CHECK(wsum <= 1 + 1e-6);
    }
}

TEST_CASE("rendering loss is zero when predictions equal targets") {
    Rng rng(21);
    DecoderParams dec = DecoderParams::init(2, 8, 2, rng);
    Tensor code = randn({3, 2, 4, 4}, rng);
    std::vector<SceneRayBatch> batch(1);
    batch[0].bounded_code = tanh_map(code, 2);
    batch[0].rays = {axis_ray()};
    RenderOptions opt = det_opts(4);
    batch[0].targets = render_scenes(batch, dec, opt, 0)[0].clone();
    Tensor loss = rendering_loss(batch, dec, opt, 0);
    CHECK(loss.item() == doctest::Approx(0));
}

TEST_CASE("batch rescale: N_ray=100, one sampled ray, single-pixel error 0.1") {
    Rng rng(21);
    DecoderParams dec = DecoderParams::init(2, 8, 2, rng);
    Tensor code = randn({3, 2, 4, 4}, rng);
    std::vector<SceneRayBatch> batch(1);
    batch[0].bounded_code = tanh_map(code, 2);
    batch[0].rays = {axis_ray()};
    RenderOptions opt = det_opts(4);
    Tensor clean = render_scenes(batch, dec, opt, 0)[0].clone();
    Tensor target = clean.clone();
    target.data()[0] += real(0.1);
    batch[0].targets = target;
    batch[0].loss_scale = 100.0 / 1.0;
    Tensor loss = rendering_loss(batch, dec, opt, 0);
    CHECK(loss.item() == doctest::Approx(0.5).epsilon(1e-4));
}

TEST_CASE("full-batch loss equals the direct full-sum evaluation") {
    Rng rng(30);
    DecoderParams dec = DecoderParams::init(2, 8, 2, rng);
    Tensor code = randn({3, 2, 4, 4}, rng);
    Intrinsics intr = Intrinsics::from_fov(50, 4, 4);
    Pose pose = Pose::look_at({0.5, 1.0, 2.2}, {0, 0, 0}, {0, 1, 0});
    auto rays = rays_for_pose(pose, intr, 4, 4, 0.8, 4.2);

    RenderOptions opt = det_opts(4);
    std::vector<SceneRayBatch> batch(1);
    batch[0].bounded_code = tanh_map(code, 2);
    batch[0].rays = rays;
    Tensor rendered = render_scenes(batch, dec, opt, 0)[0].clone();
    Tensor target(rendered.shape());
    Rng trng(8);
    for (int64_t i = 0; i < target.size(); ++i)
        target.data()[size_t(i)] = real(trng.uniform(0.0, 1.0));
    batch[0].targets = target;
    batch[0].loss_scale = 1.0; // full batch: N_ray / |B_ray| = 1

    Tensor loss = rendering_loss(batch, dec, opt, 0);
    double direct = 0;
    for (int64_t i = 0; i < rendered.size(); ++i) {
        double d = double(rendered.data()[size_t(i)]) - double(target.data()[size_t(i)]);
        direct += 0.5 * d * d;
    }
    CHECK(double(loss.item()) == doctest::Approx(direct).epsilon(1e-6));
}

TEST_CASE("rendering loss gradient wrt raw code matches finite differences") {
    Rng rng(14);
    DecoderParams dec = DecoderParams::init(2, 8, 2, rng); // tiny R=4 config
    Tensor raw0 = randn({3, 2, 4, 4}, rng, real(0.5));
    Intrinsics intr = Intrinsics::from_fov(50, 3, 3);
    Pose pose = Pose::look_at({0.3, 0.9, 2.3}, {0, 0, 0}, {0, 1, 0});
    auto rays = rays_for_pose(pose, intr, 3, 3, 0.8, 4.2);
    Tensor target = Tensor::full({int(rays.size()), 3}, real(0.3));
    RenderOptions opt = det_opts(4);

    double err = gc::check(
        [&](const Tensor& raw) {
            std::vector<SceneRayBatch> batch(1);
            batch[0].bounded_code = tanh_map(raw, 2);
            batch[0].rays = rays;
            batch[0].targets = target;
            batch[0].loss_scale = 9.0;
            return rendering_loss(batch, dec, opt, 0);
        },
        raw0, gc::kCompositeH);
    CHECK(err < 1e-3);
}

TEST_CASE("rendering loss gradient wrt decoder weights matches finite differences") {
    Rng rng(15);
    DecoderParams dec = DecoderParams::init(2, 6, 2, rng);
    Tensor raw = randn({3, 2, 4, 4}, rng, real(0.5));
    auto rays = std::vector<Ray>{axis_ray()};
    Tensor target = Tensor::full({1, 3}, real(0.2));
    RenderOptions opt = det_opts(4);

    Tensor w1_0 = dec.w1.clone();
    double err = gc::check(
        [&](const Tensor& w) {
            DecoderParams d2 = dec;
            d2.w1 = w;
            std::vector<SceneRayBatch> batch(1);
            batch[0].bounded_code = tanh_map(raw, 2);
            batch[0].rays = rays;
            batch[0].targets = target;
            return rendering_loss(batch, d2, opt, 0);
        },
        w1_0, gc::kCompositeH);
    CHECK(err < 1e-3);
}
