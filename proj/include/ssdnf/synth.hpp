#pragma once

#include "camera.hpp"
#include "parallel.hpp"
#include "rng.hpp"
#include "tensor.hpp"

#include <cmath>
#include <optional>
#include <vector>

namespace ssdnf {

// Procedural stand-in for a multi-view object dataset: unions of colored
// primitives rendered by an exact analytic ray tracer.

struct Primitive {
    enum class Kind { Sphere, Box } kind = Kind::Sphere;
    Vec3 center;
    double size = 0.2; // sphere radius or box half-extent
    Vec3 albedo{0.5, 0.5, 0.5};
};

struct SceneSpec {
    uint64_t seed = 0;
    std::vector<Primitive> primitives;
};

inline SceneSpec gen_scene(uint64_t seed) {
    Rng rng(seed ^ 0x5ce47a5ce47aULL);
    SceneSpec spec;
    spec.seed = seed;
    int count = rng.uniform_int(1, 4);
    for (int i = 0; i < count; ++i) {
        Primitive p;
        p.kind = rng.uniform() < 0.5 ? Primitive::Kind::Sphere : Primitive::Kind::Box;
        p.center = {rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6)};
        p.size = rng.uniform(0.1, 0.4);
        p.albedo = {rng.uniform(0.1, 1.0), rng.uniform(0.1, 1.0), rng.uniform(0.1, 1.0)};
        spec.primitives.push_back(p);
    }
    return spec;
}

namespace detail {

struct Hit {
    double t = 0;
    Vec3 normal;
    const Primitive* prim = nullptr;
};

inline std::optional<double> intersect_sphere(const Vec3& o, const Vec3& d, const Vec3& c, double r) {
    Vec3 oc = o - c;
    double b = oc.dot(d);
    double disc = b * b - (oc.dot(oc) - r * r);
    if (disc < 0) return std::nullopt;
    double s = std::sqrt(disc);
    double t = -b - s;
    if (t < 1e-6) t = -b + s;
    if (t < 1e-6) return std::nullopt;
    return t;
}

inline std::optional<std::pair<double, Vec3>> intersect_box(const Vec3& o, const Vec3& d, const Vec3& c,
                                                            double half) {
    double t0 = -1e30, t1 = 1e30;
    int axis0 = -1;
    double sign0 = 0;
    const double oo[3] = {o.x - c.x, o.y - c.y, o.z - c.z};
    const double dd[3] = {d.x, d.y, d.z};
    for (int a = 0; a < 3; ++a) {
        if (std::fabs(dd[a]) < 1e-12) {
            if (oo[a] < -half || oo[a] > half) return std::nullopt;
            continue;
        }
        double ta = (-half - oo[a]) / dd[a];
        double tb = (half - oo[a]) / dd[a];
        double sgn = -1;
        if (ta > tb) {
            std::swap(ta, tb);
            sgn = 1;
        }
        if (ta > t0) {
            t0 = ta;
            axis0 = a;
            sign0 = sgn;
        }
        t1 = std::min(t1, tb);
    }
    if (t1 < t0 || t1 < 1e-6) return std::nullopt;
    double t = t0 > 1e-6 ? t0 : t1;
    Vec3 n{0, 0, 0};
    if (axis0 == 0) n.x = sign0;
    if (axis0 == 1) n.y = sign0;
    if (axis0 == 2) n.z = sign0;
    if (t == t1) n = n * -1.0; // exiting face when the origin is inside
    return std::make_pair(t, n);
}

inline std::optional<Hit> trace(const SceneSpec& spec, const Vec3& o, const Vec3& d) {
    std::optional<Hit> best;
    for (const auto& p : spec.primitives) {
        if (p.kind == Primitive::Kind::Sphere) {
            auto t = intersect_sphere(o, d, p.center, p.size);
            if (t && (!best || *t < best->t)) {
                Vec3 hit = o + d * *t;
                best = Hit{*t, (hit - p.center).normalized(), &p};
            }
        } else {
            auto r = intersect_box(o, d, p.center, p.size);
            if (r && (!best || r->first < best->t)) best = Hit{r->first, r->second, &p};
        }
    }
    return best;
}

} // namespace detail

inline constexpr double kOracleAmbient = 0.2;

// Exact per-pixel renderer: nearest-hit albedo with Lambertian shading from a
// fixed directional light, white background on miss. `light_dir` points from
// the light toward the scene.
inline Tensor oracle_render(const SceneSpec& spec, const Pose& pose, const Intrinsics& intr, int H, int W,
                            const Vec3& light_dir = Vec3{-0.45, -0.8, -0.4}) {
    Tensor img({H, W, 3});
    Vec3 l = (light_dir * -1.0).normalized(); // toward the light
    auto rays = rays_for_pose(pose, intr, H, W, 0.05, 100.0);
    real* px = img.data().data();
    parallel_for(H, [&](int64_t y) {
        for (int x = 0; x < W; ++x) {
            const Ray& r = rays[size_t(y) * size_t(W) + size_t(x)];
            auto hit = detail::trace(spec, r.origin, r.dir);
            real* out = px + (y * W + x) * 3;
            if (!hit) {
                out[0] = out[1] = out[2] = 1;
                continue;
            }
            double lambert = std::max(0.0, hit->normal.dot(l));
            double shade = kOracleAmbient + (1.0 - kOracleAmbient) * lambert;
            out[0] = real(hit->prim->albedo.x * shade);
            out[1] = real(hit->prim->albedo.y * shade);
            out[2] = real(hit->prim->albedo.z * shade);
        }
    });
    return img;
}

struct SceneViews {
    SceneSpec spec;
    std::vector<Pose> poses;
    Intrinsics intrinsics;
    std::vector<Tensor> images; // each [H,W,3]
};

struct SynthDataset {
    int height = 0, width = 0;
    double view_radius = 2.5;
    double fov_deg = 50.0;
    uint64_t seed = 0;
    std::vector<SceneViews> scenes;
    std::vector<int> train_ids, test_ids;
};

// Near-uniform directions on the view sphere; poles are avoided so the up
// reference never degenerates.
inline Pose random_view_pose(Rng& rng, double radius) {
    double z = rng.uniform(-0.95, 0.95);
    double az = rng.uniform(0.0, 2.0 * kPi);
    double rxy = std::sqrt(std::max(0.0, 1.0 - z * z));
    Vec3 eye{radius * rxy * std::cos(az), radius * z, radius * rxy * std::sin(az)};
    return Pose::look_at(eye, Vec3{0, 0, 0}, Vec3{0, 1, 0});
}

inline SynthDataset make_dataset(int n_train_scenes, int n_test_scenes, int n_views, int H, int W,
                                 uint64_t seed, int sparse_view_subset = 0) {
    if (n_train_scenes < 1) throw ConfigError("make_dataset: need at least one train scene");
    SynthDataset ds;
    ds.height = H;
    ds.width = W;
    ds.seed = seed;
    Intrinsics intr = Intrinsics::from_fov(ds.fov_deg, W, H);
    int total = n_train_scenes + n_test_scenes;
    ds.scenes.resize(size_t(total));
    Rng master(seed);
    std::vector<uint64_t> scene_seeds;
    for (int i = 0; i < total; ++i) scene_seeds.push_back(master.next_u64());

    parallel_for(total, [&](int64_t i) {
        SceneViews& sv = ds.scenes[size_t(i)];
        Rng rng(scene_seeds[size_t(i)]);
        sv.spec = gen_scene(rng.next_u64());
        sv.intrinsics = intr;
        int keep = n_views;
        bool is_train = i < n_train_scenes;
        if (is_train && sparse_view_subset > 0 && sparse_view_subset < n_views)
            keep = sparse_view_subset;
        for (int v = 0; v < n_views; ++v) {
            Pose pose = random_view_pose(rng, ds.view_radius);
            if (v >= keep) continue; // fixed subset: the first k of the seeded sequence
            sv.poses.push_back(pose);
            sv.images.push_back(oracle_render(sv.spec, pose, intr, H, W));
        }
    });
    for (int i = 0; i < n_train_scenes; ++i) ds.train_ids.push_back(i);
    for (int i = n_train_scenes; i < total; ++i) ds.test_ids.push_back(i);
    return ds;
}

} // namespace ssdnf
