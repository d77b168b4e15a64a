#include "doctest.h"

#include "ssdnf/camera.hpp"

#include <cmath>

using namespace ssdnf;

TEST_CASE("identity pose shoots the principal-point ray down -Z") {
    Intrinsics intr{20, 20, 1.5, 1.5};
    auto rays = rays_for_pose(Pose::identity(), intr, 3, 3, 0.5, 5.0);
    const Ray& center = rays[4]; // pixel (1,1), center exactly at (cx, cy)
    CHECK(center.dir.x == doctest::Approx(0));
    CHECK(center.dir.y == doctest::Approx(0));
    CHECK(center.dir.z == doctest::Approx(-1));
}

TEST_CASE("all ray directions are unit norm") {
    Intrinsics intr = Intrinsics::from_fov(50, 16, 16);
    Pose pose = Pose::look_at({2, 1.5, -1}, {0, 0, 0}, {0, 1, 0});
    for (const Ray& r : rays_for_pose(pose, intr, 16, 16, 0.5, 5.0))
        CHECK(r.dir.norm() == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("ray directions are equivariant under world rotations") {
    Intrinsics intr = Intrinsics::from_fov(60, 8, 8);
    Pose p1 = Pose::look_at({0, 0, 2.5}, {0, 0, 0}, {0, 1, 0});

    // rotate the camera frame by Q = rotation of 30 degrees about +Y
    double a = 30.0 * kPi / 180.0;
    double q[9] = {std::cos(a), 0, std::sin(a), 0, 1, 0, -std::sin(a), 0, std::cos(a)};
    auto rot = [&](const Vec3& v) {
        return Vec3{q[0] * v.x + q[1] * v.y + q[2] * v.z, q[3] * v.x + q[4] * v.y + q[5] * v.z,
                    q[6] * v.x + q[7] * v.y + q[8] * v.z};
    };
    Pose p2;
    Vec3 r = rot(p1.right()), u = rot(p1.up()), b = rot(p1.back()), o = rot(p1.origin());
    p2.m = {r.x, u.x, b.x, o.x, r.y, u.y, b.y, o.y, r.z, u.z, b.z, o.z, 0, 0, 0, 1};

    auto rays1 = rays_for_pose(p1, intr, 8, 8, 0.5, 5.0);
    auto rays2 = rays_for_pose(p2, intr, 8, 8, 0.5, 5.0);
    for (size_t i = 0; i < rays1.size(); ++i) {
        Vec3 want = rot(rays1[i].dir);
        CHECK(rays2[i].dir.x == doctest::Approx(want.x).epsilon(1e-9));
        CHECK(rays2[i].dir.y == doctest::Approx(want.y).epsilon(1e-9));
        CHECK(rays2[i].dir.z == doctest::Approx(want.z).epsilon(1e-9));
    }
}

TEST_CASE("degenerate intrinsics are rejected") {
    CHECK_THROWS_AS(rays_for_pose(Pose::identity(), Intrinsics{0, 0, 1, 1}, 2, 2, 0.5, 5.0), ConfigError);
}

TEST_CASE("unit cube clipping") {
    Ray hit{{0, 0, 2.5}, {0, 0, -1}, 0.5, 10};
    double t0, t1;
    REQUIRE(clip_to_unit_cube(hit, t0, t1));
    CHECK(t0 == doctest::Approx(1.5));
    CHECK(t1 == doctest::Approx(3.5));

    Ray miss{{0, 5, 2.5}, {0, 0, -1}, 0.5, 10};
    CHECK_FALSE(clip_to_unit_cube(miss, t0, t1));
}

TEST_CASE("turntable ring poses look at the origin") {
    auto ring = turntable_ring(8, 30, 2.5);
    REQUIRE(ring.size() == 8);
    for (const Pose& p : ring) {
        CHECK(p.origin().norm() == doctest::Approx(2.5));
        // viewing direction (-back) points at the origin
        Vec3 to_origin = (Vec3{0, 0, 0} - p.origin()).normalized();
        Vec3 fwd = p.back() * -1.0;
        CHECK(fwd.dot(to_origin) == doctest::Approx(1.0).epsilon(1e-9));
    }
}
