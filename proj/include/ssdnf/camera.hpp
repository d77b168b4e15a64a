#pragma once

#include "core.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <utility>
#include <vector>

namespace ssdnf {

inline constexpr double kPi = 3.14159265358979323846;

// Camera convention, used everywhere: right-handed world, camera looks down
// its local -Z axis, image rows grow downward (so pixel y maps to -Y).

struct Vec3 {
    double x = 0, y = 0, z = 0;

    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
    double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
    Vec3 cross(const Vec3& o) const {
        return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
    }
    double norm() const { return std::sqrt(dot(*this)); }
    Vec3 normalized() const {
        double n = norm();
        return n > 0 ? Vec3{x / n, y / n, z / n} : Vec3{0, 0, 0};
    }
};

// Rigid camera-to-world transform, row-major 4x4 with last row (0,0,0,1).
struct Pose {
    std::array<double, 16> m{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};

    static Pose identity() { return Pose{}; }

    Vec3 right() const { return {m[0], m[4], m[8]}; }
    Vec3 up() const { return {m[1], m[5], m[9]}; }
    Vec3 back() const { return {m[2], m[6], m[10]}; } // camera +Z (behind the view)
    Vec3 origin() const { return {m[3], m[7], m[11]}; }

    Vec3 rotate(const Vec3& v) const {
        return {m[0] * v.x + m[1] * v.y + m[2] * v.z, m[4] * v.x + m[5] * v.y + m[6] * v.z,
                m[8] * v.x + m[9] * v.y + m[10] * v.z};
    }

    // Camera placed at `eye`, looking at `target`, with an up reference.
    static Pose look_at(const Vec3& eye, const Vec3& target, const Vec3& up_ref) {
        Vec3 zc = (eye - target).normalized(); // -Z is the viewing direction
        Vec3 xc = up_ref.cross(zc).normalized();
        if (xc.norm() < 1e-9) xc = Vec3{1, 0, 0};
        Vec3 yc = zc.cross(xc);
        Pose p;
        p.m = {xc.x, yc.x, zc.x, eye.x, xc.y, yc.y, zc.y, eye.y, xc.z, yc.z, zc.z, eye.z, 0, 0, 0, 1};
        return p;
    }
};

struct Intrinsics {
    double fx = 0, fy = 0, cx = 0, cy = 0;

    static Intrinsics from_fov(double fov_deg, int width, int height) {
        double f = 0.5 * double(width) / std::tan(0.5 * fov_deg * kPi / 180.0);
        return {f, f, 0.5 * double(width), 0.5 * double(height)};
    }
};

struct Ray {
    Vec3 origin;
    Vec3 dir; // unit length
    double near = 0, far = 0;
};

// One ray per pixel center; directions normalized, near/far supplied by the
// caller. Throws on degenerate intrinsics.
inline std::vector<Ray> rays_for_pose(const Pose& pose, const Intrinsics& intr, int H, int W,
                                      double near, double far) {
    if (intr.fx == 0 || intr.fy == 0)
        throw ConfigError(strcat_msg("rays_for_pose: degenerate intrinsics fx=", intr.fx, " fy=", intr.fy));
    if (!(near < far) || near <= 0)
        throw ConfigError(strcat_msg("rays_for_pose: invalid near/far ", near, "/", far));
    std::vector<Ray> rays;
    rays.reserve(size_t(H) * size_t(W));
    Vec3 o = pose.origin();
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double u = (double(x) + 0.5 - intr.cx) / intr.fx;
            double v = (double(y) + 0.5 - intr.cy) / intr.fy;
            Vec3 d_cam{u, -v, -1.0};
            Ray r;
            r.origin = o;
            r.dir = pose.rotate(d_cam).normalized();
            r.near = near;
            r.far = far;
            rays.push_back(r);
        }
    return rays;
}

// Intersection of a ray with the axis-aligned cube [-1,1]^3, clipped to the
// ray's own near/far range. Returns false when the ray misses entirely.
inline bool clip_to_unit_cube(const Ray& r, double& t0, double& t1) {
    t0 = r.near;
    t1 = r.far;
    const double o[3] = {r.origin.x, r.origin.y, r.origin.z};
    const double d[3] = {r.dir.x, r.dir.y, r.dir.z};
    for (int a = 0; a < 3; ++a) {
        if (std::fabs(d[a]) < 1e-12) {
            if (o[a] < -1 || o[a] > 1) return false;
            continue;
        }
        double ta = (-1 - o[a]) / d[a];
        double tb = (1 - o[a]) / d[a];
        if (ta > tb) std::swap(ta, tb);
        t0 = std::max(t0, ta);
        t1 = std::min(t1, tb);
    }
    return t1 > t0;
}

// Ring of poses around the +Y axis at a fixed elevation; used for turntable
// renders.
inline std::vector<Pose> turntable_ring(int count, double elevation_deg, double radius) {
    std::vector<Pose> poses;
    double el = elevation_deg * kPi / 180.0;
    for (int i = 0; i < count; ++i) {
        double az = 2.0 * kPi * double(i) / double(count);
        Vec3 eye{radius * std::cos(el) * std::sin(az), radius * std::sin(el),
                 radius * std::cos(el) * std::cos(az)};
        poses.push_back(Pose::look_at(eye, Vec3{0, 0, 0}, Vec3{0, 1, 0}));
    }
    return poses;
}

} // namespace ssdnf
