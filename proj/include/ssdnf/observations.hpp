#pragma once

#include "camera.hpp"
#include "field.hpp"
#include "synth.hpp"

#include <vector>

namespace ssdnf {

// Per-scene observation bundle: every (ground-truth pixel, ray) pair of the
// selected views plus the camera metadata they came from.
struct ObservationSet {
    int scene_id = -1;
    int n_views = 0;
    int height = 0, width = 0;
    Intrinsics intrinsics;
    std::vector<Pose> poses;
    std::vector<Ray> rays; // n_views * H * W, view-major
    Tensor targets;        // [N_ray, 3]

    int64_t n_rays() const { return int64_t(rays.size()); }
};

// Builds observations from stored views. An empty `view_subset` takes every
// view; otherwise only the listed view indices are included.
inline ObservationSet make_observations(const SceneViews& scene, int scene_id, double near, double far,
                                        const std::vector<int>& view_subset = {}) {
    ObservationSet obs;
    obs.scene_id = scene_id;
    obs.intrinsics = scene.intrinsics;
    if (scene.images.empty()) throw ConfigError(strcat_msg("observations: scene ", scene_id, " has no views"));
    obs.height = scene.images[0].dim(0);
    obs.width = scene.images[0].dim(1);
    std::vector<int> views = view_subset;
    if (views.empty())
        for (int v = 0; v < int(scene.poses.size()); ++v) views.push_back(v);
    obs.n_views = int(views.size());
    const int64_t per_view = int64_t(obs.height) * obs.width;
    obs.targets = Tensor({int(obs.n_views * per_view), 3});
    real* tgt = obs.targets.data().data();
    for (int vi = 0; vi < int(views.size()); ++vi) {
        int v = views[size_t(vi)];
        if (v < 0 || v >= int(scene.poses.size()))
            throw ConfigError(strcat_msg("observations: view index ", v, " out of range for scene ",
                                         scene_id, " with ", scene.poses.size(), " views"));
        obs.poses.push_back(scene.poses[size_t(v)]);
        auto rays = rays_for_pose(scene.poses[size_t(v)], scene.intrinsics, obs.height, obs.width, near, far);
        obs.rays.insert(obs.rays.end(), rays.begin(), rays.end());
        const Tensor& img = scene.images[size_t(v)];
        std::memcpy(tgt + vi * per_view * 3, img.data().data(), size_t(per_view * 3) * sizeof(real));
    }
    return obs;
}

// Assembles a rendering batch from sampled ray indices.
inline SceneRayBatch ray_batch_from(const ObservationSet& obs, const Tensor& bounded_code,
                                    const std::vector<int64_t>& indices, double weight = 1) {
    SceneRayBatch batch;
    batch.bounded_code = bounded_code;
    batch.rays.reserve(indices.size());
    batch.targets = Tensor({int(indices.size()), 3});
    real* t = batch.targets.data().data();
    const real* src = obs.targets.data().data();
    for (size_t i = 0; i < indices.size(); ++i) {
        int64_t idx = indices[i];
        batch.rays.push_back(obs.rays[size_t(idx)]);
        t[3 * i + 0] = src[3 * idx + 0];
        t[3 * i + 1] = src[3 * idx + 1];
        t[3 * i + 2] = src[3 * idx + 2];
    }
    batch.loss_scale = double(obs.n_rays()) / double(indices.size());
    batch.weight = weight;
    return batch;
}

} // namespace ssdnf
