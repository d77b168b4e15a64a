#pragma once

#include "ntc.hpp"
#include "synth.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <string>

namespace ssdnf {

// Dataset directory layout:
//   <dir>/manifest.json          scene list, split ids, camera convention
//   <dir>/scenes/scene_NNNN.ntc  images [N_v,H,W,3] f32, poses [N_v,4,4] f64,
//                                intrinsics [3,3] f64

namespace detail {

inline std::string scene_file_name(int id) {
    std::ostringstream os;
    os << "scene_" << std::setw(4) << std::setfill('0') << id << ".ntc";
    return os.str();
}

} // namespace detail

inline void save_dataset(const SynthDataset& ds, const std::string& dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(fs::path(dir) / "scenes", ec);
    if (ec) throw IoError(strcat_msg("dataset: cannot create directory '", dir, "'"));

    nlohmann::json manifest;
    manifest["camera_convention"] = "right_handed_minus_z_forward_y_down_pixels";
    manifest["height"] = ds.height;
    manifest["width"] = ds.width;
    manifest["fov_deg"] = ds.fov_deg;
    manifest["view_radius"] = ds.view_radius;
    manifest["seed"] = ds.seed;
    manifest["train_ids"] = ds.train_ids;
    manifest["test_ids"] = ds.test_ids;
    nlohmann::json scenes = nlohmann::json::array();
    for (size_t i = 0; i < ds.scenes.size(); ++i) {
        const SceneViews& sv = ds.scenes[i];
        scenes.push_back({{"id", int(i)},
                          {"file", "scenes/" + detail::scene_file_name(int(i))},
                          {"n_views", int(sv.images.size())}});
        NtcFile f;
        int nv = int(sv.images.size());
        int H = ds.height, W = ds.width;
        std::vector<float> images(size_t(nv) * size_t(H) * size_t(W) * 3);
        for (int v = 0; v < nv; ++v)
            for (int64_t k = 0; k < int64_t(H) * W * 3; ++k)
                images[size_t(v) * size_t(H * W * 3) + size_t(k)] = float(sv.images[size_t(v)].data()[size_t(k)]);
        f.add_f32("images", {uint32_t(nv), uint32_t(H), uint32_t(W), 3}, images.data());
        std::vector<double> poses(size_t(nv) * 16);
        for (int v = 0; v < nv; ++v)
            for (int k = 0; k < 16; ++k) poses[size_t(v) * 16 + size_t(k)] = sv.poses[size_t(v)].m[size_t(k)];
        f.add_f64("poses", {uint32_t(nv), 4, 4}, poses.data());
        double K[9] = {sv.intrinsics.fx, 0, sv.intrinsics.cx, 0, sv.intrinsics.fy, sv.intrinsics.cy, 0, 0, 1};
        f.add_f64("intrinsics", {3, 3}, K);
        f.write((fs::path(dir) / "scenes" / detail::scene_file_name(int(i))).string());
    }
    manifest["scenes"] = scenes;
    std::ofstream mf((fs::path(dir) / "manifest.json").string());
    if (!mf) throw IoError(strcat_msg("dataset: cannot write manifest in '", dir, "'"));
    mf << manifest.dump(2) << "\n";
}

inline SynthDataset load_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream mf((fs::path(dir) / "manifest.json").string());
    if (!mf) throw IoError(strcat_msg("dataset: cannot open manifest in '", dir, "'"));
    nlohmann::json manifest;
    try {
        mf >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(strcat_msg("dataset: bad manifest in '", dir, "': ", e.what()));
    }
    SynthDataset ds;
    ds.height = manifest.at("height").get<int>();
    ds.width = manifest.at("width").get<int>();
    ds.fov_deg = manifest.at("fov_deg").get<double>();
    ds.view_radius = manifest.at("view_radius").get<double>();
    ds.seed = manifest.at("seed").get<uint64_t>();
    ds.train_ids = manifest.at("train_ids").get<std::vector<int>>();
    ds.test_ids = manifest.at("test_ids").get<std::vector<int>>();
    for (const auto& entry : manifest.at("scenes")) {
        NtcFile f = NtcFile::read((fs::path(dir) / entry.at("file").get<std::string>()).string());
        SceneViews sv;
        const NtcRecord& imgs = f.get("images");
        if (imgs.dims.size() != 4 || imgs.dims[3] != 3)
            throw IoError(strcat_msg("dataset: bad image record in scene ", entry.at("id").get<int>()));
        int nv = int(imgs.dims[0]), H = int(imgs.dims[1]), W = int(imgs.dims[2]);
        Tensor all = f.tensor("images");
        for (int v = 0; v < nv; ++v) {
            Tensor img({H, W, 3});
            std::memcpy(img.data().data(), all.data().data() + int64_t(v) * H * W * 3,
                        size_t(H * W * 3) * sizeof(real));
            sv.images.push_back(img);
        }
        std::vector<double> poses = f.doubles("poses");
        for (int v = 0; v < nv; ++v) {
            Pose p;
            for (int k = 0; k < 16; ++k) p.m[size_t(k)] = poses[size_t(v * 16 + k)];
            sv.poses.push_back(p);
        }
        const NtcRecord& kr = f.get("intrinsics");
        if (kr.dims != std::vector<uint32_t>{3, 3})
            throw IoError("dataset: intrinsics record must be [3,3]");
        std::vector<double> K = f.doubles("intrinsics");
        sv.intrinsics = Intrinsics{K[0], K[4], K[2], K[5]};
        ds.scenes.push_back(std::move(sv));
    }
    return ds;
}

} // namespace ssdnf
