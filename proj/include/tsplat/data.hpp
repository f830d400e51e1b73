#pragma once

// Frame sources for training and evaluation: the self-rendered synthetic
// scene, and a loader for directories of posed images so real data can be
// plugged in behind the same interface.
//
// Dataset directory layout (views.cfg plus image files):
//   [dataset]
//   count = N
//   [view.K]                       (K = 0..N-1)
//   image = frame_K.ppm            (path relative to the directory)
//   rotation = [r00, r01, ..., r22]   (row-major world-from-camera)
//   center = [x, y, z]
//   fx = ..  fy = ..  cx = ..  cy = ..  width = ..  height = ..

#include <Eigen/Dense>
#include <cmath>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "tsplat/config.hpp"
#include "tsplat/decoder.hpp"
#include "tsplat/geometry.hpp"
#include "tsplat/image.hpp"
#include "tsplat/renderer.hpp"
#include "tsplat/tensor.hpp"

namespace tsplat {

// A posed video-like sequence the sampler can draw views from.
class FrameSource {
public:
    virtual ~FrameSource() = default;
    virtual std::size_t frames() const = 0;
    virtual CameraView view(std::size_t index) const = 0;
    virtual CameraPose pose(std::size_t index) const = 0;
    virtual Intrinsics intrinsics() const = 0;
};

// World-from-camera pose at `eye` looking toward `target`, +z forward.
inline CameraPose look_at_pose(const Eigen::Vector3d& eye, const Eigen::Vector3d& target,
                               const Eigen::Vector3d& world_up = Eigen::Vector3d::UnitY()) {
    const Eigen::Vector3d f = (target - eye).normalized();
    Eigen::Vector3d x = world_up.cross(f);
    if (x.norm() < 1e-9) x = Eigen::Vector3d::UnitX();
    x.normalize();
    CameraPose p;
    p.rotation.col(0) = x;
    p.rotation.col(1) = f.cross(x);
    p.rotation.col(2) = f;
    p.center = eye;
    return p;
}

// ---------------------------------------------------------------------------
// Synthetic scene: random colored blobs in a unit box, cameras on an arc
// looking at the box center, ground truth rendered by the project's own
// renderer so the data is exactly representable.

class SyntheticScene final : public FrameSource {
public:
    SyntheticScene(std::uint64_t seed, std::size_t num_blobs, std::size_t frame_count,
                   double radius, double arc_degrees, std::size_t image_size, double focal,
                   RenderConfig render_cfg)
        : render_cfg_(render_cfg) {
        if (num_blobs == 0) throw std::invalid_argument("synthetic scene: need at least one blob");
        Rng rng(seed);
        truth_.means = Tensor(Shape{num_blobs, 3});
        truth_.scales = Tensor(Shape{num_blobs, 3});
        truth_.rotations = Tensor(Shape{num_blobs, 3, 3});
        truth_.opacities = Tensor(Shape{num_blobs, 1});
        truth_.sh = Tensor::zeros({num_blobs, 3, 16});
        for (std::size_t i = 0; i < num_blobs; ++i) {
            for (int a = 0; a < 3; ++a) truth_.means[i * 3 + a] = rng.uniform(-0.5, 0.5);
            for (int a = 0; a < 3; ++a) truth_.scales[i * 3 + a] = rng.uniform(0.02, 0.1);
            Eigen::Quaterniond q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
            q.normalize();
            const Eigen::Matrix3d rot = q.toRotationMatrix();
            for (int r = 0; r < 3; ++r)
                for (int c = 0; c < 3; ++c) truth_.rotations[i * 9 + r * 3 + c] = rot(r, c);
            truth_.opacities[i] = rng.uniform(0.4, 0.9);
            for (int c = 0; c < 3; ++c)
                truth_.sh[(i * 3 + c) * 16] = (rng.uniform(0.25, 1.0) - 0.5) / 0.28209479177387814;
        }

        intrinsics_.fx = intrinsics_.fy = focal;
        intrinsics_.cx = intrinsics_.cy = static_cast<double>(image_size) / 2.0;
        intrinsics_.width = intrinsics_.height = image_size;

        const double arc = arc_degrees * EIGEN_PI / 180.0;
        trajectory_.reserve(frame_count);
        for (std::size_t i = 0; i < frame_count; ++i) {
            const double t = frame_count > 1
                                 ? static_cast<double>(i) / static_cast<double>(frame_count - 1)
                                 : 0.5;
            const double angle = -arc / 2.0 + arc * t;
            const Eigen::Vector3d eye(radius * std::sin(angle), 0.25 * std::sin(2.0 * angle),
                                      -radius * std::cos(angle));
            trajectory_.push_back(look_at_pose(eye, Eigen::Vector3d::Zero()));
        }
    }

    std::size_t frames() const override { return trajectory_.size(); }

    CameraPose pose(std::size_t index) const override { return trajectory_.at(index); }

    Intrinsics intrinsics() const override { return intrinsics_; }

    CameraView view(std::size_t index) const override {
        CameraView v;
        v.pose = trajectory_.at(index);
        v.intrinsics = intrinsics_;
        v.image = frame(index);
        return v;
    }

    const Tensor& frame(std::size_t index) const {
        auto it = cache_.find(index);
        if (it != cache_.end()) return it->second;
        RenderOutput out = render(truth_, trajectory_.at(index), intrinsics_, render_cfg_);
        return cache_.emplace(index, std::move(out.color)).first->second;
    }

    const GaussianScene& truth() const { return truth_; }

private:
    GaussianScene truth_;
    std::vector<CameraPose> trajectory_;
    Intrinsics intrinsics_;
    RenderConfig render_cfg_;
    mutable std::map<std::size_t, Tensor> cache_;
};

inline std::unique_ptr<SyntheticScene> make_synthetic_scene(std::uint64_t seed,
                                                            std::size_t num_blobs,
                                                            const TrainingConfig& t,
                                                            const RenderConfig& r) {
    return std::make_unique<SyntheticScene>(seed, num_blobs, t.synthetic_frames,
                                            t.synthetic_radius, t.synthetic_arc_degrees,
                                            t.image_size, t.focal, r);
}

// ---------------------------------------------------------------------------
// Posed-image directories.

class LoadedDataset final : public FrameSource {
public:
    std::vector<CameraView> views;

    std::size_t frames() const override { return views.size(); }
    CameraView view(std::size_t index) const override { return views.at(index); }
    CameraPose pose(std::size_t index) const override { return views.at(index).pose; }
    Intrinsics intrinsics() const override {
        if (views.empty()) throw std::runtime_error("dataset: empty");
        return views[0].intrinsics;
    }
};

namespace detail {

inline std::map<std::string, std::string> parse_kv_sections(const std::string& text) {
    Parser p;
    p.load(text);
    return p.values;
}

inline std::vector<double> parse_number_list(const std::string& raw, const std::string& key) {
    Parser p;
    return p.parse_array(raw, key);
}

inline std::string require(std::map<std::string, std::string>& kv, const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw std::runtime_error("dataset: missing key " + key);
    std::string v = it->second;
    kv.erase(it);
    return v;
}

}  // namespace detail

inline CameraPose pose_from_arrays(const std::vector<double>& rotation,
                                   const std::vector<double>& center) {
    if (rotation.size() != 9 || center.size() != 3)
        throw std::runtime_error("dataset: rotation needs 9 values and center needs 3");
    CameraPose p;
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) p.rotation(r, c) = rotation[r * 3 + c];
    for (int c = 0; c < 3; ++c) p.center[c] = center[c];
    p.validate(1e-6);
    return p;
}

// Load a posed-image directory. When `preprocess_to` is set, the
// evaluation-time resize/center-crop pipeline runs on every view.
inline LoadedDataset load_dataset(const std::string& dir,
                                  std::optional<std::size_t> preprocess_to = std::nullopt,
                                  std::size_t patch_size = 8) {
    namespace fs = std::filesystem;
    const fs::path root(dir);
    const std::string text = read_file((root / "views.cfg").string());
    auto kv = detail::parse_kv_sections(text);

    const std::size_t count =
        static_cast<std::size_t>(std::stoul(detail::require(kv, "dataset.count")));
    LoadedDataset data;
    data.views.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        const std::string base = "view." + std::to_string(i) + ".";
        CameraView v;
        v.pose = pose_from_arrays(
            detail::parse_number_list(detail::require(kv, base + "rotation"), base + "rotation"),
            detail::parse_number_list(detail::require(kv, base + "center"), base + "center"));
        v.intrinsics.fx = std::stod(detail::require(kv, base + "fx"));
        v.intrinsics.fy = std::stod(detail::require(kv, base + "fy"));
        v.intrinsics.cx = std::stod(detail::require(kv, base + "cx"));
        v.intrinsics.cy = std::stod(detail::require(kv, base + "cy"));
        v.intrinsics.width = std::stoul(detail::require(kv, base + "width"));
        v.intrinsics.height = std::stoul(detail::require(kv, base + "height"));
        v.intrinsics.validate();
        v.image = read_ppm((root / detail::require(kv, base + "image")).string());
        if (v.image.dim(0) != v.intrinsics.height || v.image.dim(1) != v.intrinsics.width)
            throw std::runtime_error("dataset: image size disagrees with intrinsics for view " +
                                     std::to_string(i));
        if (preprocess_to) v = preprocess_view(v, *preprocess_to, patch_size);
        data.views.push_back(std::move(v));
    }
    return data;
}

inline void save_dataset(const std::string& dir, const FrameSource& source,
                         const std::vector<std::size_t>& indices) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::ostringstream cfg;
    cfg << "[dataset]\ncount = " << indices.size() << "\n";
    for (std::size_t k = 0; k < indices.size(); ++k) {
        const CameraView v = source.view(indices[k]);
        const std::string image_name = "frame_" + std::to_string(k) + ".ppm";
        write_ppm((fs::path(dir) / image_name).string(), v.image);
        cfg << "\n[view." << k << "]\n";
        cfg << "image = " << image_name << "\n";
        cfg << "rotation = [";
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c)
                cfg << (r + c ? ", " : "") << detail::format_double(v.pose.rotation(r, c));
        cfg << "]\n";
        cfg << "center = [" << detail::format_double(v.pose.center.x()) << ", "
            << detail::format_double(v.pose.center.y()) << ", "
            << detail::format_double(v.pose.center.z()) << "]\n";
        cfg << "fx = " << detail::format_double(v.intrinsics.fx) << "\n";
        cfg << "fy = " << detail::format_double(v.intrinsics.fy) << "\n";
        cfg << "cx = " << detail::format_double(v.intrinsics.cx) << "\n";
        cfg << "cy = " << detail::format_double(v.intrinsics.cy) << "\n";
        cfg << "width = " << v.intrinsics.width << "\n";
        cfg << "height = " << v.intrinsics.height << "\n";
    }
    atomic_write_file((fs::path(dir) / "views.cfg").string(), cfg.str());
}

}  // namespace tsplat
