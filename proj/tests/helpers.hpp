#pragma once

#include <Eigen/Dense>

#include "tsplat/geometry.hpp"
#include "tsplat/tensor.hpp"

namespace tsplat::testing {

inline Eigen::Matrix3d random_rotation(Rng& rng) {
    Eigen::Quaterniond q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
    q.normalize();
    return q.toRotationMatrix();
}

inline CameraPose random_pose(Rng& rng, double spread = 2.0) {
    CameraPose p;
    p.rotation = random_rotation(rng);
    p.center = Eigen::Vector3d(rng.uniform(-spread, spread), rng.uniform(-spread, spread),
                               rng.uniform(-spread, spread));
    return p;
}

inline Eigen::Matrix3d rotation_y(double degrees) {
    return Eigen::AngleAxisd(degrees * EIGEN_PI / 180.0, Eigen::Vector3d::UnitY())
        .toRotationMatrix();
}

// World-from-camera pose looking from `eye` toward `target`, +z forward.
inline CameraPose look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target,
                          const Eigen::Vector3d& world_up = Eigen::Vector3d::UnitY()) {
    CameraPose p;
    const Eigen::Vector3d f = (target - eye).normalized();
    const Eigen::Vector3d x = world_up.cross(f).normalized();
    const Eigen::Vector3d y = f.cross(x);
    p.rotation.col(0) = x;
    p.rotation.col(1) = y;
    p.rotation.col(2) = f;
    p.center = eye;
    return p;
}

}  // namespace tsplat::testing
