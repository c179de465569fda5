// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>

#include <Eigen/Dense>

#include "t4dg/common.hpp"

namespace t4dg {

// Quaternions are stored (w, x, y, z) and expected unit-norm.
inline Eigen::Matrix3f quat_to_matrix(float w, float x, float y, float z) {
    Eigen::Matrix3f r;
    r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return r;
}

inline std::array<float, 4> quat_from_matrix(const Eigen::Matrix3f& m) {
    Eigen::Quaternionf q(m);
    if (q.w() < 0) q.coeffs() = -q.coeffs();
    return {q.w(), q.x(), q.y(), q.z()};
}

inline std::array<float, 4> normalize_quat(const std::array<float, 4>& q) {
    const float n = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
    if (n < 1e-12f) return {1.0f, 0.0f, 0.0f, 0.0f};
    return {q[0] / n, q[1] / n, q[2] / n, q[3] / n};
}

// Pinhole camera. rotation maps world to camera coordinates; a world point
// lands at p = R * x + t, and on the image at (f * px / pz + cx, f * py / pz + cy).
// Pixel (ix, iy) covers the unit square centered at (ix + 0.5, iy + 0.5).
struct Camera {
    std::array<float, 4> rotation{1.0f, 0.0f, 0.0f, 0.0f};
    std::array<float, 3> translation{0.0f, 0.0f, 0.0f};
    float focal = 1.0f;
    float cx = 0.0f;
    float cy = 0.0f;
    int width = 0;
    int height = 0;

    Eigen::Matrix3f rotation_matrix() const {
        return quat_to_matrix(rotation[0], rotation[1], rotation[2], rotation[3]);
    }

    Eigen::Vector3f to_camera(const Eigen::Vector3f& world) const {
        return rotation_matrix() * world +
               Eigen::Vector3f(translation[0], translation[1], translation[2]);
    }

    // Camera center in world coordinates: the point mapping to the origin.
    Eigen::Vector3f position() const {
        return -(rotation_matrix().transpose() *
                 Eigen::Vector3f(translation[0], translation[1], translation[2]));
    }

    // Pinhole map to (u, v, depth) in continuous pixel coordinates.
    std::array<float, 3> project_point(const Eigen::Vector3f& world) const {
        const Eigen::Vector3f p = to_camera(world);
        return {focal * p.x() / p.z() + cx, focal * p.y() / p.z() + cy, p.z()};
    }

    // Inverse of project_point at a known camera-frame depth.
    Eigen::Vector3f unproject(float u, float v, float depth) const {
        const Eigen::Vector3f pc((u - cx) / focal * depth, (v - cy) / focal * depth, depth);
        return rotation_matrix().transpose() *
               (pc - Eigen::Vector3f(translation[0], translation[1], translation[2]));
    }

    void validate() const {
        const float n2 = rotation[0] * rotation[0] + rotation[1] * rotation[1] +
                         rotation[2] * rotation[2] + rotation[3] * rotation[3];
        if (std::fabs(std::sqrt(n2) - 1.0f) > 1e-6f)
            throw ConfigError("camera: rotation quaternion must be unit norm");
        if (!(focal > 0.0f)) throw ConfigError("camera: focal must be positive");
        if (width <= 0 || height <= 0) throw ConfigError("camera: extents must be positive");
    }
};

} // namespace t4dg
