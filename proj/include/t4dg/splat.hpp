// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <vector>

#include "t4dg/camera.hpp"
#include "t4dg/image.hpp"
#include "t4dg/tensor.hpp"

namespace t4dg::splat {

struct Gaussian {
    std::array<float, 3> center{0.0f, 0.0f, 0.0f};
    std::array<float, 3> scale{1.0f, 1.0f, 1.0f};      // positive, world units
    std::array<float, 4> rotation{1.0f, 0.0f, 0.0f, 0.0f}; // unit quaternion (w, x, y, z)
    float opacity = 1.0f;                               // (0, 1]
    std::array<float, 3> color{1.0f, 1.0f, 1.0f};       // RGB in [0, 1]
};

struct Projected2D {
    float mean_x = 0.0f;
    float mean_y = 0.0f;
    float cov_xx = 0.0f; // pixel^2, after the anti-aliasing floor
    float cov_xy = 0.0f;
    float cov_yy = 0.0f;
    float depth = 0.0f;  // camera-frame z
    bool visible = false;
};

// Near plane for visibility and the additive covariance floor.
inline constexpr float kNearPlane = 0.01f;
inline constexpr float kCovFloor = 0.3f;

// EWA projection: camera-frame p = R x + t, perspective mean, and
// cov2d = J W Sigma W^T J^T + kCovFloor * I with J the perspective Jacobian
// at p and W the camera rotation. visible is false when pz <= kNearPlane,
// in which case the projection fields are unspecified.
Projected2D project(const Gaussian& g, const Camera& cam);

struct RasterResult {
    ad::Tensor image;  // [H, W, 3], each channel in [0, 1]
    ad::Tensor depth;  // [H, W]; coverage-weighted mean depth, or the
                       // background depth where nothing lands
    std::vector<float> alpha_sum;     // per pixel: sum_i T_i * alpha_i
    std::vector<float> transmittance; // per pixel: T after the last blended Gaussian
    int skipped = 0;                  // projections dropped for a singular cov2d
};

// Differentiable front-to-back compositing. Inputs: centers [K,3],
// scales [K,3], rotations [K,4] (normalized internally; the normalization
// Jacobian is part of the backward pass), opacities [K], colors [K,3].
// Visible Gaussians composite in ascending depth, ties broken by input
// index; alpha is clamped to 0.999, influence is truncated beyond the
// 3-sigma ellipse, and a pixel stops once its transmittance drops
// below 1e-4.
RasterResult rasterize_tensors(const ad::Tensor& centers, const ad::Tensor& scales,
                               const ad::Tensor& rotations, const ad::Tensor& opacities,
                               const ad::Tensor& colors, const Camera& cam,
                               std::array<float, 3> background, float background_depth);

// Same compositing for a plain Gaussian list (no gradient tracking).
RasterResult rasterize(const std::vector<Gaussian>& gaussians, const Camera& cam,
                       std::array<float, 3> background, float background_depth);

// Copies a [H, W, 3] image tensor into the plain Image type.
Image to_image(const ad::Tensor& t);

} // namespace t4dg::splat
