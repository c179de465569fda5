// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <string>
#include <vector>

#include "t4dg/camera.hpp"
#include "t4dg/image.hpp"
#include "t4dg/rng.hpp"

namespace t4dg::scenes {

// Depth reported where no blob covers a pixel.
inline constexpr float kFarDepth = 20.0f;

// Blob center as a cubic polynomial in t: c0 + c1 t + c2 t^2 + c3 t^3.
struct BlobPath {
    std::array<std::array<float, 3>, 4> coeff{};
    std::array<float, 3> at(float t) const {
        std::array<float, 3> p{};
        for (int a = 0; a < 3; ++a) {
            const size_t ai = static_cast<size_t>(a);
            p[ai] = coeff[0][ai] + t * (coeff[1][ai] + t * (coeff[2][ai] + t * coeff[3][ai]));
        }
        return p;
    }
};

struct Blob {
    BlobPath path;
    std::array<float, 3> color{0.5f, 0.5f, 0.5f};
    float scale = 0.5f;   // isotropic world scale, > 0
    float opacity = 0.9f; // (0, 1]
};

struct BlobSceneSpec {
    std::vector<Blob> blobs;
    std::array<float, 3> background{0.0f, 0.0f, 0.0f};
    void validate() const;
};

struct Scene4D {
    std::vector<std::vector<Image>> images;              // [V][T]
    std::vector<std::vector<std::vector<float>>> depths; // [V][T], each H*W
    std::vector<Camera> cameras;                         // [V], constant over time
    BlobSceneSpec spec;
    bool is_static = false; // pseudo-4D grid built from a single timestep
    int views() const { return static_cast<int>(images.size()); }
    int frames() const { return images.empty() ? 0 : static_cast<int>(images[0].size()); }
};

// Cameras evenly spaced on a horizontal circle of the given radius around
// look_at, raised by elevation_deg, all aimed at look_at; view 0 sits at
// azimuth 0. Intrinsics: focal = width, principal point at the center.
std::vector<Camera> make_orbit_cameras(int v, float radius, float elevation_deg,
                                       std::array<float, 3> look_at, int width, int height);

// Renders the blobs at time t as isotropic Gaussians through the shared
// splat compositing path.
struct RenderedFrame {
    Image image;
    std::vector<float> depth;
};
RenderedFrame render_scene(const BlobSceneSpec& spec, const Camera& cam, float t);

struct DatasetParams {
    int n_scenes = 1;
    int views = 4;
    int frames = 8; // pixel-space timesteps
    uint64_t seed = 0;
    int width = 32;
    int height = 32;
    float radius = 6.0f;
    float elevation_deg = 20.0f;
    int min_blobs = 2;
    int max_blobs = 5;
};

// Pure function of its parameters: same params return bit-identical scenes.
std::vector<Scene4D> generate_dataset(const DatasetParams& params);

// Inverse-warp by a homography: out(x) = in(h * x) sampled bilinearly in
// continuous pixel coordinates with edge clamping.
Image warp_homography(const Image& img, const Eigen::Matrix3f& h);

// Random 4-corner perturbation homography (displacements bounded by
// max_shift * extent); degenerate draws are resampled.
Eigen::Matrix3f random_homography(int width, int height, Rng& rng, float max_shift = 0.1f);

// Pseudo multi-view video: view 0 is the input video, each further view is
// one fixed random homography applied to every frame.
std::vector<std::vector<Image>> homography_augment(const std::vector<Image>& video, int views,
                                                   uint64_t seed);

// Freeze-time grid: each view's single frame duplicated across all
// timesteps, flagged static so training can drop frame conditioning.
Scene4D make_static_4d(const std::vector<Image>& freeze_time_frames, int frames);

// Scene archive: `meta` text file plus per-frame PPM images and per-frame
// depth tensors (view{v}_t{t}.ppm / .depth).
void save_scene(const std::string& dir, const Scene4D& scene);
Scene4D load_scene(const std::string& dir);

} // namespace t4dg::scenes
