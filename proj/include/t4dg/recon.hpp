// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "t4dg/attention.hpp"
#include "t4dg/camera.hpp"
#include "t4dg/checkpoint.hpp"
#include "t4dg/image.hpp"
#include "t4dg/scenes.hpp"
#include "t4dg/splat.hpp"
#include "t4dg/tensor.hpp"

namespace t4dg::recon {

struct ReconConfig {
    int patch = 4;
    int d = 64;
    int blocks = 4; // alternating units: frame, global, temporal attention
    int heads = 4;
    float lambda_perceptual = 0.1f;
    int source_views = 4;
    int timesteps = 4;

    void validate() const; // throws ConfigError
};

// Token state after the backbone. Rows are frame-contiguous in (view, time)
// order; within a frame the camera token comes first, then the P patch
// tokens row-major over the patch grid.
struct BackboneState {
    ad::Tensor tokens; // [V*T*(P+1), d]
    int views = 0;
    int timesteps = 0;
    int patches = 0; // P per frame
    int height = 0;  // pixel extents of the input frames
    int width = 0;

    int64_t camera_row(int v, int t) const {
        return (static_cast<int64_t>(v) * timesteps + t) * (patches + 1);
    }
    int64_t image_row(int v, int t) const { return camera_row(v, t) + 1; }
};

// Per-Gaussian parameters reuse the rasterizer's type; one set per timestep,
// V*H_px*W_px entries.
using GaussianSet = std::vector<splat::Gaussian>;

// Differentiable per-timestep Gaussian parameters, concatenated over views.
struct GaussianTensors {
    ad::Tensor centers;    // [K, 3]
    ad::Tensor scales;     // [K, 3], positive
    ad::Tensor rotations;  // [K, 4], unnormalized (the rasterizer normalizes)
    ad::Tensor opacities;  // [K], in (0, 1)
    ad::Tensor colors;     // [K, 3], in [0, 1]
};

struct Reconstruction {
    std::vector<Camera> cameras;   // [V], aligned with the input view order
    std::vector<GaussianSet> sets; // [T]
};

// Feedforward reconstructor: linear patch embedding, per-view learned camera
// tokens (all equal at init), alternating attention units, and MLP heads for
// cameras, depth and per-pixel Gaussian parameters.
class ReconModel {
public:
    ReconModel(const ReconConfig& cfg, uint64_t seed);

    const ReconConfig& config() const { return cfg_; }
    ParamStore& params() { return store_; }
    const ParamStore& params() const { return store_; }

    // Runs the alternating units over all frames. The temporal sublayer only
    // executes when T > 1, so single-timestep training never touches its
    // parameters; its output projection is zero-initialized either way.
    BackboneState backbone_forward(const std::vector<std::vector<Image>>& frames) const;

    // Raw camera head outputs, one row of 8 per (view, time) camera token:
    // quaternion, translation, focal logit.
    ad::Tensor camera_raw(const BackboneState& state) const;
    // Depth map of one frame, [H*W], strictly positive via softplus.
    ad::Tensor depth_map(const BackboneState& state, int v, int t) const;
    // Per-pixel raw Gaussian channels of one frame, [H*W, 14]: position
    // refinement (3), opacity (1), scales (3), rotation (4), color offsets
    // (3). The output projection starts at zero, so the initial prediction
    // is the bare unprojected-depth Gaussian.
    ad::Tensor gaussian_raw(const BackboneState& state, int v, int t) const;

    // Single-file checkpoint holding parameters and config.
    void save(const std::string& path) const;
    static ReconModel load(const std::string& path);

private:
    struct Unit {
        attn::AttnCore frame, global, temporal;
    };

    ad::Tensor head_tokens(const BackboneState& state, int v, int t) const;

    ReconConfig cfg_;
    ParamStore store_;
    attn::Linear patch_embed_;
    std::vector<ad::Tensor> camera_tokens_; // one [1, d] parameter per view
    std::vector<Unit> units_;
    attn::Linear camera_fc1_, camera_fc2_;
    attn::Linear depth_fc1_, depth_fc2_;
    attn::Linear gauss_fc1_, gauss_fc2_;
};

// Camera tokens of every view at every timestep replaced by that view's
// token at timestep zero. Applied after the final backbone unit; camera
// predictions become bit-identical across time.
BackboneState replace_camera_tokens(const BackboneState& state);

// One raw camera row to a pinhole camera: normalized quaternion (a zero
// quaternion falls back to identity with a warning on stderr), translation,
// focal = softplus(raw) * width, principal point at the image center.
Camera camera_from_raw(const std::array<float, 8>& raw, int width, int height);
// Cameras from the head outputs, one per view (timestep-zero rows).
std::vector<Camera> cameras_from_raw(const ad::Tensor& raw, int views, int timesteps, int width,
                                     int height);

// Differentiable Gaussian parameters of one timestep across all views.
// Centroids are pixel unprojections of the predicted depth plus a bounded
// refinement (tanh x 5% of the mean unprojected distance to camera 0);
// cameras are held constant. Colors start from the input pixels.
GaussianTensors assemble_gaussians(const ReconModel& model, const BackboneState& state, int t,
                                   const std::vector<Camera>& cameras,
                                   const std::vector<std::vector<Image>>& frames);

// Plain-struct view of assembled tensors; quaternions are normalized with an
// identity fallback so GaussianSet invariants hold for any weights.
GaussianSet to_gaussian_set(const GaussianTensors& g);

// Rigid re-basing to camera 0 (forced to identity rotation and zero
// translation) plus global scale normalization: translations, centroids and
// Gaussian scales divide by the mean centroid distance to camera 0. A scale
// within 1e-5 of one is snapped to one, making the map exactly idempotent.
Reconstruction canonicalize(const Reconstruction& r);

// Ground-truth camera re-based to the frame of camera 0 of the same list
// (world scale kept); used as the supervision target.
Camera relative_to_first(const std::vector<Camera>& cams, int idx);

// Full inference: backbone, camera-token replacement, heads, per-timestep
// Gaussian assembly, canonicalization. No gradients are recorded.
Reconstruction reconstruct(const ReconModel& model,
                           const std::vector<std::vector<Image>>& frames);

// MSE plus lambda times the mean absolute difference of horizontal and
// vertical forward-difference image gradients, over [H, W, 3] tensors.
ad::Tensor recon_loss(const ad::Tensor& rendered, const ad::Tensor& target, float lambda);

enum class ReconStage { static_stage, dynamic_stage };

struct ReconTrainOptions {
    int iters = 500;
    float lr = 2e-3f;
    int warmup = 50;
    bool cosine_decay = true;
    uint64_t seed = 0;
    float lambda_camera = 1.0f;
    float lambda_depth = 1.0f;
};

// Cosine-decayed lr after linear warmup (same policy as the denoiser).
float recon_scheduled_lr(const ReconTrainOptions& opt, int step);

// Two-stage trainer. The static stage feeds single-timestep samples, so
// temporal parameters keep their zero-output init bit-exactly; the dynamic
// stage feeds `cfg.timesteps` windows (static scenes duplicated across time)
// and updates only temporal attention and the Gaussian head. Loss per step:
// recon_loss on one held-out view plus camera and log-depth supervision.
// Views beyond cfg.source_views are the held-out render targets. Returns the
// per-iteration total loss; throws ConfigError on non-finite loss.
std::vector<float> train_recon(ReconModel& model, const std::vector<scenes::Scene4D>& dataset,
                               ReconStage stage, const ReconTrainOptions& opt);

// Nearest-source-view warp through ground-truth target depth: each target
// pixel unprojects at its true depth and samples the source image
// bilinearly. The comparison baseline for novel-view evaluation.
Image depth_warp_view(const scenes::Scene4D& scene, int src_view, int tgt_view, int t);
int nearest_source_view(const std::vector<Camera>& cams, int source_count, int tgt_view);

// Binary little-endian PLY, one vertex per Gaussian with properties
// x, y, z, opacity, scale_0..2, rot_0..3, red, green, blue (all float32).
void save_ply(const std::string& path, const GaussianSet& set);
GaussianSet load_ply(const std::string& path);

} // namespace t4dg::recon
