// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "t4dg/camera.hpp"
#include "t4dg/config.hpp"
#include "t4dg/image.hpp"
#include "t4dg/scenes.hpp"

namespace t4dg::cli {

// Build-time `git describe` stamp, "unknown" outside a git checkout.
std::string git_describe();

// Scene archive: a directory holding a `meta` key-value file (counts,
// extents, blob specs, cameras), per-frame PPM images under scene<k>/, and
// one tensor container per scene with the float depth maps. PPM quantizes
// pixels to 8 bits; everything else round-trips exactly.
void save_scene_archive(const std::string& dir, const std::vector<scenes::Scene4D>& set);
std::vector<scenes::Scene4D> load_scene_archive(const std::string& dir);

// Sampled view-time grid: decoded pixel frames plus the sampling settings,
// stored as one tensor container.
struct SampledGrid {
    std::vector<std::vector<Image>> frames; // [V][T]
    int steps = 0;
    float cfg_scale = 0.0f;
    uint64_t seed = 0;
};
void save_sampled_grid(const std::string& path, const SampledGrid& grid);
SampledGrid load_sampled_grid(const std::string& path);

// Camera path: key-value text with shared extents and one
// `frame<k> = qw qx qy qz tx ty tz focal cx cy` line per frame.
void save_camera_path(const std::string& path, const std::vector<Camera>& cams);
std::vector<Camera> load_camera_path(const std::string& path);

// Run manifest: seed, git describe, per-stage wall-clock seconds, then the
// resolved configuration verbatim. Written next to every subcommand output.
struct StageTiming {
    std::string name;
    double seconds = 0.0;
};
void write_manifest(const std::string& path, const ConfigMap& config, uint64_t seed,
                    const std::vector<StageTiming>& stages);

// One masked-attention benchmark size. Flop counts are the closed-form
// score-plus-weighting terms (4*d per attended query-key pair), so
// flops_sparse / flops_dense == (V + T - 1) / (V * T) exactly.
struct BenchRow {
    int V = 0, T = 0, H = 0, W = 0, d = 0;
    int64_t flops_sparse = 0;
    int64_t flops_dense = 0;
    double ms_sparse = 0.0;
    double ms_dense = 0.0;
};
BenchRow bench_attention(int V, int T, int H, int W, int d, uint64_t seed);
// CSV with header "V,T,H,W,d,flops_sparse,flops_dense,ms_sparse,ms_dense".
void write_bench_csv(const std::string& path, const std::vector<BenchRow>& rows);

// Registered gradient checks: autodiff primitives coordinate-wise, sparse
// attention and the rasterizer via random directional derivatives.
inline constexpr double kGradCheckTol = 2e-3;
struct GradCheckResult {
    std::string name;
    double max_rel_err = 0.0;
    bool pass = false;
};
std::vector<GradCheckResult> run_grad_checks();

// Entry point behind main(): dispatches the subcommand, prints usage and
// returns 2 on bad arguments, reports a failed stage on stderr and returns 1.
int run(const std::vector<std::string>& args);

} // namespace t4dg::cli
