// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "t4dg/attention.hpp"
#include "t4dg/checkpoint.hpp"
#include "t4dg/grid.hpp"
#include "t4dg/image.hpp"
#include "t4dg/scenes.hpp"
#include "t4dg/tensor.hpp"

namespace t4dg::diffusion {

enum class Arch { fused, sequential, parallel };

Arch parse_arch(const std::string& name); // throws ConfigError on unknown names
std::string arch_name(Arch arch);

struct DenoiserConfig {
    int blocks = 4;
    int d = 64;
    int heads = 4;
    Arch arch = Arch::fused;
    int compression_factor = 4; // pixel frames per latent timestep
    int t_max = 8;              // position-collapse bound on latent timesteps
    int patch = 4;              // spatial pixels per token side

    void validate() const; // throws ConfigError
};

// Reference pixel content for the first grid row and/or column.
struct ConditioningSpec {
    std::vector<Image> fixed_view;  // view 0's frames, one per pixel timestep (empty = absent)
    std::vector<Image> freeze_time; // each view's frame at time zero (empty = absent)
    std::vector<uint8_t> cell_mask; // [V*T] latent cells, 1 = conditioned

    bool empty() const { return fixed_view.empty() && freeze_time.empty(); }
};

// 1 for every (v, t) cell covered by the requested patterns, view-major.
std::vector<uint8_t> make_cell_mask(int views, int timesteps, bool fix_view, bool freeze_time);

// Latent-side conditioning: reference token rows (zero off-mask) plus the mask.
struct LatentCond {
    std::vector<uint8_t> cell_mask; // empty = unconditioned
    ad::Tensor ref_tokens;          // [N, d] when the mask is nonempty

    bool empty() const { return cell_mask.empty(); }
};

struct FlowSchedule {
    int steps = 8;
    std::vector<float> timesteps; // strictly decreasing, in (0,1]
    float cfg_scale = 0.0f;

    void validate() const; // throws ConfigError
};

// Uniform timesteps 1, (n-1)/n, ..., 1/n; the final Euler step lands on 0.
FlowSchedule make_schedule(int steps, float cfg_scale);

// [1, width] sinusoidal features of a diffusion time in [0, 1].
ad::Tensor sinusoidal_embedding(float t_diff, int width);

// DiT-style velocity predictor over token grids. Owns a frozen-after-stage-0
// linear patch codec (codec_params) and the transformer itself (net_params).
class Denoiser {
public:
    Denoiser(const DenoiserConfig& cfg, uint64_t seed);

    const DenoiserConfig& config() const { return cfg_; }

    // Pixel frames [V, T_px, H_px, W_px, 3] to a latent grid and back.
    grid::TokenGrid embed_frames(const ad::Tensor& frames) const;
    ad::Tensor decode_tokens(const grid::TokenGrid& g) const;

    // Reference rows copied from a clean latent grid (training path).
    static LatentCond cond_from_grid(const grid::TokenGrid& clean, bool fix_view,
                                     bool freeze_time);
    // Reference pixels embedded through the codec (sampling path). Shape and
    // mask consistency is validated against `g`.
    LatentCond embed_conditioning(const ConditioningSpec& cond, const grid::GridShape& g) const;

    // Velocity prediction. Adds reference embeddings at conditioned cells and
    // a sinusoidal time embedding everywhere, runs the configured blocks, and
    // projects through a zero-initialized final linear (all-zero at init).
    grid::TokenGrid forward(const grid::TokenGrid& noised, float t_diff,
                            const LatentCond& cond) const;

    ParamStore& codec_params() { return codec_; }
    ParamStore& net_params() { return net_; }
    int64_t net_param_count() const { return net_.value_count(); }

    // Single-file checkpoint holding codec, network and config.
    void save(const std::string& path) const;
    static Denoiser load(const std::string& path);

    mutable int64_t forward_calls = 0;

private:
    DenoiserConfig cfg_;
    ParamStore codec_, net_;
    grid::PatchEmbed embed_;
    grid::PatchDecode decode_;
    attn::Mlp time_mlp_;
    std::vector<attn::FusedBlock> fused_;
    std::vector<attn::SequentialBlock> sequential_;
    std::vector<attn::ParallelBlock> parallel_;
    attn::Linear final_;
};

// One rectified-flow training point: x_tau = (1-tau) clean + tau eps and the
// straight-line velocity target eps - clean. `clean` is detached.
struct FlowSample {
    ad::Tensor noised;
    ad::Tensor target;
    float tau = 0.0f;
};
FlowSample make_flow_sample(const ad::Tensor& clean_tokens, float tau, Rng& rng);

// Mean squared error over tokens of non-conditioned cells only.
ad::Tensor masked_mse(const ad::Tensor& pred, const ad::Tensor& target,
                      const std::vector<uint8_t>& cell_mask, const grid::GridShape& g);

// Draws tau ~ U(0,1) and eps ~ N(0,1), runs the model, returns the masked loss.
ad::Tensor rf_loss(const Denoiser& model, const grid::TokenGrid& clean, const LatentCond& cond,
                   Rng& rng);

// Euler sampler from tau=1 to 0; conditioned cells are re-imposed to their
// reference embeddings at the current noise level after every step, so they
// end exactly at the clean reference. cfg_scale > 0 adds classifier-free
// guidance (two model calls per step).
grid::TokenGrid rf_sample(const Denoiser& model, const grid::GridShape& shape,
                          const LatentCond& cond, const FlowSchedule& schedule, uint64_t seed);

// Pixel tensor [V, T_px, H_px, W_px, 3] of a scene's frames.
ad::Tensor frames_tensor(const scenes::Scene4D& scene, bool reverse_views = false);

struct TrainOptions {
    int iters = 500;
    float lr = 3e-4f;
    int warmup = 100;
    bool cosine_decay = true; // decay to ~0 after warmup; false holds lr constant
    uint64_t seed = 0;
    bool reverse_views = true;       // random view-order flips
    bool drop_cond_for_static = true; // static scenes sometimes train unconditioned
};

// Warmup then optionally a half-cosine down to zero over the remaining steps.
float scheduled_lr(const TrainOptions& opt, int step);

// Stage 0: fits the linear patch codec by pixel reconstruction. Returns the
// per-iteration loss curve. Throws ConfigError on a non-finite loss.
std::vector<float> train_codec(Denoiser& model, const std::vector<scenes::Scene4D>& dataset,
                               const TrainOptions& opt);

// Rectified-flow training of the transformer; the codec stays frozen.
// Conditioning patterns rotate between fixed-view, freeze-time, and both.
std::vector<float> train_denoiser(Denoiser& model, const std::vector<scenes::Scene4D>& dataset,
                                  const TrainOptions& opt);

} // namespace t4dg::diffusion
