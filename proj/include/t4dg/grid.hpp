// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "t4dg/checkpoint.hpp"
#include "t4dg/tensor.hpp"

namespace t4dg::grid {

// Latent grid extents. V views, T latent timesteps, H x W spatial tokens,
// d channels. T_max bounds the timestep range admitted by position collapse.
struct GridShape {
    int V = 1, T = 1, H = 1, W = 1, d = 2;
    int T_max = 1;

    GridShape() = default;
    GridShape(int v, int t, int h, int w, int d_, int t_max);

    int64_t tokens() const { return static_cast<int64_t>(V) * T * H * W; }
    int64_t frames() const { return static_cast<int64_t>(V) * T; }
    int64_t frame_tokens() const { return static_cast<int64_t>(H) * W; }
};

// Canonical order: view-major, then time, then x (rows), then y (columns).
int64_t flatten_index(const GridShape& g, int v, int t, int x, int y);

// (v, t) -> v * T_max + t. Injective for t < T_max.
int collapse_position(int v, int t, int t_max);

// (v, t) -> v + t. Ambiguous across diagonals; kept for comparison runs.
int collapse_position_sum(int v, int t);

struct TokenPos {
    int p = 0, x = 0, y = 0;
};

// Collapsed positions for every token in canonical order.
std::vector<TokenPos> token_positions(const GridShape& g, bool sum_collapse = false);

// Rotary embedding over the last axis. Channels split into three equal
// groups driven by p, x and y; the group width is ceil(d / 6) * 2 as if the
// axis were zero-padded to a multiple of six, so trailing pairs that fall
// past d are skipped. Rotation preserves the norm exactly.
ad::Tensor rope_rotate(const ad::Tensor& x, const TokenPos& pos);

// Row i rotated by positions[i]; x is [N, d].
ad::Tensor rope_rotate_rows(const ad::Tensor& x, const std::vector<TokenPos>& positions);

// Per-head variant: x is [N, heads * head_dim] and each head slice is
// rotated independently with groups derived from head_dim.
ad::Tensor rope_rotate_heads(const ad::Tensor& x, const std::vector<TokenPos>& positions,
                             int heads);

struct TokenGrid {
    GridShape shape;
    ad::Tensor tokens; // [V*T*H*W, d]
};

// Linear embedding of space-time patches: `factor` consecutive frames of a
// patch x patch RGB window map to one token channel vector.
struct PatchEmbed {
    int patch = 4, factor = 4, d = 64;
    ad::Tensor weight; // [3 * factor * patch * patch, d]
    ad::Tensor bias;   // [d]

    PatchEmbed() = default;
    PatchEmbed(ParamStore& store, const std::string& prefix, int patch, int factor, int d,
               Rng& rng);
    int in_dim() const { return 3 * factor * patch * patch; }
};

// Inverse-direction linear map from tokens back to pixels.
struct PatchDecode {
    int patch = 4, factor = 4, d = 64;
    ad::Tensor weight; // [d, 3 * factor * patch * patch]
    ad::Tensor bias;   // [3 * factor * patch * patch]

    PatchDecode() = default;
    PatchDecode(ParamStore& store, const std::string& prefix, int patch, int factor, int d,
                Rng& rng);
    int out_dim() const { return 3 * factor * patch * patch; }
};

// frames is [V, T_px, H_px, W_px, 3] with T_px divisible by the embed factor
// and H_px, W_px divisible by the patch size. t_max bounds the latent grid.
TokenGrid compress_temporal(const ad::Tensor& frames, const PatchEmbed& embed, int t_max);

// Tokens back to pixel frames [V, T*factor, H*patch, W*patch, 3].
ad::Tensor decompress_temporal(const TokenGrid& tokens, const PatchDecode& decode);

} // namespace t4dg::grid
