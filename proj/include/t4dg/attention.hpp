// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "t4dg/checkpoint.hpp"
#include "t4dg/grid.hpp"
#include "t4dg/tensor.hpp"

namespace t4dg::attn {

// A query at (vq, tq) may attend a key at (vk, tk) when they share the view
// or the timestep. Symmetric and reflexive.
inline bool mask_predicate(int vq, int tq, int vk, int tk) {
    return vq == vk || tq == tk;
}

// Frame-level block sparsity. Tokens are assumed frame-contiguous in
// canonical order, `block` tokens per frame; `pairs` lists admissible
// (query frame, key frame) blocks sorted ascending.
struct BlockSparseLayout {
    int frames = 0;
    int block = 0;
    std::vector<std::pair<int, int>> pairs;
    std::vector<std::vector<int>> keys_of; // per query frame, ascending

    int64_t pair_count() const { return static_cast<int64_t>(pairs.size()); }
    int64_t keys_per_query(int frame) const {
        return static_cast<int64_t>(keys_of[static_cast<size_t>(frame)].size()) * block;
    }
};

BlockSparseLayout make_layout(int frames, int block, std::vector<std::pair<int, int>> pairs);

// Union layout: same view or same time. |pairs| = V*T*(V+T-1).
BlockSparseLayout build_block_layout(const grid::GridShape& g);
// Single-axis layouts used by the sequential and parallel variants.
BlockSparseLayout same_time_layout(const grid::GridShape& g);
BlockSparseLayout same_view_layout(const grid::GridShape& g);

// Token-level additive mask (0 / -inf) of shape [N, N] from the union
// predicate, for the dense reference path.
ad::Tensor attention_mask_additive(const grid::GridShape& g);
// Binary 0/1 variant for the literal multiplicative ablation.
ad::Tensor attention_mask_binary(const grid::GridShape& g);

// Dense reference attention composed from generic primitives. q, k, v are
// [N, width]; the scale is 1/sqrt(width/heads) per head.
// With multiplicative_ablation the binary mask multiplies the scaled logits
// before the softmax (masked logits become zero, not -inf), reproducing the
// literal reading of the masked-attention formula. Off by default.
ad::Tensor fused_attention_dense(const ad::Tensor& q, const ad::Tensor& k, const ad::Tensor& v,
                                 int heads, const ad::Tensor& mask,
                                 bool multiplicative_ablation = false);

// Block-sparse attention with an online softmax per query row, streaming key
// frames in ascending order. Bit-for-bit deterministic for a fixed layout.
ad::Tensor fused_attention_sparse(const ad::Tensor& q, const ad::Tensor& k, const ad::Tensor& v,
                                  int heads, const BlockSparseLayout& layout);

struct Linear {
    ad::Tensor w, b;
    Linear() = default;
    Linear(ParamStore& store, const std::string& prefix, int in, int out, Rng& rng,
           bool zero_init = false);
    ad::Tensor forward(const ad::Tensor& x) const;
};

struct Mlp {
    Linear fc1, fc2;
    Mlp() = default;
    Mlp(ParamStore& store, const std::string& prefix, int d, int hidden, Rng& rng,
        bool zero_out = false);
    ad::Tensor forward(const ad::Tensor& x) const;
};

// One attention unit: fused qkv projection, rotary positions on q and k,
// block-sparse core, output projection.
struct AttnCore {
    int heads = 1;
    Linear qkv, out;
    AttnCore() = default;
    AttnCore(ParamStore& store, const std::string& prefix, int d, int heads, Rng& rng,
             bool zero_out = false);
    ad::Tensor forward(const ad::Tensor& x, const BlockSparseLayout& layout,
                       const std::vector<grid::TokenPos>& positions) const;
};

// Pre-norm residual block with a single fused view-time attention.
struct FusedBlock {
    AttnCore attn;
    Mlp mlp;
    FusedBlock() = default;
    FusedBlock(ParamStore& store, const std::string& prefix, int d, int heads, Rng& rng);
    ad::Tensor forward(const ad::Tensor& x, const BlockSparseLayout& fused,
                       const std::vector<grid::TokenPos>& positions) const;
};

// Cross-view attention then cross-time attention, independent parameters,
// then one MLP; each step residual.
struct SequentialBlock {
    AttnCore view_attn, time_attn;
    Mlp mlp;
    SequentialBlock() = default;
    SequentialBlock(ParamStore& store, const std::string& prefix, int d, int heads, Rng& rng);
    ad::Tensor forward(const ad::Tensor& x, const BlockSparseLayout& same_time,
                       const BlockSparseLayout& same_view,
                       const std::vector<grid::TokenPos>& positions) const;
};

// Two full branches (attention + MLP each) merged by a single zero-initialized
// linear over their concatenation, added residually: identity at init.
struct ParallelBlock {
    AttnCore view_attn, time_attn;
    Mlp view_mlp, time_mlp;
    Linear sync;
    ParallelBlock() = default;
    ParallelBlock(ParamStore& store, const std::string& prefix, int d, int heads, Rng& rng);
    ad::Tensor forward(const ad::Tensor& x, const BlockSparseLayout& same_time,
                       const BlockSparseLayout& same_view,
                       const std::vector<grid::TokenPos>& positions) const;
};

// Multiply-add pairs of the two attention matmuls (logits and values), the
// softmax itself excluded. The sparse/dense ratio is exactly (T+V-1)/(T*V).
int64_t attention_flops_dense(const grid::GridShape& g);
int64_t attention_flops_sparse(const grid::GridShape& g);

struct BenchResult {
    int V, T, H, W, d;
    int64_t flops_sparse, flops_dense;
    double ms_sparse, ms_dense;
};

// Times the same kernel under the union layout and under a full layout.
BenchResult bench_attention(int V, int T, int H, int W, int d, int heads, int iters);

} // namespace t4dg::attn
