// SPDX-License-Identifier: Apache-2.0
#include "t4dg/attention.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

namespace t4dg::attn {

BlockSparseLayout make_layout(int frames, int block, std::vector<std::pair<int, int>> pairs) {
    if (frames < 1 || block < 1) throw ConfigError("layout: frames and block must be positive");
    std::sort(pairs.begin(), pairs.end());
    pairs.erase(std::unique(pairs.begin(), pairs.end()), pairs.end());
    BlockSparseLayout layout;
    layout.frames = frames;
    layout.block = block;
    layout.keys_of.resize(static_cast<size_t>(frames));
    for (auto [fq, fk] : pairs) {
        if (fq < 0 || fq >= frames || fk < 0 || fk >= frames)
            throw IndexError("layout: frame pair out of range");
        layout.keys_of[static_cast<size_t>(fq)].push_back(fk);
    }
    layout.pairs = std::move(pairs);
    return layout;
}

namespace {

BlockSparseLayout predicate_layout(const grid::GridShape& g, bool same_view, bool same_time) {
    std::vector<std::pair<int, int>> pairs;
    for (int v = 0; v < g.V; ++v)
        for (int t = 0; t < g.T; ++t)
            for (int v2 = 0; v2 < g.V; ++v2)
                for (int t2 = 0; t2 < g.T; ++t2) {
                    const bool keep = (same_view && v == v2) || (same_time && t == t2);
                    if (keep) pairs.emplace_back(v * g.T + t, v2 * g.T + t2);
                }
    return make_layout(g.V * g.T, g.H * g.W, std::move(pairs));
}

} // namespace

BlockSparseLayout build_block_layout(const grid::GridShape& g) {
    return predicate_layout(g, true, true);
}

BlockSparseLayout same_time_layout(const grid::GridShape& g) {
    return predicate_layout(g, false, true);
}

BlockSparseLayout same_view_layout(const grid::GridShape& g) {
    return predicate_layout(g, true, false);
}

namespace {

ad::Tensor token_mask(const grid::GridShape& g, float pass, float blocked) {
    const int64_t n = g.tokens();
    const int64_t block = g.frame_tokens();
    ad::Tensor mask = ad::Tensor::zeros({static_cast<int>(n), static_cast<int>(n)});
    float* m = mask.data().data();
    for (int64_t rq = 0; rq < n; ++rq) {
        const int fq = static_cast<int>(rq / block);
        const int vq = fq / g.T, tq = fq % g.T;
        for (int64_t rk = 0; rk < n; ++rk) {
            const int fk = static_cast<int>(rk / block);
            const int vk = fk / g.T, tk = fk % g.T;
            m[rq * n + rk] = mask_predicate(vq, tq, vk, tk) ? pass : blocked;
        }
    }
    return mask;
}

} // namespace

ad::Tensor attention_mask_additive(const grid::GridShape& g) {
    return token_mask(g, 0.0f, -std::numeric_limits<float>::infinity());
}

ad::Tensor attention_mask_binary(const grid::GridShape& g) { return token_mask(g, 1.0f, 0.0f); }

ad::Tensor fused_attention_dense(const ad::Tensor& q, const ad::Tensor& k, const ad::Tensor& v,
                                 int heads, const ad::Tensor& mask,
                                 bool multiplicative_ablation) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2)
        throw ShapeError("attention: rank-2 q, k, v required");
    if (q.shape() != k.shape() || q.shape() != v.shape())
        throw ShapeError("attention: q, k, v shapes must match");
    const int width = q.dim(1);
    if (heads < 1 || width % heads != 0) throw ShapeError("attention: heads must divide width");
    const int hd = width / heads;
    const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
    std::vector<ad::Tensor> outs;
    outs.reserve(static_cast<size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        ad::Tensor qh = ad::slice(q, 1, h * hd, (h + 1) * hd);
        ad::Tensor kh = ad::slice(k, 1, h * hd, (h + 1) * hd);
        ad::Tensor vh = ad::slice(v, 1, h * hd, (h + 1) * hd);
        ad::Tensor s = ad::scale(ad::matmul(qh, ad::transpose2d(kh)), scale);
        ad::Tensor p = multiplicative_ablation ? ad::softmax_lastdim(ad::mul(s, mask))
                                               : ad::softmax_lastdim(s, &mask);
        outs.push_back(ad::matmul(p, vh));
    }
    return ad::concat(outs, 1);
}

namespace {

struct SparseCtx {
    BlockSparseLayout layout;
    int heads = 1;
    int hd = 1;
    float scale = 1.0f;
    std::vector<float> lse; // [heads * N]
};

} // namespace

ad::Tensor fused_attention_sparse(const ad::Tensor& q, const ad::Tensor& k, const ad::Tensor& v,
                                  int heads, const BlockSparseLayout& layout) {
    if (q.rank() != 2 || q.shape() != k.shape() || q.shape() != v.shape())
        throw ShapeError("attention: rank-2 q, k, v of equal shape required");
    const int n = q.dim(0);
    const int width = q.dim(1);
    if (heads < 1 || width % heads != 0) throw ShapeError("attention: heads must divide width");
    if (n != layout.frames * layout.block)
        throw ShapeError("attention: token count does not match the layout");
    for (int f = 0; f < layout.frames; ++f)
        if (layout.keys_of[static_cast<size_t>(f)].empty())
            throw std::runtime_error("attention: frame " + std::to_string(f) +
                                     " attends no keys (fully masked)");

    auto ctx = std::make_shared<SparseCtx>();
    ctx->layout = layout;
    ctx->heads = heads;
    ctx->hd = width / heads;
    ctx->scale = 1.0f / std::sqrt(static_cast<float>(ctx->hd));
    ctx->lse.assign(static_cast<size_t>(heads) * n, 0.0f);

    auto node = ad::detail::make_node(q.shape(), true, {q.node, k.node, v.node});
    const float* pq = q.data().data();
    const float* pk = k.data().data();
    const float* pv = v.data().data();
    float* out = node->data.data();
    const int hd = ctx->hd;
    const int block = layout.block;
    const float scale = ctx->scale;
    const float neg_inf = -std::numeric_limits<float>::infinity();

    std::vector<float> acc(static_cast<size_t>(hd));
    for (int fq = 0; fq < layout.frames; ++fq) {
        const auto& keys = layout.keys_of[static_cast<size_t>(fq)];
        for (int h = 0; h < heads; ++h) {
            const int co = h * hd;
            for (int i = 0; i < block; ++i) {
                const int64_t r = static_cast<int64_t>(fq) * block + i;
                const float* qrow = pq + r * width + co;
                float m = neg_inf;
                double denom = 0.0;
                std::fill(acc.begin(), acc.end(), 0.0f);
                for (int fk : keys) {
                    for (int j = 0; j < block; ++j) {
                        const int64_t rk = static_cast<int64_t>(fk) * block + j;
                        const float* krow = pk + rk * width + co;
                        float s = 0.0f;
                        for (int c = 0; c < hd; ++c) s += qrow[c] * krow[c];
                        s *= scale;
                        if (s > m) {
                            const float corr = (m == neg_inf) ? 0.0f : std::exp(m - s);
                            denom *= corr;
                            for (int c = 0; c < hd; ++c) acc[static_cast<size_t>(c)] *= corr;
                            m = s;
                        }
                        const float w = std::exp(s - m);
                        denom += w;
                        const float* vrow = pv + rk * width + co;
                        for (int c = 0; c < hd; ++c) acc[static_cast<size_t>(c)] += w * vrow[c];
                    }
                }
                const float inv = static_cast<float>(1.0 / denom);
                float* orow = out + r * width + co;
                for (int c = 0; c < hd; ++c) orow[c] = acc[static_cast<size_t>(c)] * inv;
                ctx->lse[static_cast<size_t>(h) * n + static_cast<size_t>(r)] =
                    m + static_cast<float>(std::log(denom));
            }
        }
    }

    if (node->requires_grad) {
        node->backward_fn = [ctx, n, width](ad::Node& self) {
            ad::Node& nq = *self.parents[0];
            ad::Node& nk = *self.parents[1];
            ad::Node& nv = *self.parents[2];
            const bool need_q = nq.requires_grad, need_k = nk.requires_grad,
                       need_v = nv.requires_grad;
            if (!need_q && !need_k && !need_v) return;
            if (need_q && nq.grad.empty()) nq.grad.assign(static_cast<size_t>(nq.numel()), 0.0f);
            if (need_k && nk.grad.empty()) nk.grad.assign(static_cast<size_t>(nk.numel()), 0.0f);
            if (need_v && nv.grad.empty()) nv.grad.assign(static_cast<size_t>(nv.numel()), 0.0f);
            const float* pq = nq.data.data();
            const float* pk = nk.data.data();
            const float* pv = nv.data.data();
            const float* po = self.data.data();
            const float* g = self.grad.data();
            const auto& layout = ctx->layout;
            const int hd = ctx->hd;
            const int block = layout.block;
            const float scale = ctx->scale;
            // Per-block softmax recomputation from the saved logsumexp, then
            // the exact adjoint. Loop order fixed: query frame, head, row,
            // key frame, key row.
            for (int fq = 0; fq < layout.frames; ++fq) {
                const auto& keys = layout.keys_of[static_cast<size_t>(fq)];
                for (int h = 0; h < ctx->heads; ++h) {
                    const int co = h * hd;
                    for (int i = 0; i < block; ++i) {
                        const int64_t r = static_cast<int64_t>(fq) * block + i;
                        const float* qrow = pq + r * width + co;
                        const float* grow = g + r * width + co;
                        const float* orow = po + r * width + co;
                        const float lse = ctx->lse[static_cast<size_t>(h) * n + static_cast<size_t>(r)];
                        float dsum = 0.0f; // dot(dO, O) for this head row
                        for (int c = 0; c < hd; ++c) dsum += grow[c] * orow[c];
                        for (int fk : keys) {
                            for (int j = 0; j < block; ++j) {
                                const int64_t rk = static_cast<int64_t>(fk) * block + j;
                                const float* krow = pk + rk * width + co;
                                const float* vrow = pv + rk * width + co;
                                float s = 0.0f;
                                for (int c = 0; c < hd; ++c) s += qrow[c] * krow[c];
                                const float p = std::exp(s * scale - lse);
                                float dp = 0.0f;
                                for (int c = 0; c < hd; ++c) dp += grow[c] * vrow[c];
                                if (need_v) {
                                    float* dv = nv.grad.data() + rk * width + co;
                                    for (int c = 0; c < hd; ++c) dv[c] += p * grow[c];
                                }
                                const float ds = p * (dp - dsum) * scale;
                                if (need_q) {
                                    float* dq = nq.grad.data() + r * width + co;
                                    for (int c = 0; c < hd; ++c) dq[c] += ds * krow[c];
                                }
                                if (need_k) {
                                    float* dk = nk.grad.data() + rk * width + co;
                                    for (int c = 0; c < hd; ++c) dk[c] += ds * qrow[c];
                                }
                            }
                        }
                    }
                }
            }
        };
    }
    return ad::Tensor(node);
}

Linear::Linear(ParamStore& store, const std::string& prefix, int in, int out, Rng& rng,
               bool zero_init) {
    if (zero_init) {
        w = store.create_zeros(prefix + ".weight", {in, out});
    } else {
        w = store.create_randn(prefix + ".weight", {in, out}, rng,
                               1.0f / std::sqrt(static_cast<float>(in)));
    }
    b = store.create_zeros(prefix + ".bias", {out});
}

ad::Tensor Linear::forward(const ad::Tensor& x) const { return ad::add(ad::matmul(x, w), b); }

Mlp::Mlp(ParamStore& store, const std::string& prefix, int d, int hidden, Rng& rng, bool zero_out)
    : fc1(store, prefix + ".fc1", d, hidden, rng),
      fc2(store, prefix + ".fc2", hidden, d, rng, zero_out) {}

ad::Tensor Mlp::forward(const ad::Tensor& x) const {
    return fc2.forward(ad::gelu(fc1.forward(x)));
}

AttnCore::AttnCore(ParamStore& store, const std::string& prefix, int d, int heads_, Rng& rng,
                   bool zero_out)
    : heads(heads_),
      qkv(store, prefix + ".qkv", d, 3 * d, rng),
      out(store, prefix + ".out", d, d, rng, zero_out) {}

ad::Tensor AttnCore::forward(const ad::Tensor& x, const BlockSparseLayout& layout,
                             const std::vector<grid::TokenPos>& positions) const {
    const int d = x.dim(1);
    ad::Tensor qkv_out = qkv.forward(x);
    ad::Tensor q = ad::slice(qkv_out, 1, 0, d);
    ad::Tensor k = ad::slice(qkv_out, 1, d, 2 * d);
    ad::Tensor v = ad::slice(qkv_out, 1, 2 * d, 3 * d);
    q = grid::rope_rotate_heads(q, positions, heads);
    k = grid::rope_rotate_heads(k, positions, heads);
    return out.forward(fused_attention_sparse(q, k, v, heads, layout));
}

FusedBlock::FusedBlock(ParamStore& store, const std::string& prefix, int d, int heads, Rng& rng)
    : attn(store, prefix + ".attn", d, heads, rng), mlp(store, prefix + ".mlp", d, 4 * d, rng) {}

ad::Tensor FusedBlock::forward(const ad::Tensor& x, const BlockSparseLayout& fused,
                               const std::vector<grid::TokenPos>& positions) const {
    ad::Tensor h = ad::add(x, attn.forward(ad::layer_norm_lastdim(x), fused, positions));
    return ad::add(h, mlp.forward(ad::layer_norm_lastdim(h)));
}

SequentialBlock::SequentialBlock(ParamStore& store, const std::string& prefix, int d, int heads,
                                 Rng& rng)
    : view_attn(store, prefix + ".view_attn", d, heads, rng),
      time_attn(store, prefix + ".time_attn", d, heads, rng),
      mlp(store, prefix + ".mlp", d, 4 * d, rng) {}

ad::Tensor SequentialBlock::forward(const ad::Tensor& x, const BlockSparseLayout& same_time,
                                    const BlockSparseLayout& same_view,
                                    const std::vector<grid::TokenPos>& positions) const {
    // Cross-view step: keys share the timestep. Cross-time step: keys share
    // the view.
    ad::Tensor h = ad::add(x, view_attn.forward(ad::layer_norm_lastdim(x), same_time, positions));
    h = ad::add(h, time_attn.forward(ad::layer_norm_lastdim(h), same_view, positions));
    return ad::add(h, mlp.forward(ad::layer_norm_lastdim(h)));
}

ParallelBlock::ParallelBlock(ParamStore& store, const std::string& prefix, int d, int heads,
                             Rng& rng)
    : view_attn(store, prefix + ".view_attn", d, heads, rng),
      time_attn(store, prefix + ".time_attn", d, heads, rng),
      view_mlp(store, prefix + ".view_mlp", d, 4 * d, rng),
      time_mlp(store, prefix + ".time_mlp", d, 4 * d, rng),
      sync(store, prefix + ".sync", 2 * d, d, rng, /*zero_init=*/true) {}

ad::Tensor ParallelBlock::forward(const ad::Tensor& x, const BlockSparseLayout& same_time,
                                  const BlockSparseLayout& same_view,
                                  const std::vector<grid::TokenPos>& positions) const {
    ad::Tensor bv = ad::add(x, view_attn.forward(ad::layer_norm_lastdim(x), same_time, positions));
    bv = ad::add(bv, view_mlp.forward(ad::layer_norm_lastdim(bv)));
    ad::Tensor bt = ad::add(x, time_attn.forward(ad::layer_norm_lastdim(x), same_view, positions));
    bt = ad::add(bt, time_mlp.forward(ad::layer_norm_lastdim(bt)));
    return ad::add(x, sync.forward(ad::concat({bv, bt}, 1)));
}

int64_t attention_flops_dense(const grid::GridShape& g) {
    const int64_t n = g.tokens();
    return 4 * n * n * g.d;
}

int64_t attention_flops_sparse(const grid::GridShape& g) {
    const int64_t block = g.frame_tokens();
    const int64_t pairs =
        static_cast<int64_t>(g.V) * g.T * (g.V + g.T - 1); // admissible frame pairs
    return 4 * pairs * block * block * g.d;
}

BenchResult bench_attention(int V, int T, int H, int W, int d, int heads, int iters) {
    grid::GridShape g(V, T, H, W, d, std::max(T, 1));
    ad::NoGradGuard ng;
    Rng rng(1234);
    const int n = static_cast<int>(g.tokens());
    ad::Tensor q = ad::Tensor::randn({n, d}, rng);
    ad::Tensor k = ad::Tensor::randn({n, d}, rng);
    ad::Tensor v = ad::Tensor::randn({n, d}, rng);

    BlockSparseLayout sparse = build_block_layout(g);
    std::vector<std::pair<int, int>> all_pairs;
    for (int a = 0; a < sparse.frames; ++a)
        for (int b = 0; b < sparse.frames; ++b) all_pairs.emplace_back(a, b);
    BlockSparseLayout full = make_layout(sparse.frames, sparse.block, std::move(all_pairs));

    auto time_layout = [&](const BlockSparseLayout& layout) {
        fused_attention_sparse(q, k, v, heads, layout); // warm up
        StopWatch sw;
        for (int it = 0; it < iters; ++it) fused_attention_sparse(q, k, v, heads, layout);
        return sw.seconds() * 1000.0 / iters;
    };

    BenchResult r{V, T, H, W, d, attention_flops_sparse(g), attention_flops_dense(g), 0.0, 0.0};
    r.ms_sparse = time_layout(sparse);
    r.ms_dense = time_layout(full);
    return r;
}

} // namespace t4dg::attn
