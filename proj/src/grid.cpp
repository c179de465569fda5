// SPDX-License-Identifier: Apache-2.0
#include "t4dg/grid.hpp"

#include <cmath>

namespace t4dg::grid {

GridShape::GridShape(int v, int t, int h, int w, int d_, int t_max)
    : V(v), T(t), H(h), W(w), d(d_), T_max(t_max) {
    if (V < 1 || T < 1 || H < 1 || W < 1) throw ConfigError("grid extents must be positive");
    if (d < 2 || d % 2 != 0) throw ConfigError("grid channel count must be even and >= 2");
    if (T_max < T) throw ConfigError("T_max must be at least T");
}

int64_t flatten_index(const GridShape& g, int v, int t, int x, int y) {
    if (v < 0 || v >= g.V || t < 0 || t >= g.T || x < 0 || x >= g.H || y < 0 || y >= g.W)
        throw IndexError("flatten_index: coordinate out of range");
    return ((static_cast<int64_t>(v) * g.T + t) * g.H + x) * g.W + y;
}

int collapse_position(int v, int t, int t_max) {
    if (t_max < 1) throw ConfigError("collapse_position: t_max must be positive");
    if (v < 0 || t < 0) throw IndexError("collapse_position: negative coordinate");
    if (t >= t_max) throw IndexError("collapse_position: t exceeds t_max");
    return v * t_max + t;
}

int collapse_position_sum(int v, int t) {
    if (v < 0 || t < 0) throw IndexError("collapse_position_sum: negative coordinate");
    return v + t;
}

std::vector<TokenPos> token_positions(const GridShape& g, bool sum_collapse) {
    std::vector<TokenPos> out;
    out.reserve(static_cast<size_t>(g.tokens()));
    for (int v = 0; v < g.V; ++v)
        for (int t = 0; t < g.T; ++t) {
            const int p = sum_collapse ? collapse_position_sum(v, t)
                                       : collapse_position(v, t, g.T_max);
            for (int x = 0; x < g.H; ++x)
                for (int y = 0; y < g.W; ++y) out.push_back({p, x, y});
        }
    return out;
}

namespace {

// Rotation angles for one channel vector of width d at a given position.
// Pairs are contiguous: group c covers channels [c*gw, (c+1)*gw) of the
// virtual zero-padded axis; pairs entirely past d are dropped. d even and gw
// even imply no pair straddles the boundary.
struct RopePlan {
    int d = 0;
    int gw = 0; // padded group width (channels)
    std::vector<float> inv_freq; // per pair within a group

    explicit RopePlan(int d_) : d(d_) {
        if (d < 2 || d % 2 != 0) throw ShapeError("rope: channel count must be even");
        const int padded = ((d + 5) / 6) * 6;
        gw = padded / 3;
        const int pairs = gw / 2;
        inv_freq.resize(static_cast<size_t>(pairs));
        for (int i = 0; i < pairs; ++i)
            inv_freq[static_cast<size_t>(i)] = static_cast<float>(
                std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(gw)));
    }

    // dir = +1 rotates forward, -1 applies the inverse rotation.
    void apply(const float* in, float* out, const TokenPos& pos, float dir) const {
        const int comps[3] = {pos.p, pos.x, pos.y};
        for (int i = 0; i < d; ++i) out[i] = in[i];
        for (int c = 0; c < 3; ++c) {
            const float m = static_cast<float>(comps[c]);
            for (int i = 0; i * 2 + c * gw < d && i * 2 < gw; ++i) {
                const int ch = c * gw + i * 2;
                if (ch + 1 >= d) break;
                const float phi = dir * m * inv_freq[static_cast<size_t>(i)];
                const float cs = std::cos(phi), sn = std::sin(phi);
                const float a = in[ch], b = in[ch + 1];
                out[ch] = a * cs - b * sn;
                out[ch + 1] = a * sn + b * cs;
            }
        }
    }
};

ad::Tensor rope_apply(const ad::Tensor& x, std::vector<TokenPos> positions, int heads) {
    if (x.rank() != 2) throw ShapeError("rope: rank-2 input required");
    const int n = x.dim(0);
    const int width = x.dim(1);
    if (heads < 1 || width % heads != 0) throw ShapeError("rope: head count must divide width");
    if (static_cast<int>(positions.size()) != n)
        throw ShapeError("rope: one position per row required");
    const int hd = width / heads;
    RopePlan plan(hd);
    auto node = ad::detail::make_node(x.shape(), true, {x.node});
    const float* px = x.data().data();
    float* out = node->data.data();
    for (int r = 0; r < n; ++r)
        for (int h = 0; h < heads; ++h)
            plan.apply(px + static_cast<int64_t>(r) * width + h * hd,
                       out + static_cast<int64_t>(r) * width + h * hd, positions[static_cast<size_t>(r)],
                       1.0f);
    if (node->requires_grad) {
        node->backward_fn = [positions = std::move(positions), plan, n, width, heads,
                             hd](ad::Node& self) {
            ad::Node& nx = *self.parents[0];
            if (!nx.requires_grad) return;
            if (nx.grad.empty()) nx.grad.assign(static_cast<size_t>(nx.numel()), 0.0f);
            const float* g = self.grad.data();
            std::vector<float> tmp(static_cast<size_t>(hd));
            for (int r = 0; r < n; ++r)
                for (int h = 0; h < heads; ++h) {
                    // Rotation is orthogonal: the adjoint is the inverse spin.
                    plan.apply(g + static_cast<int64_t>(r) * width + h * hd, tmp.data(),
                               positions[static_cast<size_t>(r)], -1.0f);
                    float* dst = nx.grad.data() + static_cast<int64_t>(r) * width + h * hd;
                    for (int i = 0; i < hd; ++i) dst[i] += tmp[i];
                }
        };
    }
    return ad::Tensor(node);
}

} // namespace

ad::Tensor rope_rotate(const ad::Tensor& x, const TokenPos& pos) {
    if (x.rank() < 1) throw ShapeError("rope_rotate: rank >= 1 required");
    const int d = x.dim(x.rank() - 1);
    const int64_t rows = x.numel() / d;
    ad::Tensor flat = ad::reshape(x, {static_cast<int>(rows), d});
    std::vector<TokenPos> positions(static_cast<size_t>(rows), pos);
    return ad::reshape(rope_apply(flat, std::move(positions), 1), x.shape());
}

ad::Tensor rope_rotate_rows(const ad::Tensor& x, const std::vector<TokenPos>& positions) {
    return rope_apply(x, positions, 1);
}

ad::Tensor rope_rotate_heads(const ad::Tensor& x, const std::vector<TokenPos>& positions,
                             int heads) {
    return rope_apply(x, positions, heads);
}

PatchEmbed::PatchEmbed(ParamStore& store, const std::string& prefix, int patch_, int factor_,
                       int d_, Rng& rng)
    : patch(patch_), factor(factor_), d(d_) {
    const float std_w = 1.0f / std::sqrt(static_cast<float>(in_dim()));
    weight = store.create_randn(prefix + ".weight", {in_dim(), d}, rng, std_w);
    bias = store.create_zeros(prefix + ".bias", {d});
}

PatchDecode::PatchDecode(ParamStore& store, const std::string& prefix, int patch_, int factor_,
                         int d_, Rng& rng)
    : patch(patch_), factor(factor_), d(d_) {
    const float std_w = 1.0f / std::sqrt(static_cast<float>(d));
    weight = store.create_randn(prefix + ".weight", {d, out_dim()}, rng, std_w);
    bias = store.create_zeros(prefix + ".bias", {out_dim()});
}

namespace {

void check_frames(const ad::Tensor& frames, int patch, int factor) {
    if (frames.rank() != 5 || frames.dim(4) != 3)
        throw ShapeError("compress_temporal: frames must be [V, T, H, W, 3]");
    if (frames.dim(1) % factor != 0)
        throw ShapeError("compress_temporal: frame count not divisible by the factor");
    if (frames.dim(2) % patch != 0 || frames.dim(3) % patch != 0)
        throw ShapeError("compress_temporal: image extents not divisible by the patch size");
}

// Pixel-row index (into frames flattened as [V*T_px*H_px*W_px, 3]) for each
// patch element, in token order.
std::vector<int> patch_gather_indices(const GridShape& g, int patch, int factor) {
    const int t_px = g.T * factor, h_px = g.H * patch, w_px = g.W * patch;
    std::vector<int> idx;
    idx.reserve(static_cast<size_t>(g.tokens()) * factor * patch * patch);
    for (int v = 0; v < g.V; ++v)
        for (int t = 0; t < g.T; ++t)
            for (int x = 0; x < g.H; ++x)
                for (int y = 0; y < g.W; ++y)
                    for (int dt = 0; dt < factor; ++dt)
                        for (int py = 0; py < patch; ++py)
                            for (int px = 0; px < patch; ++px) {
                                const int tt = t * factor + dt;
                                const int xx = x * patch + py;
                                const int yy = y * patch + px;
                                idx.push_back(
                                    ((v * t_px + tt) * h_px + xx) * w_px + yy);
                            }
    return idx;
}

} // namespace

TokenGrid compress_temporal(const ad::Tensor& frames, const PatchEmbed& embed, int t_max) {
    check_frames(frames, embed.patch, embed.factor);
    const int V = frames.dim(0);
    const int T = frames.dim(1) / embed.factor;
    const int H = frames.dim(2) / embed.patch;
    const int W = frames.dim(3) / embed.patch;
    GridShape g(V, T, H, W, embed.d, t_max);
    const int64_t n_tokens = g.tokens();
    const int64_t n_pix = frames.numel() / 3;
    ad::Tensor flat = ad::reshape(frames, {static_cast<int>(n_pix), 3});
    ad::Tensor gathered = ad::gather_rows(flat, patch_gather_indices(g, embed.patch, embed.factor));
    ad::Tensor patches = ad::reshape(gathered, {static_cast<int>(n_tokens), embed.in_dim()});
    ad::Tensor tokens = ad::add(ad::matmul(patches, embed.weight), embed.bias);
    return {g, tokens};
}

ad::Tensor decompress_temporal(const TokenGrid& tokens, const PatchDecode& decode) {
    const GridShape& g = tokens.shape;
    if (tokens.tokens.rank() != 2 || tokens.tokens.dim(1) != decode.d)
        throw ShapeError("decompress_temporal: token width mismatch");
    if (tokens.tokens.dim(0) != g.tokens())
        throw ShapeError("decompress_temporal: token count mismatch");
    ad::Tensor patches = ad::add(ad::matmul(tokens.tokens, decode.weight), decode.bias);
    const int64_t n_pix = g.tokens() * decode.factor * decode.patch * decode.patch;
    ad::Tensor rows = ad::reshape(patches, {static_cast<int>(n_pix), 3});
    // Invert the gather: pixel row i comes from patch-element row inv[i].
    std::vector<int> fwd = patch_gather_indices(g, decode.patch, decode.factor);
    std::vector<int> inv(fwd.size());
    for (size_t i = 0; i < fwd.size(); ++i) inv[static_cast<size_t>(fwd[i])] = static_cast<int>(i);
    ad::Tensor pixels = ad::gather_rows(rows, inv);
    return ad::reshape(pixels, {g.V, g.T * decode.factor, g.H * decode.patch, g.W * decode.patch, 3});
}

} // namespace t4dg::grid
