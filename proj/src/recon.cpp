// SPDX-License-Identifier: Apache-2.0
#include "t4dg/recon.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace t4dg::recon {

namespace {

float softplus_scalar(float x) { return x > 20.0f ? x : std::log1p(std::exp(x)); }

std::array<float, 4> quat_conj(const std::array<float, 4>& q) {
    return {q[0], -q[1], -q[2], -q[3]};
}

std::array<float, 4> quat_mul(const std::array<float, 4>& a, const std::array<float, 4>& b) {
    return {a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
            a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
            a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
            a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0]};
}

Eigen::Vector3f quat_rotate(const std::array<float, 4>& q, const Eigen::Vector3f& v) {
    return quat_to_matrix(q[0], q[1], q[2], q[3]) * v;
}

// Pixel row index for each flat (patch, in-patch offset) entry, so a
// per-patch head output reshaped to [P*p*p, c] can be gathered into
// pixel-major order.
std::vector<int> unfold_rows(int height, int width, int patch) {
    const int gw = width / patch;
    std::vector<int> rows(static_cast<size_t>(height) * width);
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
            const int patch_idx = (y / patch) * gw + x / patch;
            const int offset = (y % patch) * patch + x % patch;
            rows[static_cast<size_t>(y) * width + x] = patch_idx * patch * patch + offset;
        }
    return rows;
}

// Bilinear sample on pixel centers with edge clamping (the same convention
// as the homography warp).
std::array<float, 3> sample_bilinear(const Image& img, float sx, float sy) {
    const int w = img.width, h = img.height;
    const float gx = std::clamp(sx - 0.5f, 0.0f, static_cast<float>(w - 1));
    const float gy = std::clamp(sy - 0.5f, 0.0f, static_cast<float>(h - 1));
    const int x0 = static_cast<int>(gx), y0 = static_cast<int>(gy);
    const int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
    const float fx = gx - static_cast<float>(x0), fy = gy - static_cast<float>(y0);
    std::array<float, 3> out{};
    for (int c = 0; c < 3; ++c)
        out[static_cast<size_t>(c)] = (1 - fx) * (1 - fy) * img.at(y0, x0, c) +
                                      fx * (1 - fy) * img.at(y0, x1, c) +
                                      (1 - fx) * fy * img.at(y1, x0, c) +
                                      fx * fy * img.at(y1, x1, c);
    return out;
}

} // namespace

void ReconConfig::validate() const {
    if (patch < 1) throw ConfigError("recon: patch must be positive");
    if (d < 2) throw ConfigError("recon: d must be at least 2");
    if (blocks < 1) throw ConfigError("recon: blocks must be at least 1");
    if (heads < 1 || d % heads != 0) throw ConfigError("recon: heads must divide d");
    if (!(lambda_perceptual >= 0.0f)) throw ConfigError("recon: lambda must be non-negative");
    if (source_views < 1) throw ConfigError("recon: source_views must be positive");
    if (timesteps < 1) throw ConfigError("recon: timesteps must be positive");
}

ReconModel::ReconModel(const ReconConfig& cfg, uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    const int d = cfg_.d;
    const int pp = cfg_.patch * cfg_.patch;
    patch_embed_ = attn::Linear(store_, "patch_embed", 3 * pp, d, rng);
    // All views share the same initial token value, so the backbone is
    // permutation-equivariant at init; the copies diverge during training
    // and carry the view identity afterwards.
    const std::vector<float> shared = rng.normal_vec(static_cast<size_t>(d), 0.0f,
                                                     1.0f / std::sqrt(static_cast<float>(d)));
    camera_tokens_.reserve(static_cast<size_t>(cfg_.source_views));
    for (int v = 0; v < cfg_.source_views; ++v)
        camera_tokens_.push_back(
            store_.create("camera_token" + std::to_string(v), {1, d}, shared));
    units_.resize(static_cast<size_t>(cfg_.blocks));
    for (int u = 0; u < cfg_.blocks; ++u) {
        const std::string prefix = "unit" + std::to_string(u);
        units_[static_cast<size_t>(u)].frame =
            attn::AttnCore(store_, prefix + ".frame", d, cfg_.heads, rng);
        units_[static_cast<size_t>(u)].global =
            attn::AttnCore(store_, prefix + ".global", d, cfg_.heads, rng);
        units_[static_cast<size_t>(u)].temporal =
            attn::AttnCore(store_, prefix + ".temporal", d, cfg_.heads, rng, /*zero_out=*/true);
    }
    camera_fc1_ = attn::Linear(store_, "camera_head.fc1", d, d, rng);
    camera_fc2_ = attn::Linear(store_, "camera_head.fc2", d, 8, rng);
    depth_fc1_ = attn::Linear(store_, "depth_head.fc1", d, d, rng);
    depth_fc2_ = attn::Linear(store_, "depth_head.fc2", d, pp, rng);
    gauss_fc1_ = attn::Linear(store_, "gauss_head.fc1", d, d, rng);
    // Zero output projection: the initial prediction is the bare
    // unprojected-depth Gaussian with pixel colors.
    gauss_fc2_ = attn::Linear(store_, "gauss_head.fc2", d, pp * 14, rng, /*zero_init=*/true);
}

BackboneState ReconModel::backbone_forward(
    const std::vector<std::vector<Image>>& frames) const {
    const int V = static_cast<int>(frames.size());
    if (V < 1) throw ConfigError("backbone: no views");
    if (V > cfg_.source_views)
        throw ConfigError("backbone: more views than camera tokens");
    const int T = static_cast<int>(frames[0].size());
    if (T < 1) throw ConfigError("backbone: no timesteps");
    for (const auto& view : frames)
        if (static_cast<int>(view.size()) != T)
            throw ShapeError("backbone: ragged timestep counts");
    const int H = frames[0][0].height, W = frames[0][0].width;
    for (const auto& view : frames)
        for (const Image& img : view)
            if (img.height != H || img.width != W)
                throw ShapeError("backbone: frame extent mismatch");
    const int p = cfg_.patch;
    if (H % p != 0 || W % p != 0)
        throw ConfigError("backbone: extents must be divisible by the patch size");
    const int gh = H / p, gw = W / p;
    const int P = gh * gw;

    // Patch pixels, (dy, dx, channel) within each patch, frames in (v, t)
    // order and patches row-major.
    std::vector<float> px(static_cast<size_t>(V) * T * P * 3 * p * p);
    size_t at = 0;
    for (int v = 0; v < V; ++v)
        for (int t = 0; t < T; ++t) {
            const Image& img = frames[static_cast<size_t>(v)][static_cast<size_t>(t)];
            for (int gy = 0; gy < gh; ++gy)
                for (int gx = 0; gx < gw; ++gx)
                    for (int dy = 0; dy < p; ++dy)
                        for (int dx = 0; dx < p; ++dx)
                            for (int c = 0; c < 3; ++c)
                                px[at++] = img.at(gy * p + dy, gx * p + dx, c);
        }
    ad::Tensor patch_tokens = patch_embed_.forward(
        ad::Tensor::from_data({V * T * P, 3 * p * p}, std::move(px)));

    // Token assembly: per frame one camera token (gathered from the view's
    // parameter, so every timestep shares and backpropagates into it), then
    // the frame's patches.
    std::vector<ad::Tensor> parts;
    parts.reserve(static_cast<size_t>(V) + 1);
    for (int v = 0; v < V; ++v) parts.push_back(camera_tokens_[static_cast<size_t>(v)]);
    parts.push_back(patch_tokens);
    const ad::Tensor pool = ad::concat(parts, 0);
    std::vector<int> take;
    take.reserve(static_cast<size_t>(V) * T * (P + 1));
    for (int v = 0; v < V; ++v)
        for (int t = 0; t < T; ++t) {
            take.push_back(v);
            for (int i = 0; i < P; ++i) take.push_back(V + (v * T + t) * P + i);
        }
    ad::Tensor x = ad::gather_rows(pool, take);

    // Rotary positions carry the in-frame location only, so they are shared
    // across views and timesteps: the camera token sits at the origin and
    // patch tokens use their patch-grid coordinates.
    std::vector<grid::TokenPos> pos;
    pos.reserve(take.size());
    for (int f = 0; f < V * T; ++f) {
        pos.push_back({0, 0, 0});
        for (int i = 0; i < P; ++i) pos.push_back({1, i / gw, i % gw});
    }

    std::vector<std::pair<int, int>> self_pairs, time_pairs;
    for (int f = 0; f < V * T; ++f) self_pairs.emplace_back(f, f);
    for (int a = 0; a < V * T; ++a)
        for (int b = 0; b < V * T; ++b)
            if (a % T == b % T) time_pairs.emplace_back(a, b);
    const attn::BlockSparseLayout frame_layout =
        attn::make_layout(V * T, P + 1, std::move(self_pairs));
    const attn::BlockSparseLayout global_layout =
        attn::make_layout(V * T, P + 1, std::move(time_pairs));

    // Temporal groups: the same view and token slot across timesteps,
    // realized by permuting rows into (view, slot, time) order and running a
    // block-diagonal layout over T-sized blocks.
    std::vector<int> perm, inv;
    attn::BlockSparseLayout temporal_layout;
    std::vector<grid::TokenPos> pos_t;
    if (T > 1) {
        const int S = P + 1;
        perm.resize(static_cast<size_t>(V) * T * S);
        inv.resize(perm.size());
        for (int v = 0; v < V; ++v)
            for (int s = 0; s < S; ++s)
                for (int t = 0; t < T; ++t) {
                    const int q = (v * S + s) * T + t;
                    const int r = (v * T + t) * S + s;
                    perm[static_cast<size_t>(q)] = r;
                    inv[static_cast<size_t>(r)] = q;
                }
        std::vector<std::pair<int, int>> diag;
        for (int g = 0; g < V * S; ++g) diag.emplace_back(g, g);
        temporal_layout = attn::make_layout(V * S, T, std::move(diag));
        pos_t.reserve(perm.size());
        for (int g = 0; g < V * S; ++g)
            for (int t = 0; t < T; ++t) pos_t.push_back({t, 0, 0});
    }

    for (const Unit& unit : units_) {
        x = ad::add(x, unit.frame.forward(ad::layer_norm_lastdim(x), frame_layout, pos));
        x = ad::add(x, unit.global.forward(ad::layer_norm_lastdim(x), global_layout, pos));
        if (T > 1) {
            // Skipped entirely at T == 1: a single-timestep group is a
            // self-only attention, and bypassing it keeps the zero-output
            // init untouched through single-timestep training.
            ad::Tensor xg = ad::gather_rows(x, perm);
            ad::Tensor y =
                unit.temporal.forward(ad::layer_norm_lastdim(xg), temporal_layout, pos_t);
            x = ad::add(x, ad::gather_rows(y, inv));
        }
    }

    BackboneState state;
    state.tokens = x;
    state.views = V;
    state.timesteps = T;
    state.patches = P;
    state.height = H;
    state.width = W;
    return state;
}

BackboneState replace_camera_tokens(const BackboneState& state) {
    const int S = state.patches + 1;
    std::vector<int> rows(static_cast<size_t>(state.views) * state.timesteps * S);
    for (int v = 0; v < state.views; ++v)
        for (int t = 0; t < state.timesteps; ++t)
            for (int s = 0; s < S; ++s) {
                const size_t r = static_cast<size_t>((v * state.timesteps + t) * S + s);
                rows[r] = s == 0 ? static_cast<int>(state.camera_row(v, 0))
                                 : static_cast<int>(r);
            }
    BackboneState out = state;
    out.tokens = ad::gather_rows(state.tokens, rows);
    return out;
}

ad::Tensor ReconModel::camera_raw(const BackboneState& state) const {
    std::vector<int> rows;
    rows.reserve(static_cast<size_t>(state.views) * state.timesteps);
    for (int v = 0; v < state.views; ++v)
        for (int t = 0; t < state.timesteps; ++t)
            rows.push_back(static_cast<int>(state.camera_row(v, t)));
    ad::Tensor h = ad::layer_norm_lastdim(ad::gather_rows(state.tokens, rows));
    return camera_fc2_.forward(ad::gelu(camera_fc1_.forward(h)));
}

ad::Tensor ReconModel::head_tokens(const BackboneState& state, int v, int t) const {
    if (v < 0 || v >= state.views || t < 0 || t >= state.timesteps)
        throw IndexError("recon head: frame index out of range");
    const int lo = static_cast<int>(state.image_row(v, t));
    return ad::layer_norm_lastdim(ad::slice(state.tokens, 0, lo, lo + state.patches));
}

ad::Tensor ReconModel::depth_map(const BackboneState& state, int v, int t) const {
    const int pp = cfg_.patch * cfg_.patch;
    ad::Tensor raw = depth_fc2_.forward(ad::gelu(depth_fc1_.forward(head_tokens(state, v, t))));
    raw = ad::gather_rows(ad::reshape(raw, {state.patches * pp, 1}),
                          unfold_rows(state.height, state.width, cfg_.patch));
    return ad::softplus(ad::reshape(raw, {state.height * state.width}));
}

ad::Tensor ReconModel::gaussian_raw(const BackboneState& state, int v, int t) const {
    const int pp = cfg_.patch * cfg_.patch;
    ad::Tensor raw = gauss_fc2_.forward(ad::gelu(gauss_fc1_.forward(head_tokens(state, v, t))));
    raw = ad::gather_rows(ad::reshape(raw, {state.patches * pp, 14}),
                          unfold_rows(state.height, state.width, cfg_.patch));
    return raw;
}

Camera camera_from_raw(const std::array<float, 8>& raw, int width, int height) {
    Camera cam;
    const float n2 = raw[0] * raw[0] + raw[1] * raw[1] + raw[2] * raw[2] + raw[3] * raw[3];
    if (std::sqrt(n2) < 1e-12f)
        std::fprintf(stderr, "camera head: zero quaternion replaced by identity\n");
    cam.rotation = normalize_quat({raw[0], raw[1], raw[2], raw[3]});
    cam.translation = {raw[4], raw[5], raw[6]};
    cam.focal = softplus_scalar(raw[7]) * static_cast<float>(width);
    cam.cx = static_cast<float>(width) / 2.0f;
    cam.cy = static_cast<float>(height) / 2.0f;
    cam.width = width;
    cam.height = height;
    return cam;
}

std::vector<Camera> cameras_from_raw(const ad::Tensor& raw, int views, int timesteps, int width,
                                     int height) {
    if (raw.rank() != 2 || raw.dim(1) != 8 || raw.dim(0) != views * timesteps)
        throw ShapeError("cameras_from_raw: expected [views*timesteps, 8]");
    std::vector<Camera> cams;
    cams.reserve(static_cast<size_t>(views));
    for (int v = 0; v < views; ++v) {
        const float* r = raw.data().data() + static_cast<size_t>(v) * timesteps * 8;
        cams.push_back(camera_from_raw({r[0], r[1], r[2], r[3], r[4], r[5], r[6], r[7]},
                                       width, height));
    }
    return cams;
}

GaussianTensors assemble_gaussians(const ReconModel& model, const BackboneState& state, int t,
                                   const std::vector<Camera>& cameras,
                                   const std::vector<std::vector<Image>>& frames) {
    const int V = state.views;
    if (static_cast<int>(cameras.size()) < V)
        throw ShapeError("assemble: camera per view required");
    const int H = state.height, W = state.width;
    const int64_t hw = static_cast<int64_t>(H) * W;

    std::vector<ad::Tensor> depths, raws, bases;
    depths.reserve(static_cast<size_t>(V));
    for (int v = 0; v < V; ++v) {
        const Camera& cam = cameras[static_cast<size_t>(v)];
        depths.push_back(model.depth_map(state, v, t));
        raws.push_back(model.gaussian_raw(state, v, t));
        // Unprojection is linear in depth: world = depth * a + b with a the
        // rotated pixel ray and b the camera center.
        const Eigen::Matrix3f rt = cam.rotation_matrix().transpose();
        const Eigen::Vector3f b = cam.position();
        std::vector<float> rays(static_cast<size_t>(hw) * 3);
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const Eigen::Vector3f a =
                    rt * Eigen::Vector3f((static_cast<float>(x) + 0.5f - cam.cx) / cam.focal,
                                         (static_cast<float>(y) + 0.5f - cam.cy) / cam.focal,
                                         1.0f);
                for (int c = 0; c < 3; ++c)
                    rays[(static_cast<size_t>(y) * W + x) * 3 + static_cast<size_t>(c)] = a[c];
            }
        ad::Tensor base = ad::scale_rows(
            ad::Tensor::from_data({static_cast<int>(hw), 3}, std::move(rays)), depths.back());
        bases.push_back(
            ad::add(base, ad::Tensor::from_data({3}, {b.x(), b.y(), b.z()})));
    }

    // Refinement bound: 5% of the mean unrefined-centroid distance to camera
    // 0, held constant with respect to the gradient. Per timestep, so
    // multi-timestep outputs stay independent across time.
    const Eigen::Vector3f origin = cameras[0].position();
    double dist = 0.0;
    for (const ad::Tensor& base : bases) {
        const float* c = base.data().data();
        for (int64_t i = 0; i < hw; ++i) {
            const Eigen::Vector3f p(c[i * 3], c[i * 3 + 1], c[i * 3 + 2]);
            dist += static_cast<double>((p - origin).norm());
        }
    }
    const float scene_scale =
        std::max(static_cast<float>(dist / static_cast<double>(hw * V)), 1e-6f);

    std::vector<ad::Tensor> centers, scales, rots, opacs, colors;
    const ad::Tensor identity_quat = ad::Tensor::from_data({4}, {1.0f, 0.0f, 0.0f, 0.0f});
    for (int v = 0; v < V; ++v) {
        const ad::Tensor& raw = raws[static_cast<size_t>(v)];
        const Camera& cam = cameras[static_cast<size_t>(v)];
        centers.push_back(ad::add(bases[static_cast<size_t>(v)],
                                  ad::scale(ad::tanh(ad::slice(raw, 1, 0, 3)),
                                            0.05f * scene_scale)));
        opacs.push_back(ad::reshape(ad::sigmoid(ad::slice(raw, 1, 3, 4)),
                                    {static_cast<int>(hw)}));
        // Pixel footprint at the predicted depth; raw zeros keep it exactly.
        ad::Tensor footprint =
            ad::scale(depths[static_cast<size_t>(v)], 1.0f / cam.focal);
        scales.push_back(ad::scale_rows(ad::exp(ad::clamp(ad::slice(raw, 1, 4, 7),
                                                          -8.0f, 2.0f)),
                                        footprint));
        // Identity-anchored quaternion: zero raw channels mean no rotation.
        rots.push_back(ad::add(ad::slice(raw, 1, 7, 11), identity_quat));
        const Image& img = frames[static_cast<size_t>(v)][static_cast<size_t>(t)];
        std::vector<float> pix(img.rgb);
        ad::Tensor base_color = ad::Tensor::from_data({static_cast<int>(hw), 3}, std::move(pix));
        colors.push_back(ad::clamp(
            ad::add(base_color, ad::scale(ad::tanh(ad::slice(raw, 1, 11, 14)), 0.5f)),
            0.0f, 1.0f));
    }
    GaussianTensors out;
    out.centers = ad::concat(centers, 0);
    out.scales = ad::concat(scales, 0);
    out.rotations = ad::concat(rots, 0);
    out.opacities = ad::concat(opacs, 0);
    out.colors = ad::concat(colors, 0);
    return out;
}

GaussianSet to_gaussian_set(const GaussianTensors& g) {
    const int64_t k = g.centers.dim(0);
    GaussianSet set(static_cast<size_t>(k));
    const float* c = g.centers.data().data();
    const float* s = g.scales.data().data();
    const float* r = g.rotations.data().data();
    const float* o = g.opacities.data().data();
    const float* col = g.colors.data().data();
    for (int64_t i = 0; i < k; ++i) {
        splat::Gaussian& gs = set[static_cast<size_t>(i)];
        gs.center = {c[i * 3], c[i * 3 + 1], c[i * 3 + 2]};
        // Positivity guard against float underflow of softplus * exp at
        // extreme weights; the math is strictly positive.
        for (int a = 0; a < 3; ++a)
            gs.scale[static_cast<size_t>(a)] = std::max(s[i * 3 + a], 1e-20f);
        gs.rotation = normalize_quat({r[i * 4], r[i * 4 + 1], r[i * 4 + 2], r[i * 4 + 3]});
        // Sigmoid saturates to exactly 0 or 1 in float for |x| > ~17; keep
        // the open-interval invariant.
        gs.opacity = std::clamp(o[i], 1e-7f, 1.0f - 1e-7f);
        gs.color = {col[i * 3], col[i * 3 + 1], col[i * 3 + 2]};
    }
    return set;
}

Reconstruction canonicalize(const Reconstruction& r) {
    if (r.cameras.empty()) throw ConfigError("canonicalize: no cameras");
    Reconstruction out = r;
    const std::array<float, 4> q0 = r.cameras[0].rotation;
    const Eigen::Vector3f t0(r.cameras[0].translation[0], r.cameras[0].translation[1],
                             r.cameras[0].translation[2]);
    for (size_t v = 0; v < out.cameras.size(); ++v) {
        Camera& cam = out.cameras[v];
        const std::array<float, 4> q = quat_mul(r.cameras[v].rotation, quat_conj(q0));
        const Eigen::Vector3f t =
            Eigen::Vector3f(r.cameras[v].translation[0], r.cameras[v].translation[1],
                            r.cameras[v].translation[2]) -
            quat_rotate(q, t0);
        cam.rotation = q;
        cam.translation = {t.x(), t.y(), t.z()};
    }
    const Eigen::Matrix3f r0 = quat_to_matrix(q0[0], q0[1], q0[2], q0[3]);
    double dist = 0.0;
    int64_t count = 0;
    for (auto& set : out.sets)
        for (auto& g : set) {
            const Eigen::Vector3f c =
                r0 * Eigen::Vector3f(g.center[0], g.center[1], g.center[2]) + t0;
            g.center = {c.x(), c.y(), c.z()};
            dist += static_cast<double>(c.norm());
            ++count;
        }
    float s = count > 0 ? static_cast<float>(dist / static_cast<double>(count)) : 1.0f;
    if (!(s > 1e-12f)) s = 1.0f;
    // Snap near-unit scales so a canonical input maps to itself bit-exactly.
    if (std::fabs(s - 1.0f) <= 1e-5f) s = 1.0f;
    const float inv = 1.0f / s;
    for (auto& cam : out.cameras)
        for (auto& v : cam.translation) v *= inv;
    for (auto& set : out.sets)
        for (auto& g : set) {
            for (auto& v : g.center) v *= inv;
            for (auto& v : g.scale) v *= inv;
        }
    // Camera 0 defines the canonical frame by construction.
    out.cameras[0].rotation = {1.0f, 0.0f, 0.0f, 0.0f};
    out.cameras[0].translation = {0.0f, 0.0f, 0.0f};
    return out;
}

Camera relative_to_first(const std::vector<Camera>& cams, int idx) {
    if (cams.empty() || idx < 0 || idx >= static_cast<int>(cams.size()))
        throw IndexError("relative_to_first: camera index out of range");
    Camera out = cams[static_cast<size_t>(idx)];
    if (idx == 0) {
        out.rotation = {1.0f, 0.0f, 0.0f, 0.0f};
        out.translation = {0.0f, 0.0f, 0.0f};
        return out;
    }
    const std::array<float, 4> q =
        normalize_quat(quat_mul(cams[static_cast<size_t>(idx)].rotation,
                                quat_conj(cams[0].rotation)));
    const Eigen::Vector3f t0(cams[0].translation[0], cams[0].translation[1],
                             cams[0].translation[2]);
    const Eigen::Vector3f t =
        Eigen::Vector3f(cams[static_cast<size_t>(idx)].translation[0],
                        cams[static_cast<size_t>(idx)].translation[1],
                        cams[static_cast<size_t>(idx)].translation[2]) -
        quat_rotate(q, t0);
    out.rotation = q;
    out.translation = {t.x(), t.y(), t.z()};
    return out;
}

Reconstruction reconstruct(const ReconModel& model,
                           const std::vector<std::vector<Image>>& frames) {
    ad::NoGradGuard guard;
    BackboneState state = replace_camera_tokens(model.backbone_forward(frames));
    const ad::Tensor raw = model.camera_raw(state);
    Reconstruction out;
    out.cameras = cameras_from_raw(raw, state.views, state.timesteps, state.width, state.height);
    out.sets.reserve(static_cast<size_t>(state.timesteps));
    for (int t = 0; t < state.timesteps; ++t)
        out.sets.push_back(to_gaussian_set(assemble_gaussians(model, state, t, out.cameras,
                                                              frames)));
    return canonicalize(out);
}

ad::Tensor recon_loss(const ad::Tensor& rendered, const ad::Tensor& target, float lambda) {
    if (rendered.shape() != target.shape() || rendered.rank() != 3)
        throw ShapeError("recon_loss: [H, W, 3] tensors with equal extents required");
    ad::Tensor loss = ad::mean_all(ad::square(ad::sub(rendered, target)));
    const int H = rendered.dim(0), W = rendered.dim(1);
    int64_t n = 0;
    std::vector<ad::Tensor> terms;
    if (W > 1) {
        ad::Tensor ga = ad::sub(ad::slice(rendered, 1, 1, W), ad::slice(rendered, 1, 0, W - 1));
        ad::Tensor gb = ad::sub(ad::slice(target, 1, 1, W), ad::slice(target, 1, 0, W - 1));
        terms.push_back(ad::sum_all(ad::abs(ad::sub(ga, gb))));
        n += static_cast<int64_t>(H) * (W - 1) * 3;
    }
    if (H > 1) {
        ad::Tensor ga = ad::sub(ad::slice(rendered, 0, 1, H), ad::slice(rendered, 0, 0, H - 1));
        ad::Tensor gb = ad::sub(ad::slice(target, 0, 1, H), ad::slice(target, 0, 0, H - 1));
        terms.push_back(ad::sum_all(ad::abs(ad::sub(ga, gb))));
        n += static_cast<int64_t>(H - 1) * W * 3;
    }
    if (!terms.empty() && lambda > 0.0f) {
        ad::Tensor g = terms.size() == 2 ? ad::add(terms[0], terms[1]) : terms[0];
        loss = ad::add(loss, ad::scale(g, lambda / static_cast<float>(n)));
    }
    return loss;
}

float recon_scheduled_lr(const ReconTrainOptions& opt, int step) {
    if (step < opt.warmup) return warmup_lr(opt.lr, step, opt.warmup);
    if (!opt.cosine_decay) return opt.lr;
    const double span = std::max(1, opt.iters - opt.warmup);
    const double phase = (step - opt.warmup) / span;
    return opt.lr * 0.5f * (1.0f + static_cast<float>(std::cos(M_PI * phase)));
}

namespace {

// Stage-2 trainable set: temporal attention and the Gaussian head.
bool dynamic_trainable(const std::string& name) {
    return name.find(".temporal.") != std::string::npos || name.rfind("gauss_head", 0) == 0;
}

ad::Tensor camera_loss(const ad::Tensor& raw, const std::vector<Camera>& targets,
                       int timesteps, int width) {
    const int rows = raw.dim(0);
    std::vector<float> tq(static_cast<size_t>(rows) * 4), tt(static_cast<size_t>(rows) * 3),
        tf(static_cast<size_t>(rows));
    const float* rd = raw.data().data();
    for (int i = 0; i < rows; ++i) {
        const Camera& cam = targets[static_cast<size_t>(i / timesteps)];
        std::array<float, 4> q = cam.rotation;
        // A quaternion and its negation encode the same rotation; supervise
        // the sign closer to the current prediction.
        const float dot =
            rd[i * 8] * q[0] + rd[i * 8 + 1] * q[1] + rd[i * 8 + 2] * q[2] + rd[i * 8 + 3] * q[3];
        if (dot < 0.0f)
            for (auto& v : q) v = -v;
        for (int a = 0; a < 4; ++a) tq[static_cast<size_t>(i) * 4 + a] = q[a];
        for (int a = 0; a < 3; ++a)
            tt[static_cast<size_t>(i) * 3 + a] = cam.translation[static_cast<size_t>(a)];
        tf[static_cast<size_t>(i)] = cam.focal / static_cast<float>(width);
    }
    ad::Tensor quat = ad::l2_normalize_lastdim(ad::slice(raw, 1, 0, 4));
    ad::Tensor trans = ad::slice(raw, 1, 4, 7);
    ad::Tensor focal = ad::softplus(ad::slice(raw, 1, 7, 8));
    ad::Tensor loss = ad::mean_all(
        ad::square(ad::sub(quat, ad::Tensor::from_data({rows, 4}, std::move(tq)))));
    loss = ad::add(loss, ad::mean_all(ad::square(ad::sub(
                             trans, ad::Tensor::from_data({rows, 3}, std::move(tt))))));
    return ad::add(loss, ad::mean_all(ad::square(ad::sub(
                             focal, ad::Tensor::from_data({rows, 1}, std::move(tf))))));
}

} // namespace

std::vector<float> train_recon(ReconModel& model, const std::vector<scenes::Scene4D>& dataset,
                               ReconStage stage, const ReconTrainOptions& opt) {
    if (dataset.empty()) throw ConfigError("train_recon: empty dataset");
    const ReconConfig& cfg = model.config();
    const int S = cfg.source_views;
    for (const auto& scene : dataset) {
        if (scene.views() <= S)
            throw ConfigError("train_recon: scenes must hold a view beyond the sources");
        if (scene.frames() < 1) throw ConfigError("train_recon: empty scene");
    }
    Adam adam(model.params(), opt.lr);
    Rng rng(opt.seed);
    std::vector<float> curve;
    curve.reserve(static_cast<size_t>(opt.iters));
    const int window = stage == ReconStage::static_stage ? 1 : cfg.timesteps;

    for (int it = 0; it < opt.iters; ++it) {
        const auto& scene =
            dataset[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(dataset.size())))];
        const int frames_total = scene.frames();
        // Timestep selection: one frame for the static stage; for the
        // dynamic stage a consecutive window, or one frame copied across the
        // window (static-as-dynamic replay) when the scene lacks motion or
        // by a 1-in-4 coin.
        std::vector<int> ts(static_cast<size_t>(window));
        if (window == 1) {
            ts[0] = static_cast<int>(rng.uniform_int(frames_total));
        } else if (scene.is_static || frames_total < window || rng.uniform() < 0.25) {
            const int t0 = static_cast<int>(rng.uniform_int(frames_total));
            std::fill(ts.begin(), ts.end(), t0);
        } else {
            const int start = static_cast<int>(rng.uniform_int(frames_total - window + 1));
            for (int i = 0; i < window; ++i) ts[static_cast<size_t>(i)] = start + i;
        }

        std::vector<std::vector<Image>> inputs(static_cast<size_t>(S));
        for (int v = 0; v < S; ++v)
            for (int t : ts)
                inputs[static_cast<size_t>(v)].push_back(
                    scene.images[static_cast<size_t>(v)][static_cast<size_t>(t)]);

        std::vector<Camera> canon(static_cast<size_t>(scene.views()));
        for (int v = 0; v < scene.views(); ++v)
            canon[static_cast<size_t>(v)] = relative_to_first(scene.cameras, v);
        const std::vector<Camera> sources(canon.begin(), canon.begin() + S);

        BackboneState state = replace_camera_tokens(model.backbone_forward(inputs));
        ad::Tensor loss = ad::scale(camera_loss(model.camera_raw(state), sources, window,
                                                state.width),
                                    opt.lambda_camera);

        // Log-depth supervision over every source frame.
        ad::Tensor dterm;
        for (int v = 0; v < S; ++v)
            for (int i = 0; i < window; ++i) {
                const auto& gt =
                    scene.depths[static_cast<size_t>(v)][static_cast<size_t>(ts[i])];
                ad::Tensor gt_log = ad::Tensor::from_data(
                    {static_cast<int>(gt.size())}, [&] {
                        std::vector<float> lg(gt.size());
                        for (size_t j = 0; j < gt.size(); ++j) lg[j] = std::log(gt[j]);
                        return lg;
                    }());
                ad::Tensor diff =
                    ad::sub(ad::log(model.depth_map(state, v, i)), gt_log);
                ad::Tensor term = ad::mean_all(ad::square(diff));
                dterm = dterm.defined() ? ad::add(dterm, term) : term;
            }
        loss = ad::add(loss, ad::scale(dterm, opt.lambda_depth /
                                                  static_cast<float>(S * window)));

        // Render one held-out view at one window position through the
        // ground-truth cameras (the predicted ones converge toward them).
        const int tgt =
            S + static_cast<int>(rng.uniform_int(static_cast<int64_t>(scene.views() - S)));
        const int ri = static_cast<int>(rng.uniform_int(window));
        GaussianTensors g = assemble_gaussians(model, state, ri, sources, inputs);
        splat::RasterResult res = splat::rasterize_tensors(
            g.centers, g.scales, g.rotations, g.opacities, g.colors,
            canon[static_cast<size_t>(tgt)], scene.spec.background, scenes::kFarDepth);
        const Image& tgt_img =
            scene.images[static_cast<size_t>(tgt)][static_cast<size_t>(ts[ri])];
        ad::Tensor target = ad::Tensor::from_data({tgt_img.height, tgt_img.width, 3},
                                                  std::vector<float>(tgt_img.rgb));
        loss = ad::add(loss, recon_loss(res.image, target, cfg.lambda_perceptual));

        const float value = loss.item();
        if (!std::isfinite(value))
            throw ConfigError("train_recon: non-finite loss at iteration " +
                              std::to_string(it));
        curve.push_back(value);
        ad::backward(loss);
        if (stage == ReconStage::dynamic_stage)
            for (auto& item : model.params().items())
                if (!dynamic_trainable(item.name)) item.value.zero_grad();
        adam.set_lr(recon_scheduled_lr(opt, it));
        adam.step();
        ad::clear_tape();
    }
    return curve;
}

Image depth_warp_view(const scenes::Scene4D& scene, int src_view, int tgt_view, int t) {
    const int V = scene.views();
    if (src_view < 0 || src_view >= V || tgt_view < 0 || tgt_view >= V)
        throw IndexError("depth_warp: view out of range");
    if (t < 0 || t >= scene.frames()) throw IndexError("depth_warp: frame out of range");
    const Camera& src = scene.cameras[static_cast<size_t>(src_view)];
    const Camera& tgt = scene.cameras[static_cast<size_t>(tgt_view)];
    const Image& src_img = scene.images[static_cast<size_t>(src_view)][static_cast<size_t>(t)];
    const auto& depth = scene.depths[static_cast<size_t>(tgt_view)][static_cast<size_t>(t)];
    Image out(tgt.height, tgt.width);
    for (int y = 0; y < tgt.height; ++y)
        for (int x = 0; x < tgt.width; ++x) {
            const float z = depth[static_cast<size_t>(y) * tgt.width + x];
            const Eigen::Vector3f world =
                tgt.unproject(static_cast<float>(x) + 0.5f, static_cast<float>(y) + 0.5f, z);
            const auto uvz = src.project_point(world);
            const auto rgb = sample_bilinear(src_img, uvz[0], uvz[1]);
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = rgb[static_cast<size_t>(c)];
        }
    return out;
}

int nearest_source_view(const std::vector<Camera>& cams, int source_count, int tgt_view) {
    if (source_count < 1 || source_count > static_cast<int>(cams.size()) ||
        tgt_view < 0 || tgt_view >= static_cast<int>(cams.size()))
        throw IndexError("nearest_source_view: index out of range");
    const Eigen::Vector3f tp = cams[static_cast<size_t>(tgt_view)].position();
    int best = 0;
    float best_d = std::numeric_limits<float>::infinity();
    for (int v = 0; v < source_count; ++v) {
        const float d = (cams[static_cast<size_t>(v)].position() - tp).norm();
        if (d < best_d) {
            best_d = d;
            best = v;
        }
    }
    return best;
}

void save_ply(const std::string& path, const GaussianSet& set) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("ply: cannot open for writing: " + path);
    out << "ply\nformat binary_little_endian 1.0\nelement vertex " << set.size() << "\n";
    static const char* props[] = {"x",       "y",       "z",     "opacity", "scale_0",
                                  "scale_1", "scale_2", "rot_0", "rot_1",   "rot_2",
                                  "rot_3",   "red",     "green", "blue"};
    for (const char* p : props) out << "property float " << p << "\n";
    out << "end_header\n";
    for (const auto& g : set) {
        const float row[14] = {g.center[0],   g.center[1],   g.center[2],   g.opacity,
                               g.scale[0],    g.scale[1],    g.scale[2],    g.rotation[0],
                               g.rotation[1], g.rotation[2], g.rotation[3], g.color[0],
                               g.color[1],    g.color[2]};
        out.write(reinterpret_cast<const char*>(row), sizeof row);
    }
    if (!out) throw IoError("ply: write failed: " + path);
}

GaussianSet load_ply(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("ply: cannot open: " + path);
    std::string line;
    auto next = [&] {
        if (!std::getline(in, line)) throw IoError("ply: truncated header: " + path);
        return line;
    };
    if (next() != "ply" || next() != "format binary_little_endian 1.0")
        throw IoError("ply: unsupported format: " + path);
    size_t count = 0;
    {
        std::istringstream hdr(next());
        std::string a, b;
        if (!(hdr >> a >> b >> count) || a != "element" || b != "vertex")
            throw IoError("ply: missing vertex element: " + path);
    }
    static const char* props[] = {"x",       "y",       "z",     "opacity", "scale_0",
                                  "scale_1", "scale_2", "rot_0", "rot_1",   "rot_2",
                                  "rot_3",   "red",     "green", "blue"};
    for (const char* p : props)
        if (next() != std::string("property float ") + p)
            throw IoError("ply: unexpected property layout: " + path);
    if (next() != "end_header") throw IoError("ply: missing end_header: " + path);
    GaussianSet set(count);
    for (auto& g : set) {
        float row[14];
        in.read(reinterpret_cast<char*>(row), sizeof row);
        if (!in) throw IoError("ply: truncated payload: " + path);
        g.center = {row[0], row[1], row[2]};
        g.opacity = row[3];
        g.scale = {row[4], row[5], row[6]};
        g.rotation = {row[7], row[8], row[9], row[10]};
        g.color = {row[11], row[12], row[13]};
    }
    return set;
}

void ReconModel::save(const std::string& path) const {
    std::vector<NamedTensor> entries;
    entries.push_back({"config", ad::Tensor::from_data(
                                     {8}, {1.0f, static_cast<float>(cfg_.patch),
                                           static_cast<float>(cfg_.d),
                                           static_cast<float>(cfg_.blocks),
                                           static_cast<float>(cfg_.heads),
                                           cfg_.lambda_perceptual,
                                           static_cast<float>(cfg_.source_views),
                                           static_cast<float>(cfg_.timesteps)})});
    for (const auto& it : store_.items()) entries.push_back(it);
    save_container(path, entries);
}

ReconModel ReconModel::load(const std::string& path) {
    const auto entries = load_container(path);
    const NamedTensor* config = nullptr;
    for (const auto& e : entries)
        if (e.name == "config") config = &e;
    if (!config || config->value.numel() != 8 || config->value.data()[0] != 1.0f)
        throw IoError("not a recon checkpoint: " + path);
    const auto& c = config->value.data();
    ReconConfig cfg;
    cfg.patch = static_cast<int>(c[1]);
    cfg.d = static_cast<int>(c[2]);
    cfg.blocks = static_cast<int>(c[3]);
    cfg.heads = static_cast<int>(c[4]);
    cfg.lambda_perceptual = c[5];
    cfg.source_views = static_cast<int>(c[6]);
    cfg.timesteps = static_cast<int>(c[7]);
    ReconModel model(cfg, 0);
    model.store_.load(path);
    return model;
}

} // namespace t4dg::recon
