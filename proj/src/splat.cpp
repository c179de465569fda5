// SPDX-License-Identifier: Apache-2.0
#include "t4dg/splat.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

namespace t4dg::splat {

namespace {

using Eigen::Matrix2d;
using Eigen::Matrix3d;
using Eigen::Vector2d;
using Eigen::Vector3d;
using Eigen::Vector4d;
using Mat23 = Eigen::Matrix<double, 2, 3>;

Matrix3d quat_to_matrix_d(double w, double x, double y, double z) {
    Matrix3d r;
    r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return r;
}

// Everything the backward pass needs about one projected Gaussian.
struct Prep {
    bool visible = false;
    bool singular = false;
    Vector3d p;       // camera-frame center
    Matrix3d rg;      // rotation matrix of the normalized quaternion
    Vector3d s;       // world scales
    Vector4d qhat;    // normalized quaternion
    double qnorm = 1.0;
    Matrix3d sigma;   // world covariance
    Mat23 b;          // perspective Jacobian times camera rotation
    double ca = 0.0, cb = 0.0, cc = 0.0; // conic = inverse cov2d
    double mx = 0.0, my = 0.0;
    double depth = 0.0;
    double opacity = 0.0;
    Vector3d color;
};

struct CameraFrame {
    Matrix3d r;
    Vector3d t;
    double f, cx, cy;
};

CameraFrame camera_frame(const Camera& cam) {
    CameraFrame fr;
    const auto q = normalize_quat(cam.rotation);
    fr.r = quat_to_matrix_d(q[0], q[1], q[2], q[3]);
    fr.t = Vector3d(cam.translation[0], cam.translation[1], cam.translation[2]);
    fr.f = cam.focal;
    fr.cx = cam.cx;
    fr.cy = cam.cy;
    return fr;
}

Prep prepare(const float* center, const float* scale, const float* quat, float opacity,
             const float* color, const CameraFrame& cam) {
    Prep pr;
    const Vector3d c(center[0], center[1], center[2]);
    pr.p = cam.r * c + cam.t;
    if (!(pr.p.z() > static_cast<double>(kNearPlane))) return pr; // also catches NaN
    pr.visible = true;

    const Vector4d q(quat[0], quat[1], quat[2], quat[3]);
    pr.qnorm = std::max(q.norm(), 1e-12);
    pr.qhat = q / pr.qnorm;
    pr.rg = quat_to_matrix_d(pr.qhat[0], pr.qhat[1], pr.qhat[2], pr.qhat[3]);
    pr.s = Vector3d(scale[0], scale[1], scale[2]);
    pr.sigma = pr.rg * pr.s.array().square().matrix().asDiagonal() * pr.rg.transpose();

    const double pz = pr.p.z();
    Mat23 j;
    j << cam.f / pz, 0.0, -cam.f * pr.p.x() / (pz * pz),
        0.0, cam.f / pz, -cam.f * pr.p.y() / (pz * pz);
    pr.b = j * cam.r;
    Matrix2d m = pr.b * pr.sigma * pr.b.transpose();
    m(0, 0) += kCovFloor;
    m(1, 1) += kCovFloor;
    const double det = m(0, 0) * m(1, 1) - m(0, 1) * m(1, 0);
    pr.mx = cam.f * pr.p.x() / pz + cam.cx;
    pr.my = cam.f * pr.p.y() / pz + cam.cy;
    pr.depth = pz;
    pr.opacity = opacity;
    pr.color = Vector3d(color[0], color[1], color[2]);
    if (!(det > 1e-12) || !std::isfinite(det) || !std::isfinite(m.sum())) {
        pr.singular = true;
        return pr;
    }
    pr.ca = m(1, 1) / det;
    pr.cb = -m(0, 1) / det;
    pr.cc = m(0, 0) / det;
    return pr;
}

struct RasterCtx {
    int h = 0, w = 0, k = 0;
    CameraFrame cam;
    std::vector<Prep> prep;
    std::vector<int> order; // visible, non-singular indices, by (depth, index)
    // Per pixel: contributing (gaussian index, alpha) in compositing order.
    std::vector<std::vector<std::pair<int, double>>> contribs;
    std::vector<double> wsum, tfinal, dout;
    std::array<float, 3> bg{};
};

void rasterize_backward(const RasterCtx& ctx, ad::Node& self);

} // namespace

Projected2D project(const Gaussian& g, const Camera& cam) {
    const CameraFrame fr = camera_frame(cam);
    Prep pr = prepare(g.center.data(), g.scale.data(), g.rotation.data(), g.opacity,
                      g.color.data(), fr);
    Projected2D out;
    out.visible = pr.visible;
    if (!pr.visible) return out;
    Matrix2d m = pr.b * pr.sigma * pr.b.transpose();
    out.mean_x = static_cast<float>(pr.mx);
    out.mean_y = static_cast<float>(pr.my);
    out.cov_xx = static_cast<float>(m(0, 0) + kCovFloor);
    out.cov_xy = static_cast<float>(m(0, 1));
    out.cov_yy = static_cast<float>(m(1, 1) + kCovFloor);
    out.depth = static_cast<float>(pr.depth);
    return out;
}

RasterResult rasterize_tensors(const ad::Tensor& centers, const ad::Tensor& scales,
                               const ad::Tensor& rotations, const ad::Tensor& opacities,
                               const ad::Tensor& colors, const Camera& cam,
                               std::array<float, 3> background, float background_depth) {
    cam.validate();
    if (centers.rank() != 2 || centers.dim(1) != 3)
        throw ShapeError("rasterize: centers must be [K,3]");
    const int k = centers.dim(0);
    auto expect = [&](const ad::Tensor& t, int cols, const char* what) {
        if (cols == 0) {
            if (t.rank() != 1 || t.dim(0) != k) throw ShapeError(std::string("rasterize: ") + what);
        } else if (t.rank() != 2 || t.dim(0) != k || t.dim(1) != cols) {
            throw ShapeError(std::string("rasterize: ") + what);
        }
    };
    expect(scales, 3, "scales must be [K,3]");
    expect(rotations, 4, "rotations must be [K,4]");
    expect(opacities, 0, "opacities must be [K]");
    expect(colors, 3, "colors must be [K,3]");

    auto ctx = std::make_shared<RasterCtx>();
    ctx->h = cam.height;
    ctx->w = cam.width;
    ctx->k = k;
    ctx->bg = background;
    ctx->cam = camera_frame(cam);
    const CameraFrame& fr = ctx->cam;
    int skipped = 0;
    ctx->prep.resize(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i) {
        ctx->prep[static_cast<size_t>(i)] =
            prepare(centers.data().data() + 3 * i, scales.data().data() + 3 * i,
                    rotations.data().data() + 4 * i, opacities.data()[static_cast<size_t>(i)],
                    colors.data().data() + 3 * i, fr);
        const Prep& pr = ctx->prep[static_cast<size_t>(i)];
        if (pr.visible && pr.singular) ++skipped;
        if (pr.visible && !pr.singular) ctx->order.push_back(i);
    }
    std::sort(ctx->order.begin(), ctx->order.end(), [&](int a, int b) {
        const double da = ctx->prep[static_cast<size_t>(a)].depth;
        const double db = ctx->prep[static_cast<size_t>(b)].depth;
        return da < db || (da == db && a < b);
    });

    const int64_t pixels = static_cast<int64_t>(ctx->h) * ctx->w;
    ctx->contribs.resize(static_cast<size_t>(pixels));
    ctx->wsum.assign(static_cast<size_t>(pixels), 0.0);
    ctx->tfinal.assign(static_cast<size_t>(pixels), 1.0);
    ctx->dout.assign(static_cast<size_t>(pixels), background_depth);

    auto node = ad::detail::make_node({ctx->h, ctx->w, 4}, true,
                                      {centers.node, scales.node, rotations.node,
                                       opacities.node, colors.node});
    float* packed = node->data.data();
    RasterResult res;
    res.alpha_sum.assign(static_cast<size_t>(pixels), 0.0f);
    res.transmittance.assign(static_cast<size_t>(pixels), 1.0f);

    parallel_for(ctx->h, [&](int64_t y0, int64_t y1) {
        for (int64_t iy = y0; iy < y1; ++iy) {
            for (int64_t ix = 0; ix < ctx->w; ++ix) {
                const int64_t pix = iy * ctx->w + ix;
                const double px = static_cast<double>(ix) + 0.5;
                const double py = static_cast<double>(iy) + 0.5;
                double t = 1.0, num = 0.0, wsum = 0.0;
                Vector3d acc = Vector3d::Zero();
                auto& lst = ctx->contribs[static_cast<size_t>(pix)];
                for (int idx : ctx->order) {
                    const Prep& pr = ctx->prep[static_cast<size_t>(idx)];
                    const double dx = px - pr.mx, dy = py - pr.my;
                    const double q = pr.ca * dx * dx + 2.0 * pr.cb * dx * dy + pr.cc * dy * dy;
                    if (q > 9.0) continue; // 3-sigma truncation
                    const double alpha = std::min(pr.opacity * std::exp(-0.5 * q), 0.999);
                    acc += t * alpha * pr.color;
                    num += t * alpha * pr.depth;
                    wsum += t * alpha;
                    lst.emplace_back(idx, alpha);
                    t *= 1.0 - alpha;
                    if (t < 1e-4) break;
                }
                for (int c = 0; c < 3; ++c)
                    packed[pix * 4 + c] = static_cast<float>(acc[c] + t * background[c]);
                const double dout = wsum > 0.0 ? num / wsum : background_depth;
                packed[pix * 4 + 3] = static_cast<float>(dout);
                ctx->wsum[static_cast<size_t>(pix)] = wsum;
                ctx->tfinal[static_cast<size_t>(pix)] = t;
                ctx->dout[static_cast<size_t>(pix)] = dout;
                res.alpha_sum[static_cast<size_t>(pix)] = static_cast<float>(wsum);
                res.transmittance[static_cast<size_t>(pix)] = static_cast<float>(t);
            }
        }
    });

    if (node->requires_grad)
        node->backward_fn = [ctx](ad::Node& self) { rasterize_backward(*ctx, self); };

    ad::Tensor packed_t(node);
    res.image = ad::slice(packed_t, 2, 0, 3);
    res.depth = ad::reshape(ad::slice(packed_t, 2, 3, 4), {ctx->h, ctx->w});
    res.skipped = skipped;
    return res;
}

namespace {

void rasterize_backward(const RasterCtx& ctx, ad::Node& self) {
    const float* g = self.grad.data();
    const int k = ctx.k;
    // Per-Gaussian accumulators in double; pixels reduce in row-major order.
    std::vector<double> dmx(static_cast<size_t>(k), 0.0), dmy(static_cast<size_t>(k), 0.0);
    std::vector<double> dca(static_cast<size_t>(k), 0.0), dcb(static_cast<size_t>(k), 0.0),
        dcc(static_cast<size_t>(k), 0.0);
    std::vector<double> dz(static_cast<size_t>(k), 0.0), dop(static_cast<size_t>(k), 0.0);
    std::vector<Vector3d> dcol(static_cast<size_t>(k), Vector3d::Zero());
    std::vector<char> touched(static_cast<size_t>(k), 0);

    const Vector3d bg(ctx.bg[0], ctx.bg[1], ctx.bg[2]);
    std::vector<double> tvals;
    for (int64_t pix = 0; pix < static_cast<int64_t>(ctx.contribs.size()); ++pix) {
        const auto& lst = ctx.contribs[static_cast<size_t>(pix)];
        if (lst.empty()) continue;
        const Vector3d gc(g[pix * 4 + 0], g[pix * 4 + 1], g[pix * 4 + 2]);
        const double gd = g[pix * 4 + 3];
        const double wsum = ctx.wsum[static_cast<size_t>(pix)];
        const double dpix = ctx.dout[static_cast<size_t>(pix)];
        const int64_t ix = pix % ctx.w, iy = pix / ctx.w;
        const double px = static_cast<double>(ix) + 0.5;
        const double py = static_cast<double>(iy) + 0.5;

        tvals.resize(lst.size());
        double t = 1.0;
        for (size_t i = 0; i < lst.size(); ++i) {
            tvals[i] = t;
            t *= 1.0 - lst[i].second;
        }
        // Suffix S = sum_{j>i} T_j alpha_j w_j plus the background term,
        // where w_j is the sensitivity of the pixel loss to T_j alpha_j.
        double s = ctx.tfinal[static_cast<size_t>(pix)] * bg.dot(gc);
        for (size_t ri = lst.size(); ri-- > 0;) {
            const int idx = lst[ri].first;
            const double alpha = lst[ri].second;
            const Prep& pr = ctx.prep[static_cast<size_t>(idx)];
            touched[static_cast<size_t>(idx)] = 1;
            const double wi = pr.color.dot(gc) + (pr.depth - dpix) * gd / wsum;
            const double dalpha = tvals[ri] * wi - s / (1.0 - alpha);
            s += tvals[ri] * alpha * wi;
            dcol[static_cast<size_t>(idx)] += tvals[ri] * alpha * gc;
            dz[static_cast<size_t>(idx)] += tvals[ri] * alpha * gd / wsum;

            const double dx = px - pr.mx, dy = py - pr.my;
            const double q = pr.ca * dx * dx + 2.0 * pr.cb * dx * dy + pr.cc * dy * dy;
            const double gauss = std::exp(-0.5 * q);
            const double unclamped = pr.opacity * gauss;
            if (unclamped >= 0.999) continue; // clamped: flat side of min
            dop[static_cast<size_t>(idx)] += gauss * dalpha;
            const double dq = -0.5 * unclamped * dalpha;
            const double adx = pr.ca * dx + pr.cb * dy;
            const double ady = pr.cb * dx + pr.cc * dy;
            dmx[static_cast<size_t>(idx)] += dq * (-2.0 * adx);
            dmy[static_cast<size_t>(idx)] += dq * (-2.0 * ady);
            dca[static_cast<size_t>(idx)] += dq * dx * dx;
            dcb[static_cast<size_t>(idx)] += dq * 2.0 * dx * dy;
            dcc[static_cast<size_t>(idx)] += dq * dy * dy;
        }
    }

    auto grad_of = [](ad::Node& n) -> float* {
        if (n.grad.empty()) n.grad.assign(static_cast<size_t>(n.numel()), 0.0f);
        return n.grad.data();
    };
    ad::Node& centers = *self.parents[0];
    ad::Node& scales = *self.parents[1];
    ad::Node& rotations = *self.parents[2];
    ad::Node& opacities = *self.parents[3];
    ad::Node& colors = *self.parents[4];

    for (int idx = 0; idx < k; ++idx) {
        if (!touched[static_cast<size_t>(idx)]) continue;
        const Prep& pr = ctx.prep[static_cast<size_t>(idx)];

        // Conic back to the projected covariance: A = M^-1.
        Matrix2d amat, damat;
        amat << pr.ca, pr.cb, pr.cb, pr.cc;
        damat << dca[static_cast<size_t>(idx)], dcb[static_cast<size_t>(idx)] / 2.0,
            dcb[static_cast<size_t>(idx)] / 2.0, dcc[static_cast<size_t>(idx)];
        const Matrix2d dm = -amat * damat * amat;

        const Matrix3d dsigma = pr.b.transpose() * dm * pr.b;
        const Mat23 db = 2.0 * dm * pr.b * pr.sigma;
        // b = J * Rcam with Rcam orthogonal, so dJ = db * Rcam^T.
        const Matrix3d& rcam = ctx.cam.r;
        const Mat23 dj = db * rcam.transpose();

        const double f = ctx.cam.f;
        const double pz = pr.p.z(), pxc = pr.p.x(), pyc = pr.p.y();
        Vector3d dp = Vector3d::Zero();
        const double inv2 = f / (pz * pz);
        dp.x() += dj(0, 2) * (-inv2);
        dp.y() += dj(1, 2) * (-inv2);
        dp.z() += (dj(0, 0) + dj(1, 1)) * (-inv2) +
                  dj(0, 2) * (2.0 * f * pxc / (pz * pz * pz)) +
                  dj(1, 2) * (2.0 * f * pyc / (pz * pz * pz));
        dp.x() += dmx[static_cast<size_t>(idx)] * f / pz;
        dp.y() += dmy[static_cast<size_t>(idx)] * f / pz;
        dp.z() += -f * (pxc * dmx[static_cast<size_t>(idx)] + pyc * dmy[static_cast<size_t>(idx)]) /
                  (pz * pz);
        dp.z() += dz[static_cast<size_t>(idx)];
        const Vector3d dcenter = rcam.transpose() * dp;

        // Sigma = Rg diag(s^2) Rg^T; dsigma is symmetric.
        const Matrix3d ds2 = pr.rg.transpose() * dsigma * pr.rg;
        Vector3d dscale;
        for (int a = 0; a < 3; ++a) dscale[a] = ds2(a, a) * 2.0 * pr.s[a];
        const Matrix3d drot = 2.0 * dsigma * pr.rg * pr.s.array().square().matrix().asDiagonal();

        const double qw = pr.qhat[0], qx = pr.qhat[1], qy = pr.qhat[2], qz = pr.qhat[3];
        Matrix3d dr_dw, dr_dx, dr_dy, dr_dz;
        dr_dw << 0, -qz, qy, qz, 0, -qx, -qy, qx, 0;
        dr_dx << 0, qy, qz, qy, -2 * qx, -qw, qz, qw, -2 * qx;
        dr_dy << -2 * qy, qx, qw, qx, 0, qz, -qw, qz, -2 * qy;
        dr_dz << -2 * qz, -qw, qx, qw, -2 * qz, qy, qx, qy, 0;
        Vector4d dqhat(2.0 * drot.cwiseProduct(dr_dw).sum(), 2.0 * drot.cwiseProduct(dr_dx).sum(),
                       2.0 * drot.cwiseProduct(dr_dy).sum(), 2.0 * drot.cwiseProduct(dr_dz).sum());
        const Vector4d dquat =
            (dqhat - pr.qhat * pr.qhat.dot(dqhat)) / pr.qnorm; // normalization Jacobian

        if (centers.requires_grad) {
            float* gp = grad_of(centers);
            for (int a = 0; a < 3; ++a) gp[idx * 3 + a] += static_cast<float>(dcenter[a]);
        }
        if (scales.requires_grad) {
            float* gp = grad_of(scales);
            for (int a = 0; a < 3; ++a) gp[idx * 3 + a] += static_cast<float>(dscale[a]);
        }
        if (rotations.requires_grad) {
            float* gp = grad_of(rotations);
            for (int a = 0; a < 4; ++a) gp[idx * 4 + a] += static_cast<float>(dquat[a]);
        }
        if (opacities.requires_grad)
            grad_of(opacities)[idx] += static_cast<float>(dop[static_cast<size_t>(idx)]);
        if (colors.requires_grad) {
            float* gp = grad_of(colors);
            for (int a = 0; a < 3; ++a)
                gp[idx * 3 + a] += static_cast<float>(dcol[static_cast<size_t>(idx)][a]);
        }
    }
}

} // namespace

RasterResult rasterize(const std::vector<Gaussian>& gaussians, const Camera& cam,
                       std::array<float, 3> background, float background_depth) {
    const int k = static_cast<int>(gaussians.size());
    std::vector<float> centers(static_cast<size_t>(k) * 3), scales(static_cast<size_t>(k) * 3),
        rotations(static_cast<size_t>(k) * 4), opacities(static_cast<size_t>(k)),
        colors(static_cast<size_t>(k) * 3);
    for (int i = 0; i < k; ++i) {
        const Gaussian& g = gaussians[static_cast<size_t>(i)];
        for (int a = 0; a < 3; ++a) {
            centers[static_cast<size_t>(i * 3 + a)] = g.center[static_cast<size_t>(a)];
            scales[static_cast<size_t>(i * 3 + a)] = g.scale[static_cast<size_t>(a)];
            colors[static_cast<size_t>(i * 3 + a)] = g.color[static_cast<size_t>(a)];
        }
        for (int a = 0; a < 4; ++a)
            rotations[static_cast<size_t>(i * 4 + a)] = g.rotation[static_cast<size_t>(a)];
        opacities[static_cast<size_t>(i)] = g.opacity;
    }
    ad::NoGradGuard guard;
    return rasterize_tensors(ad::Tensor::from_data({k, 3}, std::move(centers)),
                             ad::Tensor::from_data({k, 3}, std::move(scales)),
                             ad::Tensor::from_data({k, 4}, std::move(rotations)),
                             ad::Tensor::from_data({k}, std::move(opacities)),
                             ad::Tensor::from_data({k, 3}, std::move(colors)), cam, background,
                             background_depth);
}

Image to_image(const ad::Tensor& t) {
    if (t.rank() != 3 || t.dim(2) != 3) throw ShapeError("to_image: [H,W,3] tensor required");
    Image img(t.dim(0), t.dim(1));
    std::copy(t.data().begin(), t.data().end(), img.rgb.begin());
    return img;
}

} // namespace t4dg::splat
