// SPDX-License-Identifier: Apache-2.0
#include "t4dg/scenes.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "t4dg/checkpoint.hpp"
#include "t4dg/splat.hpp"

namespace t4dg::scenes {

void BlobSceneSpec::validate() const {
    if (blobs.empty()) throw ConfigError("scene spec: at least one blob required");
    for (const Blob& b : blobs) {
        if (!(b.scale > 0.0f)) throw ConfigError("scene spec: blob scale must be positive");
        if (!(b.opacity > 0.0f && b.opacity <= 1.0f))
            throw ConfigError("scene spec: blob opacity must be in (0,1]");
    }
    for (float c : background)
        if (!(c >= 0.0f && c <= 1.0f)) throw ConfigError("scene spec: background outside [0,1]");
}

std::vector<Camera> make_orbit_cameras(int v, float radius, float elevation_deg,
                                       std::array<float, 3> look_at, int width, int height) {
    if (v < 1) throw ConfigError("orbit: need at least one view");
    if (!(radius > 0.0f)) throw ConfigError("orbit: radius must be positive");
    const Eigen::Vector3f target(look_at[0], look_at[1], look_at[2]);
    const double el = static_cast<double>(elevation_deg) * M_PI / 180.0;
    std::vector<Camera> cams;
    for (int i = 0; i < v; ++i) {
        const double az = 2.0 * M_PI * static_cast<double>(i) / static_cast<double>(v);
        const Eigen::Vector3f pos =
            target + static_cast<float>(radius) *
                         Eigen::Vector3f(static_cast<float>(std::cos(el) * std::cos(az)),
                                         static_cast<float>(std::sin(el)),
                                         static_cast<float>(std::cos(el) * std::sin(az)));
        const Eigen::Vector3f fwd = (target - pos).normalized();
        Eigen::Vector3f up(0.0f, 1.0f, 0.0f);
        if (std::fabs(fwd.dot(up)) > 0.999f) up = Eigen::Vector3f(1.0f, 0.0f, 0.0f);
        const Eigen::Vector3f right = up.cross(fwd).normalized();
        const Eigen::Vector3f down = fwd.cross(right);
        Eigen::Matrix3f rot;
        rot.row(0) = right;
        rot.row(1) = down;
        rot.row(2) = fwd;
        Camera cam;
        cam.rotation = quat_from_matrix(rot);
        const Eigen::Vector3f t = -(rot * pos);
        cam.translation = {t.x(), t.y(), t.z()};
        cam.focal = static_cast<float>(width);
        cam.cx = static_cast<float>(width) / 2.0f;
        cam.cy = static_cast<float>(height) / 2.0f;
        cam.width = width;
        cam.height = height;
        cam.validate();
        cams.push_back(cam);
    }
    return cams;
}

RenderedFrame render_scene(const BlobSceneSpec& spec, const Camera& cam, float t) {
    std::vector<splat::Gaussian> gs;
    gs.reserve(spec.blobs.size());
    for (const Blob& b : spec.blobs) {
        splat::Gaussian g;
        g.center = b.path.at(t);
        g.scale = {b.scale, b.scale, b.scale};
        g.opacity = b.opacity;
        g.color = b.color;
        gs.push_back(g);
    }
    auto res = splat::rasterize(gs, cam, spec.background, kFarDepth);
    RenderedFrame out;
    out.image = splat::to_image(res.image);
    out.depth = res.depth.data();
    return out;
}

std::vector<Scene4D> generate_dataset(const DatasetParams& p) {
    if (p.n_scenes < 0 || p.views < 1 || p.frames < 1 || p.width < 1 || p.height < 1 ||
        p.min_blobs < 1 || p.max_blobs < p.min_blobs)
        throw ConfigError("dataset: malformed parameters");
    Rng root(p.seed);
    std::vector<Scene4D> scenes;
    for (int s = 0; s < p.n_scenes; ++s) {
        Rng rng = root.fork(static_cast<uint64_t>(s));
        Scene4D scene;
        const int k = p.min_blobs +
                      static_cast<int>(rng.uniform_int(p.max_blobs - p.min_blobs + 1));
        for (int c = 0; c < 3; ++c)
            scene.spec.background[static_cast<size_t>(c)] = rng.uniform(0.05f, 0.35f);
        // Cubic paths bounded so blobs stay well inside the orbit radius.
        const float amp[4] = {1.2f, 0.6f, 0.4f, 0.3f};
        for (int b = 0; b < k; ++b) {
            Blob blob;
            for (int deg = 0; deg < 4; ++deg)
                for (int c = 0; c < 3; ++c)
                    blob.path.coeff[static_cast<size_t>(deg)][static_cast<size_t>(c)] =
                        rng.uniform(-amp[deg], amp[deg]);
            for (int c = 0; c < 3; ++c)
                blob.color[static_cast<size_t>(c)] = rng.uniform(0.05f, 0.95f);
            blob.scale = rng.uniform(0.35f, 0.9f);
            blob.opacity = rng.uniform(0.55f, 0.95f);
            scene.spec.blobs.push_back(blob);
        }
        scene.spec.validate();
        scene.cameras =
            make_orbit_cameras(p.views, p.radius, p.elevation_deg, {0, 0, 0}, p.width, p.height);
        scene.images.resize(static_cast<size_t>(p.views));
        scene.depths.resize(static_cast<size_t>(p.views));
        for (int v = 0; v < p.views; ++v)
            for (int f = 0; f < p.frames; ++f) {
                const float t =
                    p.frames == 1 ? 0.0f
                                  : static_cast<float>(f) / static_cast<float>(p.frames - 1);
                RenderedFrame fr = render_scene(scene.spec, scene.cameras[static_cast<size_t>(v)], t);
                scene.images[static_cast<size_t>(v)].push_back(std::move(fr.image));
                scene.depths[static_cast<size_t>(v)].push_back(std::move(fr.depth));
            }
        scenes.push_back(std::move(scene));
    }
    return scenes;
}

Image warp_homography(const Image& img, const Eigen::Matrix3f& h) {
    Image out(img.height, img.width);
    const int w = img.width, ht = img.height;
    for (int iy = 0; iy < ht; ++iy)
        for (int ix = 0; ix < w; ++ix) {
            const Eigen::Vector3f src = h * Eigen::Vector3f(static_cast<float>(ix) + 0.5f,
                                                            static_cast<float>(iy) + 0.5f, 1.0f);
            const float sx = src.x() / src.z(), sy = src.y() / src.z();
            // Bilinear sample on pixel centers with edge clamping.
            const float gx = std::clamp(sx - 0.5f, 0.0f, static_cast<float>(w - 1));
            const float gy = std::clamp(sy - 0.5f, 0.0f, static_cast<float>(ht - 1));
            const int x0 = static_cast<int>(gx), y0 = static_cast<int>(gy);
            const int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, ht - 1);
            const float fx = gx - static_cast<float>(x0), fy = gy - static_cast<float>(y0);
            for (int c = 0; c < 3; ++c)
                out.at(iy, ix, c) = (1 - fx) * (1 - fy) * img.at(y0, x0, c) +
                                    fx * (1 - fy) * img.at(y0, x1, c) +
                                    (1 - fx) * fy * img.at(y1, x0, c) +
                                    fx * fy * img.at(y1, x1, c);
        }
    return out;
}

Eigen::Matrix3f random_homography(int width, int height, Rng& rng, float max_shift) {
    const double w = width, h = height;
    const double src[4][2] = {{0, 0}, {w, 0}, {0, h}, {w, h}};
    for (int attempt = 0; attempt < 64; ++attempt) {
        double dst[4][2];
        for (int i = 0; i < 4; ++i) {
            dst[i][0] = src[i][0] + rng.uniform(-max_shift, max_shift) * w;
            dst[i][1] = src[i][1] + rng.uniform(-max_shift, max_shift) * h;
        }
        // Direct linear transform for the 4-point forward map src -> dst.
        Eigen::Matrix<double, 8, 8> a = Eigen::Matrix<double, 8, 8>::Zero();
        Eigen::Matrix<double, 8, 1> rhs;
        for (int i = 0; i < 4; ++i) {
            const double x = src[i][0], y = src[i][1], bx = dst[i][0], by = dst[i][1];
            a(2 * i, 0) = x;
            a(2 * i, 1) = y;
            a(2 * i, 2) = 1;
            a(2 * i, 6) = -x * bx;
            a(2 * i, 7) = -y * bx;
            a(2 * i + 1, 3) = x;
            a(2 * i + 1, 4) = y;
            a(2 * i + 1, 5) = 1;
            a(2 * i + 1, 6) = -x * by;
            a(2 * i + 1, 7) = -y * by;
            rhs(2 * i) = bx;
            rhs(2 * i + 1) = by;
        }
        const Eigen::Matrix<double, 8, 1> u = a.colPivHouseholderQr().solve(rhs);
        Eigen::Matrix3d fwd;
        fwd << u(0), u(1), u(2), u(3), u(4), u(5), u(6), u(7), 1.0;
        const double det = fwd.determinant();
        if (!std::isfinite(det) || std::fabs(det) < 1e-6) continue; // degenerate: resample
        // Return the output-to-input map that warp_homography consumes.
        return fwd.inverse().cast<float>();
    }
    throw ConfigError("homography: failed to sample an invertible transform");
}

std::vector<std::vector<Image>> homography_augment(const std::vector<Image>& video, int views,
                                                   uint64_t seed) {
    if (views < 1) throw ConfigError("augment: need at least one view");
    if (video.empty()) throw ConfigError("augment: empty video");
    Rng rng(seed);
    std::vector<std::vector<Image>> out;
    out.push_back(video); // view 0 is the identity
    for (int v = 1; v < views; ++v) {
        Rng vr = rng.fork(static_cast<uint64_t>(v));
        const Eigen::Matrix3f h = random_homography(video[0].width, video[0].height, vr);
        std::vector<Image> frames;
        frames.reserve(video.size());
        for (const Image& f : video) frames.push_back(warp_homography(f, h));
        out.push_back(std::move(frames));
    }
    return out;
}

Scene4D make_static_4d(const std::vector<Image>& freeze_time_frames, int frames) {
    if (freeze_time_frames.empty()) throw ConfigError("static grid: no input frames");
    if (frames < 1) throw ConfigError("static grid: need at least one timestep");
    Scene4D scene;
    scene.is_static = true;
    for (const Image& f : freeze_time_frames)
        scene.images.emplace_back(static_cast<size_t>(frames), f);
    return scene;
}

namespace {

void write_float(std::ostream& out, float v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(v));
    out << buf;
}

std::string frame_stem(int v, int t) {
    return "view" + std::to_string(v) + "_t" + std::to_string(t);
}

} // namespace

void save_scene(const std::string& dir, const Scene4D& scene) {
    if (scene.views() == 0 || scene.frames() == 0) throw IoError("save_scene: empty scene");
    std::filesystem::create_directories(dir);
    const Image& first = scene.images[0][0];
    const bool has_depth = !scene.depths.empty();
    const bool has_cams = !scene.cameras.empty();

    std::ofstream meta(dir + "/meta");
    if (!meta) throw IoError("save_scene: cannot write meta in " + dir);
    meta << "t4dg-scene 1\n";
    meta << "extent " << first.width << " " << first.height << "\n";
    meta << "grid " << scene.views() << " " << scene.frames() << "\n";
    meta << "static " << (scene.is_static ? 1 : 0) << "\n";
    meta << "has_depth " << (has_depth ? 1 : 0) << "\n";
    meta << "cameras " << (has_cams ? scene.views() : 0) << "\n";
    if (has_cams)
        for (const Camera& c : scene.cameras) {
            meta << "camera";
            for (float q : c.rotation) {
                meta << " ";
                write_float(meta, q);
            }
            for (float t : c.translation) {
                meta << " ";
                write_float(meta, t);
            }
            meta << " ";
            write_float(meta, c.focal);
            meta << " ";
            write_float(meta, c.cx);
            meta << " ";
            write_float(meta, c.cy);
            meta << "\n";
        }
    meta << "background";
    for (float c : scene.spec.background) {
        meta << " ";
        write_float(meta, c);
    }
    meta << "\n";
    meta << "blobs " << scene.spec.blobs.size() << "\n";
    for (const Blob& b : scene.spec.blobs) {
        meta << "blob";
        for (const auto& deg : b.path.coeff)
            for (float c : deg) {
                meta << " ";
                write_float(meta, c);
            }
        for (float c : b.color) {
            meta << " ";
            write_float(meta, c);
        }
        meta << " ";
        write_float(meta, b.scale);
        meta << " ";
        write_float(meta, b.opacity);
        meta << "\n";
    }
    if (!meta) throw IoError("save_scene: short write in " + dir);
    meta.close();

    for (int v = 0; v < scene.views(); ++v)
        for (int t = 0; t < scene.frames(); ++t) {
            const std::string stem = dir + "/" + frame_stem(v, t);
            write_ppm(stem + ".ppm", scene.images[static_cast<size_t>(v)][static_cast<size_t>(t)]);
            if (has_depth) {
                ad::NoGradGuard guard;
                const auto& d = scene.depths[static_cast<size_t>(v)][static_cast<size_t>(t)];
                save_container(stem + ".depth",
                               {{"depth", ad::Tensor::from_data({first.height, first.width},
                                                                d)}});
            }
        }
}

Scene4D load_scene(const std::string& dir) {
    std::ifstream meta(dir + "/meta");
    if (!meta) throw IoError("load_scene: cannot open meta in " + dir);
    std::string tag;
    int version = 0;
    meta >> tag >> version;
    if (tag != "t4dg-scene" || version != 1) throw IoError("load_scene: bad meta header");
    Scene4D scene;
    int width = 0, height = 0, views = 0, frames = 0, is_static = 0, has_depth = 0, cams = 0;
    auto expect_key = [&](const char* key) {
        std::string k;
        meta >> k;
        if (k != key) throw IoError(std::string("load_scene: expected key ") + key);
    };
    expect_key("extent");
    meta >> width >> height;
    expect_key("grid");
    meta >> views >> frames;
    expect_key("static");
    meta >> is_static;
    expect_key("has_depth");
    meta >> has_depth;
    expect_key("cameras");
    meta >> cams;
    for (int i = 0; i < cams; ++i) {
        expect_key("camera");
        Camera c;
        for (float& q : c.rotation) meta >> q;
        for (float& t : c.translation) meta >> t;
        meta >> c.focal >> c.cx >> c.cy;
        c.width = width;
        c.height = height;
        scene.cameras.push_back(c);
    }
    expect_key("background");
    for (float& c : scene.spec.background) meta >> c;
    expect_key("blobs");
    size_t blobs = 0;
    meta >> blobs;
    for (size_t i = 0; i < blobs; ++i) {
        expect_key("blob");
        Blob b;
        for (auto& deg : b.path.coeff)
            for (float& c : deg) meta >> c;
        for (float& c : b.color) meta >> c;
        meta >> b.scale >> b.opacity;
        scene.spec.blobs.push_back(b);
    }
    if (!meta) throw IoError("load_scene: malformed meta in " + dir);
    scene.is_static = is_static != 0;

    scene.images.resize(static_cast<size_t>(views));
    if (has_depth) scene.depths.resize(static_cast<size_t>(views));
    for (int v = 0; v < views; ++v)
        for (int t = 0; t < frames; ++t) {
            const std::string stem = dir + "/" + frame_stem(v, t);
            Image img = read_ppm(stem + ".ppm");
            if (img.width != width || img.height != height)
                throw IoError("load_scene: frame extent mismatch in " + dir);
            scene.images[static_cast<size_t>(v)].push_back(std::move(img));
            if (has_depth) {
                auto entries = load_container(stem + ".depth");
                if (entries.size() != 1 || entries[0].name != "depth")
                    throw IoError("load_scene: malformed depth container in " + dir);
                scene.depths[static_cast<size_t>(v)].push_back(entries[0].value.data());
            }
        }
    return scene;
}

} // namespace t4dg::scenes
