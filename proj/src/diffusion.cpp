// SPDX-License-Identifier: Apache-2.0
#include "t4dg/diffusion.hpp"

#include <cmath>
#include <cstring>

namespace t4dg::diffusion {

Arch parse_arch(const std::string& name) {
    if (name == "fused") return Arch::fused;
    if (name == "sequential") return Arch::sequential;
    if (name == "parallel") return Arch::parallel;
    throw ConfigError("unknown arch '" + name + "' (expected fused|sequential|parallel)");
}

std::string arch_name(Arch arch) {
    switch (arch) {
        case Arch::fused: return "fused";
        case Arch::sequential: return "sequential";
        case Arch::parallel: return "parallel";
    }
    throw ConfigError("invalid arch value");
}

void DenoiserConfig::validate() const {
    if (blocks < 1) throw ConfigError("blocks must be >= 1");
    if (d < 2 || d % 2 != 0) throw ConfigError("d must be a positive even channel count");
    if (heads < 1 || d % heads != 0) throw ConfigError("heads must divide d");
    if (compression_factor < 1) throw ConfigError("compression_factor must be >= 1");
    if (t_max < 1) throw ConfigError("T_max must be >= 1");
    if (patch < 1) throw ConfigError("patch must be >= 1");
}

std::vector<uint8_t> make_cell_mask(int views, int timesteps, bool fix_view, bool freeze_time) {
    if (!fix_view && !freeze_time) return {};
    std::vector<uint8_t> mask(static_cast<size_t>(views) * static_cast<size_t>(timesteps), 0);
    for (int v = 0; v < views; ++v)
        for (int t = 0; t < timesteps; ++t)
            if ((fix_view && v == 0) || (freeze_time && t == 0))
                mask[static_cast<size_t>(v * timesteps + t)] = 1;
    return mask;
}

void FlowSchedule::validate() const {
    if (steps < 1 || static_cast<size_t>(steps) != timesteps.size())
        throw ConfigError("schedule steps must match the timestep count and be >= 1");
    if (cfg_scale < 0.0f) throw ConfigError("cfg_scale must be >= 0");
    float prev = 1.0f + 1e-6f;
    for (float t : timesteps) {
        if (!(t > 0.0f && t <= 1.0f)) throw ConfigError("timesteps must lie in (0, 1]");
        if (!(t < prev)) throw ConfigError("timesteps must be strictly decreasing");
        prev = t;
    }
}

FlowSchedule make_schedule(int steps, float cfg_scale) {
    FlowSchedule s;
    s.steps = steps;
    s.cfg_scale = cfg_scale;
    for (int i = 0; i < steps; ++i)
        s.timesteps.push_back(static_cast<float>(steps - i) / static_cast<float>(steps));
    s.validate();
    return s;
}

ad::Tensor sinusoidal_embedding(float t_diff, int width) {
    // The fastest coordinate spans a few periods over [0, 1]; continuous
    // uniformly drawn times need smooth features, not the integer-step ladder.
    const int half = width / 2;
    std::vector<float> data(static_cast<size_t>(width));
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / half);
        const double arg = 50.0 * static_cast<double>(t_diff) * freq;
        data[static_cast<size_t>(2 * i)] = static_cast<float>(std::sin(arg));
        data[static_cast<size_t>(2 * i + 1)] = static_cast<float>(std::cos(arg));
    }
    return ad::Tensor::from_data({1, width}, std::move(data));
}

Denoiser::Denoiser(const DenoiserConfig& cfg, uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    embed_ = grid::PatchEmbed(codec_, "embed", cfg_.patch, cfg_.compression_factor, cfg_.d, rng);
    decode_ = grid::PatchDecode(codec_, "decode", cfg_.patch, cfg_.compression_factor, cfg_.d, rng);
    time_mlp_ = attn::Mlp(net_, "time", cfg_.d, 4 * cfg_.d, rng);
    for (int i = 0; i < cfg_.blocks; ++i) {
        const std::string prefix = "block" + std::to_string(i);
        switch (cfg_.arch) {
            case Arch::fused: fused_.emplace_back(net_, prefix, cfg_.d, cfg_.heads, rng); break;
            case Arch::sequential:
                sequential_.emplace_back(net_, prefix, cfg_.d, cfg_.heads, rng);
                break;
            case Arch::parallel:
                parallel_.emplace_back(net_, prefix, cfg_.d, cfg_.heads, rng);
                break;
        }
    }
    final_ = attn::Linear(net_, "final", cfg_.d, cfg_.d, rng, /*zero_init=*/true);
}

grid::TokenGrid Denoiser::embed_frames(const ad::Tensor& frames) const {
    return grid::compress_temporal(frames, embed_, cfg_.t_max);
}

ad::Tensor Denoiser::decode_tokens(const grid::TokenGrid& g) const {
    return grid::decompress_temporal(g, decode_);
}

LatentCond Denoiser::cond_from_grid(const grid::TokenGrid& clean, bool fix_view,
                                    bool freeze_time) {
    if (!fix_view && !freeze_time) return {};
    const grid::GridShape& g = clean.shape;
    LatentCond cond;
    cond.cell_mask = make_cell_mask(g.V, g.T, fix_view, freeze_time);
    const auto& src = clean.tokens.data();
    std::vector<float> ref(src.size(), 0.0f);
    const int64_t ft = g.frame_tokens();
    for (int v = 0; v < g.V; ++v)
        for (int t = 0; t < g.T; ++t) {
            if (!cond.cell_mask[static_cast<size_t>(v * g.T + t)]) continue;
            const int64_t row = grid::flatten_index(g, v, t, 0, 0);
            std::memcpy(ref.data() + row * g.d, src.data() + row * g.d,
                        static_cast<size_t>(ft) * g.d * sizeof(float));
        }
    cond.ref_tokens = ad::Tensor::from_data(clean.tokens.shape(), std::move(ref));
    return cond;
}

LatentCond Denoiser::embed_conditioning(const ConditioningSpec& cond,
                                        const grid::GridShape& g) const {
    if (cond.empty()) {
        if (!cond.cell_mask.empty())
            throw ConfigError("cell_mask set without reference content");
        return {};
    }
    const bool fix = !cond.fixed_view.empty();
    const bool frz = !cond.freeze_time.empty();
    if (cond.cell_mask != make_cell_mask(g.V, g.T, fix, frz))
        throw ConfigError("cell_mask does not match the supplied reference patterns");
    const int t_px = g.T * cfg_.compression_factor;
    const int h_px = g.H * cfg_.patch;
    const int w_px = g.W * cfg_.patch;
    auto check_extents = [&](const Image& img) {
        if (img.height != h_px || img.width != w_px)
            throw ConfigError("conditioning frame extents do not match the grid");
    };

    ad::NoGradGuard guard;
    LatentCond out;
    out.cell_mask = cond.cell_mask;
    std::vector<float> ref(static_cast<size_t>(g.tokens()) * static_cast<size_t>(g.d), 0.0f);
    const int64_t ft = g.frame_tokens();
    auto copy_cell = [&](const grid::TokenGrid& src, int sv, int st, int dv, int dt) {
        const int64_t srow = grid::flatten_index(src.shape, sv, st, 0, 0);
        const int64_t drow = grid::flatten_index(g, dv, dt, 0, 0);
        std::memcpy(ref.data() + drow * g.d, src.tokens.data().data() + srow * g.d,
                    static_cast<size_t>(ft) * g.d * sizeof(float));
    };

    if (frz) {
        if (static_cast<int>(cond.freeze_time.size()) != g.V)
            throw ConfigError("freeze_time must hold one frame per view");
        std::vector<float> px;
        px.reserve(static_cast<size_t>(g.V) * cfg_.compression_factor * cond.freeze_time[0].rgb.size());
        for (const Image& img : cond.freeze_time) {
            check_extents(img);
            // The frozen frame fills the whole latent window.
            for (int r = 0; r < cfg_.compression_factor; ++r)
                px.insert(px.end(), img.rgb.begin(), img.rgb.end());
        }
        const ad::Tensor frames = ad::Tensor::from_data(
            {g.V, cfg_.compression_factor, h_px, w_px, 3}, std::move(px));
        const grid::TokenGrid col = embed_frames(frames);
        for (int v = 0; v < g.V; ++v) copy_cell(col, v, 0, v, 0);
    }
    if (fix) {
        if (static_cast<int>(cond.fixed_view.size()) != t_px)
            throw ConfigError("fixed_view must hold one frame per pixel timestep");
        std::vector<float> px;
        px.reserve(static_cast<size_t>(t_px) * cond.fixed_view[0].rgb.size());
        for (const Image& img : cond.fixed_view) {
            check_extents(img);
            px.insert(px.end(), img.rgb.begin(), img.rgb.end());
        }
        const ad::Tensor frames = ad::Tensor::from_data({1, t_px, h_px, w_px, 3}, std::move(px));
        const grid::TokenGrid row = embed_frames(frames);
        // Where both patterns meet at (0,0) the actual video wins over the
        // frozen approximation.
        for (int t = 0; t < g.T; ++t) copy_cell(row, 0, t, 0, t);
    }
    out.ref_tokens = ad::Tensor::from_data({static_cast<int>(g.tokens()), g.d}, std::move(ref));
    return out;
}

grid::TokenGrid Denoiser::forward(const grid::TokenGrid& noised, float t_diff,
                                  const LatentCond& cond) const {
    const grid::GridShape& g = noised.shape;
    if (!(t_diff >= 0.0f && t_diff <= 1.0f))
        throw ConfigError("diffusion time must lie in [0, 1]");
    if (g.d != cfg_.d || g.T > cfg_.t_max)
        throw ShapeError("token grid does not match the denoiser configuration");
    ad::Tensor x = noised.tokens;
    if (!cond.empty()) {
        if (cond.cell_mask.size() != static_cast<size_t>(g.frames()) ||
            !cond.ref_tokens.defined() || cond.ref_tokens.shape() != x.shape())
            throw ShapeError("conditioning does not match the token grid");
        x = ad::add(x, cond.ref_tokens);
    }
    const ad::Tensor temb =
        ad::reshape(time_mlp_.forward(sinusoidal_embedding(t_diff, cfg_.d)), {cfg_.d});
    x = ad::add(x, temb); // broadcast over rows

    const auto positions = grid::token_positions(g);
    if (cfg_.arch == Arch::fused) {
        const auto layout = attn::build_block_layout(g);
        for (const auto& block : fused_) x = block.forward(x, layout, positions);
    } else {
        const auto same_time = attn::same_time_layout(g);
        const auto same_view = attn::same_view_layout(g);
        if (cfg_.arch == Arch::sequential) {
            for (const auto& block : sequential_)
                x = block.forward(x, same_time, same_view, positions);
        } else {
            for (const auto& block : parallel_)
                x = block.forward(x, same_time, same_view, positions);
        }
    }
    ++forward_calls;
    return {g, final_.forward(x)};
}

void Denoiser::save(const std::string& path) const {
    std::vector<NamedTensor> entries;
    entries.push_back({"config", ad::Tensor::from_data(
                                     {8}, {1.0f, static_cast<float>(cfg_.blocks),
                                           static_cast<float>(cfg_.d),
                                           static_cast<float>(cfg_.heads),
                                           static_cast<float>(static_cast<int>(cfg_.arch)),
                                           static_cast<float>(cfg_.compression_factor),
                                           static_cast<float>(cfg_.t_max),
                                           static_cast<float>(cfg_.patch)})});
    for (const auto& it : codec_.items()) entries.push_back(it);
    for (const auto& it : net_.items()) entries.push_back(it);
    save_container(path, entries);
}

Denoiser Denoiser::load(const std::string& path) {
    const auto entries = load_container(path);
    const NamedTensor* config = nullptr;
    for (const auto& e : entries)
        if (e.name == "config") config = &e;
    if (!config || config->value.numel() != 8 || config->value.data()[0] != 1.0f)
        throw IoError("not a denoiser checkpoint: " + path);
    const auto& c = config->value.data();
    DenoiserConfig cfg;
    cfg.blocks = static_cast<int>(c[1]);
    cfg.d = static_cast<int>(c[2]);
    cfg.heads = static_cast<int>(c[3]);
    cfg.arch = static_cast<Arch>(static_cast<int>(c[4]));
    cfg.compression_factor = static_cast<int>(c[5]);
    cfg.t_max = static_cast<int>(c[6]);
    cfg.patch = static_cast<int>(c[7]);
    Denoiser model(cfg, 0);
    model.codec_.load(path);
    model.net_.load(path);
    return model;
}

float scheduled_lr(const TrainOptions& opt, int step) {
    if (step < opt.warmup) return warmup_lr(opt.lr, step, opt.warmup);
    if (!opt.cosine_decay) return opt.lr;
    const double span = std::max(1, opt.iters - opt.warmup);
    const double phase = (step - opt.warmup) / span;
    return opt.lr * 0.5f * (1.0f + static_cast<float>(std::cos(M_PI * phase)));
}

FlowSample make_flow_sample(const ad::Tensor& clean_tokens, float tau, Rng& rng) {
    if (!(tau >= 0.0f && tau <= 1.0f)) throw ConfigError("tau must lie in [0, 1]");
    const ad::Tensor clean = clean_tokens.detach();
    const ad::Tensor eps = ad::Tensor::randn(clean.shape(), rng);
    FlowSample s;
    s.tau = tau;
    s.noised = ad::add(ad::scale(clean, 1.0f - tau), ad::scale(eps, tau));
    s.target = ad::sub(eps, clean);
    return s;
}

ad::Tensor masked_mse(const ad::Tensor& pred, const ad::Tensor& target,
                      const std::vector<uint8_t>& cell_mask, const grid::GridShape& g) {
    const ad::Tensor diff = ad::sub(pred, target);
    if (cell_mask.empty()) return ad::mean_all(ad::square(diff));
    if (cell_mask.size() != static_cast<size_t>(g.frames()))
        throw ShapeError("cell mask does not match the grid");
    std::vector<float> keep(static_cast<size_t>(g.tokens()), 0.0f);
    int64_t kept_cells = 0;
    const int64_t ft = g.frame_tokens();
    for (int v = 0; v < g.V; ++v)
        for (int t = 0; t < g.T; ++t) {
            if (cell_mask[static_cast<size_t>(v * g.T + t)]) continue;
            ++kept_cells;
            const int64_t row = grid::flatten_index(g, v, t, 0, 0);
            std::fill_n(keep.begin() + row, ft, 1.0f);
        }
    if (kept_cells == 0) throw ConfigError("every cell is conditioned; nothing to train");
    const ad::Tensor masked =
        ad::scale_rows(diff, ad::Tensor::from_data({static_cast<int>(g.tokens())}, std::move(keep)));
    const float denom = static_cast<float>(kept_cells * ft * g.d);
    return ad::scale(ad::sum_all(ad::square(masked)), 1.0f / denom);
}

ad::Tensor rf_loss(const Denoiser& model, const grid::TokenGrid& clean, const LatentCond& cond,
                   Rng& rng) {
    const float tau = static_cast<float>(rng.uniform());
    const FlowSample s = make_flow_sample(clean.tokens, tau, rng);
    const grid::TokenGrid pred = model.forward({clean.shape, s.noised}, tau, cond);
    return masked_mse(pred.tokens, s.target, cond.cell_mask, clean.shape);
}

grid::TokenGrid rf_sample(const Denoiser& model, const grid::GridShape& shape,
                          const LatentCond& cond, const FlowSchedule& schedule, uint64_t seed) {
    schedule.validate();
    ad::NoGradGuard guard;
    Rng rng(seed);
    const int n = static_cast<int>(shape.tokens());
    const ad::Tensor eps0 = ad::Tensor::randn({n, shape.d}, rng);
    ad::Tensor x = ad::Tensor::from_data(eps0.shape(), eps0.data());

    const int64_t ft = shape.frame_tokens();
    auto reimpose = [&](float tau_next) {
        if (cond.empty()) return;
        float* px = x.data().data();
        const float* pr = cond.ref_tokens.data().data();
        const float* pe = eps0.data().data();
        for (int v = 0; v < shape.V; ++v)
            for (int t = 0; t < shape.T; ++t) {
                if (!cond.cell_mask[static_cast<size_t>(v * shape.T + t)]) continue;
                const int64_t lo = grid::flatten_index(shape, v, t, 0, 0) * shape.d;
                const int64_t hi = lo + ft * shape.d;
                for (int64_t i = lo; i < hi; ++i)
                    px[i] = (1.0f - tau_next) * pr[i] + tau_next * pe[i];
            }
    };

    for (int i = 0; i < schedule.steps; ++i) {
        const float tau = schedule.timesteps[static_cast<size_t>(i)];
        const float tau_next =
            (i + 1 < schedule.steps) ? schedule.timesteps[static_cast<size_t>(i + 1)] : 0.0f;
        ad::Tensor vel = model.forward({shape, x}, tau, cond).tokens;
        if (schedule.cfg_scale > 0.0f && !cond.empty()) {
            const ad::Tensor vu = model.forward({shape, x}, tau, LatentCond{}).tokens;
            vel = ad::add(vu, ad::scale(ad::sub(vel, vu), schedule.cfg_scale));
        }
        x = ad::sub(x, ad::scale(vel, tau - tau_next));
        reimpose(tau_next);
    }
    return {shape, x};
}

ad::Tensor frames_tensor(const scenes::Scene4D& scene, bool reverse_views) {
    const int v_count = scene.views();
    const int t_count = scene.frames();
    if (v_count == 0 || t_count == 0) throw ConfigError("scene has no frames");
    const Image& first = scene.images[0][0];
    std::vector<float> data;
    data.reserve(static_cast<size_t>(v_count) * t_count * first.rgb.size());
    for (int v = 0; v < v_count; ++v) {
        const auto& view = scene.images[static_cast<size_t>(reverse_views ? v_count - 1 - v : v)];
        for (int t = 0; t < t_count; ++t) {
            const Image& img = view[static_cast<size_t>(t)];
            if (img.height != first.height || img.width != first.width)
                throw ShapeError("scene frames disagree on extents");
            data.insert(data.end(), img.rgb.begin(), img.rgb.end());
        }
    }
    return ad::Tensor::from_data({v_count, t_count, first.height, first.width, 3},
                                 std::move(data));
}

std::vector<float> train_codec(Denoiser& model, const std::vector<scenes::Scene4D>& dataset,
                               const TrainOptions& opt) {
    if (dataset.empty()) throw ConfigError("training dataset is empty");
    Rng rng(opt.seed);
    Adam adam(model.codec_params(), opt.lr);
    std::vector<float> curve;
    for (int it = 0; it < opt.iters; ++it) {
        const auto& scene = dataset[static_cast<size_t>(rng.uniform_int(
            static_cast<int64_t>(dataset.size())))];
        const ad::Tensor frames = frames_tensor(scene);
        const ad::Tensor decoded = model.decode_tokens(model.embed_frames(frames));
        const ad::Tensor loss = ad::mean_all(ad::square(ad::sub(decoded, frames)));
        const float value = loss.item();
        if (!std::isfinite(value))
            throw ConfigError("codec loss became non-finite at iteration " + std::to_string(it));
        curve.push_back(value);
        ad::backward(loss);
        adam.set_lr(scheduled_lr(opt, it));
        adam.step();
        ad::clear_tape();
    }
    return curve;
}

std::vector<float> train_denoiser(Denoiser& model, const std::vector<scenes::Scene4D>& dataset,
                                  const TrainOptions& opt) {
    if (dataset.empty()) throw ConfigError("training dataset is empty");
    Rng rng(opt.seed);
    Adam adam(model.net_params(), opt.lr);
    std::vector<float> curve;
    for (int it = 0; it < opt.iters; ++it) {
        const auto& scene = dataset[static_cast<size_t>(rng.uniform_int(
            static_cast<int64_t>(dataset.size())))];
        const bool reverse = opt.reverse_views && rng.uniform() < 0.5;
        grid::TokenGrid clean;
        {
            ad::NoGradGuard guard; // the codec is frozen during this stage
            clean = model.embed_frames(frames_tensor(scene, reverse));
        }
        LatentCond cond;
        if (!(scene.is_static && opt.drop_cond_for_static && rng.uniform() < 0.5)) {
            // A pattern that conditioned every cell would leave nothing to train.
            bool fix = clean.shape.V > 1;
            bool frz = clean.shape.T > 1;
            if (fix && frz) {
                const int64_t pattern = rng.uniform_int(3);
                fix = pattern != 1;
                frz = pattern != 0;
            }
            cond = Denoiser::cond_from_grid(clean, fix, frz);
        }
        const ad::Tensor loss = rf_loss(model, clean, cond, rng);
        const float value = loss.item();
        if (!std::isfinite(value))
            throw ConfigError("rf loss became non-finite at iteration " + std::to_string(it));
        curve.push_back(value);
        ad::backward(loss);
        adam.set_lr(scheduled_lr(opt, it));
        adam.step();
        ad::clear_tape();
    }
    return curve;
}

} // namespace t4dg::diffusion
