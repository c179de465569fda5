// SPDX-License-Identifier: Apache-2.0
#include "t4dg/config.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "t4dg/common.hpp"

namespace t4dg::cli {

namespace {

std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::string key_prefix(const std::string& key) {
    size_t dot = key.find('.');
    return dot == std::string::npos ? key : key.substr(0, dot);
}

} // namespace

void ConfigMap::set(const std::string& key, const std::string& value) {
    for (auto& e : entries_) {
        if (e.first == key) {
            e.second = value;
            return;
        }
    }
    entries_.emplace_back(key, value);
}

bool ConfigMap::has(const std::string& key) const {
    for (const auto& e : entries_)
        if (e.first == key) return true;
    return false;
}

const std::string& ConfigMap::get(const std::string& key) const {
    for (const auto& e : entries_)
        if (e.first == key) return e.second;
    throw ConfigError("missing config key: " + key);
}

std::string ConfigMap::get_string(const std::string& key, const std::string& fallback) const {
    return has(key) ? get(key) : fallback;
}

int64_t ConfigMap::get_int(const std::string& key, int64_t fallback) const {
    if (!has(key)) return fallback;
    const std::string& v = get(key);
    int64_t out = 0;
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size())
        throw ConfigError("config key " + key + ": not an integer: " + v);
    return out;
}

float ConfigMap::get_float(const std::string& key, float fallback) const {
    if (!has(key)) return fallback;
    const std::string& v = get(key);
    char* end = nullptr;
    float out = std::strtof(v.c_str(), &end);
    if (end != v.c_str() + v.size() || v.empty())
        throw ConfigError("config key " + key + ": not a number: " + v);
    return out;
}

std::vector<float> ConfigMap::get_floats(const std::string& key) const {
    std::vector<float> out;
    if (!has(key)) return out;
    std::istringstream in(get(key));
    std::string tok;
    while (in >> tok) {
        char* end = nullptr;
        float f = std::strtof(tok.c_str(), &end);
        if (end != tok.c_str() + tok.size())
            throw ConfigError("config key " + key + ": not a number: " + tok);
        out.push_back(f);
    }
    return out;
}

ConfigMap parse_config_text(const std::string& text) {
    ConfigMap map;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected `key = value`");
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty())
            throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
        map.set(key, value);
    }
    return map;
}

ConfigMap parse_config_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open config file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str());
}

std::string serialize_config(const ConfigMap& map) {
    std::string out;
    std::string prev_prefix;
    bool first = true;
    for (const auto& [key, value] : map.entries()) {
        std::string prefix = key_prefix(key);
        if (!first && prefix != prev_prefix) out += "\n";
        out += key + " = " + value + "\n";
        prev_prefix = prefix;
        first = false;
    }
    return out;
}

std::string format_float(float value) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
    (void)ec;
    return std::string(buf, ptr);
}

void PipelineConfig::validate() const {
    if (scene_params.n_scenes < 1) throw ConfigError("scenes.count must be positive");
    if (test_scenes < 0) throw ConfigError("scenes.test_count must be non-negative");
    if (scene_params.views < 1 || scene_params.frames < 1)
        throw ConfigError("scenes.views and scenes.frames must be positive");
    if (scene_params.width < 1 || scene_params.height < 1)
        throw ConfigError("scene image extents must be positive");
    if (codec_iters < 0 || diffusion_iters < 0 || recon_static_iters < 0 || recon_dynamic_iters < 0)
        throw ConfigError("iteration counts must be non-negative");
    denoiser.validate();
    schedule.validate();
    recon.validate();
}

PipelineConfig default_pipeline_config() {
    PipelineConfig c;
    c.scene_params.n_scenes = 12;
    c.scene_params.views = 5;
    c.scene_params.frames = 8;
    c.scene_params.width = 16;
    c.scene_params.height = 16;
    c.schedule = diffusion::make_schedule(8, 2.0f);
    c.recon.patch = 2;
    c.recon.d = 32;
    c.recon.blocks = 2;
    c.recon.heads = 2;
    c.recon.source_views = 4;
    c.recon.timesteps = 2;
    return c;
}

PipelineConfig config_from_map(const ConfigMap& map) {
    PipelineConfig c = default_pipeline_config();
    static const char* known[] = {
        "seed", "paths.scenes", "paths.out",
        "scenes.count", "scenes.test_count", "scenes.views", "scenes.frames",
        "scenes.width", "scenes.height", "scenes.radius", "scenes.elevation_deg",
        "scenes.min_blobs", "scenes.max_blobs",
        "diffusion.blocks", "diffusion.d", "diffusion.heads", "diffusion.arch",
        "diffusion.compression_factor", "diffusion.T_max", "diffusion.patch",
        "diffusion.codec_iters", "diffusion.codec_lr", "diffusion.iters",
        "diffusion.lr", "diffusion.warmup",
        "flow.steps", "flow.cfg_scale", "flow.timesteps",
        "recon.patch", "recon.d", "recon.blocks", "recon.heads",
        "recon.\xce\xbb_perceptual", "recon.source_views", "recon.timesteps",
        "recon.static_iters", "recon.dynamic_iters", "recon.lr", "recon.dynamic_lr",
        "recon.warmup", "recon.lambda_camera", "recon.lambda_depth",
    };
    for (const auto& [key, value] : map.entries()) {
        bool ok = false;
        for (const char* k : known) ok = ok || key == k;
        if (!ok) throw ConfigError("unknown config key: " + key);
        (void)value;
    }
    c.seed = static_cast<uint64_t>(map.get_int("seed", static_cast<int64_t>(c.seed)));
    c.scenes_path = map.get_string("paths.scenes", c.scenes_path);
    c.out_path = map.get_string("paths.out", c.out_path);

    auto& sp = c.scene_params;
    sp.n_scenes = static_cast<int>(map.get_int("scenes.count", sp.n_scenes));
    c.test_scenes = static_cast<int>(map.get_int("scenes.test_count", c.test_scenes));
    sp.views = static_cast<int>(map.get_int("scenes.views", sp.views));
    sp.frames = static_cast<int>(map.get_int("scenes.frames", sp.frames));
    sp.width = static_cast<int>(map.get_int("scenes.width", sp.width));
    sp.height = static_cast<int>(map.get_int("scenes.height", sp.height));
    sp.radius = map.get_float("scenes.radius", sp.radius);
    sp.elevation_deg = map.get_float("scenes.elevation_deg", sp.elevation_deg);
    sp.min_blobs = static_cast<int>(map.get_int("scenes.min_blobs", sp.min_blobs));
    sp.max_blobs = static_cast<int>(map.get_int("scenes.max_blobs", sp.max_blobs));

    auto& dn = c.denoiser;
    dn.blocks = static_cast<int>(map.get_int("diffusion.blocks", dn.blocks));
    dn.d = static_cast<int>(map.get_int("diffusion.d", dn.d));
    dn.heads = static_cast<int>(map.get_int("diffusion.heads", dn.heads));
    if (map.has("diffusion.arch")) dn.arch = diffusion::parse_arch(map.get("diffusion.arch"));
    dn.compression_factor =
        static_cast<int>(map.get_int("diffusion.compression_factor", dn.compression_factor));
    dn.t_max = static_cast<int>(map.get_int("diffusion.T_max", dn.t_max));
    dn.patch = static_cast<int>(map.get_int("diffusion.patch", dn.patch));
    c.codec_iters = static_cast<int>(map.get_int("diffusion.codec_iters", c.codec_iters));
    c.codec_lr = map.get_float("diffusion.codec_lr", c.codec_lr);
    c.diffusion_iters = static_cast<int>(map.get_int("diffusion.iters", c.diffusion_iters));
    c.diffusion_lr = map.get_float("diffusion.lr", c.diffusion_lr);
    c.diffusion_warmup = static_cast<int>(map.get_int("diffusion.warmup", c.diffusion_warmup));

    int steps = static_cast<int>(map.get_int("flow.steps", c.schedule.steps));
    float cfg_scale = map.get_float("flow.cfg_scale", c.schedule.cfg_scale);
    c.schedule = diffusion::make_schedule(steps, cfg_scale);
    if (map.has("flow.timesteps")) c.schedule.timesteps = map.get_floats("flow.timesteps");

    auto& rc = c.recon;
    rc.patch = static_cast<int>(map.get_int("recon.patch", rc.patch));
    rc.d = static_cast<int>(map.get_int("recon.d", rc.d));
    rc.blocks = static_cast<int>(map.get_int("recon.blocks", rc.blocks));
    rc.heads = static_cast<int>(map.get_int("recon.heads", rc.heads));
    rc.lambda_perceptual = map.get_float("recon.\xce\xbb_perceptual", rc.lambda_perceptual);
    rc.source_views = static_cast<int>(map.get_int("recon.source_views", rc.source_views));
    rc.timesteps = static_cast<int>(map.get_int("recon.timesteps", rc.timesteps));
    c.recon_static_iters = static_cast<int>(map.get_int("recon.static_iters", c.recon_static_iters));
    c.recon_dynamic_iters =
        static_cast<int>(map.get_int("recon.dynamic_iters", c.recon_dynamic_iters));
    c.recon_lr = map.get_float("recon.lr", c.recon_lr);
    c.recon_dynamic_lr = map.get_float("recon.dynamic_lr", c.recon_dynamic_lr);
    c.recon_warmup = static_cast<int>(map.get_int("recon.warmup", c.recon_warmup));
    c.recon_lambda_camera = map.get_float("recon.lambda_camera", c.recon_lambda_camera);
    c.recon_lambda_depth = map.get_float("recon.lambda_depth", c.recon_lambda_depth);
    return c;
}

ConfigMap config_to_map(const PipelineConfig& c) {
    ConfigMap m;
    m.set("seed", std::to_string(c.seed));
    m.set("paths.scenes", c.scenes_path);
    m.set("paths.out", c.out_path);

    const auto& sp = c.scene_params;
    m.set("scenes.count", std::to_string(sp.n_scenes));
    m.set("scenes.test_count", std::to_string(c.test_scenes));
    m.set("scenes.views", std::to_string(sp.views));
    m.set("scenes.frames", std::to_string(sp.frames));
    m.set("scenes.width", std::to_string(sp.width));
    m.set("scenes.height", std::to_string(sp.height));
    m.set("scenes.radius", format_float(sp.radius));
    m.set("scenes.elevation_deg", format_float(sp.elevation_deg));
    m.set("scenes.min_blobs", std::to_string(sp.min_blobs));
    m.set("scenes.max_blobs", std::to_string(sp.max_blobs));

    const auto& dn = c.denoiser;
    m.set("diffusion.blocks", std::to_string(dn.blocks));
    m.set("diffusion.d", std::to_string(dn.d));
    m.set("diffusion.heads", std::to_string(dn.heads));
    m.set("diffusion.arch", diffusion::arch_name(dn.arch));
    m.set("diffusion.compression_factor", std::to_string(dn.compression_factor));
    m.set("diffusion.T_max", std::to_string(dn.t_max));
    m.set("diffusion.patch", std::to_string(dn.patch));
    m.set("diffusion.codec_iters", std::to_string(c.codec_iters));
    m.set("diffusion.codec_lr", format_float(c.codec_lr));
    m.set("diffusion.iters", std::to_string(c.diffusion_iters));
    m.set("diffusion.lr", format_float(c.diffusion_lr));
    m.set("diffusion.warmup", std::to_string(c.diffusion_warmup));

    m.set("flow.steps", std::to_string(c.schedule.steps));
    m.set("flow.cfg_scale", format_float(c.schedule.cfg_scale));
    std::string ts;
    for (size_t i = 0; i < c.schedule.timesteps.size(); ++i) {
        if (i) ts += " ";
        ts += format_float(c.schedule.timesteps[i]);
    }
    m.set("flow.timesteps", ts);

    const auto& rc = c.recon;
    m.set("recon.patch", std::to_string(rc.patch));
    m.set("recon.d", std::to_string(rc.d));
    m.set("recon.blocks", std::to_string(rc.blocks));
    m.set("recon.heads", std::to_string(rc.heads));
    m.set("recon.\xce\xbb_perceptual", format_float(rc.lambda_perceptual));
    m.set("recon.source_views", std::to_string(rc.source_views));
    m.set("recon.timesteps", std::to_string(rc.timesteps));
    m.set("recon.static_iters", std::to_string(c.recon_static_iters));
    m.set("recon.dynamic_iters", std::to_string(c.recon_dynamic_iters));
    m.set("recon.lr", format_float(c.recon_lr));
    m.set("recon.dynamic_lr", format_float(c.recon_dynamic_lr));
    m.set("recon.warmup", std::to_string(c.recon_warmup));
    m.set("recon.lambda_camera", format_float(c.recon_lambda_camera));
    m.set("recon.lambda_depth", format_float(c.recon_lambda_depth));
    return m;
}

} // namespace t4dg::cli
