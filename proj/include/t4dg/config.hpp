// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "t4dg/diffusion.hpp"
#include "t4dg/recon.hpp"
#include "t4dg/scenes.hpp"

namespace t4dg::cli {

// Flat `key = value` text. Keys are dotted (`module.field`); `#` starts a
// comment; blank lines separate sections. Later duplicates overwrite.
class ConfigMap {
public:
    void set(const std::string& key, const std::string& value);
    bool has(const std::string& key) const;
    const std::string& get(const std::string& key) const; // throws ConfigError

    std::string get_string(const std::string& key, const std::string& fallback) const;
    int64_t get_int(const std::string& key, int64_t fallback) const;
    float get_float(const std::string& key, float fallback) const;
    std::vector<float> get_floats(const std::string& key) const; // space-separated

    const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

private:
    std::vector<std::pair<std::string, std::string>> entries_; // insertion order
};

ConfigMap parse_config_text(const std::string& text); // throws ConfigError
ConfigMap parse_config_file(const std::string& path); // throws IoError / ConfigError

// One `key = value` line per entry, a blank line wherever the key prefix
// (text before the first '.') changes.
std::string serialize_config(const ConfigMap& map);

// Every tunable of the end-to-end pipeline in one place. The serialized form
// is written verbatim next to each run's outputs.
struct PipelineConfig {
    uint64_t seed = 7;
    std::string scenes_path; // paths.scenes: reuse an existing scene archive
    std::string out_path;    // paths.out: default output directory

    scenes::DatasetParams scene_params; // scenes.* (seed comes from `seed`)
    int test_scenes = 2;                // scenes.test_count, held out of training

    diffusion::DenoiserConfig denoiser; // diffusion.*
    int codec_iters = 300;
    float codec_lr = 3e-3f;
    int diffusion_iters = 800;
    float diffusion_lr = 3e-4f;
    int diffusion_warmup = 100;

    diffusion::FlowSchedule schedule; // flow.*

    recon::ReconConfig recon; // recon.*
    int recon_static_iters = 4000;
    int recon_dynamic_iters = 500;
    float recon_lr = 3e-3f;
    float recon_dynamic_lr = 1e-3f;
    int recon_warmup = 50;
    float recon_lambda_camera = 1.0f;
    float recon_lambda_depth = 16.0f;

    void validate() const; // throws ConfigError
};

PipelineConfig default_pipeline_config();

// Unknown keys throw ConfigError; absent keys keep the defaults. The two
// directions round-trip: config_from_map(config_to_map(c)) == c.
PipelineConfig config_from_map(const ConfigMap& map);
ConfigMap config_to_map(const PipelineConfig& config);

// Shortest decimal text that parses back to exactly the same float.
std::string format_float(float value);

} // namespace t4dg::cli
