#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace terdit::dit {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct ModelConfig {
    int image_size = 16;
    int channels = 3;
    int patch_size = 2;
    int hidden_dim = 128;
    int depth = 4;
    int num_heads = 4;
    int num_classes = 8;
    bool adaln_rms = true;
    bool quantize_blocks = true;
    double rms_eps = 1e-5;
    double class_dropout_prob = 0.1;
    // Diffusion horizon the timestep embedding accepts; fixed by the noise schedule, not serialized.
    int num_timesteps = 1000;

    int grid() const { return image_size / patch_size; }
    int tokens() const { return grid() * grid(); }
    int patch_dim() const { return patch_size * patch_size * channels; }
    int head_dim() const { return hidden_dim / num_heads; }
    int ffn_dim() const { return 4 * hidden_dim; }
    int freq_dim() const { return hidden_dim; }

    /// Throws ConfigError describing the first violated constraint.
    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

/// key=value lines, one per field, in a fixed order.
std::string to_config_text(const ModelConfig& cfg);

/// Accepts '#' comments and blank lines; unknown keys and malformed values are errors.
/// Missing keys keep their defaults. The result is validated.
ModelConfig parse_config_text(const std::string& text);

ModelConfig load_config_file(const std::filesystem::path& path);

enum class ParamRole {
    Weight,         // full-precision linear weight
    TernaryWeight,  // master weight of a ternary linear
    Alpha,          // learnable scale of a ternary linear
    Bias,
    Gain,           // RMS norm gain
    Embedding,      // lookup tables and positional embeddings
};

struct ParamSpec {
    std::string name;
    std::vector<uint64_t> shape;
    ParamRole role;

    uint64_t numel() const {
        uint64_t n = 1;
        for (auto d : shape) n *= d;
        return n;
    }
};

/// Every parameter tensor of the model in canonical order, without allocating it.
std::vector<ParamSpec> parameter_specs(const ModelConfig& cfg);

}  // namespace terdit::dit
