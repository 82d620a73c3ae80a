#pragma once

#include "terdit/checkpoint.hpp"
#include "terdit/diffusion.hpp"
#include "terdit/dit.hpp"

#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace terdit::diag {

/// Box-plot statistics.
struct Stats {
    double min = 0.0;
    double q1 = 0.0;
    double median = 0.0;
    double q3 = 0.0;
    double max = 0.0;
    double mean_square = 0.0;
    size_t count = 0;

    double max_abs() const { return std::max(std::abs(min), std::abs(max)); }
};

/// Quartiles by linear interpolation between order statistics. Throws DomainError on empty input.
Stats describe(std::span<const double> values);
Stats describe(std::span<const float> values);

// ---- pilot -------------------------------------------------------------------

struct PilotOptions {
    int in_features = 1024;
    int out_features = 9216;
    int rows = 512;
    /// Scale of the ternary variant. NaN selects the layer's alpha initialization rule.
    double alpha = 1.0;
    double rms_eps = 1e-5;
};

struct PilotVariant {
    std::string name;
    Stats stats;
    double max_row_ms_deviation = 0.0;  // max over rows of |mean-square - gain^2| (RMS variant only)
    bool rows_identical = false;
};

struct PilotReport {
    uint64_t seed = 0;
    double alpha = 0.0;
    PilotVariant ternary;
    PilotVariant ternary_rms;
    PilotVariant full_precision;

    double activation_ratio() const { return ternary.stats.max_abs() / full_precision.stats.max_abs(); }
    /// max|ternary| > max|full precision| > RMS deviation from gain^2
    bool ordering_holds() const;
};

/// One shared N(0, 1/fan_in) draw, fed an all-ones input: full precision, ternary
/// (packed, unpacked on the fly) and ternary followed by an RMS norm with unit gain.
PilotReport activation_pilot(uint64_t seed, const PilotOptions& opt = {});

std::string format_pilot(const PilotReport& r);
/// Header plus one "variant,min,q1,median,q3,max,mean_square" row per variant.
std::string pilot_csv(const PilotReport& r);

// ---- activation capture ------------------------------------------------------

struct Capture {
    int block = 0;
    dit::ModSite site = dit::ModSite::ScaleMlp;
    int timestep = 0;
    std::vector<double> values;  // one conditional sample, hidden_dim entries
    Stats stats;
};

/// Wraps a model so every conditional evaluation records the requested chunk of one
/// block's modulation vector into `sink` (first sample of the batch). Outputs are untouched.
diffusion::NoisePredictor capturing_predictor(const dit::Model<float>& model, int block, dit::ModSite site,
                                              std::vector<std::vector<double>>& sink);

/// Runs the first guided denoising step from x_T ~ N(0, I) (seeded) and returns the
/// statistics of `site` in block `block` for the conditional branch.
Capture activation_capture(const dit::Model<float>& model, int block, std::string_view site, int timestep, int label,
                           double cfg_scale, uint64_t seed);

/// Upper bound on a chunk's mean-square when the modulation is RMS-normalized:
/// the whole 6*hidden vector has mean-square <= max(gain)^2, so one sixth of it holds at most 6x that.
double capture_mean_square_bound(const dit::Model<float>& model, int block);

// ---- sizes -------------------------------------------------------------------

struct TensorSize {
    std::string name;
    uint64_t params = 0;
    bool ternary = false;
    uint64_t fp_bytes = 0;
    uint64_t packed_bytes = 0;
};

struct SizeReport {
    uint64_t total_params = 0;
    uint64_t ternary_params = 0;
    uint64_t fp_bytes = 0;      // 4 bytes for every parameter, alphas included
    uint64_t packed_bytes = 0;  // ternary: ceil(P/4) + alpha + pad byte; alphas folded in; rest 4 bytes
    std::vector<TensorSize> tensors;

    double ratio() const { return static_cast<double>(fp_bytes) / static_cast<double>(packed_bytes); }
};

/// Analytic, from the config alone.
SizeReport size_report(const dit::ModelConfig& cfg);
/// Analytic report for the checkpoint's config.
SizeReport size_report(const pack::Checkpoint& ckpt);

/// DiT-XL/2 geometry on a 32x32x4 latent with 1000 classes.
dit::ModelConfig dit_xl2_config();

std::string format_size_report(const SizeReport& r, bool per_tensor);

// ---- working set and timing --------------------------------------------------

struct WorkingSet {
    uint64_t weights_dense = 0;   // every weight as f32
    uint64_t weights_packed = 0;  // packed storage
    uint64_t unpack_scratch = 0;  // one unpacked weight panel
    uint64_t activations = 0;     // peak live activations of one block
    uint64_t dense_total() const { return weights_dense + activations; }
    uint64_t packed_total() const { return weights_packed + unpack_scratch + activations; }
};

WorkingSet working_set_estimate(const dit::ModelConfig& cfg, int batch);

struct BenchResult {
    int batch = 0;
    int reps = 0;
    double dense_seconds = 0.0;   // mean per forward
    double packed_seconds = 0.0;  // mean per forward
    bool outputs_equal = false;
    WorkingSet working_set;
};

/// Times inference forwards of the quantized master and its packed form on the same inputs.
BenchResult bench_forward(const dit::Model<float>& dense, const dit::Model<float>& packed, int batch, int reps,
                          uint64_t seed);

std::string format_bytes(uint64_t bytes);

}  // namespace terdit::diag
