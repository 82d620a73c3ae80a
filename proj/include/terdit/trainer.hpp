#pragma once

#include "terdit/diffusion.hpp"
#include "terdit/dit.hpp"
#include "terdit/tensor.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <vector>

namespace terdit::train {

class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TrainConfig {
    int batch_size = 16;
    int64_t total_steps = 5000;
    double lr_initial = 5e-4;
    double lr_after_drop = 1e-4;
    int64_t lr_drop_step = 5000;  // == total_steps: constant schedule
    double ema_decay = 0.999;
    double smoothing = 0.995;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double adam_eps = 1e-8;
    double weight_decay = 0.0;
    bool clip_grad = true;
    double clip_norm = 1.0;
    uint64_t seed = 0;

    /// Throws ConfigError.
    void validate() const;
};

/// lr_initial before lr_drop_step, lr_after_drop from it on.
double lr_at(int64_t step, const TrainConfig& cfg);

/// factor * prev + (1 - factor) * raw
double smoothed_loss(double prev, double raw, double factor);

class LossSmoother {
public:
    explicit LossSmoother(double factor = 0.995) : factor_(factor) {}
    /// The first observation initializes the smoothed value.
    double update(double raw);
    std::optional<double> value() const { return value_; }

private:
    double factor_;
    std::optional<double> value_;
};

/// Procedural class-conditional images: each class is a colored shape with jittered
/// position and size on a dark background, values in [-1, 1].
class SyntheticDataset {
public:
    SyntheticDataset(int num_classes, uint64_t seed, int image_size = 16, int channels = 3);

    int num_classes() const { return num_classes_; }
    int image_size() const { return size_; }
    /// Deterministic in (class, index, seed).
    Image sample(int label, uint64_t index) const;

private:
    int num_classes_;
    uint64_t seed_;
    int size_;
    int channels_;
};

struct Batch {
    std::vector<Image> images;
    std::vector<int> labels;
};

struct TrainState {
    dit::Model<float> model;       // master weights
    std::vector<Mat<float>> m, v;  // optimizer moments, parameter order
    std::vector<Mat<float>> ema;   // EMA shadow, parameter order
    int64_t step = 0;
    Rng rng;
    LossSmoother smoother;
};

/// Model initialized from the seed; moments zero; EMA equal to the initial masters.
TrainState make_train_state(const dit::ModelConfig& model_cfg, const TrainConfig& cfg);

/// Random labels and sample indices drawn from the state's generator.
Batch draw_batch(TrainState& state, const SyntheticDataset& data, int batch_size);

struct StepResult {
    double loss = 0.0;
    double smoothed = 0.0;
    double grad_norm = 0.0;
    double lr = 0.0;
};

/// One quantization-aware step: quantized forward, straight-through backward,
/// AdamW update of the masters, alpha reprojection, EMA update. Throws DivergenceError
/// on a non-finite loss.
StepResult qat_step(TrainState& state, const Batch& batch, const TrainConfig& cfg,
                    const diffusion::NoiseSchedule& schedule);

/// Copy of the model carrying the EMA weights.
dit::Model<float> ema_model(const TrainState& state);

inline constexpr double kAlphaFloor = 1e-6;

struct RunHooks {
    std::ostream* loss_log = nullptr;  // "step\traw\tsmoothed" per step
    int64_t ckpt_every = 0;
    std::function<void(const TrainState&)> on_checkpoint;
    std::function<void(int64_t step, const StepResult&)> on_step;
};

/// Trains until state.step == until_step.
void run_training(TrainState& state, const TrainConfig& cfg, const SyntheticDataset& data, int64_t until_step,
                  const RunHooks& hooks = {});

}  // namespace terdit::train
