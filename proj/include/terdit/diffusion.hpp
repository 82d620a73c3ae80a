#pragma once

#include "terdit/dit.hpp"
#include "terdit/tensor.hpp"

#include <filesystem>
#include <functional>
#include <span>
#include <vector>

namespace terdit::diffusion {

/// Linear-beta DDPM schedule.
class NoiseSchedule {
public:
    explicit NoiseSchedule(int steps = 1000, double beta_start = 1e-4, double beta_end = 2e-2);

    int steps() const { return static_cast<int>(betas_.size()); }
    double beta(int t) const { return betas_.at(check(t)); }
    double alpha(int t) const { return 1.0 - beta(t); }
    double alpha_bar(int t) const { return alpha_bar_.at(check(t)); }
    const std::vector<double>& betas() const { return betas_; }
    const std::vector<double>& alpha_bars() const { return alpha_bar_; }

private:
    size_t check(int t) const;

    std::vector<double> betas_;
    std::vector<double> alpha_bar_;
};

/// sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * noise
template <typename T>
ImageT<T> q_sample(const NoiseSchedule& s, const ImageT<T>& x0, int t, const ImageT<T>& noise);

/// eps_u + s * (eps_c - eps_u), evaluated as s * eps_c + (1 - s) * eps_u.
double cfg_combine(double eps_cond, double eps_uncond, double s);
template <typename T>
ImageT<T> cfg_combine(const ImageT<T>& eps_cond, const ImageT<T>& eps_uncond, double s);

Image standard_normal_image(int channels, int height, int width, Rng& rng);

/// Batched noise prediction for (x_t, conditioning) pairs.
using NoisePredictor = std::function<std::vector<Image>(std::span<const Image>, std::span<const Conditioning>)>;

NoisePredictor model_predictor(const dit::Model<float>& model);

struct TrainingExample {
    Image x_t;
    Image noise;
    Conditioning cond;
};

/// Draws t ~ U[0, T), drop ~ Bernoulli(drop_prob), noise ~ N(0, I), in that order.
TrainingExample draw_training_example(const NoiseSchedule& s, const Image& x0, int label, double drop_prob, Rng& rng);

/// Mean squared error between the predicted and the true noise for one drawn example.
double training_loss(const NoisePredictor& predict, const NoiseSchedule& s, const Image& x0, int label,
                     double drop_prob, Rng& rng);

struct SamplerOptions {
    int steps = 250;
    double cfg_scale = 4.0;
    bool guidance = true;  // false: conditional branch only
};

/// Timesteps visited by the strided sampler, in descending order.
std::vector<int> sampling_timesteps(int total, int steps);

/// Ancestral DDPM over a strided subset of the schedule, one trajectory per label.
/// Randomness: initial noise for every trajectory, then per step the noise for every trajectory.
std::vector<Image> ddpm_sample(const NoisePredictor& predict, const NoiseSchedule& s, std::span<const int> labels,
                               int channels, int height, int width, const SamplerOptions& opt, Rng& rng);

/// Binary P6, values mapped from [-1, 1] to [0, 255] with clamping.
void write_ppm(const std::filesystem::path& path, const Image& img);
std::vector<uint8_t> encode_ppm(const Image& img);

}  // namespace terdit::diffusion
