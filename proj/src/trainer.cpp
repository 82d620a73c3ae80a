#include "terdit/trainer.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <iomanip>

namespace terdit::train {

void TrainConfig::validate() const {
    auto fail = [](const std::string& m) { throw dit::ConfigError("invalid training config: " + m); };
    if (batch_size <= 0) fail("batch_size must be positive");
    if (total_steps < 0) fail("total_steps must be non-negative");
    if (!(lr_initial > 0.0) || !(lr_after_drop > 0.0)) fail("learning rates must be positive");
    if (lr_drop_step < 0 || lr_drop_step > total_steps) fail("lr_drop_step must lie in [0, total_steps]");
    if (!(ema_decay >= 0.0 && ema_decay <= 1.0)) fail("ema_decay must lie in [0, 1]");
    if (!(smoothing >= 0.0 && smoothing < 1.0)) fail("smoothing factor must lie in [0, 1)");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) fail("betas must lie in [0, 1)");
    if (!(adam_eps > 0.0) || !(weight_decay >= 0.0)) fail("adam_eps must be positive, weight_decay non-negative");
    if (clip_grad && !(clip_norm > 0.0)) fail("clip_norm must be positive");
}

double lr_at(int64_t step, const TrainConfig& cfg) { return step < cfg.lr_drop_step ? cfg.lr_initial : cfg.lr_after_drop; }

double smoothed_loss(double prev, double raw, double factor) { return factor * prev + (1.0 - factor) * raw; }

double LossSmoother::update(double raw) {
    value_ = value_ ? smoothed_loss(*value_, raw, factor_) : raw;
    return *value_;
}

// ---- synthetic data ------------------------------------------------------------

namespace {

std::array<double, 3> hue_rgb(double h) {
    const double k[3] = {5.0, 3.0, 1.0};
    std::array<double, 3> rgb{};
    for (int i = 0; i < 3; ++i) {
        const double x = std::fmod(k[i] + h * 6.0, 6.0);
        rgb[i] = 1.0 - std::max(0.0, std::min({x, 4.0 - x, 1.0}));
    }
    return rgb;
}

bool inside(int shape, double dx, double dy, double r) {
    const double ax = std::abs(dx), ay = std::abs(dy);
    const double d = std::hypot(dx, dy);
    switch (shape) {
        case 0: return d <= r;
        case 1: return std::max(ax, ay) <= 0.85 * r;
        case 2: return dy >= -r && dy <= r && ax <= 0.5 * (dy + r);
        case 3: return (ax <= r / 3 && ay <= r) || (ay <= r / 3 && ax <= r);
        case 4: return d >= 0.55 * r && d <= r;
        case 5: return ax + ay <= r;
        case 6: return ay <= r / 3 && ax <= 1.2 * r;
        default: return std::abs(ax - ay) <= r / 3 && std::max(ax, ay) <= r;
    }
}

}  // namespace

SyntheticDataset::SyntheticDataset(int num_classes, uint64_t seed, int image_size, int channels)
    : num_classes_(num_classes), seed_(seed), size_(image_size), channels_(channels) {
    require(num_classes > 0, "dataset needs at least one class");
    require(image_size >= 4, "dataset images must be at least 4 pixels wide");
    require(channels == 3, "dataset renders RGB images");
}

Image SyntheticDataset::sample(int label, uint64_t index) const {
    require(label >= 0 && label < num_classes_, "class label " + std::to_string(label) + " out of range");
    Rng rng(mix_seed(mix_seed(seed_, static_cast<uint64_t>(label)), index));
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const double n = size_;
    const double cx = (n - 1) / 2 + u(rng) * n / 8;
    const double cy = (n - 1) / 2 + u(rng) * n / 8;
    const double r = 0.3 * n * (1.0 + 0.2 * u(rng));
    const auto rgb = hue_rgb(static_cast<double>(label) / num_classes_);
    const int shape = label % 8;
    Image img(channels_, size_, size_);
    for (int y = 0; y < size_; ++y)
        for (int x = 0; x < size_; ++x) {
            const bool fg = inside(shape, x - cx, y - cy, r);
            for (int c = 0; c < channels_; ++c) {
                const double v = fg ? 2.0 * rgb[c] - 1.0 : -0.8 + 0.05 * u(rng);
                img.at(c, y, x) = static_cast<float>(std::clamp(v, -1.0, 1.0));
            }
        }
    return img;
}

// ---- training ------------------------------------------------------------------

TrainState make_train_state(const dit::ModelConfig& model_cfg, const TrainConfig& cfg) {
    cfg.validate();
    Rng init_rng(mix_seed(cfg.seed, 1));
    TrainState s{dit::Model<float>(model_cfg, init_rng), {}, {}, {}, 0, Rng(mix_seed(cfg.seed, 2)),
                 LossSmoother(cfg.smoothing)};
    s.model.for_each_param([&](const std::string&, dit::ParamRole, const dit::Param<float>& p) {
        s.m.push_back(Mat<float>::Zero(p.value.rows(), p.value.cols()));
        s.v.push_back(Mat<float>::Zero(p.value.rows(), p.value.cols()));
        s.ema.push_back(p.value);
    });
    return s;
}

Batch draw_batch(TrainState& state, const SyntheticDataset& data, int batch_size) {
    Batch b;
    std::uniform_int_distribution<int> cls(0, data.num_classes() - 1);
    for (int i = 0; i < batch_size; ++i) {
        const int label = cls(state.rng);
        const uint64_t index = state.rng();
        b.labels.push_back(label);
        b.images.push_back(data.sample(label, index));
    }
    return b;
}

StepResult qat_step(TrainState& state, const Batch& batch, const TrainConfig& cfg,
                    const diffusion::NoiseSchedule& schedule) {
    auto& model = state.model;
    require(!model.is_packed(), "cannot train a packed model");
    require(!batch.images.empty() && batch.images.size() == batch.labels.size(), "qat_step: malformed batch");
    const auto& mc = model.config();
    const int n = mc.tokens();
    const int pd = mc.patch_dim();
    const auto bsz = static_cast<Eigen::Index>(batch.images.size());

    Mat<float> tokens(bsz * n, pd), target(bsz * n, pd);
    std::vector<Conditioning> cond(bsz);
    for (Eigen::Index b = 0; b < bsz; ++b) {
        auto ex = diffusion::draw_training_example(schedule, batch.images[b], batch.labels[b], mc.class_dropout_prob,
                                                   state.rng);
        tokens.middleRows(b * n, n) = dit::patchify(ex.x_t, mc.patch_size);
        target.middleRows(b * n, n) = dit::patchify(ex.noise, mc.patch_size);
        cond[b] = ex.cond;
    }

    dit::ForwardCache<float> cache;
    const Mat<float> pred = model.forward(tokens, cond, &cache);
    const Mat<float> diff = pred - target;
    const double loss = diff.cast<double>().squaredNorm() / static_cast<double>(diff.size());
    if (!std::isfinite(loss))
        throw DivergenceError("non-finite loss at step " + std::to_string(state.step + 1));

    model.zero_grad();
    model.backward(cache, Mat<float>(diff * (2.0f / static_cast<float>(diff.size()))));

    double sq = 0.0;
    model.for_each_param(
        [&](const std::string&, dit::ParamRole, const dit::Param<float>& p) { sq += p.grad.cast<double>().squaredNorm(); });
    const double gnorm = std::sqrt(sq);
    if (!std::isfinite(gnorm)) throw DivergenceError("non-finite gradient at step " + std::to_string(state.step + 1));
    const float gscale = cfg.clip_grad && gnorm > cfg.clip_norm ? static_cast<float>(cfg.clip_norm / gnorm) : 1.0f;

    const int64_t t = state.step + 1;
    const double lr = lr_at(state.step, cfg);
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    const auto b1 = static_cast<float>(cfg.beta1);
    const auto b2 = static_cast<float>(cfg.beta2);
    const auto step_size = static_cast<float>(lr / bc1);
    const auto inv_bc2 = static_cast<float>(1.0 / bc2);
    const auto eps = static_cast<float>(cfg.adam_eps);
    const auto ema = static_cast<float>(cfg.ema_decay);
    size_t i = 0;
    model.for_each_param([&](const std::string&, dit::ParamRole role, dit::Param<float>& p) {
        auto& m = state.m[i];
        auto& v = state.v[i];
        const auto g = (p.grad.array() * gscale).eval();
        m.array() = b1 * m.array() + (1.0f - b1) * g;
        v.array() = b2 * v.array() + (1.0f - b2) * g.square();
        const bool decay = cfg.weight_decay > 0 && (role == dit::ParamRole::Weight || role == dit::ParamRole::TernaryWeight);
        if (decay) p.value *= static_cast<float>(1.0 - lr * cfg.weight_decay);
        p.value.array() -= step_size * m.array() / ((v.array() * inv_bc2).sqrt() + eps);
        if (role == dit::ParamRole::Alpha) p.value = p.value.cwiseMax(static_cast<float>(kAlphaFloor));
        state.ema[i].array() = ema * state.ema[i].array() + (1.0f - ema) * p.value.array();
        ++i;
    });
    state.step = t;
    return {loss, state.smoother.update(loss), gnorm, lr};
}

dit::Model<float> ema_model(const TrainState& state) {
    dit::Model<float> m = state.model;
    size_t i = 0;
    m.for_each_param([&](const std::string&, dit::ParamRole, dit::Param<float>& p) { p.value = state.ema[i++]; });
    return m;
}

void run_training(TrainState& state, const TrainConfig& cfg, const SyntheticDataset& data, int64_t until_step,
                  const RunHooks& hooks) {
    cfg.validate();
    const diffusion::NoiseSchedule schedule(state.model.config().num_timesteps);
    while (state.step < until_step) {
        const Batch batch = draw_batch(state, data, cfg.batch_size);
        const StepResult r = qat_step(state, batch, cfg, schedule);
        if (hooks.loss_log) {
            *hooks.loss_log << state.step << '\t' << std::setprecision(8) << r.loss << '\t' << r.smoothed << '\n';
        }
        if (hooks.on_step) hooks.on_step(state.step, r);
        if (hooks.ckpt_every > 0 && hooks.on_checkpoint && state.step % hooks.ckpt_every == 0) hooks.on_checkpoint(state);
    }
    if (hooks.loss_log) hooks.loss_log->flush();
}

}  // namespace terdit::train
