#include "terdit/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>

namespace terdit::diffusion {

NoiseSchedule::NoiseSchedule(int steps, double beta_start, double beta_end) {
    require(steps > 0, "noise schedule needs at least one step");
    require(beta_start > 0 && beta_end < 1 && beta_start <= beta_end, "betas must satisfy 0 < start <= end < 1");
    betas_.resize(steps);
    alpha_bar_.resize(steps);
    double prod = 1.0;
    for (int t = 0; t < steps; ++t) {
        betas_[t] = steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * t / (steps - 1);
        prod *= 1.0 - betas_[t];
        alpha_bar_[t] = prod;
    }
}

size_t NoiseSchedule::check(int t) const {
    require(t >= 0 && t < steps(), "timestep " + std::to_string(t) + " outside [0, " + std::to_string(steps()) + ")");
    return static_cast<size_t>(t);
}

template <typename T>
ImageT<T> q_sample(const NoiseSchedule& s, const ImageT<T>& x0, int t, const ImageT<T>& noise) {
    require(x0.channels == noise.channels && x0.height == noise.height && x0.width == noise.width,
            "q_sample: image and noise shapes differ");
    const double ab = s.alpha_bar(t);
    const T a = static_cast<T>(std::sqrt(ab));
    const T b = static_cast<T>(std::sqrt(1.0 - ab));
    ImageT<T> out(x0.channels, x0.height, x0.width);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = a * x0.data[i] + b * noise.data[i];
    return out;
}

double cfg_combine(double eps_cond, double eps_uncond, double s) { return s * eps_cond + (1.0 - s) * eps_uncond; }

template <typename T>
ImageT<T> cfg_combine(const ImageT<T>& c, const ImageT<T>& u, double s) {
    require(c.channels == u.channels && c.height == u.height && c.width == u.width, "cfg_combine: shape mismatch");
    const T sc = static_cast<T>(s);
    const T su = static_cast<T>(1.0 - s);
    ImageT<T> out(c.channels, c.height, c.width);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = sc * c.data[i] + su * u.data[i];
    return out;
}

Image standard_normal_image(int channels, int height, int width, Rng& rng) {
    Image img(channels, height, width);
    std::normal_distribution<double> n;
    for (auto& v : img.data) v = static_cast<float>(n(rng));
    return img;
}

NoisePredictor model_predictor(const dit::Model<float>& model) {
    return [&model](std::span<const Image> x, std::span<const Conditioning> c) { return model.predict(x, c); };
}

TrainingExample draw_training_example(const NoiseSchedule& s, const Image& x0, int label, double drop_prob, Rng& rng) {
    require(drop_prob >= 0.0 && drop_prob <= 1.0, "drop probability must lie in [0, 1]");
    std::uniform_int_distribution<int> step(0, s.steps() - 1);
    const int t = step(rng);
    const bool drop = std::bernoulli_distribution(drop_prob)(rng);
    Image noise = standard_normal_image(x0.channels, x0.height, x0.width, rng);
    Image xt = q_sample(s, x0, t, noise);
    return {std::move(xt), std::move(noise), Conditioning{t, label, drop}};
}

double training_loss(const NoisePredictor& predict, const NoiseSchedule& s, const Image& x0, int label,
                     double drop_prob, Rng& rng) {
    const auto ex = draw_training_example(s, x0, label, drop_prob, rng);
    const auto out = predict(std::span<const Image>(&ex.x_t, 1), std::span<const Conditioning>(&ex.cond, 1));
    require(out.size() == 1 && out[0].data.size() == ex.noise.data.size(), "predictor returned the wrong shape");
    double acc = 0.0;
    for (size_t i = 0; i < ex.noise.data.size(); ++i) {
        const double d = static_cast<double>(out[0].data[i]) - ex.noise.data[i];
        acc += d * d;
    }
    return acc / static_cast<double>(ex.noise.data.size());
}

std::vector<int> sampling_timesteps(int total, int steps) {
    require(steps >= 1 && steps <= total, "sampling steps must lie in [1, T]");
    std::vector<int> ts(steps);
    for (int i = 0; i < steps; ++i) ts[i] = static_cast<int>(static_cast<int64_t>(i) * total / steps);
    std::reverse(ts.begin(), ts.end());
    return ts;
}

std::vector<Image> ddpm_sample(const NoisePredictor& predict, const NoiseSchedule& s, std::span<const int> labels,
                               int channels, int height, int width, const SamplerOptions& opt, Rng& rng) {
    require(opt.cfg_scale >= 1.0 && std::isfinite(opt.cfg_scale), "cfg scale must be >= 1");
    require(!labels.empty(), "ddpm_sample: no labels");
    const auto ts = sampling_timesteps(s.steps(), opt.steps);
    const size_t n = labels.size();

    std::vector<Image> x;
    x.reserve(n);
    for (size_t i = 0; i < n; ++i) x.push_back(standard_normal_image(channels, height, width, rng));

    std::vector<Conditioning> cond(n), uncond(n);
    for (size_t k = 0; k < ts.size(); ++k) {
        const int t = ts[k];
        const double ab = s.alpha_bar(t);
        const double ab_prev = k + 1 < ts.size() ? s.alpha_bar(ts[k + 1]) : 1.0;
        const double beta = 1.0 - ab / ab_prev;

        for (size_t i = 0; i < n; ++i) {
            cond[i] = {t, labels[i], false};
            uncond[i] = {t, labels[i], true};
        }
        std::vector<Image> eps = predict(x, cond);
        require(eps.size() == n, "predictor returned the wrong batch size");
        if (opt.guidance) {
            const std::vector<Image> eps_u = predict(x, uncond);
            require(eps_u.size() == n, "predictor returned the wrong batch size");
            for (size_t i = 0; i < n; ++i) eps[i] = cfg_combine(eps[i], eps_u[i], opt.cfg_scale);
        }

        const double c0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
        const double ct = std::sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab);
        const double sigma = std::sqrt(beta);
        const bool last = k + 1 == ts.size();
        for (size_t i = 0; i < n; ++i) {
            require(eps[i].data.size() == x[i].data.size(), "predictor returned the wrong image shape");
            Image next(channels, height, width);
            for (size_t j = 0; j < next.data.size(); ++j) {
                const double xt = x[i].data[j];
                double x0 = (xt - std::sqrt(1.0 - ab) * eps[i].data[j]) / std::sqrt(ab);
                x0 = std::clamp(x0, -1.0, 1.0);
                next.data[j] = static_cast<float>(last ? x0 : c0 * x0 + ct * xt);
            }
            x[i] = std::move(next);
        }
        if (!last) {
            std::normal_distribution<double> nd;
            for (size_t i = 0; i < n; ++i)
                for (auto& v : x[i].data) v = static_cast<float>(v + sigma * nd(rng));
        }
    }
    return x;
}

std::vector<uint8_t> encode_ppm(const Image& img) {
    require(img.channels == 3 || img.channels == 1, "PPM output needs 1 or 3 channels");
    const std::string header = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    std::vector<uint8_t> out(header.begin(), header.end());
    for (int y = 0; y < img.height; ++y)
        for (int xx = 0; xx < img.width; ++xx)
            for (int c = 0; c < 3; ++c) {
                const double v = img.at(img.channels == 3 ? c : 0, y, xx);
                const double m = std::clamp((std::isfinite(v) ? v : 0.0) * 0.5 + 0.5, 0.0, 1.0);
                out.push_back(static_cast<uint8_t>(std::lround(m * 255.0)));
            }
    return out;
}

void write_ppm(const std::filesystem::path& path, const Image& img) {
    const auto bytes = encode_ppm(img);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("failed writing '" + path.string() + "'");
}

template ImageT<float> q_sample(const NoiseSchedule&, const ImageT<float>&, int, const ImageT<float>&);
template ImageT<double> q_sample(const NoiseSchedule&, const ImageT<double>&, int, const ImageT<double>&);
template ImageT<float> cfg_combine(const ImageT<float>&, const ImageT<float>&, double);
template ImageT<double> cfg_combine(const ImageT<double>&, const ImageT<double>&, double);

}  // namespace terdit::diffusion
