#include "terdit/ternary_quant.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace terdit::quant {

TernaryTensor::TernaryTensor(size_t rows, size_t cols, std::vector<int8_t> codes, double alpha)
    : rows_(rows), cols_(cols), codes_(std::move(codes)), alpha_(alpha) {
    require(codes_.size() == rows_ * cols_, "ternary tensor: code count does not match shape");
    require(std::isfinite(alpha_) && alpha_ > 0.0, "ternary tensor: alpha must be positive and finite");
    for (int8_t c : codes_) require(c >= -1 && c <= 1, "ternary tensor: code outside {-1, 0, +1}");
}

template <typename T>
double absmean_gamma(const Mat<T>& w) {
    require(w.size() > 0, "absmean_gamma: empty matrix");
    double sum = 0.0;
    for (Eigen::Index i = 0; i < w.size(); ++i) {
        const double v = static_cast<double>(w.data()[i]);
        require(std::isfinite(v), "absmean_gamma: non-finite entry");
        sum += std::abs(v);
    }
    return sum / static_cast<double>(w.size());
}

double round_clip(double x, double a, double b, Rounding rounding) {
    const double r = rounding == Rounding::HalfAwayFromZero ? std::round(x) : std::nearbyint(x);
    return std::clamp(r, a, b);
}

template <typename T>
TernaryTensor ternarize(const Mat<T>& w, double alpha, const QuantConfig& cfg) {
    require(cfg.epsilon > 0.0, "ternarize: epsilon must be positive");
    const double denom = absmean_gamma(w) + cfg.epsilon;
    std::vector<int8_t> codes(static_cast<size_t>(w.size()));
    for (Eigen::Index i = 0; i < w.size(); ++i) {
        const double ratio = static_cast<double>(w.data()[i]) / denom;
        codes[static_cast<size_t>(i)] = static_cast<int8_t>(round_clip(ratio, -1.0, 1.0, cfg.rounding));
    }
    return TernaryTensor(static_cast<size_t>(w.rows()), static_cast<size_t>(w.cols()), std::move(codes), alpha);
}

template <typename T>
double alpha_gradient(const Mat<T>& grad_wtilde, const TernaryTensor& t) {
    require(static_cast<size_t>(grad_wtilde.rows()) == t.rows() && static_cast<size_t>(grad_wtilde.cols()) == t.cols(),
            "ste_backward: gradient shape does not match codes");
    const auto codes = t.codes();
    double g = 0.0;
    for (size_t i = 0; i < codes.size(); ++i) {
        if (codes[i] > 0) {
            g += static_cast<double>(grad_wtilde.data()[i]);
        } else if (codes[i] < 0) {
            g -= static_cast<double>(grad_wtilde.data()[i]);
        }
    }
    return g;
}

template <typename T>
SteGradients<T> ste_backward(const Mat<T>& grad_wtilde, const TernaryTensor& t) {
    SteGradients<T> out;
    out.grad_alpha = alpha_gradient(grad_wtilde, t);
    out.grad_w = grad_wtilde;
    return out;
}

double init_alpha(double sigma, Rng& rng) {
    require(std::isfinite(sigma) && sigma > 0.0, "init_alpha: sigma must be positive");
    std::uniform_real_distribution<double> u(0.5 * sigma, 1.5 * sigma);
    return u(rng);
}

template double absmean_gamma<float>(const Mat<float>&);
template double absmean_gamma<double>(const Mat<double>&);
template TernaryTensor ternarize<float>(const Mat<float>&, double, const QuantConfig&);
template TernaryTensor ternarize<double>(const Mat<double>&, double, const QuantConfig&);
template SteGradients<float> ste_backward<float>(const Mat<float>&, const TernaryTensor&);
template SteGradients<double> ste_backward<double>(const Mat<double>&, const TernaryTensor&);
template double alpha_gradient<float>(const Mat<float>&, const TernaryTensor&);
template double alpha_gradient<double>(const Mat<double>&, const TernaryTensor&);

}  // namespace terdit::quant
