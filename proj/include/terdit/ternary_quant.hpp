#pragma once

#include "terdit/tensor.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace terdit::quant {

enum class Rounding {
    HalfAwayFromZero,
    HalfToEven,
};

struct QuantConfig {
    double epsilon = 1e-6;
    Rounding rounding = Rounding::HalfAwayFromZero;
};

/// Trit codes in {-1, 0, +1} plus the per-matrix scale; the effective weight is alpha * codes.
class TernaryTensor {
public:
    TernaryTensor(size_t rows, size_t cols, std::vector<int8_t> codes, double alpha);

    size_t rows() const { return rows_; }
    size_t cols() const { return cols_; }
    double alpha() const { return alpha_; }
    std::span<const int8_t> codes() const { return codes_; }
    int8_t code(size_t r, size_t c) const { return codes_[r * cols_ + c]; }

    template <typename T>
    Mat<T> effective() const {
        Mat<T> w(rows_, cols_);
        const T a = static_cast<T>(alpha_);
        for (size_t i = 0; i < codes_.size(); ++i) w.data()[i] = a * static_cast<T>(codes_[i]);
        return w;
    }

private:
    size_t rows_;
    size_t cols_;
    std::vector<int8_t> codes_;
    double alpha_;
};

/// Mean absolute value over all entries. Throws DomainError on an empty or non-finite matrix.
template <typename T>
double absmean_gamma(const Mat<T>& w);

/// Nearest integer to x (ties resolved by `rounding`), clamped into [a, b].
double round_clip(double x, double a, double b, Rounding rounding = Rounding::HalfAwayFromZero);

/// codes = RoundClip(W / (gamma + eps), -1, 1) with gamma = absmean_gamma(W); alpha is carried through.
template <typename T>
TernaryTensor ternarize(const Mat<T>& w, double alpha, const QuantConfig& cfg = {});

template <typename T>
struct SteGradients {
    Mat<T> grad_w;
    double grad_alpha = 0.0;
};

/// Straight-through backward of W~ = alpha * codes(W): the weight gradient passes
/// through unchanged and the alpha gradient is exact (sum of grad * codes).
template <typename T>
SteGradients<T> ste_backward(const Mat<T>& grad_wtilde, const TernaryTensor& t);

/// Only the alpha part of ste_backward, without copying the weight gradient.
template <typename T>
double alpha_gradient(const Mat<T>& grad_wtilde, const TernaryTensor& t);

/// Initial scale for a layer whose full-precision init has standard deviation sigma:
/// uniform in [0.5 sigma, 1.5 sigma].
double init_alpha(double sigma, Rng& rng);

}  // namespace terdit::quant
