#pragma once

#include <cstddef>
#include <cstring>
#include <vector>

namespace terdit::kernel {

// Forward linear kernel shared by the dense and the packed weight paths.
//
// Weights are laid out in column panels: panel p holds output units
// [p*W, p*W + W) as an n x W block stored k-major, so one k step loads W
// contiguous weights. Each output element is a single sequential multiply-add
// chain over k = 0..n-1, independent of how rows or panels are tiled; any two
// callers that present the same panel contents get bit-identical results.

template <typename T>
struct Simd {
    static constexpr int kLanes = static_cast<int>(64 / sizeof(T));
    typedef T Vec __attribute__((vector_size(64)));
};

inline constexpr int kPanelVectors = 2;

template <typename T>
inline constexpr int kPanelWidth = Simd<T>::kLanes * kPanelVectors;

template <typename T>
inline size_t num_panels(size_t out) {
    return (out + kPanelWidth<T> - 1) / kPanelWidth<T>;
}

namespace detail {

template <typename T, int RB>
inline void panel_micro(const T* x, size_t ldx, const T* panel, size_t n, T* out /* RB x kPanelWidth */) {
    using V = typename Simd<T>::Vec;
    constexpr int L = Simd<T>::kLanes;
    constexpr int CB = kPanelVectors;
    V acc[RB][CB];
    for (int r = 0; r < RB; ++r)
        for (int c = 0; c < CB; ++c) acc[r][c] = V{};
    for (size_t k = 0; k < n; ++k) {
        V w[CB];
        for (int c = 0; c < CB; ++c) std::memcpy(&w[c], panel + k * (CB * L) + c * L, sizeof(V));
        for (int r = 0; r < RB; ++r) {
            const V xb = V{} + x[r * ldx + k];
            for (int c = 0; c < CB; ++c) acc[r][c] += xb * w[c];
        }
    }
    for (int r = 0; r < RB; ++r)
        for (int c = 0; c < CB; ++c) std::memcpy(out + r * (CB * L) + c * L, &acc[r][c], sizeof(V));
}

}  // namespace detail

/// Multiplies rows x n activations by one weight panel, writing output columns
/// [col0, col0 + width) of y (width <= panel width; the rest of the panel is padding).
template <typename T>
void apply_panel(const T* x, size_t rows, size_t ldx, size_t n, const T* panel, size_t col0, size_t width,
                 const T* bias, T* y, size_t ldy) {
    constexpr int RB = 12;
    constexpr int W = kPanelWidth<T>;
    alignas(64) T tmp[RB * W];
    auto store = [&](size_t row, int nrows) {
        for (int r = 0; r < nrows; ++r) {
            T* yr = y + (row + r) * ldy + col0;
            const T* tr = tmp + r * W;
            if (bias) {
                for (size_t c = 0; c < width; ++c) yr[c] = tr[c] + bias[col0 + c];
            } else {
                for (size_t c = 0; c < width; ++c) yr[c] = tr[c];
            }
        }
    };
    size_t i = 0;
    for (; i + RB <= rows; i += RB) {
        detail::panel_micro<T, RB>(x + i * ldx, ldx, panel, n, tmp);
        store(i, RB);
    }
    for (; i + 4 <= rows; i += 4) {
        detail::panel_micro<T, 4>(x + i * ldx, ldx, panel, n, tmp);
        store(i, 4);
    }
    for (; i < rows; ++i) {
        detail::panel_micro<T, 1>(x + i * ldx, ldx, panel, n, tmp);
        store(i, 1);
    }
}

/// Dense weights (out x n, row-major, each entry passed through `value`) re-laid into panels.
template <typename T, typename F>
std::vector<T> make_panels(size_t out, size_t n, F&& value) {
    constexpr size_t W = kPanelWidth<T>;
    std::vector<T> panels(num_panels<T>(out) * n * W, T(0));
    for (size_t j = 0; j < out; ++j) {
        T* base = panels.data() + (j / W) * n * W + (j % W);
        for (size_t k = 0; k < n; ++k) base[k * W] = value(j, k);
    }
    return panels;
}

/// y = x * W^T + bias using a full set of panels from make_panels.
template <typename T>
void linear_forward(const T* x, size_t rows, size_t ldx, size_t n, const std::vector<T>& panels, size_t out,
                    const T* bias, T* y, size_t ldy) {
    constexpr size_t W = kPanelWidth<T>;
    for (size_t p = 0; p * W < out; ++p) {
        const size_t width = (p + 1) * W <= out ? W : out - p * W;
        apply_panel<T>(x, rows, ldx, n, panels.data() + p * n * W, p * W, width, bias, y, ldy);
    }
}

}  // namespace terdit::kernel
