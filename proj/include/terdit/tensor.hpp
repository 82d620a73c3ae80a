#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace terdit {

// Row-major so that a row of a weight matrix (one output unit) is contiguous.
template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

using Rng = std::mt19937_64;

// Raised for precondition violations on numeric inputs (shapes, ranges, non-finite values).
class DomainError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

inline void require(bool cond, const char* msg) {
    if (!cond) throw DomainError(msg);
}

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw DomainError(msg);
}

/// CHW image; values nominally in [-1, 1].
template <typename T>
struct ImageT {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<T> data;

    ImageT() = default;
    ImageT(int c, int h, int w) : channels(c), height(h), width(w), data(static_cast<size_t>(c) * h * w, T(0)) {}

    T& at(int c, int y, int x) { return data[(static_cast<size_t>(c) * height + y) * width + x]; }
    T at(int c, int y, int x) const { return data[(static_cast<size_t>(c) * height + y) * width + x]; }
    size_t size() const { return data.size(); }
};

using Image = ImageT<float>;

template <typename To, typename From>
ImageT<To> image_cast(const ImageT<From>& img) {
    ImageT<To> out(img.channels, img.height, img.width);
    for (size_t i = 0; i < img.data.size(); ++i) out.data[i] = static_cast<To>(img.data[i]);
    return out;
}

// splitmix64 finalizer; used to derive independent stream seeds from tuples.
inline uint64_t mix_seed(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t mix_seed(uint64_t a, uint64_t b) { return mix_seed(mix_seed(a) ^ (b + 0x632be59bd9b4e019ULL)); }

/// Per-sample conditioning for one denoiser evaluation.
struct Conditioning {
    int timestep = 0;
    int label = 0;
    bool drop = false;  // use the null label row (unconditional branch)
};

}  // namespace terdit
