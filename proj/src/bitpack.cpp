#include "terdit/bitpack.hpp"

#include "terdit/linear_kernel.hpp"

#include <algorithm>
#include <array>
#include <cmath>

namespace terdit::pack {

namespace {

inline int shift_of(uint64_t i) { return 6 - 2 * static_cast<int>(i & 3); }

// For each byte: the four decoded trits, or a flag when any field is 0b11.
struct ByteTable {
    std::array<std::array<int8_t, 4>, 256> trits{};
    std::array<bool, 256> valid{};
};

constexpr ByteTable make_table() {
    ByteTable t{};
    for (int b = 0; b < 256; ++b) {
        bool ok = true;
        for (int i = 0; i < 4; ++i) {
            const int field = (b >> (6 - 2 * i)) & 3;
            if (field == 3) ok = false;
            t.trits[b][i] = static_cast<int8_t>(field - 1);
        }
        t.valid[b] = ok;
    }
    return t;
}

constexpr ByteTable kTable = make_table();

[[noreturn]] void corrupt(uint64_t byte_index) {
    throw FormatError(FormatError::Kind::Corrupt,
                      "packed ternary payload: reserved field value 3 in byte " + std::to_string(byte_index));
}

inline int8_t field_at(std::span<const uint8_t> payload, uint64_t i) {
    const int field = (payload[i >> 2] >> shift_of(i)) & 3;
    if (field == 3) corrupt(i >> 2);
    return static_cast<int8_t>(field - 1);
}

}  // namespace

PackedCodes pack(std::span<const int8_t> codes) {
    PackedCodes out;
    const uint64_t n = codes.size();
    out.payload.assign(packed_size(n), 0);
    out.pad_count = pad_for(n);
    for (uint64_t i = 0; i < n; ++i) {
        const int v = codes[i];
        require(v >= -1 && v <= 1, "pack: trit value outside {-1, 0, +1}");
        out.payload[i >> 2] |= static_cast<uint8_t>((v + 1) << shift_of(i));
    }
    for (uint64_t i = n; i < n + out.pad_count; ++i) out.payload[i >> 2] |= static_cast<uint8_t>(1 << shift_of(i));
    return out;
}

std::vector<int8_t> unpack(std::span<const uint8_t> payload, uint64_t count) {
    if (payload.size() != packed_size(count)) {
        throw FormatError(FormatError::Kind::LengthMismatch, "unpack: payload has " + std::to_string(payload.size()) +
                                                                 " bytes, expected " +
                                                                 std::to_string(packed_size(count)));
    }
    std::vector<int8_t> out(count);
    const uint64_t whole = count / 4;
    for (uint64_t b = 0; b < whole; ++b) {
        const uint8_t byte = payload[b];
        if (!kTable.valid[byte]) corrupt(b);
        for (int i = 0; i < 4; ++i) out[4 * b + i] = kTable.trits[byte][i];
    }
    for (uint64_t i = whole * 4; i < count; ++i) out[i] = field_at(payload, i);
    return out;
}

PackedTernary pack_tensor(const quant::TernaryTensor& t) {
    PackedCodes c = pack(t.codes());
    PackedTernary p;
    p.rows = t.rows();
    p.cols = t.cols();
    p.alpha = static_cast<float>(t.alpha());
    p.pad_count = c.pad_count;
    p.payload = std::move(c.payload);
    return p;
}

std::vector<int8_t> unpack(const PackedTernary& p) { return unpack(p.payload, p.numel()); }

quant::TernaryTensor to_ternary(const PackedTernary& p) {
    return quant::TernaryTensor(p.rows, p.cols, unpack(p), static_cast<double>(p.alpha));
}

void validate(const PackedTernary& p) {
    const uint64_t n = p.numel();
    if (p.payload.size() != packed_size(n))
        throw FormatError(FormatError::Kind::LengthMismatch, "packed tensor: payload length does not match shape");
    if (p.pad_count != pad_for(n))
        throw FormatError(FormatError::Kind::Malformed, "packed tensor: pad_count inconsistent with shape");
    if (!(p.alpha > 0.0f) || !std::isfinite(p.alpha))
        throw FormatError(FormatError::Kind::Malformed, "packed tensor: alpha must be positive and finite");
    std::span<const uint8_t> bytes(p.payload);
    for (uint64_t b = 0; b < n / 4; ++b)
        if (!kTable.valid[bytes[b]]) corrupt(b);
    for (uint64_t i = n - n % 4; i < n; ++i) (void)field_at(bytes, i);
    for (uint64_t i = n; i < n + p.pad_count; ++i) {
        if (((bytes[i >> 2] >> shift_of(i)) & 3) != 1)
            throw FormatError(FormatError::Kind::Corrupt, "packed tensor: non-canonical pad field");
    }
}

template <typename T>
Mat<T> packed_linear(const Mat<T>& x, const PackedTernary& p, const T* bias) {
    require(static_cast<uint64_t>(x.cols()) == p.cols, "packed_linear: input width does not match weight columns");
    require(p.payload.size() == packed_size(p.numel()), "packed_linear: payload length does not match shape");
    const size_t n = p.cols;
    const size_t out = p.rows;
    constexpr size_t W = kernel::kPanelWidth<T>;
    const T alpha = static_cast<T>(p.alpha);
    const std::span<const uint8_t> bytes(p.payload);

    Mat<T> y(x.rows(), static_cast<Eigen::Index>(out));
    std::vector<T> panel(n * W);
    for (size_t j0 = 0; j0 < out; j0 += W) {
        const size_t width = std::min(W, out - j0);
        std::fill(panel.begin(), panel.end(), T(0));
        for (size_t c = 0; c < width; ++c) {
            const uint64_t base = (j0 + c) * n;
            T* dst = panel.data() + c;
            uint64_t k = 0;
            // Leading fields until the row reaches a byte boundary, then whole bytes via the table.
            for (; k < n && ((base + k) & 3) != 0; ++k) dst[k * W] = alpha * static_cast<T>(field_at(bytes, base + k));
            for (; k + 4 <= n; k += 4) {
                const uint64_t b = (base + k) >> 2;
                const uint8_t byte = bytes[b];
                if (!kTable.valid[byte]) corrupt(b);
                for (int i = 0; i < 4; ++i) dst[(k + i) * W] = alpha * static_cast<T>(kTable.trits[byte][i]);
            }
            for (; k < n; ++k) dst[k * W] = alpha * static_cast<T>(field_at(bytes, base + k));
        }
        kernel::apply_panel<T>(x.data(), static_cast<size_t>(x.rows()), n, n, panel.data(), j0, width, bias, y.data(),
                               out);
    }
    return y;
}

template Mat<float> packed_linear<float>(const Mat<float>&, const PackedTernary&, const float*);
template Mat<double> packed_linear<double>(const Mat<double>&, const PackedTernary&, const double*);

}  // namespace terdit::pack
