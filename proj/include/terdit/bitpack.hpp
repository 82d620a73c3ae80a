#pragma once

#include "terdit/tensor.hpp"
#include "terdit/ternary_quant.hpp"

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace terdit::pack {

// Trit v is stored as the 2-bit field v + 1; element i lives in byte i / 4 at bit
// offset 6 - 2 * (i % 4), so the first element of each byte sits in the two most
// significant bits. Trailing pad fields hold 0b01 (value 0). Field 0b11 is invalid.

class FormatError : public std::runtime_error {
public:
    enum class Kind {
        BadMagic,
        UnsupportedVersion,
        Truncated,
        DuplicateName,
        Corrupt,
        LengthMismatch,
        Malformed,
    };

    FormatError(Kind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

struct PackedCodes {
    std::vector<uint8_t> payload;
    uint8_t pad_count = 0;
};

/// Ternary weight matrix in its 2-bit storage form.
struct PackedTernary {
    uint64_t rows = 0;
    uint64_t cols = 0;
    float alpha = 1.0f;
    uint8_t pad_count = 0;
    std::vector<uint8_t> payload;

    uint64_t numel() const { return rows * cols; }
    bool operator==(const PackedTernary&) const = default;
};

inline uint64_t packed_size(uint64_t count) { return (count + 3) / 4; }
inline uint8_t pad_for(uint64_t count) { return static_cast<uint8_t>((4 - count % 4) % 4); }

/// Throws DomainError if any value is outside {-1, 0, +1}.
PackedCodes pack(std::span<const int8_t> codes);

/// Inverse of pack. Throws FormatError(LengthMismatch) if the payload size does not fit
/// `count` trits and FormatError(Corrupt) on a 0b11 field.
std::vector<int8_t> unpack(std::span<const uint8_t> payload, uint64_t count);

PackedTernary pack_tensor(const quant::TernaryTensor& t);
std::vector<int8_t> unpack(const PackedTernary& p);
quant::TernaryTensor to_ternary(const PackedTernary& p);

/// Checks shape/length/pad consistency and every 2-bit field, including that pad fields are canonical.
void validate(const PackedTernary& p);

/// y = x * (alpha * codes)^T + bias, unpacking one weight panel at a time. x is B x cols;
/// bias (if non-null) has `rows` entries. Bit-identical to the dense forward path.
template <typename T>
Mat<T> packed_linear(const Mat<T>& x, const PackedTernary& p, const T* bias = nullptr);

}  // namespace terdit::pack
