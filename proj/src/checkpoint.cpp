#include "terdit/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>
#include <unordered_set>

namespace terdit::pack {

namespace {

using Kind = FormatError::Kind;

class Writer {
public:
    void bytes(const void* p, size_t n) {
        const auto* b = static_cast<const uint8_t*>(p);
        out_.insert(out_.end(), b, b + n);
    }
    void u8(uint8_t v) { out_.push_back(v); }
    void u32(uint32_t v) {
        for (int i = 0; i < 4; ++i) out_.push_back(static_cast<uint8_t>(v >> (8 * i)));
    }
    void u64(uint64_t v) {
        for (int i = 0; i < 8; ++i) out_.push_back(static_cast<uint8_t>(v >> (8 * i)));
    }
    void f32(float v) { u32(std::bit_cast<uint32_t>(v)); }
    void str(const std::string& s) {
        if (s.size() > UINT32_MAX) throw FormatError(Kind::Malformed, "string too long for checkpoint");
        u32(static_cast<uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    std::vector<uint8_t> take() { return std::move(out_); }

private:
    std::vector<uint8_t> out_;
};

class Reader {
public:
    explicit Reader(std::span<const uint8_t> in) : in_(in) {}

    std::span<const uint8_t> take(uint64_t n, const char* what) {
        if (n > in_.size() - pos_)
            throw FormatError(Kind::Truncated, std::string("checkpoint truncated while reading ") + what);
        auto s = in_.subspan(pos_, n);
        pos_ += n;
        return s;
    }
    uint8_t u8(const char* what) { return take(1, what)[0]; }
    uint32_t u32(const char* what) {
        auto s = take(4, what);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(s[i]) << (8 * i);
        return v;
    }
    uint64_t u64(const char* what) {
        auto s = take(8, what);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(s[i]) << (8 * i);
        return v;
    }
    float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
    std::string str(const char* what) {
        const uint32_t n = u32(what);
        auto s = take(n, what);
        return std::string(reinterpret_cast<const char*>(s.data()), s.size());
    }
    bool done() const { return pos_ == in_.size(); }

private:
    std::span<const uint8_t> in_;
    size_t pos_ = 0;
};

uint64_t product(const std::vector<uint64_t>& shape) {
    uint64_t n = 1;
    for (uint64_t d : shape) n *= d;
    return n;
}

void check_entry(const TensorEntry& t) {
    if (t.shape.size() > 255) throw FormatError(Kind::Malformed, "tensor '" + t.name + "': rank exceeds 255");
    if (t.is_packed()) {
        const auto& p = t.packed();
        if (t.shape.size() != 2 || t.shape[0] != p.rows || t.shape[1] != p.cols)
            throw FormatError(Kind::Malformed, "tensor '" + t.name + "': packed shape mismatch");
        validate(p);
    } else if (t.dense().values.size() != product(t.shape)) {
        throw FormatError(Kind::LengthMismatch, "tensor '" + t.name + "': value count does not match shape");
    }
}

}  // namespace

uint64_t TensorEntry::numel() const { return product(shape); }

const TensorEntry* Checkpoint::find(const std::string& name) const {
    for (const auto& t : tensors)
        if (t.name == name) return &t;
    return nullptr;
}

bool Checkpoint::has_packed() const {
    return std::any_of(tensors.begin(), tensors.end(), [](const TensorEntry& t) { return t.is_packed(); });
}

TensorEntry make_dense(std::string name, std::vector<uint64_t> shape, std::vector<float> values) {
    TensorEntry t{std::move(name), std::move(shape), DenseTensor{std::move(values)}};
    check_entry(t);
    return t;
}

TensorEntry make_packed(std::string name, PackedTernary p) {
    std::vector<uint64_t> shape{p.rows, p.cols};
    TensorEntry t{std::move(name), std::move(shape), std::move(p)};
    check_entry(t);
    return t;
}

uint64_t payload_bytes(const TensorEntry& t) {
    if (t.is_packed()) return 4 + 1 + t.packed().payload.size();
    return 4 * t.dense().values.size();
}

uint64_t payload_bytes(const Checkpoint& c) {
    return std::accumulate(c.tensors.begin(), c.tensors.end(), uint64_t{0},
                           [](uint64_t acc, const TensorEntry& t) { return acc + payload_bytes(t); });
}

std::vector<uint8_t> serialize(const Checkpoint& c) {
    Writer w;
    w.bytes(kMagic, sizeof(kMagic));
    w.u32(kFormatVersion);
    w.str(c.config_text);
    if (c.tensors.size() > UINT32_MAX) throw FormatError(Kind::Malformed, "too many tensors");
    w.u32(static_cast<uint32_t>(c.tensors.size()));
    std::unordered_set<std::string> seen;
    for (const auto& t : c.tensors) {
        if (!seen.insert(t.name).second) throw FormatError(Kind::DuplicateName, "duplicate tensor name '" + t.name + "'");
        check_entry(t);
        w.str(t.name);
        w.u8(t.is_packed() ? 1 : 0);
        w.u8(static_cast<uint8_t>(t.shape.size()));
        for (uint64_t d : t.shape) w.u64(d);
        if (t.is_packed()) {
            const auto& p = t.packed();
            w.f32(p.alpha);
            w.u8(p.pad_count);
            w.u64(p.payload.size());
            w.bytes(p.payload.data(), p.payload.size());
        } else {
            const auto& v = t.dense().values;
            w.u64(4 * v.size());
            for (float f : v) w.f32(f);
        }
    }
    return w.take();
}

Checkpoint deserialize(std::span<const uint8_t> bytes) {
    Reader r(bytes);
    auto magic = r.take(4, "magic");
    if (std::memcmp(magic.data(), kMagic, 4) != 0) throw FormatError(Kind::BadMagic, "not a checkpoint (bad magic)");
    const uint32_t version = r.u32("version");
    if (version != kFormatVersion)
        throw FormatError(Kind::UnsupportedVersion, "unsupported checkpoint version " + std::to_string(version));
    Checkpoint c;
    c.config_text = r.str("config text");
    const uint32_t count = r.u32("tensor count");
    std::unordered_set<std::string> seen;
    for (uint32_t i = 0; i < count; ++i) {
        TensorEntry t;
        t.name = r.str("tensor name");
        if (!seen.insert(t.name).second) throw FormatError(Kind::DuplicateName, "duplicate tensor name '" + t.name + "'");
        const uint8_t kind = r.u8("tensor kind");
        const uint8_t rank = r.u8("tensor rank");
        t.shape.resize(rank);
        for (auto& d : t.shape) d = r.u64("tensor dims");
        if (kind == 1) {
            PackedTernary p;
            p.alpha = r.f32("alpha");
            p.pad_count = r.u8("pad count");
            const uint64_t len = r.u64("payload length");
            auto data = r.take(len, "packed payload");
            if (rank != 2) throw FormatError(Kind::Malformed, "tensor '" + t.name + "': packed tensors must be rank 2");
            p.rows = t.shape[0];
            p.cols = t.shape[1];
            p.payload.assign(data.begin(), data.end());
            t.data = std::move(p);
        } else if (kind == 0) {
            const uint64_t len = r.u64("payload length");
            if (len % 4 != 0) throw FormatError(Kind::LengthMismatch, "tensor '" + t.name + "': dense length not /4");
            auto data = r.take(len, "dense payload");
            DenseTensor d;
            d.values.resize(len / 4);
            for (size_t k = 0; k < d.values.size(); ++k) {
                uint32_t u = 0;
                for (int b = 0; b < 4; ++b) u |= static_cast<uint32_t>(data[4 * k + b]) << (8 * b);
                d.values[k] = std::bit_cast<float>(u);
            }
            t.data = std::move(d);
        } else {
            throw FormatError(Kind::Malformed, "tensor '" + t.name + "': unknown kind tag " + std::to_string(kind));
        }
        check_entry(t);
        c.tensors.push_back(std::move(t));
    }
    if (!r.done()) throw FormatError(Kind::Malformed, "trailing bytes after last tensor");
    return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
    const auto bytes = serialize(c);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("failed writing '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open '" + path.string() + "'");
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return deserialize(bytes);
}

}  // namespace terdit::pack
