#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <zlib.h>

#include "timesbert/config.hpp"
#include "timesbert/errors.hpp"
#include "timesbert/params.hpp"

namespace timesbert {

inline constexpr char kCheckpointMagic[4] = {'T', 'S', 'B', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint8_t kDtypeF32 = 0;

/// Effective configuration text plus named parameters.
struct Checkpoint {
    KeyValueConfig config;
    ParamStore params;
};

namespace detail {

class ByteWriter {
public:
    void raw(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        buf_.insert(buf_.end(), b, b + n);
    }
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        raw(s.data(), s.size());
    }
    std::vector<std::uint8_t>& bytes() { return buf_; }

private:
    std::vector<std::uint8_t> buf_;
};

class ByteReader {
public:
    ByteReader(const std::uint8_t* p, std::size_t n, std::string path) : p_(p), n_(n), path_(std::move(path)) {}
    void need(std::size_t k) const {
        if (pos_ + k > n_) throw DataError(path_ + ": checkpoint truncated at byte " + std::to_string(pos_));
    }
    std::uint8_t u8() {
        need(1);
        return p_[pos_++];
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }
    float f32() { return std::bit_cast<float>(u32()); }
    std::string str() {
        const std::uint32_t len = u32();
        need(len);
        std::string s(reinterpret_cast<const char*>(p_ + pos_), len);
        pos_ += len;
        return s;
    }
    std::size_t pos() const { return pos_; }

private:
    const std::uint8_t* p_;
    std::size_t n_;
    std::size_t pos_ = 0;
    std::string path_;
};

inline std::uint32_t crc32_of(const std::uint8_t* p, std::size_t n) {
    uLong c = crc32(0L, Z_NULL, 0);
    // zlib takes uInt lengths; feed large buffers in chunks.
    while (n > 0) {
        const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
        c = crc32(c, p, chunk);
        p += chunk;
        n -= chunk;
    }
    return static_cast<std::uint32_t>(c);
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_checkpoint(const KeyValueConfig& config, const ParamStore& params) {
    detail::ByteWriter w;
    w.raw(kCheckpointMagic, 4);
    w.u32(kCheckpointVersion);
    w.str(config.to_text());
    w.u32(static_cast<std::uint32_t>(params.size()));
    for (const auto& [name, t] : params) {
        w.str(name);
        w.u8(kDtypeF32);
        w.u32(static_cast<std::uint32_t>(t.rank()));
        for (auto d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
        for (double v : t.values()) w.f32(static_cast<float>(v));
    }
    auto& bytes = w.bytes();
    const std::uint32_t crc = detail::crc32_of(bytes.data(), bytes.size());
    w.u32(crc);
    return std::move(bytes);
}

/// Writes via a temporary file and rename, so an interrupted save never
/// replaces the previous good checkpoint.
inline void save_checkpoint(const std::string& path, const KeyValueConfig& config, const ParamStore& params) {
    const auto bytes = serialize_checkpoint(config, params);
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot write checkpoint " + tmp);
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw DataError("short write to " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

inline Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& path = "checkpoint") {
    // Integrity first: nothing past the header is interpreted until the CRC matches.
    if (bytes.size() < 4 + 4 + 4 + 4 + 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
        throw DataError(path + ": not a checkpoint (bad magic or too short)");
    const std::size_t body = bytes.size() - 4;
    detail::ByteReader tail(bytes.data() + body, 4, path);
    if (tail.u32() != detail::crc32_of(bytes.data(), body))
        throw DataError(path + ": CRC mismatch (truncated or corrupted checkpoint)");

    detail::ByteReader r(bytes.data(), body, path);
    for (int i = 0; i < 4; ++i) r.u8();
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion) throw DataError(path + ": unsupported version " + std::to_string(version));
    Checkpoint ck;
    ck.config = KeyValueConfig::parse(r.str());
    const std::uint32_t count = r.u32();
    for (std::uint32_t k = 0; k < count; ++k) {
        const std::string name = r.str();
        if (r.u8() != kDtypeF32) throw DataError(path + ": tensor " + name + " has unknown dtype");
        const std::uint32_t ndim = r.u32();
        Shape shape(ndim);
        for (auto& d : shape) d = r.u32();
        const std::size_t n = shape_numel(shape);
        r.need(4 * n);
        std::vector<double> vals(n);
        for (auto& v : vals) v = static_cast<double>(r.f32());
        ck.params.add(name, Tensor(shape, std::move(vals)));
    }
    if (r.pos() != body) throw DataError(path + ": trailing bytes after tensor records");
    return ck;
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_checkpoint(bytes, path);
}

/// Rounds every parameter through f32, the checkpoint storage precision.
inline void quantize_to_f32(ParamStore& params) {
    for (auto& [name, t] : params)
        for (double& v : t.values()) v = static_cast<double>(static_cast<float>(v));
}

}  // namespace timesbert
