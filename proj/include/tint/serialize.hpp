#pragma once

// Binary containers. Everything is explicitly little-endian so files are
// bit-exact across platforms.
//
// TNSR tensor file:
//   magic "TNSR" | u8 version=1 | u8 dtype (1=float32) | u8 rank
//   rank x u64 extents | row-major IEEE-754 payload, no padding
//
// TCKP checkpoint file:
//   magic "TCKP" | u8 version=1 | u32 json_len | config json (canonical text)
//   u32 tensor_count | per tensor: u16 name_len | name | embedded TNSR blob

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "tint/common.hpp"
#include "tint/tensor.hpp"

namespace tint {

namespace detail {

inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
}

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::vector<std::uint8_t>& out, float v) {
    static_assert(sizeof(float) == 4);
    std::uint32_t bits = std::bit_cast<std::uint32_t>(v);
    put_u32(out, bits);
}

class ByteReader {
public:
    ByteReader(const std::uint8_t* data, std::size_t size, std::string context)
        : data_(data), size_(size), ctx_(std::move(context)) {}

    std::size_t remaining() const { return size_ - pos_; }
    std::size_t pos() const { return pos_; }

    std::uint8_t u8() {
        need(1);
        return data_[pos_++];
    }
    std::uint16_t u16() {
        need(2);
        std::uint16_t v = static_cast<std::uint16_t>(data_[pos_] | (data_[pos_ + 1] << 8));
        pos_ += 2;
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
        pos_ += 8;
        return v;
    }
    float f32() { return std::bit_cast<float>(u32()); }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
        pos_ += n;
        return s;
    }

private:
    void need(std::size_t n) const {
        if (pos_ + n > size_) throw IoError(ctx_ + ": truncated file");
    }
    const std::uint8_t* data_;
    std::size_t size_;
    std::size_t pos_ = 0;
    std::string ctx_;
};

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open file: " + path);
    in.seekg(0, std::ios::end);
    auto size = in.tellg();
    in.seekg(0, std::ios::beg);
    std::vector<std::uint8_t> buf(static_cast<std::size_t>(size));
    if (size > 0) in.read(reinterpret_cast<char*>(buf.data()), size);
    if (!in) throw IoError("failed reading file: " + path);
    return buf;
}

inline void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open file for writing: " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing file: " + path);
}

}  // namespace detail

inline constexpr std::uint8_t kTensorFormatVersion = 1;
inline constexpr std::uint8_t kDtypeFloat32 = 1;

inline std::vector<std::uint8_t> encode_tensor(const Tensor<float>& t) {
    std::vector<std::uint8_t> out;
    out.reserve(7 + t.rank() * 8 + t.numel() * 4);
    const char magic[4] = {'T', 'N', 'S', 'R'};
    out.insert(out.end(), magic, magic + 4);
    out.push_back(kTensorFormatVersion);
    out.push_back(kDtypeFloat32);
    if (t.rank() > 255) throw ValueError("encode_tensor: rank exceeds format limit");
    out.push_back(static_cast<std::uint8_t>(t.rank()));
    for (std::size_t e : t.shape()) detail::put_u64(out, e);
    for (float v : t.data()) detail::put_f32(out, v);
    return out;
}

inline Tensor<float> decode_tensor(detail::ByteReader& r) {
    std::string magic = r.bytes(4);
    if (magic != "TNSR") throw IoError("bad magic: expected TNSR, got '" + magic + "'");
    std::uint8_t version = r.u8();
    if (version != kTensorFormatVersion)
        throw IoError("unsupported tensor format version " + std::to_string(version));
    std::uint8_t dtype = r.u8();
    if (dtype != kDtypeFloat32)
        throw IoError("unsupported dtype code " + std::to_string(dtype));
    std::uint8_t rank = r.u8();
    Shape shape(rank);
    for (auto& e : shape) {
        std::uint64_t v = r.u64();
        if (v == 0) throw IoError("zero extent in tensor file");
        e = static_cast<std::size_t>(v);
    }
    std::size_t n = numel_of(shape);
    std::vector<float> data(n);
    for (auto& v : data) v = r.f32();
    return Tensor<float>(std::move(shape), std::move(data));
}

inline void write_tensor_file(const std::string& path, const Tensor<float>& t) {
    detail::write_file_bytes(path, encode_tensor(t));
}

inline Tensor<float> read_tensor_file(const std::string& path) {
    auto bytes = detail::read_file_bytes(path);
    detail::ByteReader r(bytes.data(), bytes.size(), path);
    Tensor<float> t = decode_tensor(r);
    if (r.remaining() != 0) throw IoError(path + ": trailing bytes after tensor payload");
    return t;
}

// ----------------------------- checkpoint container -----------------------------

inline constexpr std::uint8_t kCheckpointVersion = 1;

struct CheckpointBlob {
    std::string config_json;
    std::vector<std::pair<std::string, Tensor<float>>> tensors;
};

inline std::vector<std::uint8_t> encode_checkpoint(const CheckpointBlob& ckpt) {
    std::vector<std::uint8_t> out;
    const char magic[4] = {'T', 'C', 'K', 'P'};
    out.insert(out.end(), magic, magic + 4);
    out.push_back(kCheckpointVersion);
    detail::put_u32(out, static_cast<std::uint32_t>(ckpt.config_json.size()));
    out.insert(out.end(), ckpt.config_json.begin(), ckpt.config_json.end());
    detail::put_u32(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& [name, tensor] : ckpt.tensors) {
        if (name.size() > 0xffff) throw ValueError("checkpoint tensor name too long: " + name);
        detail::put_u16(out, static_cast<std::uint16_t>(name.size()));
        out.insert(out.end(), name.begin(), name.end());
        auto blob = encode_tensor(tensor);
        out.insert(out.end(), blob.begin(), blob.end());
    }
    return out;
}

inline CheckpointBlob decode_checkpoint(const std::vector<std::uint8_t>& bytes,
                                        const std::string& context) {
    detail::ByteReader r(bytes.data(), bytes.size(), context);
    std::string magic = r.bytes(4);
    if (magic != "TCKP") throw IoError(context + ": bad magic, not a checkpoint file");
    std::uint8_t version = r.u8();
    if (version != kCheckpointVersion)
        throw IoError(context + ": unsupported checkpoint version " + std::to_string(version));
    CheckpointBlob ckpt;
    std::uint32_t jlen = r.u32();
    ckpt.config_json = r.bytes(jlen);
    std::uint32_t count = r.u32();
    ckpt.tensors.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        std::uint16_t nlen = r.u16();
        std::string name = r.bytes(nlen);
        ckpt.tensors.emplace_back(std::move(name), decode_tensor(r));
    }
    if (r.remaining() != 0) throw IoError(context + ": trailing bytes after checkpoint payload");
    return ckpt;
}

inline void write_checkpoint_file(const std::string& path, const CheckpointBlob& ckpt) {
    detail::write_file_bytes(path, encode_checkpoint(ckpt));
}

inline CheckpointBlob read_checkpoint_file(const std::string& path) {
    return decode_checkpoint(detail::read_file_bytes(path), path);
}

// ----------------------------- PGM (P5) -----------------------------

// 8-bit binary PGM; values are row-major, maxval fixed at 255.
inline void write_pgm(const std::string& path, const std::vector<std::uint8_t>& pixels,
                      std::size_t height, std::size_t width) {
    if (pixels.size() != height * width) throw ValueError("write_pgm: pixel count mismatch");
    std::vector<std::uint8_t> out;
    std::string header =
        "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
    out.insert(out.end(), header.begin(), header.end());
    out.insert(out.end(), pixels.begin(), pixels.end());
    detail::write_file_bytes(path, out);
}

struct PgmImage {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> pixels;
};

inline PgmImage read_pgm(const std::string& path) {
    auto bytes = detail::read_file_bytes(path);
    std::size_t pos = 0;
    auto token = [&]() -> std::string {
        while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
        std::size_t start = pos;
        while (pos < bytes.size() && !std::isspace(bytes[pos])) ++pos;
        if (start == pos) throw IoError(path + ": truncated PGM header");
        return std::string(reinterpret_cast<const char*>(bytes.data() + start), pos - start);
    };
    if (token() != "P5") throw IoError(path + ": not a P5 PGM file");
    PgmImage img;
    img.width = std::stoul(token());
    img.height = std::stoul(token());
    if (token() != "255") throw IoError(path + ": unsupported PGM maxval");
    ++pos;  // single whitespace after maxval
    if (bytes.size() - pos != img.width * img.height)
        throw IoError(path + ": PGM payload size mismatch");
    img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end());
    return img;
}

}  // namespace tint
