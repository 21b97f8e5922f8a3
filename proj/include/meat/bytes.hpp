#pragma once

// Little-endian byte packing for the on-disk formats. The reader tracks its
// offset so format errors can name the byte where parsing failed.

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "meat/error.hpp"

namespace meat {

class ByteWriter {
public:
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f64(double v) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        u64(bits);
    }
    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        buf_.insert(buf_.end(), b, b + n);
    }
    void magic(const char (&m)[9]) { bytes(m, 8); }

    const std::vector<std::uint8_t>& data() const { return buf_; }
    std::size_t size() const { return buf_.size(); }

private:
    std::vector<std::uint8_t> buf_;
};

class ByteReader {
public:
    ByteReader(const std::uint8_t* p, std::size_t n) : p_(p), n_(n) {}
    explicit ByteReader(const std::vector<std::uint8_t>& v) : p_(v.data()), n_(v.size()) {}

    std::size_t offset() const { return off_; }
    std::size_t remaining() const { return n_ - off_; }

    std::uint8_t u8(const char* field) {
        need(1, field);
        return p_[off_++];
    }
    std::uint32_t u32(const char* field) {
        need(4, field);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p_[off_ + i]) << (8 * i);
        off_ += 4;
        return v;
    }
    std::uint64_t u64(const char* field) {
        need(8, field);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p_[off_ + i]) << (8 * i);
        off_ += 8;
        return v;
    }
    double f64(const char* field) {
        std::uint64_t bits = u64(field);
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    std::vector<std::uint8_t> bytes(std::size_t n, const char* field) {
        need(n, field);
        std::vector<std::uint8_t> out(p_ + off_, p_ + off_ + n);
        off_ += n;
        return out;
    }
    void expect_magic(const char (&m)[9], const char* what) {
        need(8, what);
        if (std::memcmp(p_ + off_, m, 8) != 0) {
            throw FormatError(std::string(what) + ": bad magic at byte 0");
        }
        off_ += 8;
    }
    void expect_done(const char* what) {
        if (off_ != n_) {
            throw FormatError(std::string(what) + ": trailing bytes at offset " +
                              std::to_string(off_));
        }
    }

private:
    void need(std::size_t n, const char* field) {
        if (off_ + n > n_) {
            throw FormatError(std::string("truncated at byte ") + std::to_string(off_) +
                              " while reading " + field);
        }
    }
    const std::uint8_t* p_;
    std::size_t n_;
    std::size_t off_ = 0;
};

// FNV-1a over a byte range; used for config digests and backbone checksums.
inline std::uint64_t fnv1a(const void* p, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::vector<std::uint8_t> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes);

}  // namespace meat
