#pragma once

#include <bit>
#include <cstdint>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "fcil/errors.hpp"

namespace fcil::wire {

// Little-endian byte packing shared by every on-wire and on-disk format in
// the project: unsigned 32-bit integers for counts and shapes, IEEE-754
// 64-bit for values. Written byte-by-byte so the layout does not depend on
// host endianness.

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
    out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
    out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xff));
    out.push_back(static_cast<std::uint8_t>((v >> 24) & 0xff));
}

inline void put_f64(std::vector<std::uint8_t>& out, double v) {
    const std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<std::uint8_t>((bits >> (8 * i)) & 0xff));
    }
}

// Cursor over an input byte span. Reads raise FormatError carrying the
// offending byte offset.
class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    std::size_t offset() const { return pos_; }
    std::size_t remaining() const { return bytes_.size() - pos_; }
    bool done() const { return pos_ == bytes_.size(); }

    std::uint32_t u32(const std::string& what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
        }
        pos_ += 4;
        return v;
    }

    double f64(const std::string& what) {
        need(8, what);
        std::uint64_t bits = 0;
        for (int i = 0; i < 8; ++i) {
            bits |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
        }
        pos_ += 8;
        return std::bit_cast<double>(bits);
    }

    void expect_end(const std::string& what) {
        if (!done()) {
            throw FormatError(what + ": " + std::to_string(remaining()) +
                              " trailing bytes at byte offset " + std::to_string(pos_));
        }
    }

    [[noreturn]] void fail(const std::string& message) const {
        throw FormatError(message + " at byte offset " + std::to_string(pos_));
    }

private:
    void need(std::size_t n, const std::string& what) const {
        if (bytes_.size() - pos_ < n) {
            throw FormatError(what + ": truncated, need " + std::to_string(n) +
                              " bytes at byte offset " + std::to_string(pos_));
        }
    }

    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

}  // namespace fcil::wire
