#pragma once

// Little-endian binary IO helpers shared by checkpoint and dataset files.

#include <bit>
#include <cstdint>
#include <cstdio>
#include <memory>

#include "metabin/errors.hpp"

namespace metabin::detail {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FileHandle = std::unique_ptr<std::FILE, FileCloser>;

inline void write_u32(std::FILE* f, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    if (std::fwrite(b, 1, 4, f) != 4) throw FormatError("binary write failed");
}

inline uint32_t read_u32(std::FILE* f) {
    unsigned char b[4];
    if (std::fread(b, 1, 4, f) != 4) throw FormatError("truncated file");
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

inline void write_f64(std::FILE* f, const double* p, size_t n) {
    static_assert(std::endian::native == std::endian::little, "little-endian host required");
    if (std::fwrite(p, sizeof(double), n, f) != n) throw FormatError("binary write failed");
}

inline void read_f64(std::FILE* f, double* p, size_t n) {
    if (std::fread(p, sizeof(double), n, f) != n) throw FormatError("truncated file");
}

}  // namespace metabin::detail
