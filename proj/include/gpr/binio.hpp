#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

// Little-endian binary stream helpers shared by the GPRW/GPRB/GPRD formats.

namespace gpr::binio {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

inline void write_bytes(std::ostream& os, const void* p, size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    if (!os) throw std::runtime_error("binio: write failed");
}

template <typename T>
void write_pod(std::ostream& os, T v) {
    write_bytes(os, &v, sizeof(T));
}

inline void write_string(std::ostream& os, const std::string& s) {
    write_pod<uint32_t>(os, static_cast<uint32_t>(s.size()));
    if (!s.empty()) write_bytes(os, s.data(), s.size());
}

inline void read_bytes(std::istream& is, void* p, size_t n, const std::string& what) {
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(is.gcount()) != n) {
        throw std::runtime_error("binio: truncated file while reading " + what + " at byte offset " +
                                 std::to_string(static_cast<long long>(is.tellg())));
    }
}

template <typename T>
T read_pod(std::istream& is, const std::string& what) {
    T v;
    read_bytes(is, &v, sizeof(T), what);
    return v;
}

inline std::string read_string(std::istream& is, const std::string& what) {
    const uint32_t n = read_pod<uint32_t>(is, what + " length");
    if (n > (1u << 20)) throw std::runtime_error("binio: unreasonable string length in " + what);
    std::string s(n, '\0');
    if (n) read_bytes(is, s.data(), n, what);
    return s;
}

inline void expect_magic(std::istream& is, const char magic[4], const std::string& format) {
    char buf[4];
    read_bytes(is, buf, 4, format + " magic");
    if (std::memcmp(buf, magic, 4) != 0) {
        throw std::runtime_error(format + ": bad magic at byte offset 0");
    }
}

}  // namespace gpr::binio
