#pragma once
// Little-endian binary primitives shared by the KGF1 / EMB1 / KGP1 formats,
// plus base64 for patch matrices embedded in JSON lines.

#include "kgfusion/errors.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

namespace kgf {

// The formats are defined little-endian; this codebase targets LE hosts.
static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian");

template <typename T>
void write_pod(std::ostream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw FormatError("unexpected end of stream");
    return v;
}

inline void write_string(std::ostream& out, const std::string& s) {
    write_pod<uint32_t>(out, static_cast<uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& in, uint32_t max_len = 1u << 20) {
    const auto len = read_pod<uint32_t>(in);
    if (len > max_len) throw FormatError("string length out of range");
    std::string s(len, '\0');
    in.read(s.data(), len);
    if (!in) throw FormatError("unexpected end of stream");
    return s;
}

inline void write_floats(std::ostream& out, const std::vector<float>& v) {
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(float)));
}

// Fills the preallocated buffer; the caller fixes the count.
inline void read_floats(std::istream& in, std::vector<float>& v) {
    in.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(float)));
    if (!in) throw FormatError("unexpected end of stream in float block");
}

inline void write_doubles(std::ostream& out, const double* p, size_t n) {
    out.write(reinterpret_cast<const char*>(p),
              static_cast<std::streamsize>(n * sizeof(double)));
}

inline void read_doubles(std::istream& in, double* p, size_t n) {
    in.read(reinterpret_cast<char*>(p),
            static_cast<std::streamsize>(n * sizeof(double)));
    if (!in) throw FormatError("unexpected end of stream in double block");
}

// '\n'-terminated id strings (ids themselves must not contain '\n').
inline void write_line_string(std::ostream& out, const std::string& s) {
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
    out.put('\n');
}

inline std::string read_line_string(std::istream& in) {
    std::string s;
    if (!std::getline(in, s)) throw FormatError("unexpected end of stream in id line");
    return s;
}

inline void write_magic(std::ostream& out, const char magic[5]) {
    out.write(magic, 4);
}

inline void expect_magic(std::istream& in, const char magic[5]) {
    char buf[4];
    in.read(buf, 4);
    if (!in || std::memcmp(buf, magic, 4) != 0)
        throw FormatError(std::string("bad magic, expected ") + magic);
}

inline std::ofstream open_out(const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open for writing: " + path);
    return out;
}

inline std::ifstream open_in(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open for reading: " + path);
    return in;
}

inline std::string base64_encode(const void* data, size_t n) {
    static const char tbl[] =
        "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    const auto* p = static_cast<const unsigned char*>(data);
    std::string out;
    out.reserve((n + 2) / 3 * 4);
    for (size_t i = 0; i < n; i += 3) {
        uint32_t v = uint32_t(p[i]) << 16;
        if (i + 1 < n) v |= uint32_t(p[i + 1]) << 8;
        if (i + 2 < n) v |= uint32_t(p[i + 2]);
        out.push_back(tbl[(v >> 18) & 63]);
        out.push_back(tbl[(v >> 12) & 63]);
        out.push_back(i + 1 < n ? tbl[(v >> 6) & 63] : '=');
        out.push_back(i + 2 < n ? tbl[v & 63] : '=');
    }
    return out;
}

inline std::vector<unsigned char> base64_decode(std::string_view s) {
    auto val = [](char c) -> int {
        if (c >= 'A' && c <= 'Z') return c - 'A';
        if (c >= 'a' && c <= 'z') return c - 'a' + 26;
        if (c >= '0' && c <= '9') return c - '0' + 52;
        if (c == '+') return 62;
        if (c == '/') return 63;
        return -1;
    };
    if (s.size() % 4 != 0) throw FormatError("base64 length not multiple of 4");
    std::vector<unsigned char> out;
    out.reserve(s.size() / 4 * 3);
    for (size_t i = 0; i < s.size(); i += 4) {
        int a = val(s[i]), b = val(s[i + 1]);
        if (a < 0 || b < 0) throw FormatError("base64 bad character");
        uint32_t v = (uint32_t(a) << 18) | (uint32_t(b) << 12);
        int pad = 0;
        if (s[i + 2] == '=') {
            pad = 2;
            if (s[i + 3] != '=') throw FormatError("base64 bad padding");
        } else {
            int c = val(s[i + 2]);
            if (c < 0) throw FormatError("base64 bad character");
            v |= uint32_t(c) << 6;
            if (s[i + 3] == '=') {
                pad = 1;
            } else {
                int d = val(s[i + 3]);
                if (d < 0) throw FormatError("base64 bad character");
                v |= uint32_t(d);
            }
        }
        out.push_back(static_cast<unsigned char>((v >> 16) & 0xff));
        if (pad < 2) out.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
        if (pad < 1) out.push_back(static_cast<unsigned char>(v & 0xff));
    }
    return out;
}

inline std::string base64_of_floats(const std::vector<float>& v) {
    return base64_encode(v.data(), v.size() * sizeof(float));
}

inline std::vector<float> floats_of_base64(std::string_view s) {
    auto bytes = base64_decode(s);
    if (bytes.size() % sizeof(float) != 0)
        throw FormatError("base64 float payload has odd byte count");
    std::vector<float> v(bytes.size() / sizeof(float));
    std::memcpy(v.data(), bytes.data(), bytes.size());
    return v;
}

} // namespace kgf
