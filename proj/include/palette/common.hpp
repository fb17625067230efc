#pragma once

// Shared basics: error types, FNV-1a hashing, a platform-stable Gaussian
// source, float32 quantization helpers, small file utilities.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace palette {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using MatF = Eigen::MatrixXf;

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Raised when a judge reply cannot be interpreted; keeps the raw payload.
struct JudgeFormatError : Error {
    std::string raw;
    JudgeFormatError(const std::string& msg, std::string raw_reply)
        : Error("judge format violation: " + msg), raw(std::move(raw_reply)) {}
};

inline std::uint64_t fnv1a64(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = 1469598103934665603ull;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline std::uint64_t fnv1a64(const std::string& s) {
    return fnv1a64(s.data(), s.size());
}

inline std::string hex64(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

// Byte-level decoding can emit arbitrary byte sequences; JSON serialization
// requires valid UTF-8. Invalid sequences become U+FFFD, one per bad byte.
inline std::string sanitize_utf8(const std::string& s) {
    std::string out;
    out.reserve(s.size());
    std::size_t i = 0;
    const auto cont = [&](std::size_t k) {
        return i + k < s.size() && (static_cast<unsigned char>(s[i + k]) & 0xC0) == 0x80;
    };
    while (i < s.size()) {
        const unsigned char c = static_cast<unsigned char>(s[i]);
        if (c < 0x80) {
            out.push_back(s[i]);
            ++i;
        } else if ((c & 0xE0) == 0xC0 && c >= 0xC2 && cont(1)) {
            out.append(s, i, 2);
            i += 2;
        } else if ((c & 0xF0) == 0xE0 && cont(1) && cont(2) &&
                   !(c == 0xE0 && static_cast<unsigned char>(s[i + 1]) < 0xA0) &&
                   !(c == 0xED && static_cast<unsigned char>(s[i + 1]) > 0x9F)) {
            out.append(s, i, 3);
            i += 3;
        } else if ((c & 0xF8) == 0xF0 && c <= 0xF4 && cont(1) && cont(2) && cont(3) &&
                   !(c == 0xF0 && static_cast<unsigned char>(s[i + 1]) < 0x90) &&
                   !(c == 0xF4 && static_cast<unsigned char>(s[i + 1]) > 0x8F)) {
            out.append(s, i, 4);
            i += 4;
        } else {
            out += "\xEF\xBF\xBD";
            ++i;
        }
    }
    return out;
}

// mt19937 + Box-Muller. std::normal_distribution is implementation defined,
// so determinism across standard libraries needs a hand-rolled transform.
class Gaussian {
public:
    explicit Gaussian(std::uint32_t seed) : eng_(seed) {}

    double uniform() { return (static_cast<double>(eng_()) + 0.5) * (1.0 / 4294967296.0); }

    double operator()() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 1e-12) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    std::mt19937& engine() { return eng_; }

private:
    std::mt19937 eng_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

namespace detail {

inline void append_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void append_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t read_u32(const std::string& s, std::size_t& off) {
    if (off + 4 > s.size()) throw Error("binary payload truncated");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
        v |= static_cast<std::uint32_t>(static_cast<unsigned char>(s[off + i])) << (8 * i);
    off += 4;
    return v;
}

inline std::uint64_t read_u64(const std::string& s, std::size_t& off) {
    if (off + 8 > s.size()) throw Error("binary payload truncated");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s[off + i])) << (8 * i);
    off += 8;
    return v;
}

}  // namespace detail

// Weights live in doubles but must stay exactly float32-representable so
// checkpoints round-trip bit-for-bit.
inline double to_f32(double x) { return static_cast<double>(static_cast<float>(x)); }

inline void quantize_f32(Mat& m) {
    double* p = m.data();
    for (Eigen::Index i = 0; i < m.size(); ++i) p[i] = to_f32(p[i]);
}

inline void quantize_f32(Vec& v) {
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = to_f32(v[i]);
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::string& path, const std::string& body) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open file for writing: " + path);
    out.write(body.data(), static_cast<std::streamsize>(body.size()));
    out.flush();
    if (!out) throw Error("short write: " + path);
}

}  // namespace palette
