#pragma once

// Shared plumbing: error types, logging, small encoding helpers.

#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace csdi {

inline constexpr std::string_view kVersion = "0.1.0";

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape/dimension violations; message names the primitive and the extents.
struct ShapeError : Error {
    using Error::Error;
};

// Non-finite values or numerically degenerate inputs.
struct NumericError : Error {
    using Error::Error;
};

// Malformed config files, unknown keys, bad flag values.
struct ConfigError : Error {
    using Error::Error;
};

// File-format and filesystem failures.
struct IoError : Error {
    using Error::Error;
};

enum class LogLevel { error = 0, info = 1, debug = 2 };

inline LogLevel log_level() {
    static LogLevel lvl = [] {
        const char* env = std::getenv("CSDI_LOG");
        if (!env) return LogLevel::error;
        std::string_view s(env);
        if (s == "debug") return LogLevel::debug;
        if (s == "info") return LogLevel::info;
        return LogLevel::error;
    }();
    return lvl;
}

inline void log_line(LogLevel lvl, const std::string& msg) {
    if (static_cast<int>(lvl) <= static_cast<int>(log_level())) {
        const char* tag = lvl == LogLevel::error ? "error" : lvl == LogLevel::info ? "info" : "debug";
        std::cerr << "[csdi:" << tag << "] " << msg << '\n';
    }
}

#define CSDI_LOG_INFO(msg)                                 \
    do {                                                   \
        if (::csdi::log_level() >= ::csdi::LogLevel::info) \
            ::csdi::log_line(::csdi::LogLevel::info, (msg)); \
    } while (0)

#define CSDI_LOG_DEBUG(msg)                                 \
    do {                                                    \
        if (::csdi::log_level() >= ::csdi::LogLevel::debug) \
            ::csdi::log_line(::csdi::LogLevel::debug, (msg)); \
    } while (0)

// FNV-1a, used for config hashes in manifests and report rows.
inline std::uint64_t fnv1a64(std::string_view data) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : data) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline std::string to_hex_u64(std::uint64_t x) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[x & 0xf];
        x >>= 4;
    }
    return out;
}

// Lossless little-endian hex encoding of doubles (checkpoint payloads).
inline std::string doubles_to_hex(const std::vector<double>& v) {
    static const char* digits = "0123456789abcdef";
    std::string out;
    out.reserve(v.size() * 16);
    for (double d : v) {
        std::uint64_t bits;
        static_assert(sizeof(bits) == sizeof(d));
        std::memcpy(&bits, &d, sizeof(bits));
        for (int byte = 0; byte < 8; ++byte) {
            unsigned b = static_cast<unsigned>((bits >> (8 * byte)) & 0xff);
            out.push_back(digits[b >> 4]);
            out.push_back(digits[b & 0xf]);
        }
    }
    return out;
}

inline std::vector<double> hex_to_doubles(std::string_view hex) {
    if (hex.size() % 16 != 0) throw IoError("hex payload length not a multiple of 16");
    auto nibble = [](char c) -> std::uint64_t {
        if (c >= '0' && c <= '9') return static_cast<std::uint64_t>(c - '0');
        if (c >= 'a' && c <= 'f') return static_cast<std::uint64_t>(c - 'a' + 10);
        if (c >= 'A' && c <= 'F') return static_cast<std::uint64_t>(c - 'A' + 10);
        throw IoError("invalid hex character in payload");
    };
    std::vector<double> out(hex.size() / 16);
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint64_t bits = 0;
        for (int byte = 0; byte < 8; ++byte) {
            std::uint64_t hi = nibble(hex[i * 16 + 2 * byte]);
            std::uint64_t lo = nibble(hex[i * 16 + 2 * byte + 1]);
            bits |= ((hi << 4) | lo) << (8 * byte);
        }
        double d;
        std::memcpy(&d, &bits, sizeof(d));
        out[i] = d;
    }
    return out;
}

}  // namespace csdi
