#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace imekit {

using Token = std::int32_t;
using Pos = std::int32_t;
using SeqId = std::int32_t;

enum class ErrorCode {
    configuration,
    non_consecutive_context,
    overlap,
    range,
    capacity,
    validation,
    not_found,
    protocol,
    io,
};

inline std::string_view to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::configuration: return "configuration";
        case ErrorCode::non_consecutive_context: return "non_consecutive_context";
        case ErrorCode::overlap: return "overlap";
        case ErrorCode::range: return "range";
        case ErrorCode::capacity: return "capacity";
        case ErrorCode::validation: return "validation";
        case ErrorCode::not_found: return "not_found";
        case ErrorCode::protocol: return "protocol";
        case ErrorCode::io: return "io";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string & what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

// FNV-1a, used for stable hashing of names and text keys.
constexpr std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 14695981039346656037ULL) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::string_view trim(std::string_view s) {
    constexpr std::string_view ws = " \t\r\n";
    const auto b = s.find_first_not_of(ws);
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(ws);
    return s.substr(b, e - b + 1);
}

inline std::size_t count_occurrences(std::string_view hay, std::string_view needle) {
    if (needle.empty()) return 0;
    std::size_t n = 0;
    for (auto p = hay.find(needle); p != std::string_view::npos; p = hay.find(needle, p + needle.size())) {
        ++n;
    }
    return n;
}

// Number of UTF-8 code points (continuation bytes are not counted).
inline std::size_t utf8_length(std::string_view s) {
    std::size_t n = 0;
    for (unsigned char c : s) {
        if ((c & 0xC0) != 0x80) ++n;
    }
    return n;
}

} // namespace imekit
