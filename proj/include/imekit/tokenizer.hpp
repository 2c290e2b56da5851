#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "imekit/common.hpp"

namespace imekit {

using TokenSequence = std::vector<Token>;

namespace control {
inline constexpr Token mem_open = 256;
inline constexpr Token mem_close = 257;
inline constexpr Token no_mem = 258;
inline constexpr Token think_open = 259;
inline constexpr Token think_close = 260;
inline constexpr int count = 5;

inline constexpr std::string_view mem_open_text = "<MEM_RETRIEVAL>";
inline constexpr std::string_view mem_close_text = "</MEM_RETRIEVAL>";
inline constexpr std::string_view no_mem_text = "<NO_MEM>";
inline constexpr std::string_view think_open_text = "<think>";
inline constexpr std::string_view think_close_text = "</think>";

inline constexpr std::array<std::string_view, count> texts = {
    mem_open_text, mem_close_text, no_mem_text, think_open_text, think_close_text};
} // namespace control

/// Byte-level tokenizer. Ids 0..255 are raw bytes; when the vocabulary is
/// wider than 256 the control strings get the reserved single ids above 255,
/// otherwise they stay literal byte sequences.
class ByteTokenizer {
public:
    explicit ByteTokenizer(int vocab_size = 256) : vocab_size_(vocab_size) {}

    int vocab_size() const { return vocab_size_; }

    bool has_control_ids() const { return vocab_size_ >= 256 + control::count; }

    bool is_control(Token t) const { return t >= 256 && t < 256 + control::count; }

    TokenSequence encode(std::string_view text) const {
        TokenSequence out;
        out.reserve(text.size());
        std::size_t i = 0;
        while (i < text.size()) {
            if (has_control_ids() && text[i] == '<') {
                if (auto id = match_control(text.substr(i))) {
                    out.push_back(*id);
                    i += control::texts[*id - 256].size();
                    continue;
                }
            }
            out.push_back(static_cast<unsigned char>(text[i]));
            ++i;
        }
        return out;
    }

    std::string decode(std::span<const Token> tokens) const {
        std::string out;
        out.reserve(tokens.size());
        for (Token t : tokens) append(out, t);
        return out;
    }

    void append(std::string & out, Token t) const {
        if (t >= 0 && t < 256) {
            out.push_back(static_cast<char>(t));
        } else if (is_control(t)) {
            out.append(control::texts[t - 256]);
        }
    }

private:
    static std::optional<Token> match_control(std::string_view s) {
        for (int i = 0; i < control::count; ++i) {
            if (s.starts_with(control::texts[i])) return static_cast<Token>(256 + i);
        }
        return std::nullopt;
    }

    int vocab_size_;
};

} // namespace imekit
