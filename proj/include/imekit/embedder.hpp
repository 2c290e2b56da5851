#pragma once

#include <cctype>
#include <cmath>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "imekit/common.hpp"

namespace imekit {

class Embedder {
public:
    virtual ~Embedder() = default;
    virtual std::size_t dim() const = 0;
    virtual std::vector<float> embed(std::string_view text) const = 0;
};

/// Character-trigram feature hashing into a fixed number of buckets with a
/// hashed sign, L2-normalized. Text is lowercased and padded with one space
/// on each side so short strings still produce trigrams.
class TrigramHashEmbedder final : public Embedder {
public:
    explicit TrigramHashEmbedder(std::size_t dim = 64) : dim_(dim) {}

    std::size_t dim() const override { return dim_; }

    std::vector<float> embed(std::string_view text) const override {
        std::string s = " ";
        for (unsigned char c : text) s.push_back(static_cast<char>(std::tolower(c)));
        s.push_back(' ');
        std::vector<float> v(dim_, 0.0f);
        for (std::size_t i = 0; i + 3 <= s.size(); ++i) {
            const auto h = fnv1a(std::string_view(s).substr(i, 3));
            const float sign = (h >> 63) ? -1.0f : 1.0f;
            v[static_cast<std::size_t>(h % dim_)] += sign;
        }
        double norm = 0.0;
        for (float x : v) norm += static_cast<double>(x) * x;
        if (norm > 0.0) {
            const double inv = 1.0 / std::sqrt(norm);
            for (auto & x : v) x = static_cast<float>(x * inv);
        }
        return v;
    }

private:
    std::size_t dim_;
};

} // namespace imekit
