#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "imekit/common.hpp"
#include "imekit/kv_store.hpp"
#include "imekit/rope.hpp"
#include "imekit/tokenizer.hpp"

namespace imekit {

struct ModelConfig {
    int n_layers = 2;
    int d_model = 64;
    int n_heads = 4;
    int head_dim = 16;
    int vocab_size = 256 + control::count;
    int ffn_dim = 0; // 0 means 4 * d_model
    double rope_base = 10000.0;
    int max_positions = 1024;
    std::uint64_t weight_seed = 42;

    int ffn() const { return ffn_dim > 0 ? ffn_dim : 4 * d_model; }

    KvLayout kv_layout() const { return {n_layers, n_heads, head_dim}; }

    void validate() const {
        if (n_layers <= 0 || d_model <= 0 || n_heads <= 0 || head_dim <= 0 || max_positions <= 0) {
            throw Error(ErrorCode::configuration, "model dimensions must be positive");
        }
        if (head_dim % 2 != 0) throw Error(ErrorCode::configuration, "head_dim must be even for RoPE pairs");
        if (d_model != n_heads * head_dim) throw Error(ErrorCode::configuration, "d_model must equal n_heads * head_dim");
        if (vocab_size < 256) throw Error(ErrorCode::configuration, "vocab_size must cover the 256 byte ids");
        if (!(rope_base > 0.0)) throw Error(ErrorCode::configuration, "rope_base must be positive");
    }
};

/// rope_rotate on a single head vector, bounded by the model's position range.
inline std::vector<float> rope_rotate(std::span<const float> k, Pos delta, const ModelConfig & cfg) {
    if (std::abs(static_cast<long long>(delta)) >= cfg.max_positions) {
        throw Error(ErrorCode::range, "rope shift exceeds max_positions");
    }
    return rope_rotate(k, delta, cfg.rope_base);
}

struct Logits {
    std::vector<float> values;
    Pos position = 0;
    SeqId sequence = 0;

    bool finite() const {
        for (float v : values) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }
};

/// Language-model backend. Implementations are immutable after construction;
/// all mutable state lives in the KvStore passed to each call.
class LanguageModel {
public:
    virtual ~LanguageModel() = default;

    virtual const ModelConfig & config() const = 0;
    virtual std::string_view name() const = 0;

    const ByteTokenizer & tokenizer() const { return tokenizer_; }

    /// Appends `tokens` to `seq` at [start_pos, start_pos + n) and returns the
    /// logits of the last one.
    Logits prefill(KvStore & kv, std::span<const Token> tokens, SeqId seq, Pos start_pos) const {
        if (tokens.empty()) throw Error(ErrorCode::validation, "prefill of an empty token span");
        return *run(kv, tokens, seq, start_pos, true);
    }

    std::optional<Logits> decode_one(KvStore & kv, Token token, Pos pos, SeqId seq, bool want_logits) const {
        const Token t[1] = {token};
        return run(kv, t, seq, pos, want_logits);
    }

    /// Policy output for a background curation trace: extraction JSON or <NO_MEM>.
    virtual std::string extract_memory(std::string_view trace) const = 0;

protected:
    explicit LanguageModel(int vocab_size) : tokenizer_(vocab_size) {}

    /// Computes and stores K/V for the new cells (already validated and
    /// allocated) and returns logits of the last token when requested.
    virtual std::optional<Logits> forward(KvStore & kv, std::span<const KvStore::CellId> new_cells, SeqId seq,
                                          bool want_logits) const = 0;

private:
    std::optional<Logits> run(KvStore & kv, std::span<const Token> tokens, SeqId seq, Pos start, bool want_logits) const {
        const auto & cfg = config();
        const auto n = static_cast<Pos>(tokens.size());
        if (start < 0 || start + n > cfg.max_positions) {
            throw Error(ErrorCode::range, "positions exceed max_positions");
        }
        if (kv.count_below(seq, start) != static_cast<std::size_t>(start)) {
            throw Error(ErrorCode::non_consecutive_context,
                        "seq " + std::to_string(seq) + " is missing positions below " + std::to_string(start));
        }
        for (Pos i = 0; i < n; ++i) {
            if (kv.find(seq, start + i)) {
                throw Error(ErrorCode::overlap, "position " + std::to_string(start + i) + " already occupied");
            }
        }
        for (Token t : tokens) {
            if (t < 0 || t >= cfg.vocab_size) throw Error(ErrorCode::range, "token id outside vocabulary");
        }
        if (kv.free_cells() < tokens.size()) throw Error(ErrorCode::capacity, "KV cell pool exhausted");

        std::vector<KvStore::CellId> cells;
        cells.reserve(tokens.size());
        for (Pos i = 0; i < n; ++i) cells.push_back(kv.emplace(seq, start + i, tokens[static_cast<std::size_t>(i)]));

        auto & stats = kv.stats();
        stats.forward_calls += 1;
        stats.tokens_computed += tokens.size();
        if (want_logits) stats.logits_computed += 1;

        auto out = forward(kv, cells, seq, want_logits);
        if (out) {
            out->position = start + n - 1;
            out->sequence = seq;
        }
        return out;
    }

    ByteTokenizer tokenizer_;
};

using ModelHandle = std::shared_ptr<const LanguageModel>;

} // namespace imekit
