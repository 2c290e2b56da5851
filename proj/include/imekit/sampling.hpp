#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "imekit/kv_store.hpp"
#include "imekit/model.hpp"
#include "imekit/rng.hpp"

namespace imekit {

struct SamplingConfig {
    float temperature = 0.8f;
    std::uint64_t seed = 1234;
    int max_tokens = 16;
    /// Tokens forbidden at the first step (used to keep direct candidates off
    /// the retrieval marker).
    std::vector<Token> banned_first;
};

struct Candidate {
    std::string text;
    TokenSequence tokens;
};

/// Picks one token; temperature 0 is argmax with lowest-id tie break.
inline Token sample_token(std::span<const float> logits, float temperature, StreamRng & rng,
                          std::span<const Token> banned = {}) {
    auto allowed = [&](std::size_t i) { return std::find(banned.begin(), banned.end(), static_cast<Token>(i)) == banned.end(); };
    if (temperature <= 0.0f) {
        std::size_t best = logits.size();
        for (std::size_t i = 0; i < logits.size(); ++i) {
            if (!allowed(i)) continue;
            if (best == logits.size() || logits[i] > logits[best]) best = i;
        }
        return static_cast<Token>(best);
    }
    double mx = -INFINITY;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        if (allowed(i)) mx = std::max(mx, static_cast<double>(logits[i]));
    }
    std::vector<double> p(logits.size(), 0.0);
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        if (!allowed(i)) continue;
        p[i] = std::exp((static_cast<double>(logits[i]) - mx) / temperature);
        sum += p[i];
    }
    double u = rng.uniform() * sum;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] == 0.0) continue;
        u -= p[i];
        if (u < 0.0) return static_cast<Token>(i);
    }
    for (std::size_t i = p.size(); i-- > 0;) {
        if (p[i] > 0.0) return static_cast<Token>(i);
    }
    return 0;
}

inline bool is_stop_token(const LanguageModel & model, Token t) {
    return t == '\n' || model.tokenizer().is_control(t);
}

/// Samples K short continuations of `seq` whose last-position logits are
/// `first_logits`. Each candidate is decoded into `scratch` (copied from seq,
/// cleared afterwards) with its own seed; empty and duplicate strings are dropped.
inline std::vector<Candidate> sample_candidates(const LanguageModel & model, KvStore & kv, SeqId seq,
                                                const Logits & first_logits, int K, SeqId scratch,
                                                const SamplingConfig & sc) {
    std::vector<Candidate> out;
    const auto start = static_cast<Pos>(kv.seq_length(seq));
    const int max_pos = model.config().max_positions;
    for (int k = 0; k < K; ++k) {
        StreamRng rng(splitmix64(sc.seed ^ splitmix64(static_cast<std::uint64_t>(k) + 1)));
        Candidate cand;
        kv.seq_clear(scratch);
        kv.seq_cp(seq, scratch, 0, KvStore::to_end);
        Logits logits = first_logits;
        Pos pos = start;
        for (int step = 0; step < sc.max_tokens && pos < max_pos; ++step) {
            const Token t = sample_token(logits.values, sc.temperature, rng,
                                         step == 0 ? std::span<const Token>(sc.banned_first) : std::span<const Token>{});
            if (is_stop_token(model, t)) break;
            cand.tokens.push_back(t);
            model.tokenizer().append(cand.text, t);
            if (step + 1 == sc.max_tokens || pos + 1 >= max_pos) break;
            logits = *model.decode_one(kv, t, pos++, scratch, true);
        }
        kv.seq_clear(scratch);
        if (cand.text.empty()) continue;
        const bool dup = std::any_of(out.begin(), out.end(), [&](const Candidate & c) { return c.text == cand.text; });
        if (!dup) out.push_back(std::move(cand));
    }
    return out;
}

} // namespace imekit
