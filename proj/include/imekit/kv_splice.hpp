#pragma once

#include <algorithm>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "imekit/kv_store.hpp"
#include "imekit/model.hpp"
#include "imekit/sampling.hpp"

namespace imekit {

struct PrefixSuffix {
    std::size_t prefix = 0;
    std::size_t suffix = 0;
};

/// Longest common prefix and suffix of b and f, with the suffix clamped so the
/// two never overlap in the shorter sequence (prefix wins).
inline PrefixSuffix common_prefix_suffix(std::span<const Token> b, std::span<const Token> f) {
    const std::size_t lim = std::min(b.size(), f.size());
    PrefixSuffix r;
    while (r.prefix < lim && b[r.prefix] == f[r.prefix]) ++r.prefix;
    while (r.suffix < lim - r.prefix && b[b.size() - 1 - r.suffix] == f[f.size() - 1 - r.suffix]) ++r.suffix;
    return r;
}

/// Token bookkeeping for one splice of M between P and S.
struct SplicePlan {
    TokenSequence base; // P || S
    TokenSequence full; // P || M || S
    std::size_t prefix_len = 0;
    std::size_t suffix_len = 0;
    Pos insert_pos = 0;
    Pos deleted = 0;
    Pos inserted = 0;
    Pos delta = 0;
    SeqId work_seq = 0;
    SeqId temp_seq = 0;
};

inline SplicePlan make_splice_plan(std::span<const Token> P, std::span<const Token> M, std::span<const Token> S,
                                   int n_seq_max) {
    SplicePlan plan;
    plan.base.assign(P.begin(), P.end());
    plan.base.insert(plan.base.end(), S.begin(), S.end());
    plan.full.assign(P.begin(), P.end());
    plan.full.insert(plan.full.end(), M.begin(), M.end());
    plan.full.insert(plan.full.end(), S.begin(), S.end());
    const auto ps = common_prefix_suffix(plan.base, plan.full);
    plan.prefix_len = ps.prefix;
    plan.suffix_len = ps.suffix;
    plan.insert_pos = static_cast<Pos>(ps.prefix);
    plan.deleted = static_cast<Pos>(plan.base.size() - ps.prefix - ps.suffix);
    plan.inserted = static_cast<Pos>(plan.full.size() - ps.prefix - ps.suffix);
    plan.delta = plan.inserted - plan.deleted;
    plan.work_seq = n_seq_max - 2;
    plan.temp_seq = n_seq_max - 1;
    return plan;
}

struct SpliceOptions {
    int K = 4;
    SamplingConfig sampling;
    /// Number of trailing tokens recomputed after the overlay.
    int recompute_window = 1;
    /// When set, fills the temp sequence with M's K/V at insert_pos instead of
    /// decoding M (precompiled memory blobs).
    std::function<void(KvStore &, SeqId temp_seq, Pos insert_pos)> inject_memory;
    /// Test hook run right after the overlay step.
    std::function<void(KvStore &, const SplicePlan &)> after_overlay;
};

struct SpliceTrace {
    std::size_t prefix_len = 0;
    std::size_t suffix_len = 0;
    Pos deleted = 0;
    Pos inserted = 0;
    Pos delta = 0;
    bool fallback = false;
    std::uint64_t forward_calls = 0;
    std::uint64_t tokens_computed = 0;  // splice phase only (memory + tail)
    std::uint64_t sampling_tokens = 0;
    std::string fallback_reason;

    std::string to_json_line() const {
        nlohmann::json j = {{"lp", prefix_len},       {"ls", suffix_len},
                            {"d", deleted},           {"n", inserted},
                            {"delta", delta},         {"fallback", fallback},
                            {"forward_calls", forward_calls}, {"tokens_computed", tokens_computed},
                            {"sampling_tokens", sampling_tokens}};
        if (!fallback_reason.empty()) j["fallback_reason"] = fallback_reason;
        return j.dump();
    }
};

struct SpliceResult {
    std::vector<Candidate> candidates;
    Logits logits;
    SplicePlan plan;
    /// Tokens of the work sequence right after the tail recompute.
    TokenSequence work_tokens;
    bool work_consecutive = false;
    SpliceTrace trace;
};

namespace detail {

inline void release_scratch(KvStore & kv, const SplicePlan & plan) {
    kv.seq_clear(plan.work_seq);
    kv.seq_clear(plan.temp_seq);
}

} // namespace detail

/// Full prefill of P || M || S into a fresh work sequence, then sampling.
inline SpliceResult fallback_baseline(const LanguageModel & model, KvStore & kv, std::span<const Token> P,
                                      std::span<const Token> M, std::span<const Token> S, const SpliceOptions & opt) {
    SpliceResult r;
    r.plan = make_splice_plan(P, M, S, kv.n_seq_max());
    detail::release_scratch(kv, r.plan);
    const auto before = kv.stats();
    if (!r.plan.full.empty()) {
        r.logits = model.prefill(kv, r.plan.full, r.plan.work_seq, 0);
        r.work_tokens = kv.seq_tokens(r.plan.work_seq);
        r.work_consecutive = kv.pos_consecutive(r.plan.work_seq);
        const auto mid = kv.stats();
        r.candidates = sample_candidates(model, kv, r.plan.work_seq, r.logits, opt.K, r.plan.temp_seq, opt.sampling);
        r.trace.tokens_computed = mid.tokens_computed - before.tokens_computed;
        r.trace.sampling_tokens = kv.stats().tokens_computed - mid.tokens_computed;
    }
    r.trace.forward_calls = kv.stats().forward_calls - before.forward_calls;
    r.trace.fallback = true;
    detail::release_scratch(kv, r.plan);
    return r;
}

/// Injects memory tokens M between prefix P and suffix S of the live base
/// sequence seq0 (which holds P || S) and samples K candidates:
///   copy seq0 to the work sequence, drop the deleted span, shift and
///   re-rotate the retained tail by delta, decode M on a prefix-only temp
///   sequence, overlay it into the work sequence, recompute the last token.
/// Any failure, an empty candidate set, or a non-consecutive work sequence
/// falls back to a full prefill. seq0 is never modified.
inline SpliceResult kv_splice(const LanguageModel & model, KvStore & kv, SeqId seq0, std::span<const Token> P,
                              std::span<const Token> M, std::span<const Token> S, const SpliceOptions & opt = {}) {
    SpliceResult r;
    r.plan = make_splice_plan(P, M, S, kv.n_seq_max());
    const auto & plan = r.plan;
    auto & tr = r.trace;
    tr.prefix_len = plan.prefix_len;
    tr.suffix_len = plan.suffix_len;
    tr.deleted = plan.deleted;
    tr.inserted = plan.inserted;
    tr.delta = plan.delta;

    const auto before = kv.stats();
    auto fallback = [&](std::string reason) {
        auto fb = fallback_baseline(model, kv, P, M, S, opt);
        fb.trace.prefix_len = tr.prefix_len;
        fb.trace.suffix_len = tr.suffix_len;
        fb.trace.deleted = tr.deleted;
        fb.trace.inserted = tr.inserted;
        fb.trace.delta = tr.delta;
        fb.trace.fallback_reason = std::move(reason);
        fb.trace.forward_calls = kv.stats().forward_calls - before.forward_calls;
        return fb;
    };

    if (plan.full.empty()) return fallback("empty context");
    if (seq0 == plan.work_seq || seq0 == plan.temp_seq) return fallback("seq0 aliases a scratch sequence");
    if (kv.seq_tokens(seq0) != plan.base || !kv.pos_consecutive(seq0)) return fallback("seq0 does not hold P||S");

    const SeqId sw = plan.work_seq;
    const SeqId st = plan.temp_seq;
    const Pos p_ins = plan.insert_pos;
    const Pos d = plan.deleted;
    const Pos n = plan.inserted;

    try {
        detail::release_scratch(kv, plan);
        kv.seq_cp(seq0, sw, 0, KvStore::to_end);
        kv.seq_rm(sw, p_ins, p_ins + d);
        kv.seq_add(sw, p_ins + d, KvStore::to_end, plan.delta);
        kv.seq_cp(seq0, st, 0, KvStore::to_end);
        kv.seq_rm(st, p_ins, KvStore::to_end); // keep prefix only
        if (opt.inject_memory) {
            opt.inject_memory(kv, st, p_ins);
        } else {
            for (Pos j = 0; j < n; ++j) {
                model.decode_one(kv, plan.full[static_cast<std::size_t>(p_ins + j)], p_ins + j, st, false);
            }
        }
        kv.seq_cp_overlay(st, sw, p_ins, p_ins + n);
        if (opt.after_overlay) opt.after_overlay(kv, plan);

        const Pos p_last = static_cast<Pos>(plan.full.size()) - 1;
        const Pos window = std::clamp<Pos>(opt.recompute_window, 1, p_last + 1);
        const Pos first = p_last - window + 1;
        kv.seq_rm(sw, first, p_last + 1);
        for (Pos p = first; p < p_last; ++p) model.decode_one(kv, plan.full[static_cast<std::size_t>(p)], p, sw, false);
        r.logits = *model.decode_one(kv, plan.full[static_cast<std::size_t>(p_last)], p_last, sw, true);

        r.work_tokens = kv.seq_tokens(sw);
        r.work_consecutive = kv.pos_consecutive(sw);
        const auto mid = kv.stats();
        tr.tokens_computed = mid.tokens_computed - before.tokens_computed;
        kv.seq_clear(st);
        r.candidates = sample_candidates(model, kv, sw, r.logits, opt.K, st, opt.sampling);
        tr.sampling_tokens = kv.stats().tokens_computed - mid.tokens_computed;
    } catch (const Error & e) {
        detail::release_scratch(kv, plan);
        return fallback(e.what());
    }

    if (r.candidates.empty() || !r.work_consecutive) {
        detail::release_scratch(kv, plan);
        return fallback(r.candidates.empty() ? "no candidates" : "work sequence not consecutive");
    }
    tr.forward_calls = kv.stats().forward_calls - before.forward_calls;
    detail::release_scratch(kv, plan);
    return r;
}

} // namespace imekit
