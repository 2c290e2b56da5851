#include <gtest/gtest.h>

#include "imekit/radix_cache.hpp"
#include "imekit/reference_model.hpp"
#include "oracles.hpp"

using namespace imekit;

namespace {

ModelConfig byte_config() {
    ModelConfig c;
    c.vocab_size = 256;
    return c;
}

TokenSequence bytes(std::string_view s) { return TokenSequence(s.begin(), s.end()); }

std::vector<SeqId> pool(SeqId n) {
    std::vector<SeqId> p;
    for (SeqId s = 1; s <= n; ++s) p.push_back(s);
    return p;
}

std::size_t brute_lcp(const std::vector<TokenSequence> & stored, const TokenSequence & q) {
    std::size_t best = 0;
    for (const auto & s : stored) {
        std::size_t i = 0;
        while (i < s.size() && i < q.size() && s[i] == q[i]) ++i;
        best = std::max(best, i);
    }
    return best;
}

struct Env {
    ReferenceModel model{byte_config()};
    KvStore kv{model.config().kv_layout(), 4096, 16};
    RadixCache radix{pool(12)};
};

} // namespace

TEST(Radix, EmptyTreeMatchesNothing) {
    RadixCache r(pool(4));
    EXPECT_EQ(r.match_longest_prefix(bytes("anything")).matched_len, 0u);
}

TEST(Radix, ExactHitIsBound) {
    Env e;
    e.radix.resume_prefill(e.model, e.kv, bytes("abc"), 0);
    const auto m = e.radix.match_longest_prefix(bytes("abc"));
    EXPECT_EQ(m.matched_len, 3u);
    ASSERT_TRUE(e.radix.find_exact(bytes("abc")));
    EXPECT_TRUE(e.radix.node(*e.radix.find_exact(bytes("abc"))).seq.has_value());
}

TEST(Radix, DivergenceMatchesBruteForceLcp) {
    Env e;
    e.radix.resume_prefill(e.model, e.kv, bytes("hello world"), 0);
    const auto m = e.radix.match_longest_prefix(bytes("hello there"));
    EXPECT_EQ(m.matched_len, bytes("hello ").size());
    ASSERT_TRUE(m.source);
    EXPECT_TRUE(e.radix.check_invariants(e.kv));
}

TEST(Radix, RandomInsertsAgreeWithBruteForce) {
    Env e;
    StreamRng rng(21);
    std::vector<TokenSequence> stored;
    for (int i = 0; i < 40; ++i) {
        TokenSequence t(1 + rng.below(12));
        for (auto & x : t) x = static_cast<Token>('a' + rng.below(3));
        TokenSequence q(1 + rng.below(12));
        for (auto & x : q) x = static_cast<Token>('a' + rng.below(3));
        // Only sequences still bound can be matched against.
        stored = e.radix.bound_prefixes();
        EXPECT_EQ(e.radix.match_longest_prefix(q).matched_len, brute_lcp(stored, q));
        e.radix.resume_prefill(e.model, e.kv, t, 0);
        ASSERT_TRUE(e.radix.check_invariants(e.kv));
    }
}

TEST(Radix, ResubmissionRecomputesOneToken) {
    Env e;
    const auto ctx = bytes("a fairly long context that has been cached already");
    e.radix.resume_prefill(e.model, e.kv, ctx, 0);
    const auto before = e.kv.stats();
    RadixCache::ResumeInfo info;
    const auto warm = e.radix.resume_prefill(e.model, e.kv, ctx, 0, &info);
    EXPECT_EQ(e.kv.stats().forward_calls - before.forward_calls, 1u);
    EXPECT_EQ(e.kv.stats().tokens_computed - before.tokens_computed, 1u);
    EXPECT_EQ(info.matched_len, ctx.size());
    KvStore cold(e.model.config().kv_layout(), 256);
    EXPECT_LE(oracle::max_abs_diff(warm.values, e.model.prefill(cold, ctx, 0, 0).values), 1e-5);
}

TEST(Radix, AppendComputesOnlyNewTokens) {
    Env e;
    TokenSequence ctx(100);
    for (std::size_t i = 0; i < ctx.size(); ++i) ctx[i] = static_cast<Token>('a' + i % 26);
    e.radix.resume_prefill(e.model, e.kv, ctx, 0);
    auto longer = ctx;
    for (char c : std::string("vwxyz")) longer.push_back(c);
    const auto before = e.kv.stats();
    e.radix.resume_prefill(e.model, e.kv, longer, 0);
    EXPECT_EQ(e.kv.stats().tokens_computed - before.tokens_computed, 5u);
    EXPECT_EQ(e.kv.stats().forward_calls - before.forward_calls, 1u);
}

TEST(Radix, ColdContextComputesEverything) {
    Env e;
    const auto ctx = bytes("cold start");
    RadixCache::ResumeInfo info;
    e.radix.resume_prefill(e.model, e.kv, ctx, 0, &info);
    EXPECT_EQ(info.computed_tokens, ctx.size());
    EXPECT_EQ(e.kv.stats().tokens_computed, ctx.size());
    EXPECT_EQ(e.radix.metrics(e.kv).misses, 1u);
}

TEST(Radix, MidEdgeMatchReusesBoundDescendant) {
    Env e;
    e.radix.resume_prefill(e.model, e.kv, bytes("abcdef"), 0);
    // "abcxyz" diverges inside the single edge "abcdef".
    const auto before = e.kv.stats();
    RadixCache::ResumeInfo info;
    const auto lg = e.radix.resume_prefill(e.model, e.kv, bytes("abcxyz"), 0, &info);
    EXPECT_EQ(info.matched_len, 3u);
    EXPECT_EQ(e.kv.stats().tokens_computed - before.tokens_computed, 3u);
    KvStore cold(e.model.config().kv_layout(), 64);
    EXPECT_LE(oracle::max_abs_diff(lg.values, e.model.prefill(cold, bytes("abcxyz"), 0, 0).values), 1e-5);
    EXPECT_TRUE(e.radix.check_invariants(e.kv));
}

TEST(Radix, LruEvictionSkipsPinned) {
    ReferenceModel model(byte_config());
    KvStore kv(model.config().kv_layout(), 4096, 8);
    RadixCache r(pool(2));
    r.resume_prefill(model, kv, bytes("first"), 0);
    const auto first = *r.find_exact(bytes("first"));
    r.pin(first);
    r.resume_prefill(model, kv, bytes("second"), 0);
    r.resume_prefill(model, kv, bytes("third"), 0);
    EXPECT_TRUE(r.find_exact(bytes("first")));
    EXPECT_FALSE(r.find_exact(bytes("second")));
    EXPECT_TRUE(r.find_exact(bytes("third")));
    EXPECT_TRUE(r.check_invariants(kv));
    r.unpin(first);
    EXPECT_EQ(r.evict(kv, 0), kv_bytes_estimate(10, kv.layout()));
    EXPECT_EQ(r.bound_sequences().size(), 0u);
}

TEST(Radix, AllPinnedIsCapacityError) {
    ReferenceModel model(byte_config());
    KvStore kv(model.config().kv_layout(), 4096, 8);
    RadixCache r(pool(1));
    r.resume_prefill(model, kv, bytes("only"), 0);
    r.pin(*r.find_exact(bytes("only")));
    try {
        r.resume_prefill(model, kv, bytes("other"), 0);
        FAIL();
    } catch (const Error & err) {
        EXPECT_EQ(err.code(), ErrorCode::capacity);
    }
}

TEST(Radix, KvByteFormula) {
    const KvLayout lay{2, 4, 16};
    EXPECT_EQ(kv_bytes_estimate(512, lay), 512u * 2u * 2u * 64u * 4u);
}
