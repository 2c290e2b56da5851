#include <gtest/gtest.h>

#include <filesystem>

#include "imekit/embedder.hpp"
#include "imekit/hnsw.hpp"
#include "oracles.hpp"

using namespace imekit;

namespace {

std::vector<std::vector<float>> unit_vectors(std::size_t n, std::size_t dim, std::uint64_t seed) {
    StreamRng rng(seed);
    std::vector<std::vector<float>> out(n, std::vector<float>(dim));
    for (auto & v : out) {
        double norm = 0.0;
        for (auto & x : v) {
            x = static_cast<float>(rng.normal());
            norm += static_cast<double>(x) * x;
        }
        for (auto & x : v) x = static_cast<float>(x / std::sqrt(norm));
    }
    return out;
}

HnswIndex build(const std::vector<std::vector<float>> & data) {
    HnswIndex idx(data.front().size());
    for (std::size_t i = 0; i < data.size(); ++i) idx.insert(i, data[i]);
    return idx;
}

} // namespace

TEST(Hnsw, EmptyIndexReturnsNothing) {
    HnswIndex idx(8);
    const std::vector<float> q(8, 0.5f);
    EXPECT_TRUE(idx.search(q, 4).empty());
    EXPECT_TRUE(idx.check_invariants());
}

TEST(Hnsw, DimensionMismatchIsValidationError) {
    HnswIndex idx(8);
    const std::vector<float> v(7, 0.1f);
    try {
        idx.insert(0, v);
        FAIL();
    } catch (const Error & e) {
        EXPECT_EQ(e.code(), ErrorCode::validation);
    }
}

TEST(Hnsw, RecallAgainstBruteForce) {
    const auto data = unit_vectors(200, 64, 1);
    const auto queries = unit_vectors(100, 64, 2);
    const auto idx = build(data);
    ASSERT_TRUE(idx.check_invariants());
    std::size_t hit = 0;
    for (const auto & q : queries) {
        const auto truth = oracle::top_k(data, q, 4);
        const auto got = idx.search(q, 4);
        ASSERT_EQ(got.size(), 4u);
        for (const auto & g : got) hit += std::count(truth.begin(), truth.end(), g.id);
    }
    EXPECT_GE(static_cast<double>(hit) / 400.0, 0.95);
}

TEST(Hnsw, SelfQueryIsTopOne) {
    const auto data = unit_vectors(300, 32, 3);
    const auto idx = build(data);
    for (std::size_t i = 0; i < data.size(); i += 17) {
        const auto r = idx.search(data[i], 1);
        ASSERT_EQ(r.size(), 1u);
        EXPECT_EQ(r[0].id, i);
        EXPECT_NEAR(r[0].score, 1.0f, 1e-5);
    }
}

TEST(Hnsw, ResultsSortedByScore) {
    const auto data = unit_vectors(100, 16, 4);
    const auto idx = build(data);
    const auto r = idx.search(data[5], 10);
    for (std::size_t i = 1; i < r.size(); ++i) EXPECT_GE(r[i - 1].score, r[i].score);
}

TEST(Hnsw, SaveLoadRoundTrip) {
    const auto data = unit_vectors(120, 16, 5);
    const auto idx = build(data);
    const auto path = (std::filesystem::temp_directory_path() / "imekit_hnsw_test.bin").string();
    idx.save(path);
    auto loaded = HnswIndex::load(path);
    EXPECT_EQ(loaded.size(), idx.size());
    EXPECT_TRUE(loaded.check_invariants());
    const auto q = unit_vectors(1, 16, 6)[0];
    const auto a = idx.search(q, 5);
    const auto b = loaded.search(q, 5);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].id, b[i].id);
    // Inserting after a load behaves like inserting into the original.
    auto grown = build(data);
    const auto extra = unit_vectors(1, 16, 7)[0];
    grown.insert(999, extra);
    loaded.insert(999, extra);
    EXPECT_EQ(grown.search(extra, 3)[0].id, loaded.search(extra, 3)[0].id);
    std::filesystem::remove(path);
    EXPECT_THROW(HnswIndex::load(path), Error);
}

TEST(Embedder, UnitNormAndDeterministic) {
    const TrigramHashEmbedder e;
    EXPECT_EQ(e.dim(), 64u);
    for (std::string_view s : {"a", "Alice lives in Lisbon", "日本語"}) {
        const auto v = e.embed(s);
        double n = 0.0;
        for (float x : v) n += static_cast<double>(x) * x;
        EXPECT_NEAR(n, 1.0, 1e-6);
        EXPECT_EQ(v, e.embed(s));
    }
    EXPECT_EQ(e.embed("ABC"), e.embed("abc"));
}
