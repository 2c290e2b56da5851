#include <gtest/gtest.h>

#include <filesystem>

#include "imekit/memory.hpp"
#include "imekit/reference_model.hpp"
#include "oracles.hpp"

using namespace imekit;
namespace fs = std::filesystem;

namespace {

std::shared_ptr<const Embedder> embedder() { return std::make_shared<TrigramHashEmbedder>(); }

fs::path temp_file(const std::string & name) {
    const auto p = fs::temp_directory_path() / ("imekit_" + name);
    fs::remove(p);
    return p;
}

ModelConfig byte_config() {
    ModelConfig c;
    c.vocab_size = 256;
    return c;
}

TokenSequence bytes(std::string_view s) { return TokenSequence(s.begin(), s.end()); }

} // namespace

TEST(FactStore, InsertSearchDelete) {
    FactStore store(embedder());
    EXPECT_TRUE(store.search("anything", 4).empty());
    const auto a = store.insert_fact("Alice lives in Lisbon.", {{"subject", "Alice"}}, "t1");
    const auto b = store.insert_fact("Bob's cat is called Pixel.", {{"subject", "Bob"}}, "t2");
    EXPECT_EQ(a.id, 1u);
    EXPECT_EQ(b.id, 2u);
    EXPECT_LT(a.created_at, b.created_at);
    EXPECT_EQ(store.search("Alice lives in Lisbon.", 1).at(0).record.id, a.id);
    store.delete_fact(a.id);
    EXPECT_FALSE(store.contains(a.id));
    for (const auto & r : store.search("Alice lives in Lisbon.", 4)) EXPECT_NE(r.record.id, a.id);
    try {
        store.delete_fact(a.id);
        FAIL();
    } catch (const Error & e) {
        EXPECT_EQ(e.code(), ErrorCode::not_found);
    }
    EXPECT_THROW(store.insert_fact("   ", {}, ""), Error);
}

TEST(FactStore, SourceTraceMakesInsertIdempotent) {
    FactStore store(embedder());
    const auto a = store.insert_fact("fact one", {}, "trace-9");
    const auto again = store.insert_fact("different text", {}, "trace-9");
    EXPECT_EQ(a.id, again.id);
    EXPECT_EQ(again.text, "fact one");
    EXPECT_EQ(store.size(), 1u);
}

TEST(FactStore, SnapshotIsIsolatedFromLaterWrites) {
    FactStore store(embedder());
    store.insert_fact("first fact", {}, "");
    const auto snap = store.snapshot();
    store.insert_fact("second fact", {}, "");
    EXPECT_EQ(snap->size(), 1u);
    EXPECT_EQ(store.size(), 2u);
}

TEST(FactStore, ReplayReconstructsState) {
    const auto path = temp_file("facts.jsonl");
    std::vector<std::uint64_t> ids;
    {
        FactStore store(embedder(), path.string());
        for (int i = 0; i < 20; ++i) ids.push_back(store.insert_fact("fact number " + std::to_string(i), {{"i", std::to_string(i)}}, "tr" + std::to_string(i), i % 2 ? std::optional<std::string>("casual") : std::nullopt).id);
        store.delete_fact(ids[3]);
        store.delete_fact(ids[7]);
    }
    FactStore a(embedder(), path.string());
    EXPECT_EQ(a.size(), 18u);
    EXPECT_FALSE(a.contains(ids[3]));
    EXPECT_TRUE(a.has_trace("tr3"));
    EXPECT_EQ(a.get(ids[5])->style_tag, "casual");
    EXPECT_EQ(a.get(ids[4])->fields.at("i"), "4");
    const auto next = a.insert_fact("fresh", {}, "");
    EXPECT_EQ(next.id, 21u);
    EXPECT_EQ(next.created_at, 23u);
    const auto r1 = a.search("fact number 12", 3);
    FactStore b(embedder(), path.string());
    const auto r2 = b.search("fact number 12", 3);
    ASSERT_EQ(r1.size(), r2.size());
    for (std::size_t i = 0; i < r1.size(); ++i) EXPECT_EQ(r1[i].record.id, r2[i].record.id);
    fs::remove(path);
}

TEST(FactStore, BadLogIsValidationError) {
    const auto path = temp_file("bad.jsonl");
    {
        std::ofstream os(path);
        os << "{\"v\":1,\"op\":\"zap\"}\n";
    }
    try {
        FactStore s(embedder(), path.string());
        FAIL();
    } catch (const Error & e) {
        EXPECT_EQ(e.code(), ErrorCode::validation);
    }
    fs::remove(path);
}

TEST(FactStore, EveryFactRetrievesItselfFirst) {
    FactStore store(embedder());
    const std::vector<std::string> texts = {"Alice lives in Lisbon.", "Bob's dog is called Rex.", "Carol works at the bakery.",
                                            "Dan likes green tea.", "Eve was born in March."};
    for (const auto & t : texts) store.insert_fact(t, {}, "");
    for (const auto & r : store.live()) EXPECT_EQ(store.search(r.text, 1).at(0).record.id, r.id);
}

TEST(TrajectoryLog, AppendReloadExport) {
    const auto path = temp_file("traj.jsonl");
    {
        TrajectoryLog log(path.string());
        TrajectoryEntry e;
        e.trace_id = "t1";
        e.prompt = "p";
        e.output = "<NO_MEM>";
        e.task = TaskClass::C2;
        e.reward = 1.5;
        EXPECT_EQ(log.log_trajectory(e), 1u);
        e.trace_id = "t2";
        e.task = TaskClass::C1;
        e.reward = -1.0;
        EXPECT_EQ(log.log_trajectory(e), 2u);
    }
    TrajectoryLog log(path.string());
    EXPECT_EQ(log.size(), 2u);
    EXPECT_TRUE(log.has_trace("t2"));
    const auto lines = log.export_lines();
    ASSERT_EQ(lines.size(), 2u);
    const auto j = nlohmann::json::parse(lines[0]);
    EXPECT_EQ(j.at("class"), "C2");
    EXPECT_EQ(j.at("reward"), 1.5);
    EXPECT_EQ(log.export_lines([](const TrajectoryEntry & e) { return e.reward > 0; }).size(), 1u);
    fs::remove(path);
}

TEST(L1Blob, SaveLoadRoundTrip) {
    const ReferenceModel model(byte_config());
    const auto blob = compile_l1_blob(model, bytes("[MEM a=b] c\n"), "formal", "f1");
    const auto path = temp_file("blob.bin");
    blob.save(path.string());
    const auto back = L1Blob::load(path.string());
    EXPECT_EQ(back.tokens, blob.tokens);
    EXPECT_EQ(back.keys, blob.keys);
    EXPECT_EQ(back.values, blob.values);
    EXPECT_EQ(back.style_tag, "formal");
    EXPECT_EQ(back.id, "f1");
    fs::remove(path);
    EXPECT_THROW(compile_l1_blob(model, TokenSequence{}), Error);
}

TEST(L1Blob, InjectAtReferenceIsBitIdentical) {
    const ReferenceModel model(byte_config());
    const auto toks = bytes("remember this");
    const auto blob = compile_l1_blob(model, toks);
    KvStore direct(model.config().kv_layout(), 64);
    model.prefill(direct, toks, 0, 0);
    KvStore injected(model.config().kv_layout(), 64);
    inject_l1_blob(blob, injected, 0, 0);
    for (Pos p = 0; p < static_cast<Pos>(toks.size()); ++p) {
        for (int l = 0; l < model.config().n_layers; ++l) {
            EXPECT_EQ(oracle::max_abs_diff(direct.key(*direct.find(0, p), l), injected.key(*injected.find(0, p), l)), 0.0);
            EXPECT_EQ(oracle::max_abs_diff(direct.value(*direct.find(0, p), l), injected.value(*injected.find(0, p), l)), 0.0);
        }
    }
}

TEST(L1Blob, ShiftedInjectMatchesRecomputedFirstLayerKeys) {
    const ReferenceModel model(byte_config());
    const auto mem = bytes("fact text");
    const auto blob = compile_l1_blob(model, mem);
    TokenSequence full(10, 'z');
    full.insert(full.end(), mem.begin(), mem.end());
    KvStore recomputed(model.config().kv_layout(), 64);
    model.prefill(recomputed, full, 0, 0);
    KvStore injected(model.config().kv_layout(), 64);
    inject_l1_blob(blob, injected, 0, 10);
    // First-layer keys depend only on the token and its position.
    for (Pos i = 0; i < static_cast<Pos>(mem.size()); ++i) {
        EXPECT_LE(oracle::max_abs_diff(recomputed.key(*recomputed.find(0, 10 + i), 0), injected.key(*injected.find(0, 10 + i), 0)), 1e-5);
    }
    try {
        inject_l1_blob(blob, injected, 0, 12);
        FAIL();
    } catch (const Error & e) {
        EXPECT_EQ(e.code(), ErrorCode::overlap);
    }
}
