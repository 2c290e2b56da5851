#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "imekit/embedder.hpp"
#include "imekit/hnsw.hpp"
#include "imekit/kv_store.hpp"
#include "imekit/model.hpp"
#include "imekit/reward.hpp"

namespace imekit {

inline constexpr int memory_schema_version = 1;

struct MemoryRecord {
    std::uint64_t id = 0;
    std::string text;
    std::map<std::string, std::string> fields;
    std::vector<float> embedding;
    std::uint64_t created_at = 0;
    std::uint64_t updated_at = 0;
    std::string source_trace;
    std::optional<std::string> style_tag;
};

struct ScoredRecord {
    MemoryRecord record;
    float score = 0.0f;
};

/// Read-only view of the live fact set. The foreground searches one of these
/// while the background keeps writing to the store.
class FactSnapshot {
public:
    FactSnapshot(std::shared_ptr<const Embedder> embedder, HnswParams params)
        : embedder_(std::move(embedder)), index_(embedder_->dim(), params) {}

    std::size_t size() const { return records_.size() - deleted_.size(); }
    bool empty() const { return size() == 0; }

    bool contains(std::uint64_t id) const { return records_.contains(id) && !deleted_.contains(id); }

    const MemoryRecord * get(std::uint64_t id) const {
        if (!contains(id)) return nullptr;
        return &records_.at(id);
    }

    std::vector<MemoryRecord> live() const {
        std::vector<MemoryRecord> out;
        for (const auto & [id, r] : records_) {
            if (!deleted_.contains(id)) out.push_back(r);
        }
        return out;
    }

    /// Top-k live records by cosine similarity, best first. The graph keeps
    /// deleted nodes, so the beam is widened by the tombstone count and
    /// deleted ids are dropped afterwards.
    std::vector<ScoredRecord> search(std::string_view query, std::size_t k) const {
        if (k == 0 || empty()) return {};
        const auto q = embedder_->embed(query);
        const auto want = k + deleted_.size();
        const auto hits = index_.search(q, want, std::max(index_.params().ef_search, want));
        std::vector<ScoredRecord> out;
        for (const auto & h : hits) {
            if (deleted_.contains(h.id)) continue;
            out.push_back({records_.at(h.id), h.score});
            if (out.size() == k) break;
        }
        return out;
    }

    const HnswIndex & index() const { return index_; }
    const Embedder & embedder() const { return *embedder_; }

protected:
    std::shared_ptr<const Embedder> embedder_;
    HnswIndex index_;
    std::map<std::uint64_t, MemoryRecord> records_;
    std::set<std::uint64_t> deleted_;
};

/// L2 tier: plaintext fact store. Every mutation is appended to a
/// line-delimited JSON file (adds and tombstones); replaying the file
/// reconstructs the same records, ids, clock and graph.
class FactStore : private FactSnapshot {
public:
    explicit FactStore(std::shared_ptr<const Embedder> embedder, std::string path = {}, HnswParams params = {})
        : FactSnapshot(std::move(embedder), params), path_(std::move(path)) {
        if (!path_.empty() && std::filesystem::exists(path_)) replay();
    }

    using FactSnapshot::contains;
    using FactSnapshot::embedder;
    using FactSnapshot::empty;
    using FactSnapshot::get;
    using FactSnapshot::index;
    using FactSnapshot::live;
    using FactSnapshot::search;
    using FactSnapshot::size;

    const std::string & path() const { return path_; }
    std::uint64_t clock() const { return clock_; }

    /// Adds a fact. A second insert with the same non-empty source_trace
    /// returns the existing record without writing anything.
    MemoryRecord insert_fact(std::string_view text, std::map<std::string, std::string> fields,
                             std::string_view source_trace, std::optional<std::string> style_tag = std::nullopt) {
        if (trim(text).empty()) throw Error(ErrorCode::validation, "fact text must be non-empty");
        if (!source_trace.empty()) {
            if (auto it = by_trace_.find(std::string(source_trace)); it != by_trace_.end()) return records_.at(it->second);
        }
        MemoryRecord r;
        r.id = next_id_;
        r.text = std::string(trim(text));
        r.fields = std::move(fields);
        r.source_trace = std::string(source_trace);
        r.style_tag = std::move(style_tag);
        r.created_at = r.updated_at = clock_ + 1;
        append(add_line(r));
        apply_add(r);
        return records_.at(r.id);
    }

    void delete_fact(std::uint64_t id) {
        if (!contains(id)) throw Error(ErrorCode::not_found, "no live fact with id " + std::to_string(id));
        nlohmann::json j = {{"v", memory_schema_version}, {"op", "del"}, {"id", id}, {"at", clock_ + 1}};
        append(j.dump());
        apply_del(id, clock_ + 1);
    }

    bool has_trace(std::string_view trace_id) const { return by_trace_.contains(std::string(trace_id)); }

    std::shared_ptr<const FactSnapshot> snapshot() const {
        return std::make_shared<const FactSnapshot>(static_cast<const FactSnapshot &>(*this));
    }

    /// Tombstoned ids, for audits.
    const std::set<std::uint64_t> & tombstones() const { return deleted_; }

private:
    static std::string add_line(const MemoryRecord & r) {
        nlohmann::json j = {{"v", memory_schema_version}, {"op", "add"},   {"id", r.id},
                            {"text", r.text},             {"fields", r.fields}, {"source_trace", r.source_trace},
                            {"created_at", r.created_at}, {"updated_at", r.updated_at}};
        j["style"] = r.style_tag ? nlohmann::json(*r.style_tag) : nlohmann::json(nullptr);
        return j.dump();
    }

    void append(const std::string & line) {
        if (path_.empty()) return;
        std::ofstream os(path_, std::ios::app | std::ios::binary);
        if (!os) throw Error(ErrorCode::io, "cannot open " + path_);
        os << line << '\n';
        os.flush();
        if (!os) throw Error(ErrorCode::io, "write failed on " + path_);
    }

    void apply_add(MemoryRecord r) {
        r.embedding = embedder_->embed(r.text);
        index_.insert(r.id, r.embedding);
        if (!r.source_trace.empty()) by_trace_[r.source_trace] = r.id;
        next_id_ = std::max(next_id_, r.id + 1);
        clock_ = std::max(clock_, r.updated_at);
        records_[r.id] = std::move(r);
    }

    void apply_del(std::uint64_t id, std::uint64_t at) {
        deleted_.insert(id);
        clock_ = std::max(clock_, at);
    }

    void replay() {
        std::ifstream is(path_, std::ios::binary);
        if (!is) throw Error(ErrorCode::io, "cannot open " + path_);
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            if (trim(line).empty()) continue;
            auto j = nlohmann::json::parse(line, nullptr, false);
            if (j.is_discarded() || !j.is_object() || j.value("v", 0) != memory_schema_version) {
                throw Error(ErrorCode::validation, path_ + ":" + std::to_string(lineno) + ": bad record");
            }
            const auto op = j.value("op", std::string{});
            if (op == "add") {
                MemoryRecord r;
                r.id = j.at("id").get<std::uint64_t>();
                r.text = j.at("text").get<std::string>();
                r.fields = j.value("fields", std::map<std::string, std::string>{});
                r.source_trace = j.value("source_trace", std::string{});
                r.created_at = j.value("created_at", std::uint64_t{0});
                r.updated_at = j.value("updated_at", r.created_at);
                if (j.contains("style") && j["style"].is_string()) r.style_tag = j["style"].get<std::string>();
                apply_add(std::move(r));
            } else if (op == "del") {
                apply_del(j.at("id").get<std::uint64_t>(), j.value("at", std::uint64_t{0}));
            } else {
                throw Error(ErrorCode::validation, path_ + ":" + std::to_string(lineno) + ": unknown op");
            }
        }
    }

    std::string path_;
    std::uint64_t next_id_ = 1;
    std::uint64_t clock_ = 0;
    std::map<std::string, std::uint64_t> by_trace_;
};

/// L3 tier entry.
struct TrajectoryEntry {
    std::uint64_t id = 0;
    std::string trace_id;
    std::string prompt;
    std::string output;
    TaskClass task = TaskClass::A;
    double reward = 0.0;
    std::string think_branch;
    std::string task_branch;
    std::uint64_t created_at = 0;

    nlohmann::json to_json() const {
        return {{"v", memory_schema_version}, {"id", id}, {"trace_id", trace_id}, {"prompt", prompt},
                {"output", output}, {"class", std::string(to_string(task))}, {"reward", reward},
                {"think_branch", think_branch}, {"task_branch", task_branch}, {"created_at", created_at}};
    }

    static TrajectoryEntry from_json(const nlohmann::json & j) {
        TrajectoryEntry e;
        e.id = j.at("id").get<std::uint64_t>();
        e.trace_id = j.value("trace_id", std::string{});
        e.prompt = j.at("prompt").get<std::string>();
        e.output = j.at("output").get<std::string>();
        e.task = parse_task_class(j.at("class").get<std::string>());
        e.reward = j.at("reward").get<double>();
        e.think_branch = j.value("think_branch", std::string{});
        e.task_branch = j.value("task_branch", std::string{});
        e.created_at = j.value("created_at", std::uint64_t{0});
        return e;
    }
};

/// L3 tier: append-only trajectory log with monotone ids.
class TrajectoryLog {
public:
    explicit TrajectoryLog(std::string path = {}) : path_(std::move(path)) {
        if (path_.empty() || !std::filesystem::exists(path_)) return;
        std::ifstream is(path_, std::ios::binary);
        std::string line;
        while (std::getline(is, line)) {
            if (trim(line).empty()) continue;
            auto j = nlohmann::json::parse(line, nullptr, false);
            if (j.is_discarded()) throw Error(ErrorCode::validation, path_ + ": bad trajectory line");
            entries_.push_back(TrajectoryEntry::from_json(j));
        }
        if (!entries_.empty()) next_id_ = entries_.back().id + 1;
    }

    /// Assigns the next id and timestamp, appends, and returns the id.
    std::uint64_t log_trajectory(TrajectoryEntry e) {
        e.id = next_id_++;
        e.created_at = e.id;
        if (!path_.empty()) {
            std::ofstream os(path_, std::ios::app | std::ios::binary);
            if (!os) throw Error(ErrorCode::io, "cannot open " + path_);
            os << e.to_json().dump() << '\n';
        }
        entries_.push_back(std::move(e));
        return entries_.back().id;
    }

    const std::vector<TrajectoryEntry> & entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }

    bool has_trace(std::string_view trace_id) const {
        return std::any_of(entries_.begin(), entries_.end(), [&](const auto & e) { return e.trace_id == trace_id; });
    }

    /// Training-corpus lines (prompt, output, class, reward) in id order.
    std::vector<std::string> export_lines(const std::function<bool(const TrajectoryEntry &)> & filter = {}) const {
        std::vector<std::string> out;
        for (const auto & e : entries_) {
            if (filter && !filter(e)) continue;
            nlohmann::json j = {{"id", e.id}, {"prompt", e.prompt}, {"output", e.output},
                                {"class", std::string(to_string(e.task))}, {"reward", e.reward}};
            out.push_back(j.dump());
        }
        return out;
    }

    std::size_t export_dataset(const std::string & out_path,
                               const std::function<bool(const TrajectoryEntry &)> & filter = {}) const {
        std::ofstream os(out_path, std::ios::binary | std::ios::trunc);
        if (!os) throw Error(ErrorCode::io, "cannot open " + out_path);
        const auto lines = export_lines(filter);
        for (const auto & l : lines) os << l << '\n';
        return lines.size();
    }

private:
    std::string path_;
    std::vector<TrajectoryEntry> entries_;
    std::uint64_t next_id_ = 1;
};

/// L1 tier: precomputed K/V for a token span, keys rotated for positions
/// ref_pos..ref_pos+len-1.
struct L1Blob {
    std::string id;
    TokenSequence tokens;
    KvLayout layout;
    std::vector<float> keys;   // len x n_layers x d_model
    std::vector<float> values; // same shape
    Pos ref_pos = 0;
    std::string style_tag;

    std::size_t stride() const { return static_cast<std::size_t>(layout.n_layers) * static_cast<std::size_t>(layout.d_model()); }

    bool consistent() const {
        return keys.size() == tokens.size() * stride() && values.size() == keys.size();
    }

    void save(const std::string & path) const {
        std::ofstream os(path, std::ios::binary | std::ios::trunc);
        if (!os) throw Error(ErrorCode::io, "cannot open " + path);
        os.write(magic, sizeof magic - 1);
        put_str(os, id);
        put_str(os, style_tag);
        put<std::int32_t>(os, layout.n_layers);
        put<std::int32_t>(os, layout.n_heads);
        put<std::int32_t>(os, layout.head_dim);
        put<std::int32_t>(os, ref_pos);
        put<std::uint64_t>(os, tokens.size());
        for (Token t : tokens) put<std::int32_t>(os, t);
        os.write(reinterpret_cast<const char *>(keys.data()), static_cast<std::streamsize>(keys.size() * sizeof(float)));
        os.write(reinterpret_cast<const char *>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(float)));
        if (!os) throw Error(ErrorCode::io, "write failed on " + path);
    }

    static L1Blob load(const std::string & path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw Error(ErrorCode::io, "cannot open " + path);
        char m[sizeof magic - 1];
        is.read(m, sizeof m);
        if (!is || std::string_view(m, sizeof m) != std::string_view(magic, sizeof magic - 1)) {
            throw Error(ErrorCode::validation, path + ": not an L1 blob");
        }
        L1Blob b;
        b.id = get_str(is);
        b.style_tag = get_str(is);
        b.layout.n_layers = get<std::int32_t>(is);
        b.layout.n_heads = get<std::int32_t>(is);
        b.layout.head_dim = get<std::int32_t>(is);
        b.ref_pos = get<std::int32_t>(is);
        const auto n = get<std::uint64_t>(is);
        for (std::uint64_t i = 0; i < n; ++i) b.tokens.push_back(get<std::int32_t>(is));
        b.keys.resize(n * b.stride());
        b.values.resize(n * b.stride());
        is.read(reinterpret_cast<char *>(b.keys.data()), static_cast<std::streamsize>(b.keys.size() * sizeof(float)));
        is.read(reinterpret_cast<char *>(b.values.data()), static_cast<std::streamsize>(b.values.size() * sizeof(float)));
        if (!is) throw Error(ErrorCode::io, path + ": truncated L1 blob");
        return b;
    }

private:
    static constexpr char magic[] = "IMEL1BL1";

    template <class T>
    static void put(std::ostream & os, T v) {
        os.write(reinterpret_cast<const char *>(&v), sizeof v);
    }
    template <class T>
    static T get(std::istream & is) {
        T v{};
        is.read(reinterpret_cast<char *>(&v), sizeof v);
        return v;
    }
    static void put_str(std::ostream & os, const std::string & s) {
        put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
        os.write(s.data(), static_cast<std::streamsize>(s.size()));
    }
    static std::string get_str(std::istream & is) {
        std::string s(get<std::uint32_t>(is), '\0');
        is.read(s.data(), static_cast<std::streamsize>(s.size()));
        return s;
    }
};

/// Prefills `tokens` into a throwaway store and captures their K/V at
/// reference position 0.
inline L1Blob compile_l1_blob(const LanguageModel & model, std::span<const Token> tokens, std::string style_tag = {},
                              std::string id = {}) {
    if (tokens.empty()) throw Error(ErrorCode::validation, "cannot compile an empty L1 blob");
    const auto & cfg = model.config();
    KvStore kv(cfg.kv_layout(), tokens.size(), 2, cfg.rope_base);
    model.prefill(kv, tokens, 0, 0);
    L1Blob b;
    b.id = std::move(id);
    b.style_tag = std::move(style_tag);
    b.tokens.assign(tokens.begin(), tokens.end());
    b.layout = cfg.kv_layout();
    b.ref_pos = 0;
    for (const auto & [pos, cell] : kv.view(0)) {
        for (int l = 0; l < b.layout.n_layers; ++l) {
            const auto k = kv.key(cell, l);
            const auto v = kv.value(cell, l);
            b.keys.insert(b.keys.end(), k.begin(), k.end());
            b.values.insert(b.values.end(), v.begin(), v.end());
        }
    }
    return b;
}

/// Writes the blob's cells into `seq` at [target_pos, target_pos + len),
/// phase-shifting keys by (target_pos - ref_pos).
inline void inject_l1_blob(const L1Blob & blob, KvStore & kv, SeqId seq, Pos target_pos) {
    const auto & lay = kv.layout();
    if (lay.n_layers != blob.layout.n_layers || lay.n_heads != blob.layout.n_heads || lay.head_dim != blob.layout.head_dim) {
        throw Error(ErrorCode::configuration, "L1 blob layout does not match the KV store");
    }
    if (!blob.consistent()) throw Error(ErrorCode::validation, "L1 blob payload size mismatch");
    if (target_pos < 0) throw Error(ErrorCode::range, "negative injection position");
    const auto n = static_cast<Pos>(blob.tokens.size());
    for (Pos i = 0; i < n; ++i) {
        if (kv.find(seq, target_pos + i)) {
            throw Error(ErrorCode::overlap, "L1 blob target position " + std::to_string(target_pos + i) + " is occupied");
        }
    }
    if (kv.free_cells() < blob.tokens.size()) throw Error(ErrorCode::capacity, "KV cell pool exhausted");

    const Pos delta = target_pos - blob.ref_pos;
    const auto dm = static_cast<std::size_t>(lay.d_model());
    const auto hd = static_cast<std::size_t>(lay.head_dim);
    for (Pos i = 0; i < n; ++i) {
        const auto c = kv.emplace(seq, target_pos + i, blob.tokens[static_cast<std::size_t>(i)]);
        for (int l = 0; l < lay.n_layers; ++l) {
            const auto off = static_cast<std::size_t>(i) * blob.stride() + static_cast<std::size_t>(l) * dm;
            auto k = kv.key(c, l);
            auto v = kv.value(c, l);
            std::copy_n(blob.keys.begin() + static_cast<std::ptrdiff_t>(off), dm, k.begin());
            std::copy_n(blob.values.begin() + static_cast<std::ptrdiff_t>(off), dm, v.begin());
            if (delta != 0) {
                for (int h = 0; h < lay.n_heads; ++h) rope_rotate_inplace(k.subspan(static_cast<std::size_t>(h) * hd, hd), delta, kv.rope_base());
            }
        }
    }
}

} // namespace imekit
