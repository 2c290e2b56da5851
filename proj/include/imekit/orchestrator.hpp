#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "imekit/curation.hpp"
#include "imekit/embedder.hpp"
#include "imekit/kv_splice.hpp"
#include "imekit/kv_store.hpp"
#include "imekit/memory.hpp"
#include "imekit/model.hpp"
#include "imekit/radix_cache.hpp"
#include "imekit/sampling.hpp"

namespace imekit {

struct ChatMessage {
    std::string role; // "user" (the person typing) or "assistant" (the other party)
    std::string text;
};

struct SyncRequest {
    std::string session;
    std::vector<ChatMessage> messages;
    std::string style;
};

struct SyncAck {
    bool ok = true;
    std::string error; // ErrorCode name when !ok
    std::string message;
    std::size_t context_tokens = 0;
    std::size_t matched_tokens = 0;
    std::size_t computed_tokens = 0;
    std::size_t truncated_messages = 0;
    bool style_blob_injected = false;
    double latency_ms = 0.0;

    nlohmann::json to_json() const {
        nlohmann::json j = {{"ok", ok}, {"context_tokens", context_tokens}, {"matched_tokens", matched_tokens},
                            {"computed_tokens", computed_tokens}, {"truncated_messages", truncated_messages},
                            {"style_blob_injected", style_blob_injected}, {"latency_ms", latency_ms}};
        if (!ok) {
            j["error"] = error;
            j["message"] = message;
        }
        return j;
    }
};

struct CandidateEntry {
    std::string text;
    TokenSequence tokens;
    std::optional<std::uint64_t> record_id; // set for memory-grounded candidates

    std::string provenance() const { return record_id ? "memory" : "direct"; }
};

struct CandidateSet {
    std::vector<CandidateEntry> candidates; // first one is the GhostText
    std::string path = "direct";            // direct | splice | l1_blob | fallback
    bool retrieval_triggered = false;
    bool retrieval_miss = false;
    std::string query;
    double ttfc_ms = 0.0;
    std::size_t reused_tokens = 0;
    std::uint64_t prefill_tokens = 0; // context tokens recomputed for this event
    std::uint64_t forward_calls = 0;
    std::uint64_t tokens_computed = 0;

    nlohmann::json to_json() const {
        nlohmann::json cands = nlohmann::json::array();
        for (const auto & c : candidates) {
            nlohmann::json e = {{"text", c.text}, {"provenance", c.provenance()}};
            if (c.record_id) e["record_id"] = *c.record_id;
            cands.push_back(e);
        }
        return {{"candidates", cands},
                {"path", path},
                {"retrieval_triggered", retrieval_triggered},
                {"retrieval_miss", retrieval_miss},
                {"query", query},
                {"timing",
                 {{"ttfc_ms", ttfc_ms},
                  {"reused_tokens", reused_tokens},
                  {"prefill_tokens", prefill_tokens},
                  {"forward_calls", forward_calls},
                  {"tokens_computed", tokens_computed}}}};
    }
};

struct EngineConfig {
    std::vector<std::string> styles = {"formal", "casual", "playful"};
    std::string default_style = "casual";
    int K = 4;
    SamplingConfig sampling;
    std::size_t kv_capacity = 1u << 14;
    /// History is truncated from the oldest message to stay under this.
    std::size_t max_context_tokens = 768;
    std::size_t retrieval_k = 4;
    int probe_budget = 64;
    bool use_style_blobs = true;
    bool use_l1_blobs = true;
    std::size_t l1_hit_threshold = 3;
    bool background_thread = false;
    std::string facts_path;
    std::string trajectory_path;
    HnswParams hnsw;
    Curator::Hooks curation_hooks;
};

struct SessionState {
    std::string id;
    std::vector<ChatMessage> history;
    std::string style;
    SeqId seq0 = 0;
    std::deque<Trace> traces;
    std::set<std::string> seen_traces;
    TokenSequence context;  // formatted history (header + turns)
    std::string composing;  // current line being typed
    TokenSequence seq0_tokens;
    Logits logits;          // last-position logits of seq0
    std::vector<CandidateEntry> last_candidates;
    std::size_t events = 0;
};

/// Context template: "[STYLE:<tag>]\n" then one "U: " / "A: " line per turn.
inline std::string style_header(std::string_view style) { return "[STYLE:" + std::string(style) + "]\n"; }

inline std::string format_turn(const ChatMessage & m) { return (m.role == "user" ? "U: " : "A: ") + m.text + "\n"; }

inline std::string composing_line(std::string_view typed) { return "U: " + std::string(typed); }

inline std::string trace_id_for(std::string_view session, std::string_view kind, std::size_t index, std::string_view text) {
    std::string key(kind);
    key += '\x1f';
    key += std::to_string(index);
    key += '\x1f';
    key.append(text);
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(key)));
    return std::string(session) + ":" + std::string(kind) + ":" + buf;
}

/// Owns every L2/L3 write. In threaded mode all work runs on a dedicated
/// thread fed by a job queue; otherwise jobs run inline on the caller.
class MemoryWorker {
public:
    MemoryWorker(ModelHandle model, const EngineConfig & cfg)
        : facts_(std::make_shared<TrigramHashEmbedder>(), cfg.facts_path, cfg.hnsw),
          log_(cfg.trajectory_path),
          curator_(std::move(model), facts_, log_, cfg.l1_hit_threshold),
          hooks_(cfg.curation_hooks),
          threaded_(cfg.background_thread) {
        publish();
        if (threaded_) thread_ = std::thread([this] { loop(); });
    }

    ~MemoryWorker() {
        if (threaded_) {
            {
                std::lock_guard lk(mu_);
                stop_ = true;
            }
            cv_.notify_all();
            thread_.join();
        }
    }

    MemoryWorker(const MemoryWorker &) = delete;
    MemoryWorker & operator=(const MemoryWorker &) = delete;

    template <class F>
    auto submit(F f) -> std::future<decltype(f())> {
        using R = decltype(f());
        auto task = std::make_shared<std::packaged_task<R()>>(std::move(f));
        auto fut = task->get_future();
        if (!threaded_) {
            (*task)();
            return fut;
        }
        {
            std::lock_guard lk(mu_);
            jobs_.emplace_back([task] { (*task)(); });
        }
        cv_.notify_all();
        return fut;
    }

    void cancel() { cancel_.store(true, std::memory_order_release); }
    bool running() const { return running_.load(); }
    std::size_t pending() const { return pending_count_.load(); }

    std::future<CurationReport> curate(std::vector<Trace> traces) {
        return submit([this, traces = std::move(traces)]() mutable {
            for (auto & t : traces) pending_.push_back(std::move(t));
            cancel_.store(false, std::memory_order_release);
            running_ = true;
            pending_count_ = pending_.size();
            Curator::Hooks hooks = hooks_;
            auto user = hooks.after_trace;
            hooks.after_trace = [this, user](std::size_t n) {
                pending_count_ = pending_.size();
                if (user) user(n);
            };
            auto rep = curator_.run(pending_, cancel_, hooks);
            pending_count_ = pending_.size();
            running_ = false;
            {
                std::lock_guard lk(status_mu_);
                last_ = rep;
                ++runs_;
                totals_.processed += rep.processed;
                totals_.inserted += rep.inserted;
                totals_.extracted += rep.extracted;
                totals_.refused += rep.refused;
                totals_.skipped += rep.skipped;
                totals_.compiled_blobs += rep.compiled_blobs;
                if (rep.preempted) ++preemptions_;
            }
            publish();
            return rep;
        });
    }

    std::future<MemoryRecord> insert_fact(std::string text, std::map<std::string, std::string> fields, std::string trace) {
        return submit([this, text = std::move(text), fields = std::move(fields), trace = std::move(trace)]() mutable {
            auto r = facts_.insert_fact(text, std::move(fields), trace);
            publish();
            return r;
        });
    }

    std::future<void> delete_fact(std::uint64_t id) {
        return submit([this, id] {
            facts_.delete_fact(id);
            curator_.drop_blob(id);
            publish();
        });
    }

    std::future<std::vector<MemoryRecord>> list() {
        return submit([this] { return facts_.live(); });
    }

    void record_hit(std::uint64_t id) {
        submit([this, id] { curator_.record_hit(id); });
    }

    std::future<std::vector<TrajectoryEntry>> trajectories() {
        return submit([this] { return log_.entries(); });
    }

    struct Published {
        std::shared_ptr<const FactSnapshot> facts;
        std::shared_ptr<const std::map<std::uint64_t, L1Blob>> blobs;
        std::uint64_t version = 0;
    };

    Published published() const {
        std::lock_guard lk(pub_mu_);
        return pub_;
    }

    nlohmann::json status() const {
        std::lock_guard lk(status_mu_);
        return {{"running", running_.load()}, {"pending", pending_count_.load()}, {"runs", runs_},
                {"preemptions", preemptions_}, {"last", last_.to_json()}, {"totals", totals_.to_json()}};
    }

private:
    void publish() {
        auto snap = facts_.snapshot();
        auto blobs = std::make_shared<const std::map<std::uint64_t, L1Blob>>(curator_.blobs());
        std::lock_guard lk(pub_mu_);
        pub_.facts = std::move(snap);
        pub_.blobs = std::move(blobs);
        ++pub_.version;
    }

    void loop() {
        for (;;) {
            std::function<void()> job;
            {
                std::unique_lock lk(mu_);
                cv_.wait(lk, [&] { return stop_ || !jobs_.empty(); });
                if (jobs_.empty()) return;
                job = std::move(jobs_.front());
                jobs_.pop_front();
            }
            job();
        }
    }

    FactStore facts_;
    TrajectoryLog log_;
    Curator curator_;
    Curator::Hooks hooks_;
    std::deque<Trace> pending_;
    std::atomic<bool> cancel_{false};
    std::atomic<bool> running_{false};
    std::atomic<std::size_t> pending_count_{0};

    mutable std::mutex status_mu_;
    CurationReport last_;
    CurationReport totals_;
    std::size_t runs_ = 0;
    std::size_t preemptions_ = 0;

    mutable std::mutex pub_mu_;
    Published pub_;

    bool threaded_;
    std::mutex mu_;
    std::condition_variable cv_;
    std::deque<std::function<void()>> jobs_;
    bool stop_ = false;
    std::thread thread_;
};

struct EngineCounters {
    std::uint64_t prefill_tokens = 0;
    std::uint64_t decode_tokens = 0;
    std::uint64_t syncs = 0;
    std::uint64_t candidate_events = 0;
    std::uint64_t retrieval_triggers = 0;
    std::uint64_t retrieval_misses = 0;
    std::uint64_t splices = 0;
    std::uint64_t splice_fallbacks = 0;
    std::uint64_t l1_injections = 0;
    std::uint64_t style_blob_injections = 0;
    std::uint64_t accepts = 0;
    std::uint64_t accepted_chars = 0;
    std::uint64_t typed_chars = 0;
};

/// Foreground engine: owns the model handle, the KV store, the radix cache and
/// the session. Memory is read through a snapshot refreshed at SYNC
/// boundaries; writes go to the MemoryWorker.
///
/// Sequence layout: 0 is the session's base sequence, 1..n-3 are the radix
/// cache pool, n-2 and n-1 are the splice work and temp sequences (the temp
/// sequence doubles as sampling scratch).
class Engine {
public:
    static constexpr SeqId seq0 = 0;

    Engine(ModelHandle model, EngineConfig cfg = {})
        : model_(std::move(model)),
          cfg_(std::move(cfg)),
          kv_(model_->config().kv_layout(), cfg_.kv_capacity, KvStore::max_sequences, model_->config().rope_base),
          radix_(make_pool()),
          worker_(model_, cfg_) {
        if (std::find(cfg_.styles.begin(), cfg_.styles.end(), cfg_.default_style) == cfg_.styles.end()) {
            throw Error(ErrorCode::configuration, "default style is not a configured style");
        }
        for (const auto & s : cfg_.styles) {
            style_blobs_.emplace(s, compile_l1_blob(*model_, model_->tokenizer().encode(style_header(s)), s, "style-" + s));
        }
        banned_first_ = {'\n'};
        const auto open = model_->tokenizer().encode(control::mem_open_text);
        if (!open.empty()) banned_first_.push_back(open.front());
        for (int i = 0; i < control::count && 256 + i < model_->config().vocab_size; ++i) banned_first_.push_back(256 + i);
        refresh_snapshot();
    }

    const LanguageModel & model() const { return *model_; }
    const EngineConfig & config() const { return cfg_; }
    KvStore & kv() { return kv_; }
    RadixCache & radix() { return radix_; }
    MemoryWorker & worker() { return worker_; }
    const EngineCounters & counters() const { return counters_; }
    const FactSnapshot & snapshot() const { return *snapshot_; }

    const SessionState * session(const std::string & id) const {
        auto it = sessions_.find(id);
        return it == sessions_.end() ? nullptr : &it->second;
    }

    SyncAck handle_sync(const SyncRequest & req) {
        const auto t0 = clock::now();
        preempt();
        SyncAck ack;
        if (!is_style(req.style)) {
            ack.ok = false;
            ack.error = "unknown_style";
            ack.message = "unknown style '" + req.style + "'";
            return ack;
        }
        for (const auto & m : req.messages) {
            if (m.role != "user" && m.role != "assistant") {
                ack.ok = false;
                ack.error = "bad_field";
                ack.message = "message role must be 'user' or 'assistant'";
                return ack;
            }
        }
        refresh_snapshot();
        auto & s = sessions_[req.session];
        s.id = req.session;
        s.style = req.style;

        std::size_t first = 0;
        auto tokens = format_context(req.style, req.messages, first);
        while (tokens.size() > cfg_.max_context_tokens && first < req.messages.size()) {
            ++first;
            tokens = format_context(req.style, req.messages, first);
        }
        if (tokens.size() > cfg_.max_context_tokens) {
            ack.ok = false;
            ack.error = "capacity";
            ack.message = "style header alone exceeds the context budget";
            return ack;
        }
        ack.truncated_messages = first;
        s.history.assign(req.messages.begin() + static_cast<std::ptrdiff_t>(first), req.messages.end());
        for (std::size_t i = 0; i < req.messages.size(); ++i) {
            const auto id = trace_id_for(s.id, "msg", i, req.messages[i].role + ": " + req.messages[i].text);
            if (s.seen_traces.insert(id).second) s.traces.push_back({id, req.messages[i].text, s.style});
        }

        s.context = tokens;
        s.composing.clear();
        s.last_candidates.clear();
        const auto before = kv_.stats().tokens_computed;
        try {
            const auto r = resume(s, tokens);
            ack.matched_tokens = r.matched;
            ack.style_blob_injected = r.blob;
        } catch (const Error & e) {
            ack.ok = false;
            ack.error = std::string(to_string(e.code()));
            ack.message = e.what();
            return ack;
        }
        ack.computed_tokens = kv_.stats().tokens_computed - before;
        counters_.prefill_tokens += ack.computed_tokens;
        ack.context_tokens = tokens.size();
        active_ = s.id;
        ++counters_.syncs;
        ack.latency_ms = ms_since(t0);
        return ack;
    }

    CandidateSet generate_candidates(const std::string & session_id, std::string_view typed, int K = 0) {
        const auto t0 = clock::now();
        const auto stats0 = kv_.stats();
        if (K <= 0) K = cfg_.K;
        auto & s = ensure_session(session_id);
        activate(s);
        CandidateSet out;

        if (typed.size() > s.composing.size() && typed.starts_with(s.composing)) {
            counters_.typed_chars += utf8_length(typed.substr(s.composing.size()));
        } else if (!typed.starts_with(s.composing)) {
            counters_.typed_chars += utf8_length(typed);
        }
        s.composing = std::string(typed);

        const auto & tok = model_->tokenizer();
        const TokenSequence S = tok.encode(composing_line(typed));
        TokenSequence full = s.context;
        full.insert(full.end(), S.begin(), S.end());
        radix_.ensure_free_cells(kv_, full.size() + 2 * static_cast<std::size_t>(cfg_.probe_budget + 64));
        const auto r = resume(s, full);
        out.reused_tokens = r.matched;
        out.prefill_tokens = kv_.stats().tokens_computed - stats0.tokens_computed;
        counters_.prefill_tokens += out.prefill_tokens;

        SamplingConfig sc = cfg_.sampling;
        sc.banned_first = banned_first_;
        const auto probe = probe_retrieval(s);
        std::vector<Candidate> cands;
        std::optional<std::uint64_t> grounded;
        if (probe) {
            out.retrieval_triggered = true;
            out.query = *probe;
            ++counters_.retrieval_triggers;
            const auto hits = snapshot_->search(*probe, cfg_.retrieval_k);
            if (!hits.empty()) {
                const auto & top = hits.front().record;
                const TokenSequence M = tok.encode(memory_line_for(top));
                SpliceOptions opt;
                opt.K = K;
                opt.sampling = sc;
                const L1Blob * blob = nullptr;
                if (cfg_.use_l1_blobs && blobs_) {
                    if (auto it = blobs_->find(top.id); it != blobs_->end() && it->second.tokens == M) blob = &it->second;
                }
                const bool use_blob = blob != nullptr;
                if (use_blob) {
                    opt.inject_memory = [blob](KvStore & kv, SeqId st, Pos at) { inject_l1_blob(*blob, kv, st, at); };
                }
                radix_.ensure_free_cells(kv_, 2 * (full.size() + M.size()) + static_cast<std::size_t>(K * sc.max_tokens) + 8);
                auto res = kv_splice(*model_, kv_, s.seq0, s.context, M, S, opt);
                ++counters_.splices;
                if (res.trace.fallback) ++counters_.splice_fallbacks;
                if (use_blob) ++counters_.l1_injections;
                out.path = res.trace.fallback ? "fallback" : (use_blob ? "l1_blob" : "splice");
                cands = std::move(res.candidates);
                grounded = top.id;
                worker_.record_hit(top.id);
            } else {
                out.retrieval_miss = true;
                ++counters_.retrieval_misses;
            }
        }
        if (!grounded) cands = sample_candidates(*model_, kv_, s.seq0, s.logits, K, scratch_seq(), sc);

        for (auto & c : cands) out.candidates.push_back({std::move(c.text), std::move(c.tokens), grounded});
        s.last_candidates = out.candidates;
        ++s.events;
        ++counters_.candidate_events;
        const auto & st = kv_.stats();
        out.forward_calls = st.forward_calls - stats0.forward_calls;
        out.tokens_computed = st.tokens_computed - stats0.tokens_computed;
        counters_.decode_tokens += out.tokens_computed - out.prefill_tokens;
        out.ttfc_ms = ms_since(t0);
        return out;
    }

    /// Appends candidate `index` to the composing line and advances seq0 by
    /// decoding only the accepted tokens.
    void accept_candidate(const std::string & session_id, std::size_t index) {
        auto it = sessions_.find(session_id);
        if (it == sessions_.end()) throw Error(ErrorCode::not_found, "no such session '" + session_id + "'");
        auto & s = it->second;
        if (index >= s.last_candidates.size()) throw Error(ErrorCode::validation, "candidate index out of range");
        activate(s);
        const auto cand = s.last_candidates[index];
        const auto before = kv_.stats().tokens_computed;
        radix_.ensure_free_cells(kv_, cand.tokens.size() + 1);
        auto pos = static_cast<Pos>(s.seq0_tokens.size());
        for (std::size_t i = 0; i < cand.tokens.size(); ++i) {
            const bool last = i + 1 == cand.tokens.size();
            auto lg = model_->decode_one(kv_, cand.tokens[i], pos++, s.seq0, last);
            if (lg) s.logits = std::move(*lg);
            s.seq0_tokens.push_back(cand.tokens[i]);
        }
        counters_.decode_tokens += kv_.stats().tokens_computed - before;
        s.composing += cand.text;
        bind_seq0(s);
        ++counters_.accepts;
        counters_.accepted_chars += utf8_length(cand.text);
        const auto id = trace_id_for(s.id, "accept", s.events, s.composing);
        if (s.seen_traces.insert(id).second) s.traces.push_back({id, s.composing, s.style});
        s.last_candidates.clear();
    }

    /// Hands buffered traces to the background worker. The future resolves when
    /// the run finishes or is preempted.
    std::future<CurationReport> schedule_curation() {
        std::vector<Trace> batch;
        for (auto & [id, s] : sessions_) {
            for (auto & t : s.traces) batch.push_back(std::move(t));
            s.traces.clear();
        }
        return worker_.curate(std::move(batch));
    }

    CurationReport run_curation() {
        auto rep = schedule_curation().get();
        refresh_snapshot();
        return rep;
    }

    void preempt() { worker_.cancel(); }

    /// Picks up the latest facts and blobs published by the worker.
    void refresh_snapshot() {
        auto pub = worker_.published();
        snapshot_ = pub.facts;
        blobs_ = pub.blobs;
        snapshot_version_ = pub.version;
    }

    std::vector<MemoryRecord> memory_list() {
        preempt();
        return worker_.list().get();
    }

    void memory_delete(std::uint64_t id) {
        preempt();
        worker_.delete_fact(id).get();
        refresh_snapshot();
    }

    MemoryRecord insert_fact(std::string text, std::map<std::string, std::string> fields, std::string trace = {}) {
        auto r = worker_.insert_fact(std::move(text), std::move(fields), std::move(trace)).get();
        refresh_snapshot();
        return r;
    }

    double ksr() const {
        const auto total = counters_.accepted_chars + counters_.typed_chars;
        return total == 0 ? 0.0 : static_cast<double>(counters_.accepted_chars) / static_cast<double>(total);
    }

    nlohmann::json metrics() const {
        const auto rm = radix_.metrics(kv_);
        const auto & st = kv_.stats();
        return {{"prefill_tokens", counters_.prefill_tokens},
                {"decode_tokens", counters_.decode_tokens},
                {"tokens_computed", st.tokens_computed},
                {"forward_calls", st.forward_calls},
                {"cache_hits", rm.hits},
                {"cache_misses", rm.misses},
                {"radix_nodes", rm.nodes},
                {"bound_sequences", rm.bound_sequences},
                {"kv_bytes", rm.estimated_bytes},
                {"live_cells", kv_.live_cells()},
                {"syncs", counters_.syncs},
                {"candidate_events", counters_.candidate_events},
                {"retrieval_triggers", counters_.retrieval_triggers},
                {"retrieval_misses", counters_.retrieval_misses},
                {"splices", counters_.splices},
                {"splice_fallbacks", counters_.splice_fallbacks},
                {"l1_injections", counters_.l1_injections},
                {"style_blob_injections", counters_.style_blob_injections},
                {"accepts", counters_.accepts},
                {"ksr", ksr()},
                {"facts", snapshot_->size()},
                {"snapshot_version", snapshot_version_}};
    }

    nlohmann::json curation_status() const { return worker_.status(); }

private:
    using clock = std::chrono::steady_clock;

    struct ResumeResult {
        std::size_t matched = 0;
        bool blob = false;
    };

    static double ms_since(clock::time_point t0) {
        return std::chrono::duration<double, std::milli>(clock::now() - t0).count();
    }

    static std::vector<SeqId> make_pool() {
        std::vector<SeqId> pool;
        for (SeqId s = seq0 + 1; s < KvStore::max_sequences - 2; ++s) pool.push_back(s);
        return pool;
    }

    SeqId scratch_seq() const { return kv_.n_seq_max() - 1; }

    bool is_style(const std::string & s) const {
        return std::find(cfg_.styles.begin(), cfg_.styles.end(), s) != cfg_.styles.end();
    }

    TokenSequence format_context(const std::string & style, const std::vector<ChatMessage> & msgs, std::size_t first) const {
        std::string text = style_header(style);
        for (std::size_t i = first; i < msgs.size(); ++i) text += format_turn(msgs[i]);
        return model_->tokenizer().encode(text);
    }

    SessionState & ensure_session(const std::string & id) {
        auto it = sessions_.find(id);
        if (it != sessions_.end()) return it->second;
        // Input-only session: no SYNC seen, empty history, default style.
        auto & s = sessions_[id];
        s.id = id;
        s.style = cfg_.default_style;
        s.context = format_context(s.style, {}, 0);
        resume(s, s.context);
        active_ = id;
        return s;
    }

    void activate(SessionState & s) {
        if (active_ == s.id) return;
        resume(s, s.seq0_tokens);
        active_ = s.id;
    }

    /// Brings seq0 to `tokens`, reusing cached prefixes; a cold context that
    /// starts with the style header gets the precompiled header blob.
    ResumeResult resume(SessionState & s, const TokenSequence & tokens) {
        ResumeResult r;
        const auto m = radix_.match_longest_prefix(tokens);
        const auto & blob = style_blobs_.at(s.style);
        const auto hl = blob.tokens.size();
        if (cfg_.use_style_blobs && m.matched_len < hl && tokens.size() > hl &&
            std::equal(blob.tokens.begin(), blob.tokens.end(), tokens.begin())) {
            radix_.ensure_free_cells(kv_, 2 * tokens.size());
            kv_.seq_clear(s.seq0);
            inject_l1_blob(blob, kv_, s.seq0, 0);
            s.logits = model_->prefill(kv_, std::span(tokens).subspan(hl), s.seq0, static_cast<Pos>(hl));
            s.seq0_tokens = tokens;
            bind_seq0(s);
            ++counters_.style_blob_injections;
            r.matched = hl;
            r.blob = true;
            return r;
        }
        RadixCache::ResumeInfo info;
        s.logits = radix_.resume_prefill(*model_, kv_, tokens, s.seq0, &info);
        s.seq0_tokens = tokens;
        r.matched = info.matched_len;
        return r;
    }

    void bind_seq0(SessionState & s) {
        if (auto exact = radix_.find_exact(s.seq0_tokens); exact && radix_.node(*exact).seq) return;
        const SeqId c = radix_.acquire_seq(kv_);
        kv_.seq_cp(s.seq0, c, 0, KvStore::to_end);
        radix_.insert(kv_, s.seq0_tokens, c);
    }

    /// Greedy probe for "<MEM_RETRIEVAL>query</MEM_RETRIEVAL>" after seq0.
    /// Stops at the first byte that cannot continue the marker.
    std::optional<std::string> probe_retrieval(SessionState & s) {
        const auto & tok = model_->tokenizer();
        const SeqId st = scratch_seq();
        kv_.seq_clear(st);
        kv_.seq_cp(s.seq0, st, 0, KvStore::to_end);
        Logits lg = s.logits;
        auto pos = static_cast<Pos>(s.seq0_tokens.size());
        std::string text;
        bool closed = false;
        StreamRng unused(0);
        for (int i = 0; i < cfg_.probe_budget && pos < model_->config().max_positions; ++i) {
            const Token t = sample_token(lg.values, 0.0f, unused);
            if (t == '\n') break;
            tok.append(text, t);
            const std::string_view open = control::mem_open_text;
            if (text.size() <= open.size() ? !open.starts_with(text) : !text.starts_with(open)) break;
            if (text.ends_with(control::mem_close_text)) {
                closed = true;
                break;
            }
            lg = *model_->decode_one(kv_, t, pos++, st, true);
        }
        kv_.seq_clear(st);
        if (!closed) return std::nullopt;
        const auto body = std::string_view(text).substr(control::mem_open_text.size());
        auto q = trim(body.substr(0, body.size() - control::mem_close_text.size()));
        if (q.empty()) return std::nullopt;
        return std::string(q);
    }

    ModelHandle model_;
    EngineConfig cfg_;
    KvStore kv_;
    RadixCache radix_;
    MemoryWorker worker_;
    std::map<std::string, L1Blob> style_blobs_;
    std::vector<Token> banned_first_;
    std::shared_ptr<const FactSnapshot> snapshot_;
    std::shared_ptr<const std::map<std::uint64_t, L1Blob>> blobs_;
    std::uint64_t snapshot_version_ = 0;
    std::map<std::string, SessionState> sessions_;
    std::string active_;
    EngineCounters counters_;
};

} // namespace imekit
