#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdlib>
#include <deque>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "imekit/orchestrator.hpp"

namespace imekit {

inline constexpr int protocol_version = 1;

namespace wire {
inline constexpr const char * malformed = "E_MALFORMED";
inline constexpr const char * unknown_kind = "E_UNKNOWN_KIND";
inline constexpr const char * bad_field = "E_BAD_FIELD";
inline constexpr const char * unknown_style = "E_UNKNOWN_STYLE";
inline constexpr const char * bad_seq = "E_SEQ";
inline constexpr const char * no_session = "E_NO_SESSION";
inline constexpr const char * capacity = "E_CAPACITY";
inline constexpr const char * not_found = "E_NOT_FOUND";
inline constexpr const char * internal = "E_INTERNAL";

inline const std::map<std::string, std::string> & response_kinds() {
    static const std::map<std::string, std::string> m = {
        {"sync", "sync_ack"},
        {"keystroke", "candidates"},
        {"candidate_event", "candidate_event_ack"},
        {"accept", "accept_ack"},
        {"memory_list", "memory_list_result"},
        {"memory_delete", "memory_delete_ack"},
        {"metrics", "metrics_result"},
        {"curation_status", "curation_status_result"},
    };
    return m;
}
} // namespace wire

/// Maps protocol messages onto engine calls. Not thread-safe: callers
/// serialize through the foreground executor.
class ProtocolHandler {
public:
    explicit ProtocolHandler(Engine & engine) : engine_(engine) {}

    std::string handle_text(std::string_view text) {
        auto j = nlohmann::json::parse(text, nullptr, false);
        if (j.is_discarded() || !j.is_object()) return error({}, wire::malformed, "body is not a JSON object").dump();
        return handle(j).dump();
    }

    nlohmann::json handle(const nlohmann::json & req) {
        if (!req.is_object() || !req.contains("kind") || !req["kind"].is_string()) {
            return error(req, wire::malformed, "missing string field 'kind'");
        }
        if (req.contains("v") && req["v"] != protocol_version) return error(req, wire::malformed, "unsupported protocol version");
        const auto kind = req["kind"].get<std::string>();
        const auto rk = wire::response_kinds().find(kind);
        if (rk == wire::response_kinds().end()) return error(req, wire::unknown_kind, "unknown kind '" + kind + "'");
        if (!req.contains("seq") || !req["seq"].is_number_integer()) return error(req, wire::bad_field, "missing integer 'seq'");
        if (req.contains("session") && !req["session"].is_string()) return error(req, wire::bad_field, "'session' must be a string");
        const auto session = req.value("session", std::string{});
        const auto seq = req["seq"].get<std::int64_t>();
        auto & last = last_seq_[session];
        if (last && seq <= *last) {
            return error(req, wire::bad_seq, "sequence number " + std::to_string(seq) + " is not above " + std::to_string(*last));
        }
        last = seq;
        const auto payload = req.value("payload", nlohmann::json::object());
        if (!payload.is_object()) return error(req, wire::bad_field, "'payload' must be an object");

        try {
            return ok(req, rk->second, dispatch(kind, session, payload));
        } catch (const FieldError & e) {
            return error(req, e.code, e.what());
        } catch (const Error & e) {
            switch (e.code()) {
                case ErrorCode::capacity: return error(req, wire::capacity, e.what());
                case ErrorCode::not_found: return error(req, wire::not_found, e.what());
                case ErrorCode::validation: return error(req, wire::bad_field, e.what());
                default: return error(req, wire::internal, e.what());
            }
        } catch (const nlohmann::json::exception & e) {
            return error(req, wire::bad_field, e.what());
        }
    }

private:
    struct FieldError : std::runtime_error {
        FieldError(const char * c, const std::string & m) : std::runtime_error(m), code(c) {}
        const char * code;
    };

    static nlohmann::json envelope(const nlohmann::json & req, const std::string & kind) {
        nlohmann::json r = {{"v", protocol_version}, {"kind", kind}};
        if (req.is_object()) {
            if (req.contains("session")) r["session"] = req["session"];
            if (req.contains("seq")) r["seq"] = req["seq"];
        }
        return r;
    }

    static nlohmann::json ok(const nlohmann::json & req, const std::string & kind, nlohmann::json payload) {
        auto r = envelope(req, kind);
        r["ok"] = true;
        r["payload"] = std::move(payload);
        return r;
    }

    static nlohmann::json error(const nlohmann::json & req, const std::string & code, const std::string & msg) {
        auto r = envelope(req, "error");
        r["ok"] = false;
        r["error"] = {{"code", code}, {"message", msg}};
        return r;
    }

    static bool is_index(const nlohmann::json & v) { return v.is_number_integer() && v.get<std::int64_t>() >= 0; }

    static std::string need_string(const nlohmann::json & p, const char * key) {
        if (!p.contains(key) || !p[key].is_string()) throw FieldError(wire::bad_field, std::string("missing string field '") + key + "'");
        return p[key].get<std::string>();
    }

    void need_session(const std::string & session) const {
        if (session.empty()) throw FieldError(wire::bad_field, "missing 'session'");
        if (!engine_.session(session)) throw FieldError(wire::no_session, "no such session '" + session + "'");
    }

    nlohmann::json dispatch(const std::string & kind, const std::string & session, const nlohmann::json & p) {
        if (kind == "sync") {
            if (session.empty()) throw FieldError(wire::bad_field, "missing 'session'");
            SyncRequest req;
            req.session = session;
            req.style = need_string(p, "style");
            if (!p.contains("messages") || !p["messages"].is_array()) throw FieldError(wire::bad_field, "missing array 'messages'");
            for (const auto & m : p["messages"]) {
                if (!m.is_object()) throw FieldError(wire::bad_field, "messages must be objects");
                req.messages.push_back({need_string(m, "role"), need_string(m, "text")});
            }
            const auto ack = engine_.handle_sync(req);
            if (!ack.ok) {
                if (ack.error == "unknown_style") throw FieldError(wire::unknown_style, ack.message);
                if (ack.error == "capacity") throw FieldError(wire::capacity, ack.message);
                throw FieldError(wire::bad_field, ack.message);
            }
            return ack.to_json();
        }
        if (kind == "keystroke") {
            if (session.empty()) throw FieldError(wire::bad_field, "missing 'session'");
            const auto text = need_string(p, "text");
            int k = engine_.config().K;
            if (p.contains("k")) {
                if (!p["k"].is_number_integer() || p["k"].get<int>() < 1 || p["k"].get<int>() > 16) {
                    throw FieldError(wire::bad_field, "'k' must be an integer in [1, 16]");
                }
                k = p["k"].get<int>();
            }
            return engine_.generate_candidates(session, text, k).to_json();
        }
        if (kind == "accept") {
            need_session(session);
            if (!p.contains("index") || !is_index(p["index"])) throw FieldError(wire::bad_field, "missing non-negative 'index'");
            engine_.accept_candidate(session, p["index"].get<std::size_t>());
            return {{"composing", engine_.session(session)->composing}};
        }
        if (kind == "candidate_event") {
            need_session(session);
            const auto ev = need_string(p, "event");
            if (ev != "shown" && ev != "dismissed") throw FieldError(wire::bad_field, "'event' must be 'shown' or 'dismissed'");
            ++ui_events_[ev];
            return {{"event", ev}};
        }
        if (kind == "memory_list") {
            nlohmann::json rows = nlohmann::json::array();
            for (const auto & r : engine_.memory_list()) {
                rows.push_back({{"id", r.id}, {"text", r.text}, {"fields", r.fields}, {"source_trace", r.source_trace},
                                {"created_at", r.created_at}});
            }
            return {{"records", rows}};
        }
        if (kind == "memory_delete") {
            if (!p.contains("id") || !is_index(p["id"])) throw FieldError(wire::bad_field, "missing record 'id'");
            const auto id = p["id"].get<std::uint64_t>();
            engine_.memory_delete(id);
            return {{"id", id}, {"deleted", true}};
        }
        if (kind == "metrics") {
            auto m = engine_.metrics();
            m["ui_events"] = ui_events_;
            return m;
        }
        return engine_.curation_status();
    }

    Engine & engine_;
    std::map<std::string, std::optional<std::int64_t>> last_seq_;
    std::map<std::string, std::uint64_t> ui_events_;
};

/// Single thread that runs every engine call in submission order.
class ForegroundExecutor {
public:
    ForegroundExecutor() : thread_([this] { loop(); }) {}

    ~ForegroundExecutor() {
        {
            std::lock_guard lk(mu_);
            stop_ = true;
        }
        cv_.notify_all();
        thread_.join();
    }

    template <class F>
    auto submit(F f) -> std::future<decltype(f())> {
        auto task = std::make_shared<std::packaged_task<decltype(f())()>>(std::move(f));
        auto fut = task->get_future();
        {
            std::lock_guard lk(mu_);
            jobs_.emplace_back([task] { (*task)(); });
        }
        cv_.notify_all();
        return fut;
    }

private:
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

    std::mutex mu_;
    std::condition_variable cv_;
    std::deque<std::function<void()>> jobs_;
    bool stop_ = false;
    std::thread thread_;
};

/// Coalesces bursts: only the latest action per key fires, once the key has
/// been quiet for the window.
class Debouncer {
public:
    using clock = std::chrono::steady_clock;

    explicit Debouncer(std::chrono::milliseconds window) : window_(window), thread_([this] { loop(); }) {}

    ~Debouncer() {
        {
            std::lock_guard lk(mu_);
            stop_ = true;
        }
        cv_.notify_all();
        thread_.join();
    }

    void submit(const std::string & key, std::function<void()> action) {
        {
            std::lock_guard lk(mu_);
            pending_[key] = {clock::now() + window_, std::move(action)};
            ++submitted_;
        }
        cv_.notify_all();
    }

    std::uint64_t fired() const {
        std::lock_guard lk(mu_);
        return fired_;
    }

private:
    struct Pending {
        clock::time_point due;
        std::function<void()> action;
    };

    void loop() {
        std::unique_lock lk(mu_);
        while (!stop_) {
            if (pending_.empty()) {
                cv_.wait(lk);
                continue;
            }
            auto next = pending_.begin();
            for (auto it = pending_.begin(); it != pending_.end(); ++it) {
                if (it->second.due < next->second.due) next = it;
            }
            if (clock::now() < next->second.due) {
                cv_.wait_until(lk, next->second.due);
                continue;
            }
            auto action = std::move(next->second.action);
            pending_.erase(next);
            ++fired_;
            lk.unlock();
            action();
            lk.lock();
        }
    }

    std::chrono::milliseconds window_;
    mutable std::mutex mu_;
    std::condition_variable cv_;
    std::map<std::string, Pending> pending_;
    std::uint64_t submitted_ = 0;
    std::uint64_t fired_ = 0;
    bool stop_ = false;
    std::thread thread_;
};

struct ServiceConfig {
    std::string host = "127.0.0.1";
    int port = 8765;
    int debounce_ms = 50;
    int idle_curation_ms = 2000; // 0 disables idle-triggered curation

    /// Reads IMEKIT_BIND ("host:port") when set.
    void apply_env() {
        if (const char * b = std::getenv("IMEKIT_BIND")) {
            std::string s(b);
            const auto colon = s.rfind(':');
            if (colon == std::string::npos) throw Error(ErrorCode::configuration, "IMEKIT_BIND must be host:port");
            host = s.substr(0, colon);
            port = std::stoi(s.substr(colon + 1));
        }
    }

    void apply_json(const nlohmann::json & j) {
        host = j.value("host", host);
        port = j.value("port", port);
        debounce_ms = j.value("debounce_ms", debounce_ms);
        idle_curation_ms = j.value("idle_curation_ms", idle_curation_ms);
    }
};

/// Loopback HTTP server. Every request is funneled through one foreground
/// executor; keystrokes on the stream endpoint are debounced and their
/// candidate sets pushed as server-sent events.
class Service {
public:
    Service(Engine & engine, ServiceConfig cfg)
        : engine_(engine), cfg_(std::move(cfg)), handler_(engine_), debounce_(std::chrono::milliseconds(cfg_.debounce_ms)) {
        routes();
    }

    ~Service() { stop(); }

    /// Binds and serves on the calling thread until stop().
    bool listen() {
        if (cfg_.idle_curation_ms > 0) start_idle_timer();
        return server_.listen(cfg_.host, cfg_.port);
    }

    /// Binds to a free port and serves on a background thread; returns the port.
    int start_background() {
        const int port = cfg_.port == 0 ? server_.bind_to_any_port(cfg_.host) : (server_.bind_to_port(cfg_.host, cfg_.port) ? cfg_.port : -1);
        if (port < 0) throw Error(ErrorCode::io, "cannot bind " + cfg_.host + ":" + std::to_string(cfg_.port));
        if (cfg_.idle_curation_ms > 0) start_idle_timer();
        listener_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
        return port;
    }

    void stop() {
        {
            std::lock_guard lk(stream_mu_);
            stopping_ = true;
        }
        stream_cv_.notify_all();
        idle_cv_.notify_all();
        server_.stop();
        if (listener_.joinable()) listener_.join();
        if (idle_thread_.joinable()) idle_thread_.join();
    }

    /// Runs one protocol message through the foreground executor.
    nlohmann::json call(const nlohmann::json & msg) {
        touch();
        return fg_.submit([this, msg] { return handler_.handle(msg); }).get();
    }

private:
    void routes() {
        server_.Post("/v1/message", [this](const httplib::Request & req, httplib::Response & res) {
            touch();
            auto out = fg_.submit([this, body = req.body] { return handler_.handle_text(body); }).get();
            res.set_content(out, "application/json");
        });
        server_.Get("/v1/metrics", [this](const httplib::Request &, httplib::Response & res) {
            res.set_content(fg_.submit([this] { return engine_.metrics().dump(); }).get(), "application/json");
        });
        server_.Get("/v1/memory", [this](const httplib::Request &, httplib::Response & res) {
            auto body = fg_.submit([this] {
                nlohmann::json rows = nlohmann::json::array();
                for (const auto & r : engine_.memory_list()) rows.push_back({{"id", r.id}, {"text", r.text}, {"fields", r.fields}});
                return nlohmann::json{{"records", rows}}.dump();
            }).get();
            res.set_content(body, "application/json");
        });
        server_.Get("/v1/curation", [this](const httplib::Request &, httplib::Response & res) {
            res.set_content(fg_.submit([this] { return engine_.curation_status().dump(); }).get(), "application/json");
        });

        // Streaming channel: keystrokes in via POST, candidate events out via SSE.
        server_.Post("/v1/stream/keystroke", [this](const httplib::Request & req, httplib::Response & res) {
            touch();
            auto j = nlohmann::json::parse(req.body, nullptr, false);
            if (j.is_discarded() || !j.is_object() || !j.contains("session") || !j["session"].is_string() ||
                !j.contains("text") || !j["text"].is_string() || !j.contains("seq") || !j["seq"].is_number_integer()) {
                res.status = 400;
                res.set_content(nlohmann::json{{"ok", false}, {"error", {{"code", wire::malformed}}}}.dump(), "application/json");
                return;
            }
            const auto session = j["session"].get<std::string>();
            {
                std::lock_guard lk(stream_mu_);
                if (!stream_session_.empty() && stream_session_ != session) {
                    res.status = 409;
                    res.set_content(nlohmann::json{{"ok", false}, {"error", {{"code", wire::no_session}}}}.dump(), "application/json");
                    return;
                }
            }
            debounce_.submit(session, [this, j] {
                nlohmann::json msg = {{"v", protocol_version}, {"kind", "keystroke"}, {"session", j["session"]},
                                      {"seq", j["seq"]}, {"payload", {{"text", j["text"]}}}};
                auto out = fg_.submit([this, msg] { return handler_.handle(msg); }).get();
                push_event(out);
            });
            res.set_content(nlohmann::json{{"ok", true}, {"queued", true}}.dump(), "application/json");
        });
        server_.Get("/v1/stream", [this](const httplib::Request & req, httplib::Response & res) {
            const auto session = req.get_param_value("session");
            {
                std::lock_guard lk(stream_mu_);
                if (!stream_session_.empty() && stream_session_ != session) {
                    res.status = 409;
                    return;
                }
                stream_session_ = session;
                outbox_.clear();
            }
            res.set_chunked_content_provider("text/event-stream", [this](std::size_t, httplib::DataSink & sink) {
                std::unique_lock lk(stream_mu_);
                stream_cv_.wait_for(lk, std::chrono::milliseconds(500), [&] { return stopping_ || !outbox_.empty(); });
                if (stopping_) return false;
                while (!outbox_.empty()) {
                    const auto line = "data: " + outbox_.front() + "\n\n";
                    outbox_.pop_front();
                    if (!sink.write(line.data(), line.size())) return false;
                }
                if (outbox_.empty()) {
                    const std::string ping = ": keepalive\n\n";
                    if (!sink.write(ping.data(), ping.size())) return false;
                }
                return true;
            }, [this](bool) {
                std::lock_guard lk(stream_mu_);
                stream_session_.clear();
            });
        });
    }

    void push_event(const nlohmann::json & event) {
        {
            std::lock_guard lk(stream_mu_);
            outbox_.push_back(event.dump());
        }
        stream_cv_.notify_all();
    }

    void touch() {
        std::lock_guard lk(idle_mu_);
        last_activity_ = std::chrono::steady_clock::now();
        curated_since_activity_ = false;
    }

    void start_idle_timer() {
        idle_thread_ = std::thread([this] {
            std::unique_lock lk(idle_mu_);
            for (;;) {
                idle_cv_.wait_for(lk, std::chrono::milliseconds(cfg_.idle_curation_ms / 4 + 1));
                {
                    std::lock_guard slk(stream_mu_);
                    if (stopping_) return;
                }
                const auto idle = std::chrono::steady_clock::now() - last_activity_;
                if (!curated_since_activity_ && idle >= std::chrono::milliseconds(cfg_.idle_curation_ms)) {
                    curated_since_activity_ = true;
                    lk.unlock();
                    fg_.submit([this] { engine_.schedule_curation(); });
                    lk.lock();
                }
            }
        });
    }

    Engine & engine_;
    ServiceConfig cfg_;
    ProtocolHandler handler_;
    ForegroundExecutor fg_;
    Debouncer debounce_;
    httplib::Server server_;
    std::thread listener_;

    std::mutex stream_mu_;
    std::condition_variable stream_cv_;
    std::deque<std::string> outbox_;
    std::string stream_session_;
    bool stopping_ = false;

    std::mutex idle_mu_;
    std::condition_variable idle_cv_;
    std::chrono::steady_clock::time_point last_activity_ = std::chrono::steady_clock::now();
    bool curated_since_activity_ = false;
    std::thread idle_thread_;
};

} // namespace imekit
